#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "covidnet/errors.hpp"

namespace covidnet {

enum class DType : std::uint8_t { kFloat32 = 0, kFloat64 = 1 };

template <typename T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>,
                "tensors hold float or double");
  return std::is_same_v<T, float> ? DType::kFloat32 : DType::kFloat64;
}

/// Rank-4 NHWC shape.
struct Shape {
  std::size_t n = 0;
  std::size_t h = 0;
  std::size_t w = 0;
  std::size_t c = 0;

  constexpr std::size_t size() const { return n * h * w * c; }
  constexpr std::size_t spatial() const { return h * w; }
  /// Elements of a single batch item.
  constexpr std::size_t item_size() const { return h * w * c; }

  friend constexpr bool operator==(const Shape&, const Shape&) = default;

  std::string to_string() const;
};

/// Dense row-major N,H,W,C array.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;
  explicit BasicTensor(Shape shape, T fill = T(0))
      : shape_(shape), data_(shape.size(), fill) {}
  BasicTensor(Shape shape, std::vector<T> values)
      : shape_(shape), data_(std::move(values)) {
    if (data_.size() != shape_.size()) {
      throw ShapeError("data", "length " + std::to_string(data_.size()) +
                                   " does not match " + shape_.to_string());
    }
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t size() const noexcept { return data_.size(); }
  static constexpr DType dtype() { return dtype_of<T>(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  std::vector<T>& values() noexcept { return data_; }
  const std::vector<T>& values() const noexcept { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  std::size_t index(std::size_t n, std::size_t h, std::size_t w,
                    std::size_t c) const {
    return ((n * shape_.h + h) * shape_.w + w) * shape_.c + c;
  }
  T& at(std::size_t n, std::size_t h, std::size_t w, std::size_t c) {
    return data_[index(n, h, w, c)];
  }
  const T& at(std::size_t n, std::size_t h, std::size_t w,
              std::size_t c) const {
    return data_[index(n, h, w, c)];
  }

  /// Elements of batch item `n`.
  std::span<T> item(std::size_t n) {
    return std::span<T>(data_).subspan(n * shape_.item_size(),
                                       shape_.item_size());
  }
  std::span<const T> item(std::size_t n) const {
    return std::span<const T>(data_).subspan(n * shape_.item_size(),
                                             shape_.item_size());
  }

  template <typename U>
  BasicTensor<U> cast() const {
    return BasicTensor<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
  }

  /// Same data viewed under another shape with equal element count.
  BasicTensor reshaped(Shape shape) const {
    return BasicTensor(shape, data_);
  }

  bool all_finite() const;

  friend bool operator==(const BasicTensor&, const BasicTensor&) = default;

 private:
  Shape shape_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

/// Trainable or state parameter of arbitrary rank (conv kernels are rank 4,
/// dense matrices rank 2, biases and norm vectors rank 1).
template <typename T>
struct Param {
  std::vector<std::uint32_t> dims;
  std::vector<T> values;

  std::size_t size() const noexcept { return values.size(); }

  friend bool operator==(const Param&, const Param&) = default;
};

}  // namespace covidnet
