#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "covidnet/image.hpp"

namespace covidnet {

/// Half-open pixel box [top, bottom) x [left, right).
struct BoundingBox {
  std::size_t top = 0;
  std::size_t left = 0;
  std::size_t bottom = 0;
  std::size_t right = 0;

  std::size_t height() const { return bottom - top; }
  std::size_t width() const { return right - left; }
  bool empty() const { return bottom <= top || right <= left; }
  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

struct BodyMaskResult {
  Image image;
  /// 1 inside the body region, row-major, same size as the image.
  std::vector<std::uint8_t> body;
  BoundingBox bbox;
  /// Nothing exceeded the threshold; the image is returned unchanged.
  bool empty_foreground = false;
};

inline constexpr float kBodyMaskThreshold = 0.15f;

/// Thresholds (strictly above `threshold`), keeps the largest 8-connected
/// component, fills its holes and zeroes everything outside it.
BodyMaskResult body_region_mask(const Image& image,
                                float threshold = kBodyMaskThreshold);

/// Labels 8-connected components of `mask` and returns the largest one
/// (ties go to the component met first in row-major order).
std::vector<std::uint8_t> largest_component(const std::vector<std::uint8_t>& mask,
                                            std::size_t height, std::size_t width);

/// Sets every pixel not 4-connected to the border through non-mask pixels.
std::vector<std::uint8_t> fill_holes(const std::vector<std::uint8_t>& mask,
                                     std::size_t height, std::size_t width);

BoundingBox mask_bounding_box(const std::vector<std::uint8_t>& mask,
                              std::size_t height, std::size_t width);

}  // namespace covidnet
