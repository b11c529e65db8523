#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "covidnet/network.hpp"

namespace covidnet {

struct CheckpointTensor {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::variant<std::vector<float>, std::vector<double>> values;

  DType dtype() const {
    return values.index() == 0 ? DType::kFloat32 : DType::kFloat64;
  }
  std::size_t size() const;

  friend bool operator==(const CheckpointTensor&,
                         const CheckpointTensor&) = default;
};

/// Weight snapshot. Training metadata travels as reserved "__meta__:*"
/// tensors so the on-disk layout stays the plain tensor list.
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  std::uint32_t version = kVersion;
  std::vector<CheckpointTensor> tensors;
  std::uint64_t step = 0;
  std::optional<double> val_accuracy;

  const CheckpointTensor* find(std::string_view name) const;

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

/// Little-endian: "CNCT", u32 version, u32 count, then per tensor
/// u16 name length, name, u8 dtype (0 f32, 1 f64), u8 rank, u32 dims, values.
std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);

/// Throws FormatError on bad magic, unsupported version or truncation.
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

/// Writes atomically (temp file + rename). Throws IoError.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

template <typename T>
Checkpoint to_checkpoint(const Weights<T>& weights, std::uint64_t step = 0,
                         std::optional<double> val_accuracy = std::nullopt);

/// Binds a checkpoint to a graph. Tensors the graph does not know raise
/// CompatibilityError listing their names; a graph node without weights
/// raises CompatibilityError naming the node. Values are converted to T.
template <typename T>
Weights<T> weights_from_checkpoint(const ArchitectureGraph& graph,
                                   const Checkpoint& ckpt);

}  // namespace covidnet
