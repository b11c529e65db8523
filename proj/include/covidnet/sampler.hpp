#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "covidnet/data.hpp"
#include "covidnet/random.hpp"

namespace covidnet {

/// Endless stream of class-balanced batches. Each batch holds batch/3 items
/// of every class plus one extra for batch%3 classes, chosen by rotation so
/// the short class changes from batch to batch. Each class draws from its
/// own queue, reshuffled whenever it runs dry, so small classes repeat
/// within an epoch.
class RebalancedSampler {
 public:
  /// Throws SamplerError naming an empty class or when batch_size < 3.
  RebalancedSampler(std::span<const ClassLabel> labels, std::size_t batch_size,
                    std::uint64_t seed);

  /// Indices into the label list given at construction.
  std::vector<std::size_t> next_batch();

  std::size_t batch_size() const { return batch_size_; }
  std::size_t batches_emitted() const { return emitted_; }

 private:
  std::size_t draw(std::size_t cls);

  std::size_t batch_size_;
  Rng rng_;
  std::array<std::vector<std::size_t>, kNumClasses> pools_;
  std::array<std::size_t, kNumClasses> cursor_{};
  std::size_t emitted_ = 0;
};

}  // namespace covidnet
