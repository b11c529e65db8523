#include "covidnet/sampler.hpp"

#include "covidnet/errors.hpp"

namespace covidnet {

RebalancedSampler::RebalancedSampler(std::span<const ClassLabel> labels,
                                     std::size_t batch_size, std::uint64_t seed)
    : batch_size_(batch_size), rng_(derive_seed(seed, 0x5A17)) {
  if (batch_size < kNumClasses) {
    throw SamplerError("batch size " + std::to_string(batch_size) +
                       " is smaller than the number of classes");
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    pools_[static_cast<std::size_t>(labels[i])].push_back(i);
  }
  for (ClassLabel c : kAllClasses) {
    auto& pool = pools_[static_cast<std::size_t>(c)];
    if (pool.empty()) {
      throw SamplerError("class '" + std::string(class_key(c)) +
                         "' has no training records");
    }
    rng_.shuffle(pool);
  }
}

std::size_t RebalancedSampler::draw(std::size_t cls) {
  auto& pool = pools_[cls];
  if (cursor_[cls] == pool.size()) {
    rng_.shuffle(pool);
    cursor_[cls] = 0;
  }
  return pool[cursor_[cls]++];
}

std::vector<std::size_t> RebalancedSampler::next_batch() {
  const std::size_t base = batch_size_ / kNumClasses;
  const std::size_t extra = batch_size_ % kNumClasses;
  std::vector<std::size_t> batch;
  batch.reserve(batch_size_);
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    // Classes emitted_, emitted_+1, ... (mod 3) receive the extra items.
    const std::size_t offset = (c + kNumClasses - emitted_ % kNumClasses) % kNumClasses;
    const std::size_t count = base + (offset < extra ? 1 : 0);
    for (std::size_t k = 0; k < count; ++k) batch.push_back(draw(c));
  }
  rng_.shuffle(batch);
  ++emitted_;
  return batch;
}

}  // namespace covidnet
