#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "covidnet/data.hpp"
#include "covidnet/graph.hpp"
#include "covidnet/image.hpp"
#include "covidnet/network.hpp"

namespace covidnet {

using ClassScores = std::array<double, kNumClasses>;

/// Anything that maps grayscale images to class probabilities.
class Classifier {
 public:
  virtual ~Classifier() = default;

  virtual std::vector<ClassScores> predict(std::span<const Image> images) const = 0;

  /// (height, width) the model expects; empty when any size is accepted.
  virtual std::optional<std::pair<std::size_t, std::size_t>> input_size() const {
    return std::nullopt;
  }

  ClassScores predict_one(const Image& image) const;
};

/// Stacks images into (N, H, W, channels), replicating gray into every
/// channel. All images must share one size.
Tensor images_to_tensor(std::span<const Image> images, std::size_t channels);

/// Inference-mode forward pass of a graph. Images of another size are
/// resized to the graph input.
class GraphClassifier : public Classifier {
 public:
  GraphClassifier(const ArchitectureGraph& graph, Weights<float> weights,
                  std::size_t max_batch = 16);

  std::vector<ClassScores> predict(std::span<const Image> images) const override;
  std::optional<std::pair<std::size_t, std::size_t>> input_size() const override;

  const Weights<float>& weights() const { return weights_; }

 private:
  const ArchitectureGraph& graph_;
  Weights<float> weights_;
  std::size_t max_batch_;
};

}  // namespace covidnet
