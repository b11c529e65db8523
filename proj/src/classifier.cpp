#include "covidnet/classifier.hpp"

#include <algorithm>

#include "covidnet/errors.hpp"

namespace covidnet {

ClassScores Classifier::predict_one(const Image& image) const {
  const auto out = predict(std::span<const Image>(&image, 1));
  if (out.size() != 1) throw InternalError("classifier returned a wrong batch size");
  return out.front();
}

Tensor images_to_tensor(std::span<const Image> images, std::size_t channels) {
  if (images.empty()) throw ShapeError("batch", "no images to stack");
  const std::size_t h = images.front().height;
  const std::size_t w = images.front().width;
  Tensor x(Shape{images.size(), h, w, channels});
  auto data = x.data();
  std::size_t o = 0;
  for (const Image& img : images) {
    if (img.height != h || img.width != w) {
      throw ShapeError("H,W", "images in one batch differ in size");
    }
    for (float v : img.pixels) {
      for (std::size_t c = 0; c < channels; ++c) data[o++] = v;
    }
  }
  return x;
}

GraphClassifier::GraphClassifier(const ArchitectureGraph& graph, Weights<float> weights,
                                 std::size_t max_batch)
    : graph_(graph), weights_(std::move(weights)), max_batch_(std::max<std::size_t>(1, max_batch)) {
  if (graph_.num_classes() != kNumClasses) {
    throw ConfigError("graph head has " + std::to_string(graph_.num_classes()) +
                      " classes, expected " + std::to_string(kNumClasses));
  }
}

std::optional<std::pair<std::size_t, std::size_t>> GraphClassifier::input_size() const {
  const Shape s = graph_.input_shape();
  return std::make_pair(s.h, s.w);
}

std::vector<ClassScores> GraphClassifier::predict(std::span<const Image> images) const {
  const Shape in = graph_.input_shape();
  std::vector<ClassScores> out;
  out.reserve(images.size());
  for (std::size_t begin = 0; begin < images.size(); begin += max_batch_) {
    const std::size_t end = std::min(images.size(), begin + max_batch_);
    std::vector<Image> batch;
    batch.reserve(end - begin);
    for (std::size_t i = begin; i < end; ++i) batch.push_back(resize(images[i], in.h, in.w));
    const Tensor x = images_to_tensor(batch, in.c);
    const auto fwd = graph_forward(graph_, weights_, x, Mode::kInfer, false);
    const auto probs = fwd.probs.data();
    for (std::size_t n = 0; n < batch.size(); ++n) {
      ClassScores s{};
      for (std::size_t c = 0; c < kNumClasses; ++c) s[c] = probs[n * kNumClasses + c];
      out.push_back(s);
    }
  }
  return out;
}

}  // namespace covidnet
