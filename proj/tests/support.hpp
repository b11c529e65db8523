#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "covidnet/classifier.hpp"
#include "covidnet/data.hpp"
#include "covidnet/grad_check.hpp"
#include "covidnet/graph.hpp"
#include "covidnet/image.hpp"
#include "covidnet/random.hpp"
#include "covidnet/tensor.hpp"

namespace covidnet::testing {

template <typename T>
BasicTensor<T> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  BasicTensor<T> t(shape);
  for (T& v : t.data()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

/// Small graph with random sizes and strides that contains every op kind
/// (conv, depthwise conv, batchnorm, relu, max_pool, prpe, prpe_s, add,
/// replicate, concat, global_avg_pool, dense, softmax_head).
ArchitectureGraph random_tiny_dag(std::uint64_t seed);

/// Graph: input -> one prpe (or prpe_s) block -> gap -> dense -> head.
ArchitectureGraph prpe_probe_graph(bool strided, std::uint64_t seed);

/// float64 finite-difference check of graph_backward for the mean
/// cross-entropy of a random batch, over every trainable weight and the
/// input.
GradCheckReport check_graph_gradients(const ArchitectureGraph& graph, std::uint64_t seed,
                                      std::size_t batch = 2);

/// Named float64 checks of each differentiable primitive in isolation.
std::vector<std::pair<std::string, GradCheckReport>> check_primitives(std::uint64_t seed);

/// Fresh empty directory under the system temp dir.
std::filesystem::path fresh_dir(const std::string& name);

/// Score of class 0 = mean intensity of the top-left quadrant; the rest is
/// split evenly over classes 1 and 2.
class QuadrantStub : public Classifier {
 public:
  std::vector<ClassScores> predict(std::span<const Image> images) const override;
};

/// Same output for every input.
class UniformStub : public Classifier {
 public:
  std::vector<ClassScores> predict(std::span<const Image> images) const override;
};

/// Predicts from a lookup keyed by the image's top-left pixel value
/// (pixel value * 255 rounded = index into `labels`).
class LookupStub : public Classifier {
 public:
  explicit LookupStub(std::vector<ClassLabel> labels) : labels_(std::move(labels)) {}
  std::vector<ClassScores> predict(std::span<const Image> images) const override;

 private:
  std::vector<ClassLabel> labels_;
};

/// Bright disk (body) with an interior dark hole plus a bright bar below it
/// (the table), on a black background.
struct BodyFixture {
  Image image;
  std::vector<std::uint8_t> body;   // disk including its hole
  std::vector<std::uint8_t> table;  // bar pixels
};
BodyFixture disk_and_table_fixture(std::size_t size = 64);

}  // namespace covidnet::testing

namespace covidnet::testing {

/// Synthetic dataset under `dir` with a patient-level split manifest
/// (absolute paths). Returns the manifest records.
std::vector<ImageRecord> synthetic_manifest(const std::filesystem::path& dir,
                                            std::size_t patients_per_class,
                                            std::size_t slices, std::size_t resolution,
                                            std::uint64_t seed);

/// The bundled small config used for fast training runs.
ArchitectureGraph mini_graph();

}  // namespace covidnet::testing
