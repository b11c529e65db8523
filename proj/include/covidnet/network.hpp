#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "covidnet/graph.hpp"
#include "covidnet/ops.hpp"

namespace covidnet {

/// Named parameter tensors of a graph, in topological node order.
/// Names are "<node>:<role>" with roles kernel, bias, gamma, beta,
/// running_mean, running_var.
template <typename T>
class Weights {
 public:
  struct Entry {
    std::string name;
    std::size_t node = 0;
    bool trainable = true;
    Param<T> param;
  };

  /// He (fan-in) normal init for conv/dense kernels, zero biases, identity
  /// batch norm.
  static Weights initialize(const ArchitectureGraph& graph, std::uint64_t seed);

  /// Entry names and shapes the graph requires, zero-filled.
  static Weights zeros(const ArchitectureGraph& graph);

  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }

  const Entry* find(std::string_view name) const;
  Entry* find(std::string_view name);

  /// Throws CheckpointError naming the node when absent.
  std::span<const T> values(const std::string& node,
                            std::string_view role) const;

  /// Adds an entry; the first entry added wins on duplicate names.
  void add(Entry entry);

  std::size_t trainable_count() const;

  template <typename U>
  Weights<U> cast() const {
    Weights<U> out;
    for (const Entry& e : entries_) {
      typename Weights<U>::Entry c;
      c.name = e.name;
      c.node = e.node;
      c.trainable = e.trainable;
      c.param.dims = e.param.dims;
      c.param.values.assign(e.param.values.begin(), e.param.values.end());
      out.add(std::move(c));
    }
    return out;
  }

  friend bool operator==(const Weights& a, const Weights& b) {
    if (a.entries_.size() != b.entries_.size()) return false;
    for (std::size_t i = 0; i < a.entries_.size(); ++i) {
      const Entry& x = a.entries_[i];
      const Entry& y = b.entries_[i];
      if (x.name != y.name || x.trainable != y.trainable || x.param != y.param) {
        return false;
      }
    }
    return true;
  }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

std::string param_name(const std::string& node, std::string_view role);

template <typename T>
struct ActivationCache {
  const ArchitectureGraph* graph = nullptr;
  Mode mode = Mode::kInfer;
  std::size_t batch = 0;
  /// Output of every node; empty when dropped (inference without cache).
  std::vector<BasicTensor<T>> outputs;
  std::vector<BatchNormCache<T>> batchnorm;
  std::vector<std::vector<std::size_t>> argmax;
};

template <typename T>
struct ForwardResult {
  BasicTensor<T> logits;  // (N, 1, 1, K)
  BasicTensor<T> probs;
  ActivationCache<T> cache;
};

/// Runs the graph on x of shape (N, H, W, C). Pure: running statistics are
/// not touched; call apply_running_stats() to fold train-mode batch stats.
/// With keep_cache == false intermediate activations are released early.
template <typename T>
ForwardResult<T> graph_forward(const ArchitectureGraph& graph,
                               const Weights<T>& weights,
                               const BasicTensor<T>& x, Mode mode,
                               bool keep_cache = true);

template <typename T>
void apply_running_stats(const ArchitectureGraph& graph, Weights<T>& weights,
                         const ActivationCache<T>& cache);

template <typename T>
struct Gradients {
  double loss = 0.0;
  /// Aligned with Weights::entries(); empty for non-trainable entries.
  std::vector<std::vector<T>> params;
  BasicTensor<T> input;
};

/// Backpropagates mean softmax cross-entropy of `labels` through the cache.
template <typename T>
Gradients<T> graph_backward(const ArchitectureGraph& graph,
                            const Weights<T>& weights,
                            const ForwardResult<T>& forward,
                            std::span<const int> labels);

}  // namespace covidnet
