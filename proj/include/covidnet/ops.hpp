#pragma once

// Differentiable primitives over NHWC tensors. Every forward op is a pure
// function; the matching *_backward takes the forward inputs plus the
// upstream gradient and returns gradients for inputs and parameters.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <utility>
#include <vector>

#include "covidnet/tensor.hpp"

namespace covidnet {

// ---------------------------------------------------------------------------
// Execution policy

enum class ExecutionMode {
  /// Fixed reduction order, single-threaded inner loops.
  kDeterministic,
  /// Batch/channel partitioning across threads; parameter-gradient
  /// reductions may differ from deterministic mode by ~1e-5 relative.
  kParallel,
};

void set_execution_mode(ExecutionMode mode, unsigned threads = 0);
ExecutionMode execution_mode();
unsigned execution_threads();

/// Runs fn(begin, end) over [0, n). Serial in deterministic mode.
void parallel_for(std::size_t n,
                  const std::function<void(std::size_t, std::size_t)>& fn);

enum class Mode { kTrain, kInfer };

// ---------------------------------------------------------------------------
// Convolution

enum class Padding { kSame, kValid };

/// Grouped 2-D convolution. Weights are laid out (kh, kw, in/groups, out);
/// groups partition channels contiguously.
struct ConvParams {
  std::size_t kernel_h = 1;
  std::size_t kernel_w = 1;
  std::size_t stride_h = 1;
  std::size_t stride_w = 1;
  std::size_t groups = 1;
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  Padding padding = Padding::kSame;
  bool has_bias = true;

  /// Throws ConfigError on non-positive sizes or channels not divisible by
  /// groups.
  void validate() const;

  bool is_depthwise() const {
    return groups == in_channels && groups == out_channels;
  }
  bool is_pointwise() const {
    return kernel_h == 1 && kernel_w == 1 && groups == 1;
  }

  /// Output shape; "same" gives ceil(H/stride). Throws ShapeError when the
  /// input channel count differs or a "valid" kernel does not fit.
  Shape output_shape(const Shape& in) const;

  std::vector<std::uint32_t> weight_dims() const;
  std::size_t weight_count() const {
    return kernel_h * kernel_w * (in_channels / groups) * out_channels;
  }

  /// Leading (top, left) padding. "same" pads kernel-1 in total, floor on
  /// the leading side and ceil on the trailing side.
  std::size_t pad_top() const;
  std::size_t pad_left() const;
};

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const ConvParams& params,
                      std::span<const T> weights, std::span<const T> bias);

template <typename T>
struct ConvGrads {
  BasicTensor<T> dx;
  std::vector<T> dweights;
  std::vector<T> dbias;
};

template <typename T>
ConvGrads<T> conv2d_backward(const BasicTensor<T>& x, const ConvParams& params,
                             std::span<const T> weights,
                             const BasicTensor<T>& dy);

// ---------------------------------------------------------------------------
// Batch normalization

template <typename T>
struct BatchNormParams {
  std::size_t channels = 0;
  double epsilon = 1e-5;
  /// running <- momentum * running + (1 - momentum) * batch
  double momentum = 0.9;
  std::vector<T> gamma;
  std::vector<T> beta;
  std::vector<T> running_mean;
  std::vector<T> running_var;

  static BatchNormParams identity(std::size_t channels);
};

template <typename T>
struct BatchNormCache {
  Mode mode = Mode::kInfer;
  BasicTensor<T> xhat;
  std::vector<double> mean;     // per channel, batch (train) or running
  std::vector<double> var;      // biased batch variance or running variance
  std::vector<double> inv_std;  // 1/sqrt(var + eps)
  std::size_t count = 0;        // N*H*W
};

/// Pure normalization. In train mode batch statistics are used and left in
/// `cache` for a later update_running_stats(); running stats are not touched.
template <typename T>
BasicTensor<T> batchnorm_forward(const BasicTensor<T>& x,
                                 const BatchNormParams<T>& params, Mode mode,
                                 BatchNormCache<T>* cache = nullptr);

/// Folds the batch statistics recorded in `cache` into the running stats.
template <typename T>
void update_running_stats(BatchNormParams<T>& params,
                          const BatchNormCache<T>& cache);

/// Normalizes and, in train mode, updates running statistics.
template <typename T>
BasicTensor<T> batchnorm(const BasicTensor<T>& x, BatchNormParams<T>& params,
                         Mode mode);

template <typename T>
struct BatchNormGrads {
  BasicTensor<T> dx;
  std::vector<T> dgamma;
  std::vector<T> dbeta;
};

template <typename T>
BatchNormGrads<T> batchnorm_backward(const BasicTensor<T>& dy,
                                     std::span<const T> gamma,
                                     const BatchNormCache<T>& cache);

// ---------------------------------------------------------------------------
// Elementwise, pooling, dense, structural

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x);
/// Subgradient at exactly 0 is 0.
template <typename T>
BasicTensor<T> relu_backward(const BasicTensor<T>& x, const BasicTensor<T>& dy);

template <typename T>
BasicTensor<T> global_avg_pool(const BasicTensor<T>& x);
template <typename T>
BasicTensor<T> global_avg_pool_backward(const Shape& input_shape,
                                        const BasicTensor<T>& dy);

struct MaxPoolParams {
  std::size_t kernel = 3;
  std::size_t stride = 2;

  Shape output_shape(const Shape& in) const;
};

/// "same"-padded max pooling; padded positions never win.
/// `argmax` receives the flat input index chosen for each output element.
template <typename T>
BasicTensor<T> max_pool(const BasicTensor<T>& x, const MaxPoolParams& params,
                        std::vector<std::size_t>* argmax = nullptr);
template <typename T>
BasicTensor<T> max_pool_backward(const Shape& input_shape,
                                 std::span<const std::size_t> argmax,
                                 const BasicTensor<T>& dy);

/// Affine map on the flattened item. `weights` is (in, out) row-major.
/// Output shape (N, 1, 1, out).
template <typename T>
BasicTensor<T> dense(const BasicTensor<T>& x, std::size_t out_features,
                     std::span<const T> weights, std::span<const T> bias);

template <typename T>
struct DenseGrads {
  BasicTensor<T> dx;
  std::vector<T> dweights;
  std::vector<T> dbias;
};

template <typename T>
DenseGrads<T> dense_backward(const BasicTensor<T>& x, std::size_t out_features,
                             std::span<const T> weights,
                             const BasicTensor<T>& dy);

/// Tiles the whole channel block `factor` times: (a,b) x3 -> (a,b,a,b,a,b).
template <typename T>
BasicTensor<T> replicate_channels(const BasicTensor<T>& x, std::size_t factor);
/// Sums the gradient over the replicas of each input channel.
template <typename T>
BasicTensor<T> replicate_channels_backward(const BasicTensor<T>& dy,
                                           std::size_t factor);

template <typename T>
BasicTensor<T> add(std::span<const BasicTensor<T>* const> inputs);

template <typename T>
BasicTensor<T> concat_channels(std::span<const BasicTensor<T>* const> inputs);
template <typename T>
std::vector<BasicTensor<T>> concat_channels_backward(
    const BasicTensor<T>& dy, std::span<const std::size_t> channel_counts);

// ---------------------------------------------------------------------------
// Softmax head

/// Row-wise softmax over the flattened item (max-subtracted).
template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& logits);

template <typename T>
struct SoftmaxXent {
  double loss = 0.0;  // mean negative log-likelihood over the batch
  BasicTensor<T> probs;
};

/// Throws DataError when a label is outside [0, K).
template <typename T>
SoftmaxXent<T> softmax_xent(const BasicTensor<T>& logits,
                            std::span<const int> labels);

/// d(mean NLL)/d(logits) = (probs - onehot) / N.
template <typename T>
BasicTensor<T> softmax_xent_backward(const BasicTensor<T>& probs,
                                     std::span<const int> labels);

}  // namespace covidnet
