#include "covidnet/ops.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <string>
#include <thread>

namespace covidnet {

namespace {

std::atomic<ExecutionMode> g_mode{ExecutionMode::kDeterministic};
std::atomic<unsigned> g_threads{0};

std::string dims_str(std::size_t a, std::size_t b) {
  return std::to_string(a) + " vs " + std::to_string(b);
}

void require_positive(std::size_t v, const char* what) {
  if (v == 0) throw ConfigError(std::string("conv ") + what + " must be positive");
}

}  // namespace

void set_execution_mode(ExecutionMode mode, unsigned threads) {
  g_mode = mode;
  g_threads = threads;
}

ExecutionMode execution_mode() { return g_mode; }

unsigned execution_threads() {
  if (g_mode == ExecutionMode::kDeterministic) return 1;
  unsigned t = g_threads;
  if (t == 0) t = std::max(1u, std::thread::hardware_concurrency());
  return t;
}

void parallel_for(std::size_t n,
                  const std::function<void(std::size_t, std::size_t)>& fn) {
  const unsigned threads =
      static_cast<unsigned>(std::min<std::size_t>(execution_threads(), n));
  if (threads <= 1) {
    if (n > 0) fn(0, n);
    return;
  }
  std::vector<std::jthread> workers;
  workers.reserve(threads);
  const std::size_t chunk = (n + threads - 1) / threads;
  for (unsigned t = 0; t < threads; ++t) {
    const std::size_t begin = t * chunk;
    const std::size_t end = std::min(n, begin + chunk);
    if (begin >= end) break;
    workers.emplace_back([&fn, begin, end] { fn(begin, end); });
  }
}

// ---------------------------------------------------------------------------
// ConvParams

void ConvParams::validate() const {
  require_positive(kernel_h, "kernel height");
  require_positive(kernel_w, "kernel width");
  require_positive(stride_h, "stride height");
  require_positive(stride_w, "stride width");
  require_positive(groups, "groups");
  require_positive(in_channels, "in_channels");
  require_positive(out_channels, "out_channels");
  if (in_channels % groups != 0 || out_channels % groups != 0) {
    throw ConfigError("conv groups " + std::to_string(groups) +
                      " must divide in_channels " +
                      std::to_string(in_channels) + " and out_channels " +
                      std::to_string(out_channels));
  }
}

std::size_t ConvParams::pad_top() const {
  return padding == Padding::kSame ? (kernel_h - 1) / 2 : 0;
}

std::size_t ConvParams::pad_left() const {
  return padding == Padding::kSame ? (kernel_w - 1) / 2 : 0;
}

Shape ConvParams::output_shape(const Shape& in) const {
  if (in.c != in_channels) {
    throw ShapeError("channels", "conv expects " +
                                     dims_str(in_channels, in.c) + " input");
  }
  if (padding == Padding::kSame) {
    return {in.n, (in.h + stride_h - 1) / stride_h,
            (in.w + stride_w - 1) / stride_w, out_channels};
  }
  if (in.h < kernel_h) {
    throw ShapeError("height", "valid conv kernel " +
                                   dims_str(kernel_h, in.h) + " input");
  }
  if (in.w < kernel_w) {
    throw ShapeError("width", "valid conv kernel " +
                                  dims_str(kernel_w, in.w) + " input");
  }
  return {in.n, (in.h - kernel_h) / stride_h + 1,
          (in.w - kernel_w) / stride_w + 1, out_channels};
}

std::vector<std::uint32_t> ConvParams::weight_dims() const {
  return {static_cast<std::uint32_t>(kernel_h),
          static_cast<std::uint32_t>(kernel_w),
          static_cast<std::uint32_t>(in_channels / groups),
          static_cast<std::uint32_t>(out_channels)};
}

// ---------------------------------------------------------------------------
// conv2d

namespace {

struct ConvGeometry {
  std::size_t cin_g, cout_g, cout;
  std::ptrdiff_t pt, pl;
  bool depthwise;
};

ConvGeometry geometry(const ConvParams& p) {
  return {p.in_channels / p.groups, p.out_channels / p.groups, p.out_channels,
          static_cast<std::ptrdiff_t>(p.pad_top()),
          static_cast<std::ptrdiff_t>(p.pad_left()),
          p.in_channels / p.groups == 1 && p.out_channels / p.groups == 1};
}

template <typename T>
void check_conv_weights(const ConvParams& p, std::span<const T> weights) {
  if (weights.size() != p.weight_count()) {
    throw ShapeError("weights", "conv expects " +
                                    dims_str(p.weight_count(), weights.size()) +
                                    " weight values");
  }
}

template <typename T>
void check_conv_operands(const ConvParams& p, std::span<const T> weights,
                         std::span<const T> bias) {
  check_conv_weights(p, weights);
  if (p.has_bias && bias.size() != p.out_channels) {
    throw ShapeError("bias", "conv expects " +
                                 dims_str(p.out_channels, bias.size()) +
                                 " bias values");
  }
  if (!p.has_bias && !bias.empty()) {
    throw ShapeError("bias", "conv declared without bias but one was given");
  }
}

}  // namespace

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const ConvParams& p,
                      std::span<const T> weights, std::span<const T> bias) {
  p.validate();
  const Shape in = x.shape();
  const Shape out = p.output_shape(in);
  check_conv_operands(p, weights, bias);
  BasicTensor<T> y(out);
  const ConvGeometry g = geometry(p);
  const T* w = weights.data();

  parallel_for(out.n * out.h, [&](std::size_t begin, std::size_t end) {
    for (std::size_t row = begin; row < end; ++row) {
      const std::size_t n = row / out.h;
      const std::size_t oh = row % out.h;
      for (std::size_t ow = 0; ow < out.w; ++ow) {
        T* o = &y.at(n, oh, ow, 0);
        if (p.has_bias) std::copy(bias.begin(), bias.end(), o);
        for (std::size_t ki = 0; ki < p.kernel_h; ++ki) {
          const std::ptrdiff_t ih =
              static_cast<std::ptrdiff_t>(oh * p.stride_h + ki) - g.pt;
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(in.h)) continue;
          for (std::size_t kj = 0; kj < p.kernel_w; ++kj) {
            const std::ptrdiff_t iw =
                static_cast<std::ptrdiff_t>(ow * p.stride_w + kj) - g.pl;
            if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(in.w)) continue;
            const T* xp = &x.at(n, ih, iw, 0);
            const T* wk = w + (ki * p.kernel_w + kj) * g.cin_g * g.cout;
            if (g.depthwise) {
              for (std::size_t c = 0; c < g.cout; ++c) o[c] += xp[c] * wk[c];
              continue;
            }
            for (std::size_t grp = 0; grp < p.groups; ++grp) {
              T* og = o + grp * g.cout_g;
              for (std::size_t ci = 0; ci < g.cin_g; ++ci) {
                const T xv = xp[grp * g.cin_g + ci];
                const T* wr = wk + ci * g.cout + grp * g.cout_g;
                for (std::size_t co = 0; co < g.cout_g; ++co) {
                  og[co] += xv * wr[co];
                }
              }
            }
          }
        }
      }
    }
  });
  return y;
}

template <typename T>
ConvGrads<T> conv2d_backward(const BasicTensor<T>& x, const ConvParams& p,
                             std::span<const T> weights,
                             const BasicTensor<T>& dy) {
  p.validate();
  const Shape in = x.shape();
  const Shape out = p.output_shape(in);
  check_conv_weights(p, weights);
  if (dy.shape() != out) {
    throw ShapeError("gradient", "conv upstream " + dy.shape().to_string() +
                                     " vs output " + out.to_string());
  }
  const ConvGeometry g = geometry(p);
  const T* w = weights.data();

  ConvGrads<T> grads;
  grads.dx = BasicTensor<T>(in);

  // Each chunk of batch items accumulates its own parameter partials; the
  // partials are merged in chunk order so the result only depends on the
  // chunking, which is fixed (a single chunk) in deterministic mode.
  const std::size_t chunks =
      std::min<std::size_t>(execution_threads(), std::max<std::size_t>(in.n, 1));
  std::vector<std::vector<T>> dw_parts(chunks,
                                       std::vector<T>(p.weight_count(), T(0)));
  std::vector<std::vector<double>> db_parts(
      chunks, std::vector<double>(p.out_channels, 0.0));
  const std::size_t per_chunk = (in.n + chunks - 1) / chunks;

  auto work = [&](std::size_t chunk) {
    T* dw = dw_parts[chunk].data();
    double* db = db_parts[chunk].data();
    const std::size_t n_begin = chunk * per_chunk;
    const std::size_t n_end = std::min(in.n, n_begin + per_chunk);
    for (std::size_t n = n_begin; n < n_end; ++n) {
      for (std::size_t oh = 0; oh < out.h; ++oh) {
        for (std::size_t ow = 0; ow < out.w; ++ow) {
          const T* gy = &dy.at(n, oh, ow, 0);
          if (p.has_bias) {
            for (std::size_t co = 0; co < g.cout; ++co) db[co] += gy[co];
          }
          for (std::size_t ki = 0; ki < p.kernel_h; ++ki) {
            const std::ptrdiff_t ih =
                static_cast<std::ptrdiff_t>(oh * p.stride_h + ki) - g.pt;
            if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(in.h)) continue;
            for (std::size_t kj = 0; kj < p.kernel_w; ++kj) {
              const std::ptrdiff_t iw =
                  static_cast<std::ptrdiff_t>(ow * p.stride_w + kj) - g.pl;
              if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(in.w)) continue;
              const T* xp = &x.at(n, ih, iw, 0);
              T* dxp = &grads.dx.at(n, ih, iw, 0);
              const std::size_t tap = (ki * p.kernel_w + kj) * g.cin_g * g.cout;
              const T* wk = w + tap;
              T* dwk = dw + tap;
              if (g.depthwise) {
                for (std::size_t c = 0; c < g.cout; ++c) {
                  dxp[c] += gy[c] * wk[c];
                  dwk[c] += xp[c] * gy[c];
                }
                continue;
              }
              for (std::size_t grp = 0; grp < p.groups; ++grp) {
                const T* gg = gy + grp * g.cout_g;
                for (std::size_t ci = 0; ci < g.cin_g; ++ci) {
                  const std::size_t cidx = grp * g.cin_g + ci;
                  const T xv = xp[cidx];
                  const std::size_t off = ci * g.cout + grp * g.cout_g;
                  const T* wr = wk + off;
                  T* dwr = dwk + off;
                  T acc = 0;
                  for (std::size_t co = 0; co < g.cout_g; ++co) {
                    acc += wr[co] * gg[co];
                    dwr[co] += xv * gg[co];
                  }
                  dxp[cidx] += acc;
                }
              }
            }
          }
        }
      }
    }
  };
  parallel_for(chunks, [&](std::size_t b, std::size_t e) {
    for (std::size_t c = b; c < e; ++c) work(c);
  });

  grads.dweights = std::move(dw_parts[0]);
  for (std::size_t c = 1; c < chunks; ++c) {
    for (std::size_t i = 0; i < grads.dweights.size(); ++i) {
      grads.dweights[i] += dw_parts[c][i];
    }
  }
  if (p.has_bias) {
    grads.dbias.assign(p.out_channels, T(0));
    for (std::size_t co = 0; co < p.out_channels; ++co) {
      double s = 0.0;
      for (std::size_t c = 0; c < chunks; ++c) s += db_parts[c][co];
      grads.dbias[co] = static_cast<T>(s);
    }
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Batch norm

template <typename T>
BatchNormParams<T> BatchNormParams<T>::identity(std::size_t channels) {
  BatchNormParams p;
  p.channels = channels;
  p.gamma.assign(channels, T(1));
  p.beta.assign(channels, T(0));
  p.running_mean.assign(channels, T(0));
  p.running_var.assign(channels, T(1));
  return p;
}

template <typename T>
BasicTensor<T> batchnorm_forward(const BasicTensor<T>& x,
                                 const BatchNormParams<T>& params, Mode mode,
                                 BatchNormCache<T>* cache) {
  const Shape s = x.shape();
  const std::size_t C = params.channels;
  if (s.c != C) {
    throw ConfigError("batchnorm configured for " + std::to_string(C) +
                      " channels, input has " + std::to_string(s.c));
  }
  if (params.gamma.size() != C || params.beta.size() != C ||
      params.running_mean.size() != C || params.running_var.size() != C) {
    throw ConfigError("batchnorm parameter vectors must have length " +
                      std::to_string(C));
  }
  const std::size_t count = s.n * s.h * s.w;
  std::vector<double> mean(C, 0.0), var(C, 0.0), inv_std(C);
  if (mode == Mode::kTrain) {
    if (count < 2) {
      throw ConfigError(
          "batchnorm in train mode needs N*H*W >= 2 (got " +
          std::to_string(count) + ")");
    }
    const T* xd = x.data().data();
    for (std::size_t i = 0; i < count; ++i) {
      for (std::size_t c = 0; c < C; ++c) mean[c] += xd[i * C + c];
    }
    for (std::size_t c = 0; c < C; ++c) mean[c] /= static_cast<double>(count);
    for (std::size_t i = 0; i < count; ++i) {
      for (std::size_t c = 0; c < C; ++c) {
        const double d = xd[i * C + c] - mean[c];
        var[c] += d * d;
      }
    }
    for (std::size_t c = 0; c < C; ++c) var[c] /= static_cast<double>(count);
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      mean[c] = params.running_mean[c];
      var[c] = params.running_var[c];
    }
  }
  for (std::size_t c = 0; c < C; ++c) {
    inv_std[c] = 1.0 / std::sqrt(var[c] + params.epsilon);
  }

  BasicTensor<T> y(s);
  BasicTensor<T> xhat;
  if (cache) xhat = BasicTensor<T>(s);
  const T* xd = x.data().data();
  T* yd = y.data().data();
  for (std::size_t i = 0; i < count; ++i) {
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t k = i * C + c;
      const double h = (xd[k] - mean[c]) * inv_std[c];
      yd[k] = static_cast<T>(params.gamma[c] * h + params.beta[c]);
      if (cache) xhat[k] = static_cast<T>(h);
    }
  }
  if (cache) {
    cache->mode = mode;
    cache->xhat = std::move(xhat);
    cache->mean = std::move(mean);
    cache->var = std::move(var);
    cache->inv_std = std::move(inv_std);
    cache->count = count;
  }
  return y;
}

template <typename T>
void update_running_stats(BatchNormParams<T>& params,
                          const BatchNormCache<T>& cache) {
  if (cache.mode != Mode::kTrain) return;
  const double m = params.momentum;
  const double unbias = static_cast<double>(cache.count) /
                        static_cast<double>(cache.count - 1);
  for (std::size_t c = 0; c < params.channels; ++c) {
    params.running_mean[c] =
        static_cast<T>(m * params.running_mean[c] + (1.0 - m) * cache.mean[c]);
    params.running_var[c] = static_cast<T>(m * params.running_var[c] +
                                           (1.0 - m) * cache.var[c] * unbias);
  }
}

template <typename T>
BasicTensor<T> batchnorm(const BasicTensor<T>& x, BatchNormParams<T>& params,
                         Mode mode) {
  BatchNormCache<T> cache;
  BasicTensor<T> y = batchnorm_forward(x, params, mode, &cache);
  update_running_stats(params, cache);
  return y;
}

template <typename T>
BatchNormGrads<T> batchnorm_backward(const BasicTensor<T>& dy,
                                     std::span<const T> gamma,
                                     const BatchNormCache<T>& cache) {
  const Shape s = dy.shape();
  const std::size_t C = s.c;
  if (cache.xhat.shape() != s || gamma.size() != C) {
    throw InternalError("batchnorm backward: cache does not match upstream " +
                        s.to_string());
  }
  const std::size_t count = s.n * s.h * s.w;
  std::vector<double> sum_dy(C, 0.0), sum_dy_xhat(C, 0.0);
  const T* g = dy.data().data();
  const T* xh = cache.xhat.data().data();
  for (std::size_t i = 0; i < count; ++i) {
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t k = i * C + c;
      sum_dy[c] += g[k];
      sum_dy_xhat[c] += static_cast<double>(g[k]) * xh[k];
    }
  }
  BatchNormGrads<T> out;
  out.dx = BasicTensor<T>(s);
  out.dgamma.resize(C);
  out.dbeta.resize(C);
  for (std::size_t c = 0; c < C; ++c) {
    out.dgamma[c] = static_cast<T>(sum_dy_xhat[c]);
    out.dbeta[c] = static_cast<T>(sum_dy[c]);
  }
  T* dx = out.dx.data().data();
  if (cache.mode == Mode::kTrain) {
    const double inv_m = 1.0 / static_cast<double>(count);
    for (std::size_t i = 0; i < count; ++i) {
      for (std::size_t c = 0; c < C; ++c) {
        const std::size_t k = i * C + c;
        const double scale = gamma[c] * cache.inv_std[c];
        dx[k] = static_cast<T>(
            scale * (g[k] - inv_m * sum_dy[c] - xh[k] * inv_m * sum_dy_xhat[c]));
      }
    }
  } else {
    for (std::size_t i = 0; i < count; ++i) {
      for (std::size_t c = 0; c < C; ++c) {
        const std::size_t k = i * C + c;
        dx[k] = static_cast<T>(g[k] * gamma[c] * cache.inv_std[c]);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// ReLU

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
  BasicTensor<T> y(x.shape());
  const T* xd = x.data().data();
  T* yd = y.data().data();
  for (std::size_t i = 0; i < x.size(); ++i) yd[i] = xd[i] > T(0) ? xd[i] : T(0);
  return y;
}

template <typename T>
BasicTensor<T> relu_backward(const BasicTensor<T>& x, const BasicTensor<T>& dy) {
  if (x.shape() != dy.shape()) {
    throw ShapeError("gradient", "relu upstream " + dy.shape().to_string() +
                                     " vs input " + x.shape().to_string());
  }
  BasicTensor<T> dx(x.shape());
  const T* xd = x.data().data();
  const T* g = dy.data().data();
  T* d = dx.data().data();
  for (std::size_t i = 0; i < x.size(); ++i) d[i] = xd[i] > T(0) ? g[i] : T(0);
  return dx;
}

// ---------------------------------------------------------------------------
// Pooling

template <typename T>
BasicTensor<T> global_avg_pool(const BasicTensor<T>& x) {
  const Shape s = x.shape();
  if (s.h == 0 || s.w == 0) {
    throw ShapeError("height", "global_avg_pool needs a non-empty spatial map");
  }
  BasicTensor<T> y({s.n, 1, 1, s.c});
  const double inv = 1.0 / static_cast<double>(s.spatial());
  std::vector<double> acc(s.c);
  for (std::size_t n = 0; n < s.n; ++n) {
    std::fill(acc.begin(), acc.end(), 0.0);
    const T* xp = x.item(n).data();
    for (std::size_t i = 0; i < s.spatial(); ++i) {
      for (std::size_t c = 0; c < s.c; ++c) acc[c] += xp[i * s.c + c];
    }
    for (std::size_t c = 0; c < s.c; ++c) {
      y.at(n, 0, 0, c) = static_cast<T>(acc[c] * inv);
    }
  }
  return y;
}

template <typename T>
BasicTensor<T> global_avg_pool_backward(const Shape& input_shape,
                                        const BasicTensor<T>& dy) {
  const Shape s = input_shape;
  if (dy.shape() != Shape{s.n, 1, 1, s.c}) {
    throw ShapeError("gradient", "global_avg_pool upstream " +
                                     dy.shape().to_string());
  }
  BasicTensor<T> dx(s);
  const T inv = static_cast<T>(1.0 / static_cast<double>(s.spatial()));
  for (std::size_t n = 0; n < s.n; ++n) {
    T* dp = dx.item(n).data();
    for (std::size_t i = 0; i < s.spatial(); ++i) {
      for (std::size_t c = 0; c < s.c; ++c) {
        dp[i * s.c + c] = dy.at(n, 0, 0, c) * inv;
      }
    }
  }
  return dx;
}

Shape MaxPoolParams::output_shape(const Shape& in) const {
  if (kernel == 0 || stride == 0) {
    throw ConfigError("max_pool kernel and stride must be positive");
  }
  return {in.n, (in.h + stride - 1) / stride, (in.w + stride - 1) / stride,
          in.c};
}

template <typename T>
BasicTensor<T> max_pool(const BasicTensor<T>& x, const MaxPoolParams& p,
                        std::vector<std::size_t>* argmax) {
  const Shape in = x.shape();
  const Shape out = p.output_shape(in);
  BasicTensor<T> y(out);
  if (argmax) argmax->assign(out.size(), 0);
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>((p.kernel - 1) / 2);
  std::vector<std::size_t> best(in.c);
  for (std::size_t n = 0; n < out.n; ++n) {
    for (std::size_t oh = 0; oh < out.h; ++oh) {
      for (std::size_t ow = 0; ow < out.w; ++ow) {
        T* o = &y.at(n, oh, ow, 0);
        std::fill(o, o + in.c, -std::numeric_limits<T>::infinity());
        for (std::size_t ki = 0; ki < p.kernel; ++ki) {
          const std::ptrdiff_t ih =
              static_cast<std::ptrdiff_t>(oh * p.stride + ki) - pad;
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(in.h)) continue;
          for (std::size_t kj = 0; kj < p.kernel; ++kj) {
            const std::ptrdiff_t iw =
                static_cast<std::ptrdiff_t>(ow * p.stride + kj) - pad;
            if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(in.w)) continue;
            const std::size_t base = x.index(n, ih, iw, 0);
            for (std::size_t c = 0; c < in.c; ++c) {
              if (x[base + c] > o[c]) {
                o[c] = x[base + c];
                best[c] = base + c;
              }
            }
          }
        }
        if (argmax) {
          const std::size_t ob = y.index(n, oh, ow, 0);
          for (std::size_t c = 0; c < in.c; ++c) (*argmax)[ob + c] = best[c];
        }
      }
    }
  }
  return y;
}

template <typename T>
BasicTensor<T> max_pool_backward(const Shape& input_shape,
                                 std::span<const std::size_t> argmax,
                                 const BasicTensor<T>& dy) {
  if (argmax.size() != dy.size()) {
    throw InternalError("max_pool backward: argmax does not match upstream");
  }
  BasicTensor<T> dx(input_shape);
  for (std::size_t i = 0; i < dy.size(); ++i) dx[argmax[i]] += dy[i];
  return dx;
}

// ---------------------------------------------------------------------------
// Dense

template <typename T>
BasicTensor<T> dense(const BasicTensor<T>& x, std::size_t out_features,
                     std::span<const T> weights, std::span<const T> bias) {
  const std::size_t in = x.shape().item_size();
  if (weights.size() != in * out_features) {
    throw ShapeError("features", "dense expects " + std::to_string(in) +
                                     " x " + std::to_string(out_features) +
                                     " weights, got " +
                                     std::to_string(weights.size()));
  }
  if (!bias.empty() && bias.size() != out_features) {
    throw ShapeError("bias", "dense expects " +
                                 dims_str(out_features, bias.size()) +
                                 " bias values");
  }
  const std::size_t N = x.shape().n;
  BasicTensor<T> y({N, 1, 1, out_features});
  for (std::size_t n = 0; n < N; ++n) {
    T* o = y.item(n).data();
    if (!bias.empty()) std::copy(bias.begin(), bias.end(), o);
    const T* xp = x.item(n).data();
    for (std::size_t i = 0; i < in; ++i) {
      const T* wr = weights.data() + i * out_features;
      for (std::size_t j = 0; j < out_features; ++j) o[j] += xp[i] * wr[j];
    }
  }
  return y;
}

template <typename T>
DenseGrads<T> dense_backward(const BasicTensor<T>& x, std::size_t out_features,
                             std::span<const T> weights,
                             const BasicTensor<T>& dy) {
  const std::size_t in = x.shape().item_size();
  const std::size_t N = x.shape().n;
  if (dy.shape() != Shape{N, 1, 1, out_features}) {
    throw ShapeError("gradient", "dense upstream " + dy.shape().to_string());
  }
  DenseGrads<T> g;
  g.dx = BasicTensor<T>(x.shape());
  g.dweights.assign(in * out_features, T(0));
  std::vector<double> db(out_features, 0.0);
  for (std::size_t n = 0; n < N; ++n) {
    const T* gy = dy.item(n).data();
    const T* xp = x.item(n).data();
    T* dxp = g.dx.item(n).data();
    for (std::size_t j = 0; j < out_features; ++j) db[j] += gy[j];
    for (std::size_t i = 0; i < in; ++i) {
      const T* wr = weights.data() + i * out_features;
      T* dwr = g.dweights.data() + i * out_features;
      T acc = 0;
      for (std::size_t j = 0; j < out_features; ++j) {
        acc += wr[j] * gy[j];
        dwr[j] += xp[i] * gy[j];
      }
      dxp[i] = acc;
    }
  }
  g.dbias.assign(db.begin(), db.end());
  return g;
}

// ---------------------------------------------------------------------------
// Structural ops

template <typename T>
BasicTensor<T> replicate_channels(const BasicTensor<T>& x, std::size_t factor) {
  if (factor == 0) throw ConfigError("replication factor must be >= 1");
  const Shape s = x.shape();
  BasicTensor<T> y({s.n, s.h, s.w, s.c * factor});
  const std::size_t pixels = s.n * s.h * s.w;
  const T* xd = x.data().data();
  T* yd = y.data().data();
  for (std::size_t i = 0; i < pixels; ++i) {
    const T* src = xd + i * s.c;
    T* dst = yd + i * s.c * factor;
    for (std::size_t r = 0; r < factor; ++r) {
      std::copy(src, src + s.c, dst + r * s.c);
    }
  }
  return y;
}

template <typename T>
BasicTensor<T> replicate_channels_backward(const BasicTensor<T>& dy,
                                           std::size_t factor) {
  if (factor == 0) throw ConfigError("replication factor must be >= 1");
  const Shape s = dy.shape();
  if (s.c % factor != 0) {
    throw ShapeError("channels", "replicated gradient has " +
                                     std::to_string(s.c) +
                                     " channels, not a multiple of " +
                                     std::to_string(factor));
  }
  const std::size_t c = s.c / factor;
  BasicTensor<T> dx({s.n, s.h, s.w, c});
  const std::size_t pixels = s.n * s.h * s.w;
  for (std::size_t i = 0; i < pixels; ++i) {
    const T* src = dy.data().data() + i * s.c;
    T* dst = dx.data().data() + i * c;
    for (std::size_t r = 0; r < factor; ++r) {
      for (std::size_t k = 0; k < c; ++k) dst[k] += src[r * c + k];
    }
  }
  return dx;
}

template <typename T>
BasicTensor<T> add(std::span<const BasicTensor<T>* const> inputs) {
  if (inputs.empty()) throw ConfigError("add needs at least one input");
  BasicTensor<T> y = *inputs[0];
  for (std::size_t k = 1; k < inputs.size(); ++k) {
    if (inputs[k]->shape() != y.shape()) {
      throw ShapeError("add", "input " + std::to_string(k) + " has shape " +
                                  inputs[k]->shape().to_string() + ", expected " +
                                  y.shape().to_string());
    }
    const T* src = inputs[k]->data().data();
    T* dst = y.data().data();
    for (std::size_t i = 0; i < y.size(); ++i) dst[i] += src[i];
  }
  return y;
}

template <typename T>
BasicTensor<T> concat_channels(std::span<const BasicTensor<T>* const> inputs) {
  if (inputs.empty()) throw ConfigError("concat needs at least one input");
  Shape s = inputs[0]->shape();
  std::size_t total = 0;
  for (const auto* t : inputs) {
    const Shape& ts = t->shape();
    if (ts.n != s.n || ts.h != s.h || ts.w != s.w) {
      throw ShapeError("concat", "spatial shape " + ts.to_string() +
                                     " differs from " + s.to_string());
    }
    total += ts.c;
  }
  BasicTensor<T> y({s.n, s.h, s.w, total});
  const std::size_t pixels = s.n * s.h * s.w;
  for (std::size_t i = 0; i < pixels; ++i) {
    T* dst = y.data().data() + i * total;
    for (const auto* t : inputs) {
      const std::size_t c = t->shape().c;
      const T* src = t->data().data() + i * c;
      dst = std::copy(src, src + c, dst);
    }
  }
  return y;
}

template <typename T>
std::vector<BasicTensor<T>> concat_channels_backward(
    const BasicTensor<T>& dy, std::span<const std::size_t> channel_counts) {
  const Shape s = dy.shape();
  std::size_t total = 0;
  for (std::size_t c : channel_counts) total += c;
  if (total != s.c) {
    throw ShapeError("channels", "concat gradient has " + dims_str(s.c, total) +
                                     " channels");
  }
  std::vector<BasicTensor<T>> out;
  for (std::size_t c : channel_counts) out.emplace_back(Shape{s.n, s.h, s.w, c});
  const std::size_t pixels = s.n * s.h * s.w;
  for (std::size_t i = 0; i < pixels; ++i) {
    const T* src = dy.data().data() + i * s.c;
    for (std::size_t k = 0; k < out.size(); ++k) {
      const std::size_t c = channel_counts[k];
      std::copy(src, src + c, out[k].data().data() + i * c);
      src += c;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Softmax

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& logits) {
  const std::size_t N = logits.shape().n;
  const std::size_t K = logits.shape().item_size();
  BasicTensor<T> probs(logits.shape());
  for (std::size_t n = 0; n < N; ++n) {
    const T* z = logits.item(n).data();
    T* p = probs.item(n).data();
    const double zmax = *std::max_element(z, z + K);
    double sum = 0.0;
    for (std::size_t k = 0; k < K; ++k) sum += std::exp(z[k] - zmax);
    for (std::size_t k = 0; k < K; ++k) {
      p[k] = static_cast<T>(std::exp(z[k] - zmax) / sum);
    }
  }
  return probs;
}

template <typename T>
SoftmaxXent<T> softmax_xent(const BasicTensor<T>& logits,
                            std::span<const int> labels) {
  const std::size_t N = logits.shape().n;
  const std::size_t K = logits.shape().item_size();
  if (labels.size() != N) {
    throw ShapeError("batch", "softmax_xent has " + dims_str(N, labels.size()) +
                                  " labels");
  }
  SoftmaxXent<T> out;
  out.probs = BasicTensor<T>(logits.shape());
  double total = 0.0;
  for (std::size_t n = 0; n < N; ++n) {
    const int label = labels[n];
    if (label < 0 || static_cast<std::size_t>(label) >= K) {
      throw DataError("label " + std::to_string(label) + " outside [0," +
                      std::to_string(K) + ")");
    }
    const T* z = logits.item(n).data();
    T* p = out.probs.item(n).data();
    const double zmax = *std::max_element(z, z + K);
    double sum = 0.0;
    for (std::size_t k = 0; k < K; ++k) sum += std::exp(z[k] - zmax);
    const double log_sum = std::log(sum);
    for (std::size_t k = 0; k < K; ++k) {
      p[k] = static_cast<T>(std::exp(z[k] - zmax) / sum);
    }
    total += log_sum - (z[label] - zmax);
  }
  out.loss = N > 0 ? total / static_cast<double>(N) : 0.0;
  return out;
}

template <typename T>
BasicTensor<T> softmax_xent_backward(const BasicTensor<T>& probs,
                                     std::span<const int> labels) {
  const std::size_t N = probs.shape().n;
  const std::size_t K = probs.shape().item_size();
  if (labels.size() != N) {
    throw ShapeError("batch", "softmax_xent has " + dims_str(N, labels.size()) +
                                  " labels");
  }
  BasicTensor<T> d(probs.shape());
  const T inv = static_cast<T>(1.0 / static_cast<double>(N));
  for (std::size_t n = 0; n < N; ++n) {
    const int label = labels[n];
    if (label < 0 || static_cast<std::size_t>(label) >= K) {
      throw DataError("label " + std::to_string(label) + " outside [0," +
                      std::to_string(K) + ")");
    }
    for (std::size_t k = 0; k < K; ++k) {
      const T onehot = static_cast<std::size_t>(label) == k ? T(1) : T(0);
      d.item(n)[k] = (probs.item(n)[k] - onehot) * inv;
    }
  }
  return d;
}

// ---------------------------------------------------------------------------

#define COVIDNET_INSTANTIATE_OPS(T)                                            \
  template BasicTensor<T> conv2d(const BasicTensor<T>&, const ConvParams&,     \
                                 std::span<const T>, std::span<const T>);      \
  template ConvGrads<T> conv2d_backward(const BasicTensor<T>&,                 \
                                        const ConvParams&, std::span<const T>, \
                                        const BasicTensor<T>&);                \
  template struct BatchNormParams<T>;                                          \
  template BasicTensor<T> batchnorm_forward(                                   \
      const BasicTensor<T>&, const BatchNormParams<T>&, Mode,                  \
      BatchNormCache<T>*);                                                     \
  template void update_running_stats(BatchNormParams<T>&,                      \
                                     const BatchNormCache<T>&);                \
  template BasicTensor<T> batchnorm(const BasicTensor<T>&,                     \
                                    BatchNormParams<T>&, Mode);                \
  template BatchNormGrads<T> batchnorm_backward(                               \
      const BasicTensor<T>&, std::span<const T>, const BatchNormCache<T>&);    \
  template BasicTensor<T> relu(const BasicTensor<T>&);                         \
  template BasicTensor<T> relu_backward(const BasicTensor<T>&,                 \
                                        const BasicTensor<T>&);                \
  template BasicTensor<T> global_avg_pool(const BasicTensor<T>&);              \
  template BasicTensor<T> global_avg_pool_backward(const Shape&,               \
                                                   const BasicTensor<T>&);     \
  template BasicTensor<T> max_pool(const BasicTensor<T>&,                      \
                                   const MaxPoolParams&,                       \
                                   std::vector<std::size_t>*);                 \
  template BasicTensor<T> max_pool_backward(                                   \
      const Shape&, std::span<const std::size_t>, const BasicTensor<T>&);      \
  template BasicTensor<T> dense(const BasicTensor<T>&, std::size_t,            \
                                std::span<const T>, std::span<const T>);       \
  template DenseGrads<T> dense_backward(const BasicTensor<T>&, std::size_t,    \
                                        std::span<const T>,                    \
                                        const BasicTensor<T>&);                \
  template BasicTensor<T> replicate_channels(const BasicTensor<T>&,            \
                                             std::size_t);                     \
  template BasicTensor<T> replicate_channels_backward(const BasicTensor<T>&,   \
                                                      std::size_t);            \
  template BasicTensor<T> add(std::span<const BasicTensor<T>* const>);         \
  template BasicTensor<T> concat_channels(                                     \
      std::span<const BasicTensor<T>* const>);                                 \
  template std::vector<BasicTensor<T>> concat_channels_backward(               \
      const BasicTensor<T>&, std::span<const std::size_t>);                    \
  template BasicTensor<T> softmax(const BasicTensor<T>&);                      \
  template SoftmaxXent<T> softmax_xent(const BasicTensor<T>&,                  \
                                       std::span<const int>);                  \
  template BasicTensor<T> softmax_xent_backward(const BasicTensor<T>&,         \
                                                std::span<const int>);

COVIDNET_INSTANTIATE_OPS(float)
COVIDNET_INSTANTIATE_OPS(double)

#undef COVIDNET_INSTANTIATE_OPS

}  // namespace covidnet
