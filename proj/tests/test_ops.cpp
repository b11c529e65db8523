#include <doctest.h>

#include <cmath>

#include "covidnet/errors.hpp"
#include "covidnet/ops.hpp"
#include "support.hpp"

using namespace covidnet;
using covidnet::testing::random_tensor;

namespace {

/// Direct convolution in float64, written independently of the library.
std::vector<double> naive_conv(const BasicTensor<double>& x, const ConvParams& p,
                               const std::vector<double>& w, const std::vector<double>& b,
                               Shape& out_shape) {
  const Shape in = x.shape();
  std::size_t oh, ow;
  long pt = 0, pl = 0;
  if (p.padding == Padding::kSame) {
    oh = (in.h + p.stride_h - 1) / p.stride_h;
    ow = (in.w + p.stride_w - 1) / p.stride_w;
    pt = static_cast<long>((p.kernel_h - 1) / 2);
    pl = static_cast<long>((p.kernel_w - 1) / 2);
  } else {
    oh = (in.h - p.kernel_h) / p.stride_h + 1;
    ow = (in.w - p.kernel_w) / p.stride_w + 1;
  }
  out_shape = {in.n, oh, ow, p.out_channels};
  const std::size_t cin_g = p.in_channels / p.groups;
  const std::size_t cout_g = p.out_channels / p.groups;
  std::vector<double> y(out_shape.size(), 0.0);
  for (std::size_t n = 0; n < in.n; ++n)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j)
        for (std::size_t co = 0; co < p.out_channels; ++co) {
          const std::size_t grp = co / cout_g;
          double s = b.empty() ? 0.0 : b[co];
          for (std::size_t ki = 0; ki < p.kernel_h; ++ki)
            for (std::size_t kj = 0; kj < p.kernel_w; ++kj) {
              const long yy = static_cast<long>(i * p.stride_h + ki) - pt;
              const long xx = static_cast<long>(j * p.stride_w + kj) - pl;
              if (yy < 0 || xx < 0 || yy >= static_cast<long>(in.h) || xx >= static_cast<long>(in.w)) continue;
              for (std::size_t ci = 0; ci < cin_g; ++ci) {
                const double xv = x.at(n, static_cast<std::size_t>(yy), static_cast<std::size_t>(xx),
                                       grp * cin_g + ci);
                s += xv * w[((ki * p.kernel_w + kj) * cin_g + ci) * p.out_channels + co];
              }
            }
          y[((n * oh + i) * ow + j) * p.out_channels + co] = s;
        }
  return y;
}

}  // namespace

TEST_CASE("conv2d matches a direct float64 convolution") {
  Rng rng(3);
  struct Case {
    std::size_t kh, kw, s, g, cin, cout;
    Padding pad;
    bool bias;
    Shape in;
  };
  const Case cases[] = {
      {3, 3, 1, 1, 2, 3, Padding::kSame, true, {2, 5, 4, 2}},
      {3, 3, 2, 1, 2, 3, Padding::kSame, false, {1, 7, 6, 2}},
      {2, 4, 2, 1, 3, 2, Padding::kSame, true, {1, 6, 7, 3}},
      {3, 3, 1, 4, 4, 4, Padding::kSame, true, {2, 4, 4, 4}},
      {3, 3, 2, 4, 4, 4, Padding::kSame, false, {1, 5, 5, 4}},
      {1, 1, 1, 1, 5, 3, Padding::kSame, true, {2, 3, 3, 5}},
      {3, 2, 1, 2, 4, 6, Padding::kValid, true, {1, 5, 5, 4}},
  };
  for (const Case& c : cases) {
    ConvParams p;
    p.kernel_h = c.kh;
    p.kernel_w = c.kw;
    p.stride_h = p.stride_w = c.s;
    p.groups = c.g;
    p.in_channels = c.cin;
    p.out_channels = c.cout;
    p.padding = c.pad;
    p.has_bias = c.bias;
    const auto x = random_tensor<double>(c.in, rng);
    std::vector<double> w(p.weight_count()), b(c.bias ? c.cout : 0);
    for (double& v : w) v = rng.uniform(-1, 1);
    for (double& v : b) v = rng.uniform(-1, 1);
    Shape expect_shape;
    const auto expect = naive_conv(x, p, w, b, expect_shape);
    const auto y = conv2d(x, p, std::span<const double>(w), std::span<const double>(b));
    REQUIRE(y.shape() == expect_shape);
    for (std::size_t i = 0; i < expect.size(); ++i) CHECK(y.data()[i] == doctest::Approx(expect[i]).epsilon(1e-12));
  }
}

TEST_CASE("same padding puts the odd pixel on the trailing side") {
  ConvParams p;
  p.kernel_h = p.kernel_w = 4;
  p.stride_h = p.stride_w = 2;
  CHECK(p.pad_top() == 1);  // total 3: 1 leading, 2 trailing
  CHECK(p.output_shape({1, 7, 8, 1}) == Shape{1, 4, 4, 1});
  p.kernel_h = p.kernel_w = 3;
  CHECK(p.pad_left() == 1);
}

TEST_CASE("conv rejects mismatched channels and bad groups") {
  ConvParams p;
  p.in_channels = 3;
  p.out_channels = 4;
  p.groups = 2;
  CHECK_THROWS_AS(p.validate(), ConfigError);
  p.groups = 1;
  CHECK_THROWS_AS(p.output_shape({1, 4, 4, 2}), ShapeError);
}

TEST_CASE("deterministic and parallel execution agree") {
  Rng rng(5);
  ConvParams p;
  p.kernel_h = p.kernel_w = 3;
  p.in_channels = 4;
  p.out_channels = 8;
  const auto x = random_tensor<float>({4, 9, 9, 4}, rng);
  std::vector<float> w(p.weight_count()), b(8);
  for (float& v : w) v = static_cast<float>(rng.uniform(-1, 1));
  set_execution_mode(ExecutionMode::kDeterministic);
  const auto a = conv2d(x, p, std::span<const float>(w), std::span<const float>(b));
  set_execution_mode(ExecutionMode::kParallel, 4);
  const auto c = conv2d(x, p, std::span<const float>(w), std::span<const float>(b));
  set_execution_mode(ExecutionMode::kDeterministic);
  CHECK(a == c);  // forward partitions by output, no cross-thread sums
}

TEST_CASE("batchnorm statistics and running update") {
  // Channel values 1, 2, 3, 6: mean 3, biased var 3.5, unbiased var 14/3.
  BasicTensor<double> x({1, 2, 2, 1}, std::vector<double>{1, 2, 3, 6});
  auto bn = BatchNormParams<double>::identity(1);
  bn.epsilon = 0.0;
  const auto y = batchnorm(x, bn, Mode::kTrain);
  CHECK(y.data()[0] == doctest::Approx(-2.0 / std::sqrt(3.5)));
  CHECK(bn.running_mean[0] == doctest::Approx(0.1 * 3.0));
  CHECK(bn.running_var[0] == doctest::Approx(0.9 + 0.1 * 14.0 / 3.0));
  // Inference uses the running statistics.
  const auto z = batchnorm_forward(x, bn, Mode::kInfer);
  CHECK(z.data()[3] == doctest::Approx((6.0 - 0.3) / std::sqrt(bn.running_var[0])));
}

TEST_CASE("batchnorm in train mode rejects a single value per channel") {
  BasicTensor<float> x({1, 1, 1, 2}, std::vector<float>{1, 2});
  auto bn = BatchNormParams<float>::identity(2);
  CHECK_THROWS_AS(batchnorm_forward(x, bn, Mode::kTrain), ConfigError);
}

TEST_CASE("relu subgradient at zero is zero") {
  BasicTensor<double> x({1, 1, 1, 3}, std::vector<double>{-1, 0, 2});
  BasicTensor<double> dy({1, 1, 1, 3}, 1.0);
  const auto dx = relu_backward(x, dy);
  CHECK(dx.data()[0] == 0.0);
  CHECK(dx.data()[1] == 0.0);
  CHECK(dx.data()[2] == 1.0);
}

TEST_CASE("max pool, replicate, concat and softmax basics") {
  BasicTensor<double> x({1, 3, 3, 1}, std::vector<double>{1, 5, 2, 0, 3, 4, 9, 8, 7});
  const auto m = max_pool(x, MaxPoolParams{});
  CHECK(m.shape() == Shape{1, 2, 2, 1});
  CHECK(m.data()[0] == 5.0);
  CHECK(m.data()[3] == 8.0);

  BasicTensor<double> r({1, 1, 1, 2}, std::vector<double>{1, 2});
  const auto rep = replicate_channels(r, 3);
  CHECK(std::vector<double>(rep.data().begin(), rep.data().end()) ==
        std::vector<double>{1, 2, 1, 2, 1, 2});

  const auto sm = softmax(BasicTensor<double>({1, 1, 1, 3}, std::vector<double>{1000, 1000, 1000}));
  CHECK(sm.data()[0] == doctest::Approx(1.0 / 3.0));
  const int bad[] = {3};
  CHECK_THROWS_AS(softmax_xent(sm, bad), DataError);
}

TEST_CASE("dense is an affine map of the flattened item") {
  BasicTensor<double> x({1, 1, 2, 1}, std::vector<double>{1, 2});
  const std::vector<double> w{1, 2, 3, 4, 5, 6};  // (in=2, out=3)
  const std::vector<double> b{0.5, 0, -1};
  const auto y = dense(x, 3, std::span<const double>(w), std::span<const double>(b));
  CHECK(y.data()[0] == doctest::Approx(1 * 1 + 2 * 4 + 0.5));
  CHECK(y.data()[2] == doctest::Approx(1 * 3 + 2 * 6 - 1));
}
