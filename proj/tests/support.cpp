#include "support.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>

#include <unistd.h>

#include <nlohmann/json.hpp>

#include "covidnet/network.hpp"
#include "covidnet/ops.hpp"
#include "covidnet/synthetic.hpp"

namespace covidnet::testing {

namespace {

using nlohmann::json;

json node(const std::string& name, const std::string& op, json attrs,
          std::vector<std::string> inputs) {
  return {{"name", name}, {"op", op}, {"attrs", std::move(attrs)}, {"inputs", inputs}};
}

std::vector<double> flatten(const BasicTensor<double>& t) {
  return {t.data().begin(), t.data().end()};
}

/// objective = sum(w * y) so dy = w.
double weighted_sum(const BasicTensor<double>& y, const BasicTensor<double>& w) {
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += y.data()[i] * w.data()[i];
  return s;
}

}  // namespace

ArchitectureGraph random_tiny_dag(std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0xDA6));
  const std::size_t h = 5 + rng.below(4);
  const std::size_t w = 5 + rng.below(4);
  const std::size_t c = 1 + rng.below(3);
  const std::size_t f = 4 + rng.below(3);
  const std::size_t proj = 1 + rng.below(f - 1);
  json nodes = json::array();
  nodes.push_back(node("c1", "conv",
                       {{"filters", f}, {"kernel", 3}, {"stride", 1 + rng.below(2)},
                        {"bias", rng.bernoulli(0.5)}},
                       {"input"}));
  nodes.push_back(node("bn1", "batchnorm", json::object(), {"c1"}));
  nodes.push_back(node("r1", "relu", json::object(), {"bn1"}));
  nodes.push_back(node("mp", "max_pool", {{"kernel", 3}, {"stride", 1}}, {"r1"}));
  nodes.push_back(node("b1", "prpe", {{"c_proj", proj}, {"r", 1 + rng.below(3)}, {"c_out", f}},
                       {"mp"}));
  nodes.push_back(node("skip", "add", json::object(), {"b1", "mp"}));
  nodes.push_back(node("dw", "conv",
                       {{"depthwise", true}, {"kernel", json::array({3, 1 + 2 * rng.below(2)})}},
                       {"skip"}));
  nodes.push_back(node("b2", "prpe_s",
                       {{"c_proj", 1 + rng.below(f - 1)}, {"r", 1 + rng.below(2)}, {"c_out", 3}},
                       {"dw"}));
  nodes.push_back(node("rep", "replicate", {{"factor", 2}}, {"b2"}));
  nodes.push_back(node("pw", "conv", {{"filters", 2}, {"kernel", 1}, {"stride", 2}},
                       {"skip"}));
  nodes.push_back(node("cat", "concat", json::object(), {"rep", "pw"}));
  nodes.push_back(node("bn2", "batchnorm", json::object(), {"cat"}));
  nodes.push_back(node("gap", "global_avg_pool", json::object(), {"bn2"}));
  nodes.push_back(node("fc", "dense", {{"units", 3}}, {"gap"}));
  nodes.push_back(node("head", "softmax_head", json::object(), {"fc"}));
  const json config = {{"input_shape", {h, w, c}}, {"nodes", nodes}, {"output", "head"}};
  return parse_architecture_config(config.dump());
}

ArchitectureGraph prpe_probe_graph(bool strided, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x9E9E));
  const std::size_t c_in = 3 + rng.below(3);
  const std::size_t side = 4 + rng.below(3);
  json nodes = json::array();
  nodes.push_back(node("block", strided ? "prpe_s" : "prpe",
                       {{"c_proj", 1 + rng.below(c_in - 1)}, {"r", 1 + rng.below(3)},
                        {"c_out", 2 + rng.below(4)}},
                       {"input"}));
  nodes.push_back(node("gap", "global_avg_pool", json::object(), {"block"}));
  nodes.push_back(node("fc", "dense", {{"units", 3}}, {"gap"}));
  nodes.push_back(node("head", "softmax_head", json::object(), {"fc"}));
  const json config = {{"input_shape", {side, side, c_in}}, {"nodes", nodes}, {"output", "head"}};
  return parse_architecture_config(config.dump());
}

GradCheckReport check_graph_gradients(const ArchitectureGraph& graph, std::uint64_t seed,
                                      std::size_t batch) {
  Rng rng(derive_seed(seed, 0x6C));
  Weights<double> weights = Weights<double>::initialize(graph, seed);
  // Non-trivial batch-norm affine parameters.
  for (auto& e : weights.entries()) {
    if (e.name.ends_with(":gamma") || e.name.ends_with(":beta") || e.name.ends_with(":bias")) {
      for (double& v : e.param.values) v = rng.uniform(-0.5, 1.5);
    }
  }
  Shape in = graph.input_shape();
  in.n = batch;
  BasicTensor<double> x = random_tensor<double>(in, rng);
  std::vector<int> labels(batch);
  for (int& l : labels) l = static_cast<int>(rng.below(graph.num_classes()));

  const auto fwd = graph_forward(graph, weights, x, Mode::kTrain, true);
  const auto grads = graph_backward(graph, weights, fwd, labels);

  // Copies in float64 the objective reads back into the weights.
  std::vector<std::vector<double>> store;
  std::vector<std::size_t> entry_of;
  for (std::size_t k = 0; k < weights.entries().size(); ++k) {
    if (!weights.entries()[k].trainable) continue;
    store.push_back(weights.entries()[k].param.values);
    entry_of.push_back(k);
  }
  std::vector<double> input = flatten(x);
  std::vector<GradCheckVariable> vars;
  for (std::size_t i = 0; i < store.size(); ++i) {
    vars.push_back({weights.entries()[entry_of[i]].name, &store[i], grads.params[entry_of[i]]});
  }
  vars.push_back({"input", &input, flatten(grads.input)});

  auto objective = [&]() {
    Weights<double> w = weights;
    for (std::size_t i = 0; i < store.size(); ++i) {
      w.entries()[entry_of[i]].param.values = store[i];
    }
    const BasicTensor<double> xi(in, input);
    const auto f = graph_forward(graph, w, xi, Mode::kTrain, false);
    return softmax_xent(f.logits, labels).loss;
  };
  GradCheckOptions opts;
  opts.seed = seed;
  return grad_check(vars, objective, opts);
}

std::vector<std::pair<std::string, GradCheckReport>> check_primitives(std::uint64_t seed) {
  std::vector<std::pair<std::string, GradCheckReport>> out;
  Rng rng(derive_seed(seed, 0x7219));
  GradCheckOptions opts;
  opts.seed = seed;

  auto conv_case = [&](const std::string& name, ConvParams p, Shape in) {
    p.validate();
    BasicTensor<double> x = random_tensor<double>(in, rng);
    std::vector<double> wts(p.weight_count());
    for (double& v : wts) v = rng.uniform(-1, 1);
    std::vector<double> bias(p.has_bias ? p.out_channels : 0);
    for (double& v : bias) v = rng.uniform(-1, 1);
    const Shape os = p.output_shape(in);
    const BasicTensor<double> w = random_tensor<double>(os, rng);
    const auto g = conv2d_backward(x, p, std::span<const double>(wts), w);
    std::vector<double> xv = flatten(x);
    std::vector<GradCheckVariable> vars{{"x", &xv, flatten(g.dx)}, {"kernel", &wts, g.dweights}};
    if (p.has_bias) vars.push_back({"bias", &bias, g.dbias});
    out.emplace_back(name, grad_check(vars, [&] {
      return weighted_sum(conv2d(BasicTensor<double>(in, xv), p, std::span<const double>(wts),
                                 std::span<const double>(bias)),
                          w);
    }, opts));
  };
  ConvParams p;
  p.kernel_h = p.kernel_w = 3;
  p.in_channels = 3;
  p.out_channels = 4;
  conv_case("conv3x3", p, {2, 5, 6, 3});
  p.stride_h = p.stride_w = 2;
  conv_case("conv3x3_stride2", p, {2, 6, 5, 3});
  ConvParams g;
  g.kernel_h = 3;
  g.kernel_w = 2;
  g.in_channels = 4;
  g.out_channels = 6;
  g.groups = 2;
  g.padding = Padding::kValid;
  g.has_bias = false;
  conv_case("grouped_valid", g, {1, 5, 5, 4});
  ConvParams dw;
  dw.kernel_h = dw.kernel_w = 3;
  dw.in_channels = dw.out_channels = dw.groups = 3;
  dw.stride_h = dw.stride_w = 2;
  conv_case("depthwise_stride2", dw, {2, 5, 5, 3});
  ConvParams pw;
  pw.in_channels = 5;
  pw.out_channels = 2;
  conv_case("pointwise", pw, {2, 3, 3, 5});

  for (Mode mode : {Mode::kTrain, Mode::kInfer}) {
    const Shape in{3, 2, 3, 4};
    BasicTensor<double> x = random_tensor<double>(in, rng);
    auto bn = BatchNormParams<double>::identity(4);
    for (double& v : bn.gamma) v = rng.uniform(0.5, 1.5);
    for (double& v : bn.beta) v = rng.uniform(-0.5, 0.5);
    for (double& v : bn.running_mean) v = rng.uniform(-0.5, 0.5);
    for (double& v : bn.running_var) v = rng.uniform(0.5, 1.5);
    const BasicTensor<double> w = random_tensor<double>(in, rng);
    BatchNormCache<double> cache;
    batchnorm_forward(x, bn, mode, &cache);
    const auto gr = batchnorm_backward(w, std::span<const double>(bn.gamma), cache);
    std::vector<double> xv = flatten(x);
    std::vector<GradCheckVariable> vars{
        {"x", &xv, flatten(gr.dx)}, {"gamma", &bn.gamma, gr.dgamma}, {"beta", &bn.beta, gr.dbeta}};
    out.emplace_back(mode == Mode::kTrain ? "batchnorm_train" : "batchnorm_infer",
                     grad_check(vars, [&] {
                       return weighted_sum(batchnorm_forward(BasicTensor<double>(in, xv), bn, mode), w);
                     }, opts));
  }

  auto unary = [&](const std::string& name, Shape in, auto fwd, auto bwd) {
    BasicTensor<double> x = random_tensor<double>(in, rng);
    const auto y = fwd(x);
    const BasicTensor<double> w = random_tensor<double>(y.shape(), rng);
    std::vector<double> xv = flatten(x);
    std::vector<GradCheckVariable> vars{{"x", &xv, flatten(bwd(x, w))}};
    out.emplace_back(name, grad_check(vars, [&] {
      return weighted_sum(fwd(BasicTensor<double>(in, xv)), w);
    }, opts));
  };
  unary("relu", {2, 3, 3, 2}, [](const auto& x) { return relu(x); },
        [](const auto& x, const auto& dy) { return relu_backward(x, dy); });
  unary("global_avg_pool", {2, 3, 4, 3}, [](const auto& x) { return global_avg_pool(x); },
        [](const auto& x, const auto& dy) { return global_avg_pool_backward(x.shape(), dy); });
  unary("max_pool", {2, 5, 6, 2}, [](const auto& x) { return max_pool(x, MaxPoolParams{}); },
        [](const auto& x, const auto& dy) {
          std::vector<std::size_t> am;
          max_pool(x, MaxPoolParams{}, &am);
          return max_pool_backward(x.shape(), am, dy);
        });
  unary("replicate", {2, 2, 2, 3}, [](const auto& x) { return replicate_channels(x, 3); },
        [](const auto&, const auto& dy) { return replicate_channels_backward(dy, 3); });

  {  // dense
    const Shape in{3, 2, 1, 3};
    const std::size_t units = 4;
    BasicTensor<double> x = random_tensor<double>(in, rng);
    std::vector<double> wts(in.item_size() * units), bias(units);
    for (double& v : wts) v = rng.uniform(-1, 1);
    for (double& v : bias) v = rng.uniform(-1, 1);
    const BasicTensor<double> w = random_tensor<double>({3, 1, 1, units}, rng);
    const auto gr = dense_backward(x, units, std::span<const double>(wts), w);
    std::vector<double> xv = flatten(x);
    std::vector<GradCheckVariable> vars{
        {"x", &xv, flatten(gr.dx)}, {"kernel", &wts, gr.dweights}, {"bias", &bias, gr.dbias}};
    out.emplace_back("dense", grad_check(vars, [&] {
      return weighted_sum(dense(BasicTensor<double>(in, xv), units, std::span<const double>(wts),
                                std::span<const double>(bias)),
                          w);
    }, opts));
  }
  {  // add and concat
    const Shape a_shape{2, 3, 2, 2};
    const Shape b_shape{2, 3, 2, 3};
    BasicTensor<double> a = random_tensor<double>(a_shape, rng);
    BasicTensor<double> b = random_tensor<double>(a_shape, rng);
    BasicTensor<double> c = random_tensor<double>(b_shape, rng);
    std::vector<double> av = flatten(a), bv = flatten(b), cv = flatten(c);
    const BasicTensor<double> wa = random_tensor<double>(a_shape, rng);
    // d/da sum(w * (a + b)) = w for each addend.
    std::vector<GradCheckVariable> add_vars{{"a", &av, flatten(wa)}, {"b", &bv, flatten(wa)}};
    out.emplace_back("add", grad_check(add_vars, [&] {
      const BasicTensor<double> x(a_shape, av), y(a_shape, bv);
      const BasicTensor<double>* ins[] = {&x, &y};
      return weighted_sum(add<double>(ins), wa);
    }, opts));
    const BasicTensor<double> wc = random_tensor<double>({2, 3, 2, 5}, rng);
    const std::size_t counts[] = {2, 3};
    const auto parts = concat_channels_backward<double>(wc, counts);
    std::vector<GradCheckVariable> cat_vars{{"a", &av, flatten(parts[0])},
                                            {"c", &cv, flatten(parts[1])}};
    out.emplace_back("concat", grad_check(cat_vars, [&] {
      const BasicTensor<double> x(a_shape, av), y(b_shape, cv);
      const BasicTensor<double>* ins[] = {&x, &y};
      return weighted_sum(concat_channels<double>(ins), wc);
    }, opts));
  }
  {  // softmax cross-entropy
    const Shape in{4, 1, 1, 3};
    BasicTensor<double> z = random_tensor<double>(in, rng, -2, 2);
    std::vector<int> labels(4);
    for (int& l : labels) l = static_cast<int>(rng.below(3));
    const auto sx = softmax_xent(z, labels);
    std::vector<double> zv = flatten(z);
    std::vector<GradCheckVariable> vars{{"logits", &zv, flatten(softmax_xent_backward(sx.probs, labels))}};
    out.emplace_back("softmax_xent", grad_check(vars, [&] {
      return softmax_xent(BasicTensor<double>(in, zv), labels).loss;
    }, opts));
  }
  return out;
}

std::filesystem::path fresh_dir(const std::string& name) {
  static std::atomic<int> counter{0};
  const auto dir = std::filesystem::temp_directory_path() /
                   ("covidnet_test_" + name + "_" + std::to_string(::getpid()) + "_" +
                    std::to_string(counter++));
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

std::vector<ClassScores> QuadrantStub::predict(std::span<const Image> images) const {
  std::vector<ClassScores> out;
  for (const Image& img : images) {
    double s = 0.0;
    const std::size_t h = img.height / 2, w = img.width / 2;
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) s += img.at(y, x);
    }
    s /= static_cast<double>(h * w);
    out.push_back({s, (1.0 - s) / 2.0, (1.0 - s) / 2.0});
  }
  return out;
}

std::vector<ClassScores> UniformStub::predict(std::span<const Image> images) const {
  return std::vector<ClassScores>(images.size(), ClassScores{0.6, 0.3, 0.1});
}

std::vector<ClassScores> LookupStub::predict(std::span<const Image> images) const {
  std::vector<ClassScores> out;
  for (const Image& img : images) {
    const auto k = static_cast<std::size_t>(std::lround(img.pixels.at(0) * 255.0f));
    ClassScores s{0.1, 0.1, 0.1};
    s[static_cast<std::size_t>(labels_.at(k))] = 0.8;
    out.push_back(s);
  }
  return out;
}

BodyFixture disk_and_table_fixture(std::size_t size) {
  BodyFixture f;
  f.image = Image(size, size);
  f.body.assign(size * size, 0);
  f.table.assign(size * size, 0);
  const double c = (static_cast<double>(size) - 1.0) / 2.0;
  const double r = 0.35 * static_cast<double>(size);
  const double hole = 0.08 * static_cast<double>(size);
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const double dx = static_cast<double>(x) - c;
      const double dy = static_cast<double>(y) - (c - 0.08 * static_cast<double>(size));
      const double d = std::sqrt(dx * dx + dy * dy);
      const std::size_t p = y * size + x;
      if (d <= r) {
        f.body[p] = 1;
        // Textured tissue with a dark interior hole.
        f.image.pixels[p] = d <= hole ? 0.05f
                                      : static_cast<float>(0.5 + 0.3 * std::sin(0.7 * x) * std::cos(0.5 * y));
      } else if (y >= static_cast<std::size_t>(0.88 * size) && y < static_cast<std::size_t>(0.94 * size) &&
                 x >= size / 10 && x < size - size / 10) {
        f.table[p] = 1;
        f.image.pixels[p] = 0.9f;
      }
    }
  }
  return f;
}

}  // namespace covidnet::testing

namespace covidnet::testing {

std::vector<ImageRecord> synthetic_manifest(const std::filesystem::path& dir,
                                            std::size_t patients_per_class,
                                            std::size_t slices, std::size_t resolution,
                                            std::uint64_t seed) {
  SyntheticConfig cfg;
  cfg.patients_per_class = {patients_per_class, patients_per_class, patients_per_class};
  cfg.slices_per_patient = slices;
  cfg.resolution = resolution;
  cfg.seed = seed;
  const auto ds = generate_synthetic_dataset(dir, cfg);
  auto built = build_manifest(read_metadata(ds.metadata), dir);
  return patient_level_split(std::move(built.records), {}, seed).records;
}

ArchitectureGraph mini_graph() {
  return load_architecture_config(resolve_config_path("covidnet-ct-mini.json"));
}

}  // namespace covidnet::testing
