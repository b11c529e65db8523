#include "covidnet/network.hpp"

#include <cmath>

#include "covidnet/random.hpp"

namespace covidnet {

std::string param_name(const std::string& node, std::string_view role) {
  return node + ":" + std::string(role);
}

namespace {

template <typename T>
using Entry = typename Weights<T>::Entry;

template <typename T>
Entry<T> make_entry(const Node& node, std::size_t index, std::string_view role,
                    std::vector<std::uint32_t> dims, bool trainable) {
  Entry<T> e;
  e.name = param_name(node.name, role);
  e.node = index;
  e.trainable = trainable;
  std::size_t count = 1;
  for (auto d : dims) count *= d;
  e.param.dims = std::move(dims);
  e.param.values.assign(count, T(0));
  return e;
}

/// Parameter layout the graph requires, zero-filled.
template <typename T>
std::vector<Entry<T>> layout(const ArchitectureGraph& graph) {
  std::vector<Entry<T>> out;
  const auto& nodes = graph.nodes();
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    const Node& n = nodes[i];
    switch (n.op) {
      case OpKind::kConv: {
        const ConvParams& p = n.conv();
        out.push_back(make_entry<T>(n, i, "kernel", p.weight_dims(), true));
        if (p.has_bias) {
          out.push_back(make_entry<T>(
              n, i, "bias", {static_cast<std::uint32_t>(p.out_channels)}, true));
        }
        break;
      }
      case OpKind::kDense: {
        const DenseAttrs& a = n.dense();
        out.push_back(make_entry<T>(
            n, i, "kernel",
            {static_cast<std::uint32_t>(a.in_features),
             static_cast<std::uint32_t>(a.units)},
            true));
        if (a.has_bias) {
          out.push_back(make_entry<T>(
              n, i, "bias", {static_cast<std::uint32_t>(a.units)}, true));
        }
        break;
      }
      case OpKind::kBatchNorm: {
        const auto c = static_cast<std::uint32_t>(n.shape.c);
        out.push_back(make_entry<T>(n, i, "gamma", {c}, true));
        out.push_back(make_entry<T>(n, i, "beta", {c}, true));
        out.push_back(make_entry<T>(n, i, "running_mean", {c}, false));
        out.push_back(make_entry<T>(n, i, "running_var", {c}, false));
        break;
      }
      default:
        break;
    }
  }
  return out;
}

bool ends_with(std::string_view s, std::string_view suffix) {
  return s.size() >= suffix.size() &&
         s.substr(s.size() - suffix.size()) == suffix;
}

}  // namespace

template <typename T>
Weights<T> Weights<T>::zeros(const ArchitectureGraph& graph) {
  Weights w;
  for (auto& e : layout<T>(graph)) w.add(std::move(e));
  return w;
}

template <typename T>
Weights<T> Weights<T>::initialize(const ArchitectureGraph& graph,
                                  std::uint64_t seed) {
  Weights w = zeros(graph);
  for (std::size_t k = 0; k < w.entries_.size(); ++k) {
    Entry& e = w.entries_[k];
    const Node& node = graph.node(e.node);
    if (ends_with(e.name, ":kernel")) {
      std::size_t fan_in = 1;
      if (node.op == OpKind::kConv) {
        const ConvParams& p = node.conv();
        fan_in = p.kernel_h * p.kernel_w * (p.in_channels / p.groups);
      } else {
        fan_in = node.dense().in_features;
      }
      const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
      Rng rng(derive_seed(seed, k));
      for (T& v : e.param.values) v = static_cast<T>(stddev * rng.normal());
    } else if (ends_with(e.name, ":gamma") || ends_with(e.name, ":running_var")) {
      std::fill(e.param.values.begin(), e.param.values.end(), T(1));
    }
  }
  return w;
}

template <typename T>
void Weights<T>::add(Entry entry) {
  if (index_.count(entry.name)) return;
  index_.emplace(entry.name, entries_.size());
  entries_.push_back(std::move(entry));
}

template <typename T>
const typename Weights<T>::Entry* Weights<T>::find(std::string_view name) const {
  auto it = index_.find(std::string(name));
  return it == index_.end() ? nullptr : &entries_[it->second];
}

template <typename T>
typename Weights<T>::Entry* Weights<T>::find(std::string_view name) {
  auto it = index_.find(std::string(name));
  return it == index_.end() ? nullptr : &entries_[it->second];
}

template <typename T>
std::span<const T> Weights<T>::values(const std::string& node,
                                      std::string_view role) const {
  const Entry* e = find(param_name(node, role));
  if (!e) {
    throw CheckpointError("missing weights for node '" + node + "' (" +
                          std::string(role) + ")");
  }
  return e->param.values;
}

template <typename T>
std::size_t Weights<T>::trainable_count() const {
  std::size_t n = 0;
  for (const Entry& e : entries_) {
    if (e.trainable) n += e.param.size();
  }
  return n;
}

namespace {

template <typename T>
BatchNormParams<T> bn_params(const Node& node, const Weights<T>& w) {
  BatchNormParams<T> p;
  p.channels = node.shape.c;
  p.epsilon = node.batchnorm().epsilon;
  p.momentum = node.batchnorm().momentum;
  auto copy = [&](std::string_view role) {
    auto v = w.values(node.name, role);
    return std::vector<T>(v.begin(), v.end());
  };
  p.gamma = copy("gamma");
  p.beta = copy("beta");
  p.running_mean = copy("running_mean");
  p.running_var = copy("running_var");
  return p;
}

template <typename T>
void accumulate(BasicTensor<T>& into, BasicTensor<T>&& grad) {
  if (into.size() == 0) {
    into = std::move(grad);
    return;
  }
  T* a = into.data().data();
  const T* b = grad.data().data();
  for (std::size_t i = 0; i < into.size(); ++i) a[i] += b[i];
}

}  // namespace

template <typename T>
ForwardResult<T> graph_forward(const ArchitectureGraph& graph,
                               const Weights<T>& weights,
                               const BasicTensor<T>& x, Mode mode,
                               bool keep_cache) {
  const Shape want = graph.input_shape();
  const Shape got = x.shape();
  if (got.h != want.h || got.w != want.w || got.c != want.c) {
    throw ShapeError("input", "graph expects items of " + want.to_string() +
                                  ", got " + got.to_string());
  }
  const auto& nodes = graph.nodes();
  const std::size_t N = got.n;

  std::vector<std::size_t> last_use(nodes.size(), 0);
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    for (std::size_t in : nodes[i].inputs) last_use[in] = i;
  }

  ForwardResult<T> result;
  ActivationCache<T>& cache = result.cache;
  cache.graph = &graph;
  cache.mode = mode;
  cache.batch = N;
  cache.outputs.resize(nodes.size());
  cache.batchnorm.resize(nodes.size());
  cache.argmax.resize(nodes.size());

  for (std::size_t i = 0; i < nodes.size(); ++i) {
    const Node& node = nodes[i];
    auto input = [&](std::size_t k) -> const BasicTensor<T>& {
      return cache.outputs[node.inputs[k]];
    };
    BasicTensor<T> out;
    switch (node.op) {
      case OpKind::kInput:
        out = x;
        break;
      case OpKind::kConv: {
        const ConvParams& p = node.conv();
        out = conv2d(input(0), p, weights.values(node.name, "kernel"),
                     p.has_bias ? weights.values(node.name, "bias")
                                : std::span<const T>());
        break;
      }
      case OpKind::kBatchNorm:
        out = batchnorm_forward(input(0), bn_params(node, weights), mode,
                                &cache.batchnorm[i]);
        if (!keep_cache) cache.batchnorm[i].xhat = BasicTensor<T>();
        break;
      case OpKind::kRelu:
        out = relu(input(0));
        break;
      case OpKind::kDense: {
        const DenseAttrs& a = node.dense();
        out = dense(input(0), a.units, weights.values(node.name, "kernel"),
                    a.has_bias ? weights.values(node.name, "bias")
                               : std::span<const T>());
        break;
      }
      case OpKind::kGlobalAvgPool:
        out = global_avg_pool(input(0));
        break;
      case OpKind::kMaxPool:
        out = max_pool(input(0), node.max_pool(),
                       keep_cache ? &cache.argmax[i] : nullptr);
        break;
      case OpKind::kAdd:
      case OpKind::kConcat: {
        std::vector<const BasicTensor<T>*> ins;
        for (std::size_t k = 0; k < node.inputs.size(); ++k) {
          ins.push_back(&input(k));
        }
        out = node.op == OpKind::kAdd ? add<T>(ins) : concat_channels<T>(ins);
        break;
      }
      case OpKind::kReplicate:
        out = replicate_channels(input(0), node.replicate_factor());
        break;
      case OpKind::kSoftmaxHead: {
        const BasicTensor<T>& z = input(0);
        result.logits = z.reshaped({N, 1, 1, z.shape().item_size()});
        out = softmax(result.logits);
        break;
      }
      case OpKind::kPrpe:
      case OpKind::kPrpeS:
        throw InternalError("unexpanded macro block '" + node.name + "'");
    }
    cache.outputs[i] = std::move(out);
    if (!keep_cache) {
      for (std::size_t in : node.inputs) {
        if (last_use[in] == i && in != graph.logits_index()) {
          cache.outputs[in] = BasicTensor<T>();
        }
      }
    }
  }
  result.probs = cache.outputs[graph.output_index()];
  return result;
}

template <typename T>
void apply_running_stats(const ArchitectureGraph& graph, Weights<T>& weights,
                         const ActivationCache<T>& cache) {
  if (cache.mode != Mode::kTrain) return;
  const auto& nodes = graph.nodes();
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    if (nodes[i].op != OpKind::kBatchNorm) continue;
    BatchNormParams<T> p = bn_params(nodes[i], weights);
    update_running_stats(p, cache.batchnorm[i]);
    weights.find(param_name(nodes[i].name, "running_mean"))->param.values =
        std::move(p.running_mean);
    weights.find(param_name(nodes[i].name, "running_var"))->param.values =
        std::move(p.running_var);
  }
}

template <typename T>
Gradients<T> graph_backward(const ArchitectureGraph& graph,
                            const Weights<T>& weights,
                            const ForwardResult<T>& forward,
                            std::span<const int> labels) {
  const ActivationCache<T>& cache = forward.cache;
  const auto& nodes = graph.nodes();
  if (cache.graph != &graph || cache.outputs.size() != nodes.size()) {
    throw InternalError("activation cache was produced by a different graph");
  }
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    if (cache.outputs[i].size() == 0 && nodes[i].shape.size() != 0) {
      throw InternalError("activation cache is incomplete (forward ran "
                          "without keep_cache)");
    }
  }

  Gradients<T> grads;
  const SoftmaxXent<T> xent = softmax_xent(forward.logits, labels);
  grads.loss = xent.loss;

  std::unordered_map<std::string, std::size_t> slot;
  grads.params.resize(weights.entries().size());
  for (std::size_t k = 0; k < weights.entries().size(); ++k) {
    const auto& e = weights.entries()[k];
    if (e.trainable) grads.params[k].assign(e.param.size(), T(0));
    slot.emplace(e.name, k);
  }
  auto store = [&](const Node& node, std::string_view role, std::vector<T> g) {
    auto it = slot.find(param_name(node.name, role));
    if (it == slot.end()) {
      throw CheckpointError("missing weights for node '" + node.name + "'");
    }
    grads.params[it->second] = std::move(g);
  };

  std::vector<BasicTensor<T>> dout(nodes.size());
  {
    const std::size_t li = graph.logits_index();
    BasicTensor<T> dlogits = softmax_xent_backward(xent.probs, labels);
    dout[li] = dlogits.reshaped(cache.outputs[li].shape());
  }

  for (std::size_t idx = nodes.size(); idx-- > 0;) {
    const Node& node = nodes[idx];
    if (node.op == OpKind::kSoftmaxHead || node.op == OpKind::kInput) continue;
    if (dout[idx].size() == 0) continue;  // not on a path to the head
    const BasicTensor<T>& dy = dout[idx];
    auto input = [&](std::size_t k) -> const BasicTensor<T>& {
      return cache.outputs[node.inputs[k]];
    };
    auto route = [&](std::size_t k, BasicTensor<T>&& g) {
      accumulate(dout[node.inputs[k]], std::move(g));
    };
    switch (node.op) {
      case OpKind::kConv: {
        const ConvParams& p = node.conv();
        ConvGrads<T> g = conv2d_backward(input(0), p,
                                         weights.values(node.name, "kernel"), dy);
        store(node, "kernel", std::move(g.dweights));
        if (p.has_bias) store(node, "bias", std::move(g.dbias));
        route(0, std::move(g.dx));
        break;
      }
      case OpKind::kBatchNorm: {
        BatchNormGrads<T> g = batchnorm_backward(
            dy, weights.values(node.name, "gamma"), cache.batchnorm[idx]);
        store(node, "gamma", std::move(g.dgamma));
        store(node, "beta", std::move(g.dbeta));
        route(0, std::move(g.dx));
        break;
      }
      case OpKind::kRelu:
        route(0, relu_backward(input(0), dy));
        break;
      case OpKind::kDense: {
        const DenseAttrs& a = node.dense();
        DenseGrads<T> g = dense_backward(
            input(0), a.units, weights.values(node.name, "kernel"), dy);
        store(node, "kernel", std::move(g.dweights));
        if (a.has_bias) store(node, "bias", std::move(g.dbias));
        route(0, g.dx.reshaped(input(0).shape()));
        break;
      }
      case OpKind::kGlobalAvgPool:
        route(0, global_avg_pool_backward(input(0).shape(), dy));
        break;
      case OpKind::kMaxPool:
        route(0, max_pool_backward<T>(input(0).shape(), cache.argmax[idx], dy));
        break;
      case OpKind::kAdd:
        for (std::size_t k = 0; k < node.inputs.size(); ++k) {
          route(k, BasicTensor<T>(dy));
        }
        break;
      case OpKind::kConcat: {
        std::vector<std::size_t> counts;
        for (std::size_t k = 0; k < node.inputs.size(); ++k) {
          counts.push_back(input(k).shape().c);
        }
        auto parts = concat_channels_backward(dy, counts);
        for (std::size_t k = 0; k < parts.size(); ++k) {
          route(k, std::move(parts[k]));
        }
        break;
      }
      case OpKind::kReplicate:
        route(0, replicate_channels_backward(dy, node.replicate_factor()));
        break;
      default:
        throw InternalError("no backward rule for node '" + node.name + "'");
    }
  }
  grads.input = dout[0].size() ? std::move(dout[0])
                               : BasicTensor<T>(cache.outputs[0].shape());
  return grads;
}

#define COVIDNET_INSTANTIATE_NETWORK(T)                                       \
  template class Weights<T>;                                                  \
  template ForwardResult<T> graph_forward(const ArchitectureGraph&,           \
                                          const Weights<T>&,                  \
                                          const BasicTensor<T>&, Mode, bool); \
  template void apply_running_stats(const ArchitectureGraph&, Weights<T>&,    \
                                    const ActivationCache<T>&);               \
  template Gradients<T> graph_backward(const ArchitectureGraph&,              \
                                       const Weights<T>&,                     \
                                       const ForwardResult<T>&,               \
                                       std::span<const int>);

COVIDNET_INSTANTIATE_NETWORK(float)
COVIDNET_INSTANTIATE_NETWORK(double)

#undef COVIDNET_INSTANTIATE_NETWORK

}  // namespace covidnet
