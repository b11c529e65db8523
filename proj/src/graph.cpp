#include "covidnet/graph.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <set>
#include <sstream>

#ifndef COVIDNET_CONFIG_DIR
#define COVIDNET_CONFIG_DIR "configs"
#endif

namespace covidnet {

namespace {

using nlohmann::json;

constexpr std::array<std::pair<OpKind, std::string_view>, 13> kOpNames{{
    {OpKind::kInput, "input"},
    {OpKind::kConv, "conv"},
    {OpKind::kBatchNorm, "batchnorm"},
    {OpKind::kRelu, "relu"},
    {OpKind::kDense, "dense"},
    {OpKind::kGlobalAvgPool, "global_avg_pool"},
    {OpKind::kMaxPool, "max_pool"},
    {OpKind::kAdd, "add"},
    {OpKind::kConcat, "concat"},
    {OpKind::kReplicate, "replicate"},
    {OpKind::kSoftmaxHead, "softmax_head"},
    {OpKind::kPrpe, "prpe"},
    {OpKind::kPrpeS, "prpe_s"},
}};

[[noreturn]] void fail(const std::string& node, const std::string& reason) {
  throw ConfigError("node '" + node + "': " + reason);
}

std::size_t get_size(const std::string& node, const json& attrs,
                     const char* key, std::optional<std::size_t> fallback) {
  if (!attrs.contains(key)) {
    if (fallback) return *fallback;
    fail(node, std::string("missing attribute '") + key + "'");
  }
  const json& v = attrs.at(key);
  if (!v.is_number_integer() || v.get<long long>() <= 0) {
    fail(node, std::string("attribute '") + key + "' must be a positive integer");
  }
  return v.get<std::size_t>();
}

std::pair<std::size_t, std::size_t> get_pair(const std::string& node,
                                             const json& attrs, const char* key,
                                             std::size_t fallback) {
  if (!attrs.contains(key)) return {fallback, fallback};
  const json& v = attrs.at(key);
  if (v.is_array()) {
    if (v.size() != 2 || !v[0].is_number_integer() ||
        !v[1].is_number_integer() || v[0].get<long long>() <= 0 ||
        v[1].get<long long>() <= 0) {
      fail(node, std::string("attribute '") + key +
                     "' must be a positive integer or a pair of them");
    }
    return {v[0].get<std::size_t>(), v[1].get<std::size_t>()};
  }
  const std::size_t s = get_size(node, attrs, key, std::nullopt);
  return {s, s};
}

bool get_bool(const std::string& node, const json& attrs, const char* key,
              bool fallback) {
  if (!attrs.contains(key)) return fallback;
  if (!attrs.at(key).is_boolean()) {
    fail(node, std::string("attribute '") + key + "' must be a boolean");
  }
  return attrs.at(key).get<bool>();
}

double get_double(const std::string& node, const json& attrs, const char* key,
                  double fallback) {
  if (!attrs.contains(key)) return fallback;
  if (!attrs.at(key).is_number()) {
    fail(node, std::string("attribute '") + key + "' must be a number");
  }
  return attrs.at(key).get<double>();
}

void check_attr_keys(const NodeSpec& spec,
                     std::initializer_list<std::string_view> allowed) {
  if (!spec.attrs.is_object()) fail(spec.name, "attrs must be an object");
  for (const auto& [key, _] : spec.attrs.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      fail(spec.name, "unknown attribute '" + key + "' for op " +
                          std::string(op_name(spec.op)));
    }
  }
}

void check_arity(const NodeSpec& spec, std::size_t lo, std::size_t hi) {
  const std::size_t n = spec.inputs.size();
  if (n < lo || n > hi) {
    std::string want = lo == hi ? std::to_string(lo)
                                : std::to_string(lo) + ".." +
                                      (hi == SIZE_MAX ? std::string("n")
                                                      : std::to_string(hi));
    fail(spec.name, std::string(op_name(spec.op)) + " takes " + want +
                        " input(s), got " + std::to_string(n));
  }
}

/// Builds one primitive node from its spec given resolved input nodes.
Node make_primitive(const NodeSpec& spec, std::vector<std::size_t> inputs,
                    const std::vector<Node>& nodes) {
  Node node;
  node.name = spec.name;
  node.op = spec.op;
  node.inputs = std::move(inputs);
  const Shape in = nodes[node.inputs.front()].shape;
  const std::string& nm = spec.name;

  switch (spec.op) {
    case OpKind::kConv: {
      check_attr_keys(spec, {"filters", "kernel", "stride", "groups",
                             "depthwise", "padding", "bias"});
      check_arity(spec, 1, 1);
      ConvParams p;
      std::tie(p.kernel_h, p.kernel_w) = get_pair(nm, spec.attrs, "kernel", 1);
      std::tie(p.stride_h, p.stride_w) = get_pair(nm, spec.attrs, "stride", 1);
      p.in_channels = in.c;
      const bool depthwise = get_bool(nm, spec.attrs, "depthwise", false);
      if (depthwise) {
        if (spec.attrs.contains("groups")) {
          fail(nm, "give either 'depthwise' or 'groups', not both");
        }
        p.groups = in.c;
        p.out_channels = get_size(nm, spec.attrs, "filters", in.c);
      } else {
        p.groups = get_size(nm, spec.attrs, "groups", 1);
        p.out_channels = get_size(nm, spec.attrs, "filters", std::nullopt);
      }
      const std::string pad = spec.attrs.value("padding", std::string("same"));
      if (pad == "same") {
        p.padding = Padding::kSame;
      } else if (pad == "valid") {
        p.padding = Padding::kValid;
      } else {
        fail(nm, "padding must be \"same\" or \"valid\", got \"" + pad + "\"");
      }
      p.has_bias = get_bool(nm, spec.attrs, "bias", true);
      p.validate();
      node.shape = p.output_shape(in);
      node.attrs = p;
      break;
    }
    case OpKind::kBatchNorm: {
      check_attr_keys(spec, {"epsilon", "momentum"});
      check_arity(spec, 1, 1);
      BatchNormAttrs a;
      a.epsilon = get_double(nm, spec.attrs, "epsilon", a.epsilon);
      a.momentum = get_double(nm, spec.attrs, "momentum", a.momentum);
      if (!(a.epsilon > 0)) fail(nm, "epsilon must be positive");
      if (!(a.momentum > 0 && a.momentum < 1)) {
        fail(nm, "momentum must lie in (0, 1)");
      }
      node.shape = in;
      node.attrs = a;
      break;
    }
    case OpKind::kRelu:
      check_attr_keys(spec, {});
      check_arity(spec, 1, 1);
      node.shape = in;
      break;
    case OpKind::kDense: {
      check_attr_keys(spec, {"units", "bias"});
      check_arity(spec, 1, 1);
      DenseAttrs a;
      a.in_features = in.item_size();
      a.units = get_size(nm, spec.attrs, "units", std::nullopt);
      a.has_bias = get_bool(nm, spec.attrs, "bias", true);
      node.shape = {1, 1, 1, a.units};
      node.attrs = a;
      break;
    }
    case OpKind::kGlobalAvgPool:
      check_attr_keys(spec, {});
      check_arity(spec, 1, 1);
      node.shape = {1, 1, 1, in.c};
      break;
    case OpKind::kMaxPool: {
      check_attr_keys(spec, {"kernel", "stride"});
      check_arity(spec, 1, 1);
      MaxPoolParams p;
      p.kernel = get_size(nm, spec.attrs, "kernel", 3);
      p.stride = get_size(nm, spec.attrs, "stride", 2);
      node.shape = p.output_shape(in);
      node.attrs = p;
      break;
    }
    case OpKind::kAdd:
      check_attr_keys(spec, {});
      check_arity(spec, 2, SIZE_MAX);
      for (std::size_t k = 1; k < node.inputs.size(); ++k) {
        const Shape s = nodes[node.inputs[k]].shape;
        if (s != in) {
          fail(nm, "add inputs differ in shape: '" + spec.inputs[0] + "' " +
                       in.to_string() + " vs '" + spec.inputs[k] + "' " +
                       s.to_string());
        }
      }
      node.shape = in;
      break;
    case OpKind::kConcat: {
      check_attr_keys(spec, {});
      check_arity(spec, 2, SIZE_MAX);
      Shape out = in;
      out.c = 0;
      for (std::size_t k = 0; k < node.inputs.size(); ++k) {
        const Shape s = nodes[node.inputs[k]].shape;
        if (s.h != in.h || s.w != in.w) {
          fail(nm, "concat inputs differ spatially: '" + spec.inputs[k] +
                       "' " + s.to_string() + " vs " + in.to_string());
        }
        out.c += s.c;
      }
      node.shape = out;
      break;
    }
    case OpKind::kReplicate: {
      check_attr_keys(spec, {"factor"});
      check_arity(spec, 1, 1);
      if (spec.attrs.contains("factor") &&
          spec.attrs.at("factor").is_number_integer() &&
          spec.attrs.at("factor").get<long long>() == 0) {
        fail(nm, "replication factor must be >= 1");
      }
      ReplicateAttrs a{get_size(nm, spec.attrs, "factor", std::nullopt)};
      node.shape = {1, in.h, in.w, in.c * a.factor};
      node.attrs = a;
      break;
    }
    case OpKind::kSoftmaxHead:
      check_attr_keys(spec, {});
      check_arity(spec, 1, 1);
      node.shape = {1, 1, 1, in.item_size()};
      break;
    case OpKind::kInput:
    case OpKind::kPrpe:
    case OpKind::kPrpeS:
      fail(nm, "not a primitive op");
  }
  return node;
}

NodeSpec spec_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("each node must be an object");
  NodeSpec spec;
  if (!j.contains("name") || !j.at("name").is_string()) {
    throw ConfigError("node without a string 'name'");
  }
  spec.name = j.at("name").get<std::string>();
  if (!j.contains("op") || !j.at("op").is_string()) {
    fail(spec.name, "missing string 'op'");
  }
  try {
    spec.op = parse_op(j.at("op").get<std::string>());
  } catch (const ConfigError& e) {
    fail(spec.name, e.what());
  }
  if (spec.op == OpKind::kInput) fail(spec.name, "'input' cannot be declared");
  if (j.contains("attrs")) spec.attrs = j.at("attrs");
  if (j.contains("inputs")) {
    if (!j.at("inputs").is_array()) fail(spec.name, "'inputs' must be a list");
    for (const auto& in : j.at("inputs")) {
      if (!in.is_string()) fail(spec.name, "input names must be strings");
      spec.inputs.push_back(in.get<std::string>());
    }
  }
  for (const auto& [key, _] : j.items()) {
    if (key != "name" && key != "op" && key != "attrs" && key != "inputs") {
      fail(spec.name, "unknown node field '" + key + "'");
    }
  }
  return spec;
}

json spec_to_json(const NodeSpec& spec) {
  return json{{"name", spec.name},
              {"op", std::string(op_name(spec.op))},
              {"attrs", spec.attrs},
              {"inputs", spec.inputs}};
}

}  // namespace

std::string_view op_name(OpKind op) {
  for (const auto& [k, n] : kOpNames) {
    if (k == op) return n;
  }
  return "unknown";
}

OpKind parse_op(std::string_view name) {
  for (const auto& [k, n] : kOpNames) {
    if (n == name) return k;
  }
  throw ConfigError("unknown op kind '" + std::string(name) + "'");
}

std::vector<NodeSpec> expand_prpe_block(const NodeSpec& spec) {
  if (spec.op != OpKind::kPrpe && spec.op != OpKind::kPrpeS) {
    fail(spec.name, "expand_prpe_block needs a prpe or prpe_s node");
  }
  check_attr_keys(spec, {"c_in", "c_proj", "r", "c_out", "bias"});
  if (spec.inputs.size() != 1) {
    fail(spec.name, std::string(op_name(spec.op)) + " takes exactly 1 input");
  }
  const std::size_t c_in = get_size(spec.name, spec.attrs, "c_in", std::nullopt);
  const std::size_t c_proj =
      get_size(spec.name, spec.attrs, "c_proj", std::nullopt);
  const std::size_t r = get_size(spec.name, spec.attrs, "r", std::nullopt);
  const std::size_t c_out =
      get_size(spec.name, spec.attrs, "c_out", std::nullopt);
  const bool bias = get_bool(spec.name, spec.attrs, "bias", true);
  if (c_proj >= c_in) {
    fail(spec.name, "projection to lower channel dimensionality violated: c_proj " +
                        std::to_string(c_proj) + " >= c_in " +
                        std::to_string(c_in));
  }
  const std::size_t stride = spec.op == OpKind::kPrpeS ? 2 : 1;
  const std::string& b = spec.name;
  return {
      {b + "/project", OpKind::kConv,
       json{{"filters", c_proj}, {"kernel", 1}, {"bias", bias}}, spec.inputs},
      {b + "/replicate", OpKind::kReplicate, json{{"factor", r}},
       {b + "/project"}},
      {b + "/depthwise", OpKind::kConv,
       json{{"filters", r * c_proj},
            {"kernel", 3},
            {"stride", stride},
            {"depthwise", true},
            {"bias", bias}},
       {b + "/replicate"}},
      {b + "/reduce", OpKind::kConv,
       json{{"filters", c_proj}, {"kernel", 1}, {"bias", bias}},
       {b + "/depthwise"}},
      {b + "/expand", OpKind::kConv,
       json{{"filters", c_out}, {"kernel", 1}, {"bias", bias}},
       {b + "/reduce"}},
  };
}

ArchitectureGraph ArchitectureGraph::from_specs(std::size_t height,
                                                std::size_t width,
                                                std::size_t channels,
                                                std::vector<NodeSpec> specs,
                                                std::string output) {
  if (height == 0 || width == 0 || channels == 0) {
    throw ConfigError("input_shape entries must be positive");
  }
  ArchitectureGraph g;
  Node input;
  input.name = "input";
  input.op = OpKind::kInput;
  input.shape = {1, height, width, channels};
  g.nodes_.push_back(input);

  std::unordered_map<std::string, std::size_t> alias{{"input", 0}};
  std::set<std::string> declared;

  auto resolve = [&](const NodeSpec& spec) {
    std::vector<std::size_t> idx;
    if (spec.inputs.empty()) fail(spec.name, "node has no inputs");
    for (const auto& in : spec.inputs) {
      auto it = alias.find(in);
      if (it == alias.end()) {
        if (declared.count(in) == 0 &&
            std::none_of(specs.begin(), specs.end(),
                         [&](const NodeSpec& s) { return s.name == in; })) {
          fail(spec.name, "input references undeclared node '" + in + "'");
        }
        fail(spec.name, "input '" + in +
                            "' is declared later (cycle or bad ordering)");
      }
      idx.push_back(it->second);
    }
    return idx;
  };

  auto add_node = [&](const NodeSpec& spec, const std::string& block) {
    if (alias.count(spec.name)) fail(spec.name, "duplicate node name");
    std::vector<std::size_t> idx = resolve(spec);
    Node node;
    try {
      node = make_primitive(spec, std::move(idx), g.nodes_);
    } catch (const ShapeError& e) {
      fail(spec.name, std::string("shape inference failed: ") + e.what());
    } catch (const ConfigError& e) {
      const std::string msg = e.what();
      if (msg.rfind("node '", 0) == 0) throw;
      fail(spec.name, msg);
    }
    node.block = block;
    alias[node.name] = g.nodes_.size();
    g.nodes_.push_back(std::move(node));
  };

  for (const NodeSpec& spec : specs) {
    if (spec.name.empty()) throw ConfigError("node with empty name");
    if (spec.name == "input" || declared.count(spec.name)) {
      fail(spec.name, "duplicate node name");
    }
    if (spec.op == OpKind::kInput) fail(spec.name, "'input' cannot be declared");
    if (spec.op == OpKind::kPrpe || spec.op == OpKind::kPrpeS) {
      if (spec.inputs.size() != 1) {
        fail(spec.name,
             std::string(op_name(spec.op)) + " takes exactly 1 input");
      }
      const std::size_t src = resolve(spec).front();
      NodeSpec filled = spec;
      const std::size_t c_in = g.nodes_[src].shape.c;
      if (filled.attrs.contains("c_in") &&
          get_size(spec.name, filled.attrs, "c_in", std::nullopt) != c_in) {
        fail(spec.name, "declared c_in " + filled.attrs.at("c_in").dump() +
                            " but input has " + std::to_string(c_in) +
                            " channels");
      }
      filled.attrs["c_in"] = c_in;
      for (const NodeSpec& prim : expand_prpe_block(filled)) {
        add_node(prim, spec.name);
      }
      alias[spec.name] = g.nodes_.size() - 1;
    } else {
      add_node(spec, "");
    }
    declared.insert(spec.name);
  }

  std::size_t heads = 0;
  for (const Node& n : g.nodes_) heads += n.op == OpKind::kSoftmaxHead;
  if (heads != 1) {
    throw ConfigError("graph must contain exactly one softmax_head, found " +
                      std::to_string(heads));
  }
  auto out = alias.find(output);
  if (out == alias.end()) {
    throw ConfigError("output references undeclared node '" + output + "'");
  }
  if (g.nodes_[out->second].op != OpKind::kSoftmaxHead) {
    throw ConfigError("output node '" + output + "' is not the softmax_head");
  }
  g.output_ = out->second;
  g.specs_ = std::move(specs);
  return g;
}

std::optional<std::size_t> ArchitectureGraph::find(std::string_view name) const {
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (nodes_[i].name == name) return i;
  }
  return std::nullopt;
}

ArchitectureGraph ArchitectureGraph::with_input_shape(std::size_t height,
                                                      std::size_t width,
                                                      std::size_t channels) const {
  return from_specs(height, width, channels, specs_, output_name());
}

nlohmann::json ArchitectureGraph::to_config() const {
  json nodes = json::array();
  for (const NodeSpec& s : specs_) nodes.push_back(spec_to_json(s));
  const Shape in = input_shape();
  return json{{"input_shape", {in.h, in.w, in.c}},
              {"nodes", std::move(nodes)},
              {"output", output_name()}};
}

ArchitectureGraph parse_architecture_config(std::string_view text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("architecture config is not valid JSON: ") +
                      e.what());
  }
  if (!doc.is_object()) throw ConfigError("architecture config must be an object");
  for (const auto& [key, _] : doc.items()) {
    if (key != "input_shape" && key != "nodes" && key != "output") {
      throw ConfigError("unknown top-level field '" + key + "'");
    }
  }
  if (!doc.contains("input_shape") || !doc.at("input_shape").is_array() ||
      doc.at("input_shape").size() != 3) {
    throw ConfigError("'input_shape' must be [H, W, C]");
  }
  std::array<std::size_t, 3> shape{};
  for (std::size_t i = 0; i < 3; ++i) {
    const json& v = doc.at("input_shape")[i];
    if (!v.is_number_integer() || v.get<long long>() <= 0) {
      throw ConfigError("'input_shape' entries must be positive integers");
    }
    shape[i] = v.get<std::size_t>();
  }
  if (!doc.contains("nodes") || !doc.at("nodes").is_array()) {
    throw ConfigError("'nodes' must be a list");
  }
  std::vector<NodeSpec> specs;
  for (const json& n : doc.at("nodes")) specs.push_back(spec_from_json(n));
  if (!doc.contains("output") || !doc.at("output").is_string()) {
    throw ConfigError("'output' must name the softmax_head node");
  }
  return ArchitectureGraph::from_specs(shape[0], shape[1], shape[2],
                                       std::move(specs),
                                       doc.at("output").get<std::string>());
}

ArchitectureGraph load_architecture_config(const std::filesystem::path& path) {
  const std::filesystem::path resolved = resolve_config_path(path);
  std::ifstream in(resolved);
  if (!in) throw ConfigError("cannot read architecture config " + resolved.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_architecture_config(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(resolved.filename().string() + ": " + e.what());
  }
}

ArchitectureGraph build_resnet50(std::size_t num_classes,
                                 std::size_t resolution, std::size_t channels) {
  std::vector<NodeSpec> specs;
  auto push = [&](std::string name, OpKind op, json attrs,
                  std::vector<std::string> inputs) {
    specs.push_back({std::move(name), op, std::move(attrs), std::move(inputs)});
    return specs.back().name;
  };

  std::string prev = push("conv1", OpKind::kConv,
                          json{{"filters", 64}, {"kernel", 7}, {"stride", 2}},
                          {"input"});
  prev = push("pool1", OpKind::kMaxPool, json{{"kernel", 3}, {"stride", 2}},
              {prev});

  constexpr std::array<std::size_t, 4> kBlocks{3, 4, 6, 3};
  constexpr std::array<std::size_t, 4> kWidths{64, 128, 256, 512};
  for (std::size_t s = 0; s < 4; ++s) {
    const std::size_t width = kWidths[s];
    for (std::size_t b = 0; b < kBlocks[s]; ++b) {
      const std::string p =
          "stage" + std::to_string(s + 1) + "_block" + std::to_string(b + 1);
      const std::size_t stride = (b == 0 && s > 0) ? 2 : 1;
      const std::string bn0 = push(p + "/preact_bn", OpKind::kBatchNorm,
                                   json::object(), {prev});
      const std::string act0 =
          push(p + "/preact_relu", OpKind::kRelu, json::object(), {bn0});
      std::string shortcut = prev;
      if (b == 0) {
        shortcut = push(p + "/shortcut", OpKind::kConv,
                        json{{"filters", 4 * width}, {"kernel", 1},
                             {"stride", stride}},
                        {act0});
      }
      std::string x = push(p + "/conv1", OpKind::kConv,
                           json{{"filters", width}, {"kernel", 1},
                                {"bias", false}},
                           {act0});
      x = push(p + "/bn1", OpKind::kBatchNorm, json::object(), {x});
      x = push(p + "/relu1", OpKind::kRelu, json::object(), {x});
      x = push(p + "/conv2", OpKind::kConv,
               json{{"filters", width}, {"kernel", 3}, {"stride", stride},
                    {"bias", false}},
               {x});
      x = push(p + "/bn2", OpKind::kBatchNorm, json::object(), {x});
      x = push(p + "/relu2", OpKind::kRelu, json::object(), {x});
      x = push(p + "/conv3", OpKind::kConv,
               json{{"filters", 4 * width}, {"kernel", 1}}, {x});
      prev = push(p + "/add", OpKind::kAdd, json::object(), {x, shortcut});
    }
  }
  prev = push("post_bn", OpKind::kBatchNorm, json::object(), {prev});
  prev = push("post_relu", OpKind::kRelu, json::object(), {prev});
  prev = push("pool", OpKind::kGlobalAvgPool, json::object(), {prev});
  prev = push("fc", OpKind::kDense, json{{"units", num_classes}}, {prev});
  push("head", OpKind::kSoftmaxHead, json::object(), {prev});
  return ArchitectureGraph::from_specs(resolution, resolution, channels,
                                       std::move(specs), "head");
}

std::filesystem::path bundled_config_dir() { return COVIDNET_CONFIG_DIR; }

std::filesystem::path resolve_config_path(const std::filesystem::path& name) {
  if (std::filesystem::exists(name)) return name;
  const std::filesystem::path bundled = bundled_config_dir() / name;
  if (!name.has_parent_path() && std::filesystem::exists(bundled)) {
    return bundled;
  }
  throw ConfigError("architecture config not found: " + name.string());
}

}  // namespace covidnet
