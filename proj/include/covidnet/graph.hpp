#pragma once

#include <cstddef>
#include <filesystem>
#include <limits>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "covidnet/ops.hpp"
#include "covidnet/tensor.hpp"

namespace covidnet {

enum class OpKind {
  kInput,  // implicit graph input; never declared in a config
  kConv,
  kBatchNorm,
  kRelu,
  kDense,
  kGlobalAvgPool,
  kMaxPool,
  kAdd,
  kConcat,
  kReplicate,
  kSoftmaxHead,
  kPrpe,
  kPrpeS,
};

std::string_view op_name(OpKind op);
/// Throws ConfigError for unknown op kinds.
OpKind parse_op(std::string_view name);

/// One declared node of an architecture config, before macro expansion.
struct NodeSpec {
  std::string name;
  OpKind op = OpKind::kConv;
  nlohmann::json attrs = nlohmann::json::object();
  std::vector<std::string> inputs;
};

struct BatchNormAttrs {
  double epsilon = 1e-5;
  double momentum = 0.9;
};

struct DenseAttrs {
  std::size_t in_features = 0;
  std::size_t units = 0;
  bool has_bias = true;
};

struct ReplicateAttrs {
  std::size_t factor = 1;
};

using NodeAttrs = std::variant<std::monostate, ConvParams, BatchNormAttrs,
                               DenseAttrs, MaxPoolParams, ReplicateAttrs>;

/// A primitive node of an expanded, shape-checked graph.
struct Node {
  std::string name;
  OpKind op = OpKind::kInput;
  std::vector<std::size_t> inputs;
  NodeAttrs attrs;
  /// Output shape for a single item (n == 1).
  Shape shape;
  /// Name of the PRPE/PRPE-S block this node was expanded from, if any.
  std::string block;

  const ConvParams& conv() const { return std::get<ConvParams>(attrs); }
  const DenseAttrs& dense() const { return std::get<DenseAttrs>(attrs); }
  const BatchNormAttrs& batchnorm() const {
    return std::get<BatchNormAttrs>(attrs);
  }
  const MaxPoolParams& max_pool() const { return std::get<MaxPoolParams>(attrs); }
  std::size_t replicate_factor() const {
    return std::get<ReplicateAttrs>(attrs).factor;
  }
};

/// Validated DAG of primitive nodes in topological order. Node 0 is the
/// graph input; the output node is the single softmax head.
class ArchitectureGraph {
 public:
  /// Expands macro blocks, resolves inputs, infers shapes. Throws
  /// ConfigError naming the node and reason on any failure.
  static ArchitectureGraph from_specs(std::size_t height, std::size_t width,
                                      std::size_t channels,
                                      std::vector<NodeSpec> specs,
                                      std::string output);

  const std::vector<Node>& nodes() const { return nodes_; }
  const Node& node(std::size_t i) const { return nodes_.at(i); }
  std::optional<std::size_t> find(std::string_view name) const;

  /// (H, W, C) of a single input item.
  Shape input_shape() const { return nodes_.front().shape; }
  std::size_t output_index() const { return output_; }
  /// Node feeding the softmax head.
  std::size_t logits_index() const { return nodes_[output_].inputs.front(); }
  std::size_t num_classes() const { return nodes_[output_].shape.item_size(); }

  /// Declared (unexpanded) nodes, as read from the config.
  const std::vector<NodeSpec>& specs() const { return specs_; }
  const std::string& output_name() const { return nodes_[output_].name; }

  /// Same topology re-inferred at another input resolution.
  ArchitectureGraph with_input_shape(std::size_t height, std::size_t width,
                                     std::size_t channels) const;

  /// Config document that parses back to an identical graph.
  nlohmann::json to_config() const;

 private:
  std::vector<Node> nodes_;
  std::vector<NodeSpec> specs_;
  std::size_t output_ = 0;
};

ArchitectureGraph parse_architecture_config(std::string_view text);
ArchitectureGraph load_architecture_config(const std::filesystem::path& path);

/// Expands a prpe/prpe_s spec into its five primitives: pointwise projection
/// c_in->c_proj, block replication xr, 3x3 depthwise (stride 2 for prpe_s),
/// pointwise projection r*c_proj->c_proj, pointwise expansion c_proj->c_out.
/// attrs must carry c_in, c_proj, r, c_out; c_proj must be below c_in.
std::vector<NodeSpec> expand_prpe_block(const NodeSpec& spec);

/// Pre-activation ResNet-50 (3-4-6-3 bottlenecks) with a `num_classes` head.
ArchitectureGraph build_resnet50(std::size_t num_classes = 3,
                                 std::size_t resolution = 512,
                                 std::size_t channels = 3);

/// Directory holding the bundled architecture configs.
std::filesystem::path bundled_config_dir();

/// Returns `name` if it exists, otherwise the bundled config of that name.
/// Throws ConfigError when neither exists.
std::filesystem::path resolve_config_path(const std::filesystem::path& name);

}  // namespace covidnet
