#include "covidnet/complexity.hpp"

#include <cstdio>
#include <filesystem>
#include <sstream>

namespace covidnet {

NodeCost node_complexity(const ArchitectureGraph& graph, std::size_t index) {
  const Node& node = graph.node(index);
  const Shape out = node.shape;
  auto in_shape = [&](std::size_t k) { return graph.node(node.inputs[k]).shape; };
  NodeCost cost;
  switch (node.op) {
    case OpKind::kConv: {
      const ConvParams& p = node.conv();
      const std::uint64_t kernel = p.weight_count();
      cost.params = kernel + (p.has_bias ? p.out_channels : 0);
      cost.macs = kernel * out.h * out.w;
      break;
    }
    case OpKind::kDense: {
      const DenseAttrs& a = node.dense();
      cost.params = a.in_features * a.units + (a.has_bias ? a.units : 0);
      cost.macs = a.in_features * a.units;
      break;
    }
    case OpKind::kBatchNorm:
      cost.params = 2 * out.c;
      cost.macs = 2 * out.size();
      break;
    case OpKind::kRelu:
    case OpKind::kReplicate:
    case OpKind::kSoftmaxHead:
      cost.elementwise = out.size();
      break;
    case OpKind::kAdd:
      cost.elementwise = out.size() * (node.inputs.size() - 1);
      break;
    case OpKind::kGlobalAvgPool:
    case OpKind::kMaxPool:
      cost.elementwise = in_shape(0).size();
      break;
    case OpKind::kInput:
    case OpKind::kConcat:
    case OpKind::kPrpe:
    case OpKind::kPrpeS:
      break;
  }
  return cost;
}

double reduction_pct(double candidate, double baseline) {
  return 100.0 * (1.0 - candidate / baseline);
}

ComplexityReport analyze_architecture(
    const ArchitectureGraph& graph, std::string architecture,
    std::optional<std::pair<std::size_t, std::size_t>> resolution,
    FlopConvention convention) {
  const ArchitectureGraph g =
      resolution ? graph.with_input_shape(resolution->first, resolution->second,
                                          graph.input_shape().c)
                 : graph;
  ComplexityReport report;
  report.architecture = std::move(architecture);
  report.height = g.input_shape().h;
  report.width = g.input_shape().w;
  report.convention = convention;
  const std::uint64_t per_mac = convention == FlopConvention::kTwoPerMac ? 2 : 1;
  for (std::size_t i = 0; i < g.nodes().size(); ++i) {
    const NodeCost c = node_complexity(g, i);
    NodeComplexity row{g.node(i).name, g.node(i).op, c.params, c.macs,
                       per_mac * c.macs + c.elementwise, g.node(i).shape};
    report.totals.params += row.params;
    report.totals.macs += row.macs;
    report.totals.flops += row.flops;
    report.per_node.push_back(std::move(row));
  }
  return report;
}

void compare_to_baseline(ComplexityReport& report,
                         const ComplexityReport& baseline) {
  report.baseline = baseline.architecture;
  report.reductions = Reductions{
      reduction_pct(static_cast<double>(report.totals.params),
                    static_cast<double>(baseline.totals.params)),
      reduction_pct(static_cast<double>(report.totals.flops),
                    static_cast<double>(baseline.totals.flops))};
}

std::string architecture_display_name(const std::string& config_name) {
  const std::string stem = std::filesystem::path(config_name).stem().string();
  if (stem == "resnet50") return "ResNet-50";
  if (stem == "covidnet-ct") return "COVIDNet-CT";
  if (stem == "covidnet-ct-mini") return "COVIDNet-CT-mini";
  return stem;
}

namespace {

std::string fixed(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  return buf;
}

std::string pad_right(std::string s, std::size_t width) {
  if (s.size() < width) s.append(width - s.size(), ' ');
  return s;
}

std::string pad_left(std::string s, std::size_t width) {
  if (s.size() < width) s.insert(0, width - s.size(), ' ');
  return s;
}

}  // namespace

std::string format_complexity_table(const std::vector<ComplexityReport>& reports) {
  std::size_t name_w = std::string("Architecture").size();
  for (const auto& r : reports) name_w = std::max(name_w, r.architecture.size());
  std::ostringstream os;
  os << pad_right("Architecture", name_w) << "  Parameters (M)  FLOPs (G)\n";
  for (const auto& r : reports) {
    os << pad_right(r.architecture, name_w) << "  "
       << pad_left(fixed(r.totals.params / 1e6, 2), 14) << "  "
       << pad_left(fixed(r.totals.flops / 1e9, 2), 9) << "\n";
  }
  for (const auto& r : reports) {
    if (!r.reductions) continue;
    os << r.architecture << " vs " << *r.baseline << ": "
       << fixed(r.reductions->param_reduction_pct, 1) << "% fewer parameters, "
       << fixed(r.reductions->flop_reduction_pct, 1) << "% fewer FLOPs\n";
  }
  if (!reports.empty()) {
    os << "(input " << reports.front().height << "x" << reports.front().width
       << ", "
       << (reports.front().convention == FlopConvention::kTwoPerMac ? "2" : "1")
       << " FLOP(s) per MAC)\n";
  }
  return os.str();
}

std::string format_complexity_breakdown(const ComplexityReport& report) {
  std::size_t name_w = 4;
  for (const auto& n : report.per_node) name_w = std::max(name_w, n.name.size());
  std::ostringstream os;
  os << pad_right("Node", name_w) << "  " << pad_right("Op", 15)
     << pad_left("Params", 10) << pad_left("MACs", 14) << pad_left("FLOPs", 14)
     << "  Output\n";
  for (const auto& n : report.per_node) {
    os << pad_right(n.name, name_w) << "  "
       << pad_right(std::string(op_name(n.op)), 15)
       << pad_left(std::to_string(n.params), 10)
       << pad_left(std::to_string(n.macs), 14)
       << pad_left(std::to_string(n.flops), 14) << "  " << n.output.h << "x"
       << n.output.w << "x" << n.output.c << "\n";
  }
  os << pad_right("total", name_w) << "  " << pad_right("", 15)
     << pad_left(std::to_string(report.totals.params), 10)
     << pad_left(std::to_string(report.totals.macs), 14)
     << pad_left(std::to_string(report.totals.flops), 14) << "\n";
  return os.str();
}

nlohmann::json complexity_to_json(const ComplexityReport& report,
                                  bool include_nodes) {
  nlohmann::json j{
      {"architecture", report.architecture},
      {"input_resolution", {report.height, report.width}},
      {"flops_per_mac",
       report.convention == FlopConvention::kTwoPerMac ? 2 : 1},
      {"params", report.totals.params},
      {"macs", report.totals.macs},
      {"flops", report.totals.flops},
      {"params_m", report.totals.params / 1e6},
      {"flops_g", report.totals.flops / 1e9},
  };
  if (report.reductions) {
    j["baseline"] = *report.baseline;
    j["param_reduction_pct"] = report.reductions->param_reduction_pct;
    j["flop_reduction_pct"] = report.reductions->flop_reduction_pct;
  }
  if (include_nodes) {
    nlohmann::json nodes = nlohmann::json::array();
    for (const auto& n : report.per_node) {
      nodes.push_back({{"name", n.name},
                       {"op", std::string(op_name(n.op))},
                       {"params", n.params},
                       {"macs", n.macs},
                       {"flops", n.flops},
                       {"output_shape", {n.output.h, n.output.w, n.output.c}}});
    }
    j["nodes"] = std::move(nodes);
  }
  return j;
}

}  // namespace covidnet
