#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "covidnet/graph.hpp"

namespace covidnet {

enum class FlopConvention {
  kTwoPerMac,  // default; reproduces the ResNet-50 reference at 512x512
  kOnePerMac,
};

/// Default analysis resolution paired with kTwoPerMac.
inline constexpr std::size_t kDefaultAnalysisResolution = 512;

struct NodeCost {
  std::uint64_t params = 0;
  std::uint64_t macs = 0;
  /// Elementwise work (relu, add, pooling, replication) counted in FLOPs
  /// only, one FLOP per element.
  std::uint64_t elementwise = 0;
};

/// Parameter and MAC count of one primitive node (batch of 1).
NodeCost node_complexity(const ArchitectureGraph& graph, std::size_t node);

struct NodeComplexity {
  std::string name;
  OpKind op = OpKind::kInput;
  std::uint64_t params = 0;
  std::uint64_t macs = 0;
  std::uint64_t flops = 0;
  Shape output;
};

struct ComplexityTotals {
  std::uint64_t params = 0;
  std::uint64_t macs = 0;
  std::uint64_t flops = 0;
};

struct Reductions {
  double param_reduction_pct = 0.0;
  double flop_reduction_pct = 0.0;
};

struct ComplexityReport {
  std::string architecture;
  std::size_t height = 0;
  std::size_t width = 0;
  FlopConvention convention = FlopConvention::kTwoPerMac;
  std::vector<NodeComplexity> per_node;
  ComplexityTotals totals;
  std::optional<std::string> baseline;
  std::optional<Reductions> reductions;
};

/// 100 * (1 - candidate / baseline).
double reduction_pct(double candidate, double baseline);

/// Analyzes `graph`, optionally re-inferred at resolution (H, W).
ComplexityReport analyze_architecture(
    const ArchitectureGraph& graph, std::string architecture,
    std::optional<std::pair<std::size_t, std::size_t>> resolution =
        std::nullopt,
    FlopConvention convention = FlopConvention::kTwoPerMac);

/// Fills report.reductions relative to `baseline`.
void compare_to_baseline(ComplexityReport& report,
                         const ComplexityReport& baseline);

/// Display name for bundled configs ("resnet50.json" -> "ResNet-50").
std::string architecture_display_name(const std::string& config_name);

/// Aligned table with "Parameters (M)" and "FLOPs (G)" columns, one row per
/// report, followed by reduction lines for reports that carry them.
std::string format_complexity_table(const std::vector<ComplexityReport>& reports);

/// Per-node breakdown table.
std::string format_complexity_breakdown(const ComplexityReport& report);

nlohmann::json complexity_to_json(const ComplexityReport& report,
                                  bool include_nodes = false);

}  // namespace covidnet
