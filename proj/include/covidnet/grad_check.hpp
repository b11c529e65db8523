#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace covidnet {

/// One block of float64 values the objective depends on. grad_check
/// perturbs `values` in place and restores them afterwards.
struct GradCheckVariable {
  std::string name;
  std::vector<double>* values = nullptr;
  /// Analytic d(objective)/d(values) at the unperturbed point.
  std::vector<double> analytic;
};

struct GradCheckOptions {
  double step = 1e-5;  // central-difference step, must lie in [1e-5, 1e-3]
  double tolerance = 1e-4;
  /// Denominator floor of the relative error |a - n| / max(|a|, |n|, floor).
  double floor = 1e-5;
  /// Elements checked per variable; 0 checks all of them. Sampled elements
  /// are drawn with `seed`.
  std::size_t max_checks_per_variable = 0;
  std::uint64_t seed = 0;
};

struct GradCheckEntry {
  std::string variable;
  std::size_t checked = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double max_rel_error = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> variables;
  double max_rel_error = 0.0;
  std::string worst_variable;
  bool finite = true;
  /// Empty unless the check could not be carried out (non-finite values,
  /// size mismatch).
  std::string failure;
  double tolerance = 0.0;

  bool passed() const {
    return finite && failure.empty() && max_rel_error < tolerance;
  }
  std::string summary() const;
};

/// Compares analytic gradients against central finite differences of
/// `objective` for every variable. Never throws on non-finite values; they
/// are reported as a failure.
GradCheckReport grad_check(std::vector<GradCheckVariable>& variables,
                           const std::function<double()>& objective,
                           const GradCheckOptions& options = {});

}  // namespace covidnet
