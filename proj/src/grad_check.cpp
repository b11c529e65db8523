#include "covidnet/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "covidnet/errors.hpp"
#include "covidnet/random.hpp"

namespace covidnet {

std::string GradCheckReport::summary() const {
  std::ostringstream os;
  os << (passed() ? "PASS" : "FAIL") << " max_rel_err=" << max_rel_error;
  if (!worst_variable.empty()) os << " worst=" << worst_variable;
  if (!failure.empty()) os << " (" << failure << ")";
  return os.str();
}

GradCheckReport grad_check(std::vector<GradCheckVariable>& variables,
                           const std::function<double()>& objective,
                           const GradCheckOptions& options) {
  if (options.step < 1e-5 || options.step > 1e-3) {
    throw ConfigError("grad_check step must lie in [1e-5, 1e-3]");
  }
  GradCheckReport report;
  report.tolerance = options.tolerance;
  Rng rng(options.seed);
  const double h = options.step;

  for (GradCheckVariable& var : variables) {
    GradCheckEntry entry;
    entry.variable = var.name;
    std::vector<double>& x = *var.values;
    if (var.analytic.size() != x.size()) {
      report.failure = "analytic gradient for '" + var.name + "' has " +
                       std::to_string(var.analytic.size()) + " values, expected " +
                       std::to_string(x.size());
      report.finite = false;
      return report;
    }
    std::vector<std::size_t> indices(x.size());
    std::iota(indices.begin(), indices.end(), 0);
    if (options.max_checks_per_variable &&
        indices.size() > options.max_checks_per_variable) {
      rng.shuffle(indices);
      indices.resize(options.max_checks_per_variable);
      std::sort(indices.begin(), indices.end());
    }
    for (std::size_t i : indices) {
      const double saved = x[i];
      x[i] = saved + h;
      const double up = objective();
      x[i] = saved - h;
      const double down = objective();
      x[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double analytic = var.analytic[i];
      if (!std::isfinite(numeric) || !std::isfinite(analytic)) {
        report.finite = false;
        report.failure = "non-finite gradient in '" + var.name + "' at index " +
                         std::to_string(i);
        report.variables.push_back(entry);
        return report;
      }
      const double denom =
          std::max({std::abs(analytic), std::abs(numeric), options.floor});
      const double rel = std::abs(analytic - numeric) / denom;
      ++entry.checked;
      if (rel > entry.max_rel_error || entry.checked == 1) {
        entry.max_rel_error = std::max(entry.max_rel_error, rel);
        if (rel >= entry.max_rel_error) {
          entry.worst_index = i;
          entry.analytic = analytic;
          entry.numeric = numeric;
        }
      }
    }
    if (entry.max_rel_error > report.max_rel_error ||
        report.worst_variable.empty()) {
      if (entry.max_rel_error >= report.max_rel_error) {
        report.max_rel_error = entry.max_rel_error;
        report.worst_variable = var.name;
      }
    }
    report.variables.push_back(entry);
  }
  return report;
}

}  // namespace covidnet
