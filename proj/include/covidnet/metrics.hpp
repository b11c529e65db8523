#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "covidnet/data.hpp"

namespace covidnet {

/// Rows are true classes, columns predicted classes, in ClassLabel order.
class ConfusionMatrix {
 public:
  using Counts = std::array<std::array<std::uint64_t, kNumClasses>, kNumClasses>;

  ConfusionMatrix() = default;
  explicit ConfusionMatrix(const Counts& counts) : counts_(counts) {}

  void add(ClassLabel truth, ClassLabel predicted, std::uint64_t n = 1);
  void merge(const ConfusionMatrix& other);

  std::uint64_t at(std::size_t truth, std::size_t predicted) const {
    return counts_.at(truth).at(predicted);
  }
  const Counts& counts() const { return counts_; }
  std::uint64_t total() const;
  std::uint64_t trace() const;
  std::uint64_t row_sum(std::size_t c) const;
  std::uint64_t col_sum(std::size_t c) const;

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

 private:
  Counts counts_{};
};

/// Percentages; empty where the defining row or column sums to zero.
struct MetricsReport {
  double accuracy = 0.0;
  std::array<std::optional<double>, kNumClasses> sensitivity;
  std::array<std::optional<double>, kNumClasses> ppv;

  friend bool operator==(const MetricsReport&, const MetricsReport&) = default;
};

/// Throws DataError on an all-zero matrix.
MetricsReport metrics_from_confusion(const ConfusionMatrix& cm);

struct ConstraintCheck {
  bool passed = false;
  std::vector<std::string> reasons;
};

inline constexpr double kMinCovidSensitivity = 95.0;
inline constexpr double kMinCovidPpv = 95.0;

/// Passes iff COVID-19 sensitivity and PPV are both defined and at least
/// the thresholds (inclusive).
ConstraintCheck check_operational_constraints(const MetricsReport& report,
                                              double min_sensitivity = kMinCovidSensitivity,
                                              double min_ppv = kMinCovidPpv);

/// Highest probability, ties to the lower class index.
ClassLabel predict_class(std::span<const double> probs);

/// "86.67" or "n/a".
std::string format_percent(const std::optional<double>& value);

/// Accuracy line plus sensitivity and PPV tables with columns Normal,
/// Non-COVID-19, COVID-19; one row per named report.
std::string format_metrics_tables(
    const std::vector<std::pair<std::string, MetricsReport>>& rows);

std::string format_confusion_matrix(const ConfusionMatrix& cm);

nlohmann::json metrics_to_json(const MetricsReport& report);
nlohmann::json confusion_to_json(const ConfusionMatrix& cm);
nlohmann::json constraints_to_json(const ConstraintCheck& check);

}  // namespace covidnet
