#include "covidnet/metrics.hpp"

#include <algorithm>
#include <cstdio>

#include "covidnet/errors.hpp"

namespace covidnet {

namespace {

std::string pad_left(const std::string& s, std::size_t width) {
  return s.size() >= width ? s : std::string(width - s.size(), ' ') + s;
}

std::string pad_right(const std::string& s, std::size_t width) {
  return s.size() >= width ? s : s + std::string(width - s.size(), ' ');
}

nlohmann::json optional_json(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

}  // namespace

void ConfusionMatrix::add(ClassLabel truth, ClassLabel predicted, std::uint64_t n) {
  counts_.at(static_cast<std::size_t>(truth)).at(static_cast<std::size_t>(predicted)) += n;
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  for (std::size_t r = 0; r < kNumClasses; ++r) {
    for (std::size_t c = 0; c < kNumClasses; ++c) counts_[r][c] += other.counts_[r][c];
  }
}

std::uint64_t ConfusionMatrix::total() const {
  std::uint64_t t = 0;
  for (const auto& row : counts_) {
    for (std::uint64_t v : row) t += v;
  }
  return t;
}

std::uint64_t ConfusionMatrix::trace() const {
  std::uint64_t t = 0;
  for (std::size_t c = 0; c < kNumClasses; ++c) t += counts_[c][c];
  return t;
}

std::uint64_t ConfusionMatrix::row_sum(std::size_t c) const {
  std::uint64_t t = 0;
  for (std::uint64_t v : counts_.at(c)) t += v;
  return t;
}

std::uint64_t ConfusionMatrix::col_sum(std::size_t c) const {
  std::uint64_t t = 0;
  for (const auto& row : counts_) t += row.at(c);
  return t;
}

MetricsReport metrics_from_confusion(const ConfusionMatrix& cm) {
  const std::uint64_t total = cm.total();
  if (total == 0) throw DataError("confusion matrix is empty");
  MetricsReport r;
  r.accuracy = 100.0 * static_cast<double>(cm.trace()) / static_cast<double>(total);
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    const double tp = static_cast<double>(cm.at(c, c));
    if (const auto row = cm.row_sum(c); row > 0) {
      r.sensitivity[c] = 100.0 * tp / static_cast<double>(row);
    }
    if (const auto col = cm.col_sum(c); col > 0) {
      r.ppv[c] = 100.0 * tp / static_cast<double>(col);
    }
  }
  return r;
}

ConstraintCheck check_operational_constraints(const MetricsReport& report,
                                              double min_sensitivity,
                                              double min_ppv) {
  ConstraintCheck check;
  const auto covid = static_cast<std::size_t>(ClassLabel::kCovid19);
  auto test = [&](const std::optional<double>& v, const char* what, double min) {
    if (!v) {
      check.reasons.push_back(std::string("COVID-19 ") + what + " undefined");
    } else if (*v < min) {
      check.reasons.push_back(std::string("COVID-19 ") + what + " " +
                              format_percent(v) + "% below " + format_percent(min) + "%");
    }
  };
  test(report.sensitivity[covid], "sensitivity", min_sensitivity);
  test(report.ppv[covid], "PPV", min_ppv);
  check.passed = check.reasons.empty();
  return check;
}

ClassLabel predict_class(std::span<const double> probs) {
  if (probs.size() != kNumClasses) {
    throw DataError("expected " + std::to_string(kNumClasses) + " class scores, got " +
                    std::to_string(probs.size()));
  }
  std::size_t best = 0;
  for (std::size_t c = 1; c < probs.size(); ++c) {
    if (probs[c] > probs[best]) best = c;
  }
  return static_cast<ClassLabel>(best);
}

std::string format_percent(const std::optional<double>& value) {
  if (!value) return "n/a";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", *value);
  return buf;
}

std::string format_metrics_tables(
    const std::vector<std::pair<std::string, MetricsReport>>& rows) {
  std::size_t name_w = std::string("Architecture").size();
  for (const auto& [name, _] : rows) name_w = std::max(name_w, name.size());
  name_w += 2;
  constexpr std::size_t kCol = 14;

  std::string out = pad_right("Architecture", name_w) + pad_left("Accuracy (%)", kCol) + "\n";
  for (const auto& [name, r] : rows) {
    out += pad_right(name, name_w) + pad_left(format_percent(r.accuracy), kCol) + "\n";
  }
  auto table = [&](const char* title, auto member) {
    out += "\n";
    out += title;
    out += "\n" + pad_right("Architecture", name_w);
    for (ClassLabel c : kAllClasses) out += pad_left(std::string(class_display_name(c)), kCol);
    out += "\n";
    for (const auto& [name, r] : rows) {
      out += pad_right(name, name_w);
      for (std::size_t c = 0; c < kNumClasses; ++c) {
        out += pad_left(format_percent((r.*member)[c]), kCol);
      }
      out += "\n";
    }
  };
  table("Sensitivity (%)", &MetricsReport::sensitivity);
  table("Positive predictive value (%)", &MetricsReport::ppv);
  return out;
}

std::string format_confusion_matrix(const ConfusionMatrix& cm) {
  constexpr std::size_t kCol = 14;
  std::string out = pad_right("true \\ predicted", 18);
  for (ClassLabel c : kAllClasses) out += pad_left(std::string(class_display_name(c)), kCol);
  out += "\n";
  for (ClassLabel r : kAllClasses) {
    out += pad_right(std::string(class_display_name(r)), 18);
    for (std::size_t c = 0; c < kNumClasses; ++c) {
      out += pad_left(std::to_string(cm.at(static_cast<std::size_t>(r), c)), kCol);
    }
    out += "\n";
  }
  return out;
}

nlohmann::json metrics_to_json(const MetricsReport& report) {
  nlohmann::json j;
  j["accuracy"] = report.accuracy;
  for (ClassLabel c : kAllClasses) {
    const auto i = static_cast<std::size_t>(c);
    j["sensitivity"][std::string(class_key(c))] = optional_json(report.sensitivity[i]);
    j["ppv"][std::string(class_key(c))] = optional_json(report.ppv[i]);
  }
  return j;
}

nlohmann::json confusion_to_json(const ConfusionMatrix& cm) {
  nlohmann::json j;
  j["axes"] = nlohmann::json::array();
  for (ClassLabel c : kAllClasses) j["axes"].push_back(std::string(class_key(c)));
  j["counts"] = cm.counts();
  j["total"] = cm.total();
  return j;
}

nlohmann::json constraints_to_json(const ConstraintCheck& check) {
  return {{"passed", check.passed}, {"reasons", check.reasons}};
}

}  // namespace covidnet
