// End-to-end acceptance checks. Prints one [PASS]/[FAIL] line per criterion
// and exits nonzero if any fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>

#include "covidnet/body_mask.hpp"
#include "covidnet/cli.hpp"
#include "covidnet/complexity.hpp"
#include "covidnet/data.hpp"
#include "covidnet/explain.hpp"
#include "covidnet/metrics.hpp"
#include "covidnet/network.hpp"
#include "covidnet/ops.hpp"
#include "covidnet/sampler.hpp"
#include "covidnet/train.hpp"
#include "support.hpp"

using namespace covidnet;
using namespace covidnet::testing;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

bool within_pct(double value, double target, double pct) {
  return std::abs(value - target) <= std::abs(target) * pct / 100.0;
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

nlohmann::json analyze_json() {
  std::ostringstream out, err;
  const int code = run_cli({"analyze", "--arch", "resnet50.json", "--baseline", "covidnet-ct.json", "--json"},
                           out, err);
  if (code != kExitOk) throw std::runtime_error("analyze exited " + std::to_string(code) + ": " + err.str());
  return nlohmann::json::parse(out.str());
}

Outcome complexity() {
  const auto t0 = Clock::now();
  const auto j = analyze_json();
  const double secs = seconds_since(t0);
  const double rp = j.at(0).at("params").get<double>() / 1e6;
  const double rf = j.at(0).at("flops").get<double>() / 1e9;
  const double cp = j.at(1).at("params").get<double>() / 1e6;
  const double cf = j.at(1).at("flops").get<double>() / 1e9;
  char buf[256];
  std::snprintf(buf, sizeof buf,
                "ResNet-50 %.2fM / %.2fG, COVIDNet-CT %.2fM / %.2fG, %.2f s", rp, rf, cp, cf, secs);
  const bool ok = within_pct(rp, 23.55, 1) && within_pct(rf, 42.72, 5) && within_pct(cp, 1.40, 1) &&
                  within_pct(cf, 4.18, 5) && secs < 5.0;
  return {ok, buf};
}

Outcome reductions() {
  const auto j = analyze_json();
  const double p = j.at(1).at("param_reduction_pct").get<double>();
  const double f = j.at(1).at("flop_reduction_pct").get<double>();
  char buf[128];
  std::snprintf(buf, sizeof buf, "%.2f%% fewer parameters, %.2f%% fewer FLOPs", p, f);
  return {std::abs(p - 94.1) <= 0.5 && std::abs(f - 90.2) <= 0.5, buf};
}

Outcome gradients() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  std::string worst_name;
  std::size_t checks = 0;
  bool ok = true;
  auto take = [&](const std::string& name, const GradCheckReport& r) {
    ++checks;
    ok = ok && r.passed();
    if (!r.passed() || r.max_rel_error > worst) {
      worst = std::max(worst, r.max_rel_error);
      worst_name = name + " " + r.summary();
    }
  };
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    for (const auto& [name, r] : check_primitives(seed)) take(name, r);
    take("prpe", check_graph_gradients(prpe_probe_graph(false, seed), seed));
    take("prpe_s", check_graph_gradients(prpe_probe_graph(true, seed), seed));
  }
  char buf[128];
  std::snprintf(buf, sizeof buf, "%zu checks over 20 seeds, worst rel error %.2e, %.1f s", checks,
                worst, seconds_since(t0));
  return {ok && seconds_since(t0) < 300.0, std::string(buf) + (ok ? "" : "; failing: " + worst_name)};
}

Outcome learning() {
  const auto t0 = Clock::now();
  const auto dir = fresh_dir("acceptance_learning");
  const auto manifest = synthetic_manifest(dir, 20, 4, 64, 11);
  TrainConfig cfg;
  cfg.epochs = 10;
  cfg.seed = 11;
  const auto graph = mini_graph();
  const auto result = train(graph, manifest, cfg);
  const GraphClassifier model(graph, weights_from_checkpoint<float>(graph, result.best));
  const auto val = evaluate(model, filter_split(manifest, Split::kVal));
  const auto report = metrics_from_confusion(val.matrix);
  const auto check = check_operational_constraints(report);
  const double secs = seconds_since(t0);
  char buf[160];
  std::snprintf(buf, sizeof buf, "60 patients at 64x64, best val accuracy %.2f%%, constraints %s, %.1f s",
                report.accuracy, check.passed ? "pass" : "fail", secs);
  return {!result.diverged && report.accuracy >= 95.0 && check.passed && secs < 600.0, buf};
}

Outcome splits() {
  std::vector<ImageRecord> records;
  for (std::size_t p = 0; p < 1000; ++p) {
    const auto label = static_cast<ClassLabel>(p % 3);
    for (std::size_t s = 0; s < 1 + p % 4; ++s) {
      ImageRecord r;
      r.filepath = "images/P" + std::to_string(p) + "_" + std::to_string(s) + ".png";
      r.patient_id = "P" + std::to_string(p);
      r.label = label;
      records.push_back(r);
    }
  }
  const auto a = patient_level_split(records, {}, 7);
  const auto b = patient_level_split(records, {}, 7);
  std::map<std::string, std::set<Split>> per_patient;
  for (const auto& r : a.records) per_patient[r.patient_id].insert(*r.split);
  bool disjoint = per_patient.size() == 1000;
  std::array<double, 3> n{};
  for (const auto& [pid, s] : per_patient) {
    disjoint = disjoint && s.size() == 1;
    ++n[static_cast<std::size_t>(*s.begin())];
  }
  const bool sized = std::abs(n[0] / 10.0 - 60) <= 2 && std::abs(n[1] / 10.0 - 20) <= 2 &&
                     std::abs(n[2] / 10.0 - 20) <= 2;
  const bool same = format_manifest(a.records) == format_manifest(b.records);
  char buf[160];
  std::snprintf(buf, sizeof buf, "patients %g/%g/%g, disjoint %s, identical manifests %s", n[0], n[1],
                n[2], disjoint ? "yes" : "no", same ? "yes" : "no");
  return {disjoint && sized && same, buf};
}

Outcome rebalancing() {
  std::vector<ClassLabel> labels;
  for (int i = 0; i < 900; ++i) labels.push_back(ClassLabel::kNormal);
  for (int i = 0; i < 90; ++i) labels.push_back(ClassLabel::kPneumonia);
  for (int i = 0; i < 10; ++i) labels.push_back(ClassLabel::kCovid19);
  RebalancedSampler sampler(labels, 8, 1);
  int worst = 0;
  for (int b = 0; b < 1000; ++b) {
    std::array<int, 3> n{};
    for (auto i : sampler.next_batch()) ++n[static_cast<std::size_t>(labels[i])];
    worst = std::max(worst, *std::max_element(n.begin(), n.end()) - *std::min_element(n.begin(), n.end()));
  }
  return {worst <= 1, "1000 batches of 8 from 900/90/10, max class-count spread " + std::to_string(worst)};
}

Outcome body_mask() {
  const auto f = disk_and_table_fixture();
  const auto once = body_region_mask(f.image);
  std::size_t table = 0, zeroed = 0, body = 0, changed = 0;
  for (std::size_t p = 0; p < f.image.size(); ++p) {
    if (f.table[p]) {
      ++table;
      zeroed += once.image.pixels[p] == 0.0f;
    }
    if (f.body[p]) {
      ++body;
      changed += once.image.pixels[p] != f.image.pixels[p];
    }
  }
  const bool idempotent = body_region_mask(once.image).image == once.image;
  return {table > 0 && zeroed == table && changed == 0 && idempotent,
          std::to_string(zeroed) + "/" + std::to_string(table) + " table pixels zeroed, " +
              std::to_string(changed) + "/" + std::to_string(body) + " body pixels changed, idempotent " +
              (idempotent ? "yes" : "no")};
}

Outcome explain_localization() {
  QuadrantStub stub;
  std::size_t cells = 0, inside = 0, runs = 0, postcondition_failures = 0;
  Rng rng(5);
  for (int i = 0; i < 10; ++i) {
    Image img(32, 32);
    for (float& v : img.pixels) v = static_cast<float>(rng.uniform(0.5, 1.0));
    ExplainConfig cfg;
    cfg.grid_h = cfg.grid_w = 8;
    cfg.budget = 64;
    const auto mask = critical_factors(stub, img, ClassLabel::kNormal, cfg);
    ++runs;
    for (std::size_t idx : mask.order) {
      ++cells;
      inside += idx / 8 < 4 && idx % 8 < 4;
    }
    if (mask.achieved) {
      const double after = stub.predict_one(occlude(img, mask))[0];
      if (!(after < mask.threshold * mask.confidence_before) || !(after < mask.confidence_before)) {
        ++postcondition_failures;
      }
    }
  }
  const double frac = cells ? 100.0 * static_cast<double>(inside) / static_cast<double>(cells) : 0.0;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%zu runs, %.1f%% of %zu cells in the informative quadrant, %zu postcondition failures",
                runs, frac, cells, postcondition_failures);
  return {cells > 0 && frac >= 80.0 && postcondition_failures == 0, buf};
}

Outcome determinism() {
  const auto dir = fresh_dir("acceptance_determinism");
  const auto manifest = synthetic_manifest(dir, 5, 2, 64, 3);
  const auto graph = mini_graph();
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.seed = 3;
  cfg.deterministic = true;

  auto run_once = [&](std::string& log, ConfusionMatrix& cm, CriticalFactorMask& mask) {
    std::ostringstream progress;
    const auto result = train(graph, manifest, cfg, &progress);
    log = progress.str();
    set_execution_mode(ExecutionMode::kDeterministic, 1);
    const GraphClassifier model(graph, weights_from_checkpoint<float>(graph, result.best));
    const auto test = filter_split(manifest, Split::kTest);
    cm = evaluate(model, test).matrix;
    const Image img = prepare_eval_sample(read_png(test.front().filepath), 64, 64, false, true);
    ExplainConfig ec;
    ec.grid_h = ec.grid_w = 8;
    mask = critical_factors(model, img, predict_class(model.predict_one(img)), ec);
    return encode_checkpoint(result.best);
  };
  std::string l1, l2;
  ConfusionMatrix c1, c2;
  CriticalFactorMask m1, m2;
  const auto w1 = run_once(l1, c1, m1);
  const auto w2 = run_once(l2, c2, m2);
  const bool logs = l1 == l2 && !l1.empty();
  const bool mats = c1 == c2;
  const bool masks = m1 == m2;
  const bool weights = w1 == w2;
  auto yn = [](bool b) { return b ? "identical" : "DIFFERENT"; };
  return {logs && mats && masks && weights,
          std::string("logs ") + yn(logs) + ", matrices " + yn(mats) + ", masks " + yn(masks) +
              ", checkpoints " + yn(weights)};
}

Outcome metrics_oracle() {
  const auto r = metrics_from_confusion(ConfusionMatrix({{{5, 0, 0}, {1, 4, 0}, {0, 1, 4}}}));
  auto f = [](const std::optional<double>& v) { return format_percent(v); };
  const std::string got = f(r.accuracy) + " | " + f(r.sensitivity[0]) + " " + f(r.sensitivity[1]) +
                          " " + f(r.sensitivity[2]) + " | " + f(r.ppv[0]) + " " + f(r.ppv[1]) + " " +
                          f(r.ppv[2]);
  return {got == "86.67 | 100.00 80.00 80.00 | 83.33 80.00 100.00", got};
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"complexity of bundled configs", complexity},
      {"parameter and FLOP reductions", reductions},
      {"float64 gradient checks", gradients},
      {"desk-scale learning on synthetic data", learning},
      {"patient-level split properties", splits},
      {"rebalanced batches", rebalancing},
      {"body masking fixture", body_mask},
      {"critical-factor localization", explain_localization},
      {"deterministic train, eval and explain", determinism},
      {"metrics oracle", metrics_oracle},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::cout << (o.pass ? "[PASS]" : "[FAIL]") << " criterion " << i + 1 << ": "
              << criteria[i].first << " (" << o.detail << ")" << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
