#include "covidnet/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <sstream>
#include <thread>

#include "covidnet/body_mask.hpp"
#include "covidnet/complexity.hpp"
#include "covidnet/errors.hpp"
#include "covidnet/explain.hpp"
#include "covidnet/synthetic.hpp"
#include "covidnet/train.hpp"

namespace covidnet {

namespace {

namespace fs = std::filesystem;

/// Options shared by several subcommands.
struct Common {
  std::string arch;
  std::string baseline;
  std::string manifest;
  std::string data_root;
  std::string out;
  std::string config;
  std::string checkpoint;
  std::uint64_t seed = 0;
  bool deterministic = false;
  unsigned workers = 0;
};

void emit(const std::string& text, const std::string& out_path, std::ostream& out) {
  if (out_path.empty()) {
    out << text;
  } else {
    write_text_file(out_path, text);
  }
}

void require_file(const std::string& path, const char* what) {
  if (!fs::is_regular_file(path)) {
    throw IoError(std::string(what) + " '" + path + "' does not exist");
  }
}

/// Accepts bundled config names as well as paths.
ArchitectureGraph load_arch(const std::string& name) {
  return load_architecture_config(resolve_config_path(name));
}

std::string arch_label(const std::string& name) {
  return architecture_display_name(fs::path(name).filename().string());
}

void apply_execution(const Common& c) {
  if (c.deterministic) {
    set_execution_mode(ExecutionMode::kDeterministic, 1);
  } else {
    const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
    set_execution_mode(ExecutionMode::kParallel, c.workers ? c.workers : hw);
  }
}

nlohmann::json read_json_file(const std::string& path) {
  require_file(path, "config file");
  try {
    return nlohmann::json::parse(read_text_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config file '" + path + "': " + e.what());
  }
}

/// Takes a string key out of a config object if present.
void take_string(nlohmann::json& j, const char* key, std::string& target) {
  if (!j.contains(key)) return;
  if (!j[key].is_string()) throw ConfigError(std::string("config key '") + key + "' must be a string");
  if (target.empty()) target = j[key].get<std::string>();
  j.erase(key);
}

std::pair<std::size_t, std::size_t> parse_grid(const std::string& text) {
  std::size_t h = 0, w = 0;
  char sep = 0;
  std::istringstream is(text);
  if (!(is >> h)) throw ConfigError("invalid --grid '" + text + "'");
  if (is >> sep) {
    if ((sep != 'x' && sep != 'X') || !(is >> w)) throw ConfigError("invalid --grid '" + text + "'");
  } else {
    w = h;
  }
  return {h, w};
}

// ---------------------------------------------------------------------------

int cmd_analyze(const Common& c, const std::optional<std::size_t>& resolution,
                int flops_per_mac, bool breakdown, bool json, std::ostream& out) {
  const auto conv = flops_per_mac == 1 ? FlopConvention::kOnePerMac : FlopConvention::kTwoPerMac;
  std::optional<std::pair<std::size_t, std::size_t>> res;
  if (resolution) res = std::make_pair(*resolution, *resolution);
  if (!c.baseline.empty()) load_arch(c.baseline);  // validate before work
  std::vector<ComplexityReport> reports;
  reports.push_back(analyze_architecture(load_arch(c.arch), arch_label(c.arch), res, conv));
  if (!c.baseline.empty()) {
    reports.push_back(
        analyze_architecture(load_arch(c.baseline), arch_label(c.baseline), res, conv));
    // Reductions are stated for the lighter model against the heavier one.
    auto& a = reports[0];
    auto& b = reports[1];
    if (a.totals.params <= b.totals.params) {
      compare_to_baseline(a, b);
    } else {
      compare_to_baseline(b, a);
    }
  }
  std::string text;
  if (json) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& r : reports) j.push_back(complexity_to_json(r, breakdown));
    text = j.dump(2) + "\n";
  } else {
    text = format_complexity_table(reports);
    if (breakdown) {
      for (const auto& r : reports) text += "\n" + format_complexity_breakdown(r);
    }
  }
  emit(text, c.out, out);
  return kExitOk;
}

int cmd_synth(const Common& c, const std::vector<std::size_t>& patients, std::size_t slices,
              std::size_t resolution, const std::string& table, std::ostream& out) {
  SyntheticConfig cfg;
  if (patients.size() == 1) {
    cfg.patients_per_class = {patients[0], patients[0], patients[0]};
  } else if (patients.size() == kNumClasses) {
    cfg.patients_per_class = {patients[0], patients[1], patients[2]};
  } else {
    throw ConfigError("--patients takes one count or three per-class counts");
  }
  cfg.slices_per_patient = slices;
  cfg.resolution = resolution;
  cfg.seed = c.seed;
  cfg.table = parse_table_artifact(table);
  const SyntheticDataset ds = generate_synthetic_dataset(c.out, cfg);
  out << "wrote " << ds.images << " images for " << ds.patients << " patients; metadata "
      << ds.metadata.string() << "\n";
  return kExitOk;
}

int cmd_build_manifest(const Common& c, std::string metadata, std::ostream& out,
                       std::ostream& err) {
  if (metadata.empty()) metadata = (fs::path(c.data_root) / "metadata.csv").string();
  require_file(metadata, "metadata file");
  const ManifestBuild built = build_manifest(read_metadata(metadata), c.data_root);
  const SplitResult split = patient_level_split(built.records, {}, c.seed);
  for (const auto& w : split.warnings) err << "warning: " << w << "\n";
  for (const auto& e : built.excluded) err << "excluded: " << e.path << " (" << e.reason << ")\n";
  write_manifest(c.out, split.records);
  std::array<std::size_t, 3> counts{};
  for (const auto& r : split.records) ++counts[static_cast<std::size_t>(*r.split)];
  out << "manifest " << c.out << ": " << split.records.size() << " records (train "
      << counts[0] << ", val " << counts[1] << ", test " << counts[2] << "), "
      << built.excluded.size() << " excluded\n";
  return kExitOk;
}

int cmd_train(Common c, const CLI::App& sub, TrainConfig cfg, const std::string& log_path,
              std::ostream& out) {
  if (!c.config.empty()) {
    nlohmann::json j = read_json_file(c.config);
    if (!j.is_object()) throw ConfigError("config file must hold an object");
    take_string(j, "arch", c.arch);
    take_string(j, "manifest", c.manifest);
    take_string(j, "data_root", c.data_root);
    take_string(j, "out", c.out);
    TrainConfig from_file = cfg;
    apply_train_config_json(j, from_file);
    // Flags given on the command line win over the file.
    auto given = [&](const char* flag) { return sub.count(flag) > 0; };
    if (!given("--epochs")) cfg.epochs = from_file.epochs;
    if (!given("--lr")) cfg.learning_rate = from_file.learning_rate;
    if (!given("--momentum")) cfg.momentum = from_file.momentum;
    if (!given("--batch-size")) cfg.batch_size = from_file.batch_size;
    if (!given("--seed")) c.seed = from_file.seed;
    if (!given("--deterministic")) c.deterministic = from_file.deterministic;
    if (!given("--workers")) c.workers = from_file.workers;
    cfg.augmentation = from_file.augmentation;
    cfg.steps_per_epoch = from_file.steps_per_epoch;
    cfg.eval_body_mask = from_file.eval_body_mask;
    cfg.initial_checkpoint = from_file.initial_checkpoint;
  }
  if (c.arch.empty() || c.manifest.empty() || c.out.empty()) {
    throw ConfigError("train needs --arch, --manifest and --out (flags or config file)");
  }
  require_file(c.manifest, "manifest");
  if (cfg.initial_checkpoint) require_file(cfg.initial_checkpoint->string(), "checkpoint");
  cfg.seed = c.seed;
  cfg.deterministic = c.deterministic;
  const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
  cfg.workers = c.workers ? c.workers : hw;
  cfg.validate();

  const ArchitectureGraph graph = load_arch(c.arch);
  const auto records = read_manifest(c.manifest, c.data_root);
  std::ostringstream log;
  const TrainResult result = train(graph, records, cfg, &log);
  save_checkpoint(c.out, result.best);
  if (!log_path.empty()) write_text_file(log_path, log.str());
  out << log.str();
  out << "best val_accuracy " << format_percent(result.best.val_accuracy) << " saved to "
      << c.out << "\n";
  if (result.diverged) throw NumericError("training diverged: " + result.abort_reason);
  return kExitOk;
}

int cmd_eval(const Common& c, const std::string& split_name, bool body_mask, bool no_crop,
             bool json, std::ostream& out) {
  require_file(c.manifest, "manifest");
  require_file(c.checkpoint, "checkpoint");
  const ArchitectureGraph graph = load_arch(c.arch);
  const Split split = parse_split(split_name);
  const auto records = filter_split(read_manifest(c.manifest, c.data_root), split);
  if (records.empty()) throw DataError("manifest has no " + split_name + " records");
  const GraphClassifier model(graph, weights_from_checkpoint<float>(graph, load_checkpoint(c.checkpoint)));
  EvalOptions opts;
  opts.body_mask = body_mask;
  opts.body_crop = !no_crop;
  const EvalResult result = evaluate(model, records, opts);
  const MetricsReport report = metrics_from_confusion(result.matrix);
  const ConstraintCheck check = check_operational_constraints(report);
  std::string text;
  if (json) {
    nlohmann::json j = {{"architecture", arch_label(c.arch)},
                        {"split", split_name},
                        {"confusion_matrix", confusion_to_json(result.matrix)},
                        {"metrics", metrics_to_json(report)},
                        {"operational_constraints", constraints_to_json(check)},
                        {"skipped", result.skipped.size()}};
    text = j.dump(2) + "\n";
  } else {
    text = "Confusion matrix (" + split_name + ", " + std::to_string(result.matrix.total()) +
           " images, " + std::to_string(result.skipped.size()) + " skipped)\n" +
           format_confusion_matrix(result.matrix) + "\n" +
           format_metrics_tables({{arch_label(c.arch), report}}) +
           "\nOperational constraints: " + (check.passed ? "pass" : "fail");
    for (const auto& r : check.reasons) text += "; " + r;
    text += "\n";
  }
  for (const auto& s : result.skipped) text += "skipped: " + s.path + " (" + s.reason + ")\n";
  emit(text, c.out, out);
  return kExitOk;
}

int cmd_explain(const Common& c, const std::string& image_path, const std::string& cls,
                const std::string& grid, double threshold, std::size_t budget,
                bool body_mask, std::ostream& out) {
  require_file(image_path, "image");
  require_file(c.checkpoint, "checkpoint");
  const ArchitectureGraph graph = load_arch(c.arch);
  const GraphClassifier model(graph, weights_from_checkpoint<float>(graph, load_checkpoint(c.checkpoint)));
  const Shape in = graph.input_shape();
  const Image image = prepare_eval_sample(read_png(image_path), in.h, in.w, body_mask, true);

  ExplainConfig cfg;
  std::tie(cfg.grid_h, cfg.grid_w) = parse_grid(grid);
  cfg.threshold = threshold;
  cfg.budget = budget;
  const ClassLabel target = cls.empty() ? predict_class(model.predict_one(image)) : parse_class(cls);
  const CriticalFactorMask mask = critical_factors(model, image, target, cfg);

  const auto pixels = mask.upsample(image.height, image.width);
  const BodyMaskResult body = body_region_mask(image);
  nlohmann::json j = mask_to_json(mask);
  j["outside_body_fraction"] = outside_body_fraction(pixels, body.body);
  const fs::path dir = c.out;
  fs::create_directories(dir);
  write_png(dir / "overlay.png", render_overlay(image, pixels));
  write_text_file(dir / "mask.json", j.dump(2) + "\n");
  out << j.dump(2) << "\n";
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"COVIDNet-CT toolkit: complexity analysis, data preparation, training, "
               "evaluation and occlusion-based explanations",
               "covidnet"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  Common c;
  auto add_seed = [&](CLI::App* s) {
    s->add_option("--seed", c.seed, "Random seed")->capture_default_str();
  };
  auto add_exec = [&](CLI::App* s) {
    s->add_flag("--deterministic", c.deterministic, "Single-threaded, fixed-order reductions");
    s->add_option("--workers", c.workers, "Worker threads when not deterministic (0 = all cores)");
  };

  // analyze
  auto* analyze = app.add_subcommand("analyze", "Parameter and FLOP counts of architecture configs");
  std::optional<std::size_t> resolution;
  int flops_per_mac = 2;
  bool breakdown = false, json = false;
  analyze->add_option("--arch", c.arch, "Architecture config (path or bundled name)")->required();
  analyze->add_option("--baseline", c.baseline, "Second config to compare against");
  analyze->add_option("--resolution", resolution, "Square analysis resolution (default 512)");
  analyze->add_option("--flops-per-mac", flops_per_mac, "FLOP convention")
      ->check(CLI::IsMember({1, 2}))
      ->capture_default_str();
  analyze->add_flag("--breakdown", breakdown, "Append per-node tables");
  analyze->add_flag("--json", json, "Structured output");
  analyze->add_option("--out", c.out, "Write the report here instead of stdout");

  // synth-data
  auto* synth = app.add_subcommand("synth-data", "Generate the synthetic CT-like dataset");
  std::vector<std::size_t> patients{20};
  std::size_t slices = 4, synth_res = 64;
  std::string table = "none";
  synth->add_option("--out", c.out, "Output directory")->required();
  synth->add_option("--patients", patients, "Patients per class (one value or three)")
      ->delimiter(',')
      ->capture_default_str();
  synth->add_option("--slices", slices, "Slices per patient")->capture_default_str();
  synth->add_option("--resolution", synth_res, "Image side length")->capture_default_str();
  synth->add_option("--table", table, "Exterior table artifact: none, all, covid_only")
      ->capture_default_str();
  add_seed(synth);

  // build-manifest
  auto* manifest = app.add_subcommand("build-manifest", "Filter metadata and split patients");
  std::string metadata;
  manifest->add_option("--data-root", c.data_root, "Image root directory")->required();
  manifest->add_option("--metadata", metadata, "Metadata table (default <data-root>/metadata.csv)");
  manifest->add_option("--out", c.out, "Manifest file to write")->required();
  add_seed(manifest);

  // train
  auto* train_cmd = app.add_subcommand("train", "Train with SGD momentum and rebalanced batches");
  TrainConfig tcfg;
  std::string log_path;
  train_cmd->add_option("--config", c.config, "JSON training config; flags win");
  train_cmd->add_option("--arch", c.arch, "Architecture config");
  train_cmd->add_option("--manifest", c.manifest, "Manifest with train and val splits");
  train_cmd->add_option("--data-root", c.data_root, "Base for relative manifest paths");
  train_cmd->add_option("--out", c.out, "Checkpoint path for the best-val weights");
  train_cmd->add_option("--epochs", tcfg.epochs, "Epochs")->capture_default_str();
  train_cmd->add_option("--lr", tcfg.learning_rate, "Learning rate")->capture_default_str();
  train_cmd->add_option("--momentum", tcfg.momentum, "Momentum")->capture_default_str();
  train_cmd->add_option("--batch-size", tcfg.batch_size, "Batch size")->capture_default_str();
  train_cmd->add_option("--log", log_path, "Also write the epoch log here");
  add_seed(train_cmd);
  add_exec(train_cmd);

  // eval
  auto* eval = app.add_subcommand("eval", "Image-level confusion matrix and metrics");
  std::string split = "test";
  bool eval_mask = false, no_crop = false, eval_json = false;
  eval->add_option("--arch", c.arch, "Architecture config")->required();
  eval->add_option("--checkpoint", c.checkpoint, "Trained weights")->required();
  eval->add_option("--manifest", c.manifest, "Manifest")->required();
  eval->add_option("--data-root", c.data_root, "Base for relative manifest paths");
  eval->add_option("--split", split, "train, val or test")->capture_default_str();
  eval->add_flag("--body-mask", eval_mask, "Zero pixels outside the body before inference");
  eval->add_flag("--no-body-crop", no_crop, "Resize whole frames instead of the body box");
  eval->add_flag("--json", eval_json, "Structured output");
  eval->add_option("--out", c.out, "Write the report here instead of stdout");
  add_exec(eval);

  // explain
  auto* explain = app.add_subcommand("explain", "Occlusion-based critical factors of one image");
  std::string image_path, cls, grid = "16";
  double threshold = 0.5;
  std::size_t budget = 32;
  bool explain_mask = false;
  explain->add_option("--arch", c.arch, "Architecture config")->required();
  explain->add_option("--checkpoint", c.checkpoint, "Trained weights")->required();
  explain->add_option("--image", image_path, "Grayscale PNG")->required();
  explain->add_option("--class", cls, "Target class (default: predicted class)");
  explain->add_option("--grid", grid, "Grid cells, N or HxW")->capture_default_str();
  explain->add_option("--threshold", threshold, "Confidence drop ratio")->capture_default_str();
  explain->add_option("--budget", budget, "Maximum occluded cells")->capture_default_str();
  explain->add_flag("--body-mask", explain_mask, "Zero pixels outside the body first");
  explain->add_option("--out", c.out, "Directory for overlay.png and mask.json")->required();
  add_exec(explain);

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    const auto subs = app.get_subcommands();
    out << (subs.empty() ? app.help() : subs.back()->help());
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }

  try {
    apply_execution(c);
    if (*analyze) return cmd_analyze(c, resolution, flops_per_mac, breakdown, json, out);
    if (*synth) return cmd_synth(c, patients, slices, synth_res, table, out);
    if (*manifest) return cmd_build_manifest(c, metadata, out, err);
    if (*train_cmd) return cmd_train(c, *train_cmd, tcfg, log_path, out);
    if (*eval) return cmd_eval(c, split, eval_mask, no_crop, eval_json, out);
    if (*explain) {
      return cmd_explain(c, image_path, cls, grid, threshold, budget, explain_mask, out);
    }
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitDomainError;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return kExitDomainError;
  }
  err << app.help();
  return kExitUsage;
}

}  // namespace covidnet
