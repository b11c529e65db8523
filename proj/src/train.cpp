#include "covidnet/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>

#include "covidnet/errors.hpp"
#include "covidnet/sampler.hpp"

namespace covidnet {

namespace {

class ExecutionModeGuard {
 public:
  ExecutionModeGuard(ExecutionMode mode, unsigned threads)
      : mode_(execution_mode()), threads_(execution_threads()) {
    set_execution_mode(mode, threads);
  }
  ~ExecutionModeGuard() { set_execution_mode(mode_, threads_); }
  ExecutionModeGuard(const ExecutionModeGuard&) = delete;
  ExecutionModeGuard& operator=(const ExecutionModeGuard&) = delete;

 private:
  ExecutionMode mode_;
  unsigned threads_;
};

std::string fmt_loss(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::vector<Image> load_images(const std::vector<ImageRecord>& records) {
  std::vector<Image> out;
  out.reserve(records.size());
  for (const ImageRecord& r : records) out.push_back(read_png(r.filepath));
  return out;
}

}  // namespace

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw ConfigError("learning_rate must be positive");
  }
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
  if (epochs < 1) throw ConfigError("epochs must be at least 1");
  if (batch_size < kNumClasses) {
    throw ConfigError("batch_size must be at least " + std::to_string(kNumClasses));
  }
  augmentation.validate();
}

template <typename T>
void sgd_momentum_step(std::span<T> weights, std::span<const T> gradients,
                       std::span<T> velocity, double lr, double mu) {
  if (weights.size() != gradients.size() || weights.size() != velocity.size()) {
    throw ShapeError("parameters", "weights, gradients and velocity differ in length");
  }
  for (std::size_t i = 0; i < gradients.size(); ++i) {
    if (!std::isfinite(gradients[i])) {
      throw NumericError("non-finite gradient at element " + std::to_string(i));
    }
  }
  const T l = static_cast<T>(lr);
  const T m = static_cast<T>(mu);
  for (std::size_t i = 0; i < weights.size(); ++i) {
    velocity[i] = m * velocity[i] + gradients[i];
    weights[i] -= l * velocity[i];
  }
}

template void sgd_momentum_step<float>(std::span<float>, std::span<const float>,
                                       std::span<float>, double, double);
template void sgd_momentum_step<double>(std::span<double>, std::span<const double>,
                                        std::span<double>, double, double);

std::string format_epoch_log(const EpochLog& log) {
  std::string line = "epoch " + std::to_string(log.epoch) + " train_loss " +
                     fmt_loss(log.train_loss) + " val_accuracy " +
                     format_percent(log.val.accuracy) + " val_sensitivity";
  for (const auto& v : log.val.sensitivity) line += " " + format_percent(v);
  line += " val_ppv";
  for (const auto& v : log.val.ppv) line += " " + format_percent(v);
  return line;
}

EvalResult evaluate_images(const Classifier& model, std::span<const Image> images,
                           std::span<const ClassLabel> labels) {
  if (images.size() != labels.size()) {
    throw ShapeError("batch", "image and label counts differ");
  }
  EvalResult result;
  if (images.empty()) return result;
  const auto scores = model.predict(images);
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const ClassLabel p = predict_class(scores[i]);
    result.predictions.push_back(p);
    result.matrix.add(labels[i], p);
  }
  return result;
}

EvalResult evaluate(const Classifier& model, const std::vector<ImageRecord>& records,
                    const EvalOptions& options) {
  EvalResult result;
  const auto size = model.input_size();
  const std::size_t chunk = std::max<std::size_t>(1, options.batch_size);
  std::vector<Image> images;
  std::vector<ClassLabel> labels;
  auto flush = [&] {
    EvalResult part = evaluate_images(model, images, labels);
    result.matrix.merge(part.matrix);
    result.predictions.insert(result.predictions.end(), part.predictions.begin(),
                              part.predictions.end());
    images.clear();
    labels.clear();
  };
  for (const ImageRecord& r : records) {
    Image img;
    try {
      img = read_png(r.filepath);
    } catch (const IoError& e) {
      result.skipped.push_back({r.filepath.string(), e.what()});
      continue;
    }
    const std::size_t h = size ? size->first : img.height;
    const std::size_t w = size ? size->second : img.width;
    images.push_back(prepare_eval_sample(img, h, w, options.body_mask, options.body_crop));
    labels.push_back(r.label);
    if (images.size() == chunk) flush();
  }
  flush();
  return result;
}

TrainResult train(const ArchitectureGraph& graph, const std::vector<ImageRecord>& manifest,
                  const TrainConfig& config, std::ostream* progress) {
  config.validate();
  const ExecutionModeGuard guard(
      config.deterministic ? ExecutionMode::kDeterministic : ExecutionMode::kParallel,
      config.deterministic ? 1 : config.workers);

  const auto train_records = filter_split(manifest, Split::kTrain);
  const auto val_records = filter_split(manifest, Split::kVal);
  if (train_records.empty()) throw DataError("manifest has no train records");
  if (val_records.empty()) throw DataError("manifest has no val records");

  std::vector<ClassLabel> train_labels;
  for (const auto& r : train_records) train_labels.push_back(r.label);
  RebalancedSampler sampler(train_labels, config.batch_size, config.seed);

  const Shape in = graph.input_shape();
  const std::vector<Image> train_images = load_images(train_records);
  std::vector<Image> val_images;
  std::vector<ClassLabel> val_labels;
  for (const auto& r : val_records) {
    val_images.push_back(prepare_eval_sample(read_png(r.filepath), in.h, in.w,
                                             config.eval_body_mask,
                                             config.augmentation.body_mask_enabled));
    val_labels.push_back(r.label);
  }

  Weights<float> weights = config.initial_checkpoint
                               ? weights_from_checkpoint<float>(
                                     graph, load_checkpoint(*config.initial_checkpoint))
                               : Weights<float>::initialize(graph, config.seed);
  std::vector<std::vector<float>> velocity;
  for (const auto& e : weights.entries()) {
    velocity.emplace_back(e.trainable ? e.param.values.size() : 0, 0.0f);
  }

  TrainResult result;
  result.best = to_checkpoint(weights, 0);
  std::optional<double> best_acc;
  const std::size_t steps =
      config.steps_per_epoch > 0
          ? config.steps_per_epoch
          : (train_records.size() + config.batch_size - 1) / config.batch_size;
  std::uint64_t global_step = 0;

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    double loss_sum = 0.0;
    for (std::size_t step = 0; step < steps; ++step) {
      const auto idx = sampler.next_batch();
      std::vector<Image> batch(idx.size());
      std::vector<int> labels(idx.size());
      const std::uint64_t base = static_cast<std::uint64_t>(step) * config.batch_size;
      parallel_for(idx.size(), [&](std::size_t b, std::size_t e) {
        for (std::size_t j = b; j < e; ++j) {
          Rng rng(sample_seed(config.seed, epoch, base + j));
          batch[j] = augment_sample(train_images[idx[j]], config.augmentation, rng, in.h, in.w);
        }
      });
      for (std::size_t j = 0; j < idx.size(); ++j) labels[j] = class_index(train_labels[idx[j]]);

      const auto fwd = graph_forward(graph, weights, images_to_tensor(batch, in.c),
                                     Mode::kTrain, true);
      const auto grads = graph_backward(graph, weights, fwd, labels);
      if (!std::isfinite(grads.loss)) {
        result.diverged = true;
        result.abort_reason = "non-finite loss at epoch " + std::to_string(epoch) +
                              " step " + std::to_string(step + 1);
        break;
      }
      try {
        auto& entries = weights.entries();
        for (std::size_t k = 0; k < entries.size(); ++k) {
          if (!entries[k].trainable) continue;
          sgd_momentum_step<float>(entries[k].param.values, grads.params[k], velocity[k],
                                   config.learning_rate, config.momentum);
        }
      } catch (const NumericError& e) {
        result.diverged = true;
        result.abort_reason = std::string(e.what()) + " at epoch " + std::to_string(epoch);
        break;
      }
      apply_running_stats(graph, weights, fwd.cache);
      loss_sum += grads.loss;
      ++global_step;
    }
    if (result.diverged) break;

    EpochLog log;
    log.epoch = epoch;
    log.train_loss = loss_sum / static_cast<double>(steps);
    const GraphClassifier model(graph, weights);
    log.val = metrics_from_confusion(evaluate_images(model, val_images, val_labels).matrix);
    if (!best_acc || log.val.accuracy > *best_acc) {
      best_acc = log.val.accuracy;
      result.best = to_checkpoint(model.weights(), global_step, log.val.accuracy);
    }
    if (progress) *progress << format_epoch_log(log) << '\n' << std::flush;
    result.log.push_back(std::move(log));
  }
  if (result.diverged && progress) *progress << "aborted: " << result.abort_reason << '\n';
  return result;
}

nlohmann::json train_config_to_json(const TrainConfig& c) {
  const AugmentationConfig& a = c.augmentation;
  nlohmann::json j = {
      {"learning_rate", c.learning_rate},
      {"momentum", c.momentum},
      {"epochs", c.epochs},
      {"batch_size", c.batch_size},
      {"seed", c.seed},
      {"deterministic", c.deterministic},
      {"workers", c.workers},
      {"steps_per_epoch", c.steps_per_epoch},
      {"eval_body_mask", c.eval_body_mask},
      {"augmentation",
       {{"crop_jitter_frac", a.crop_jitter_frac},
        {"rotation_deg_max", a.rotation_deg_max},
        {"shear_deg_max", a.shear_deg_max},
        {"hflip_prob", a.hflip_prob},
        {"intensity_shift_max", a.intensity_shift_max},
        {"intensity_scale_range", {a.intensity_scale_lo, a.intensity_scale_hi}},
        {"body_mask_enabled", a.body_mask_enabled},
        {"body_mask_threshold", a.body_mask_threshold}}}};
  if (c.initial_checkpoint) j["initial_checkpoint"] = c.initial_checkpoint->string();
  return j;
}

void apply_train_config_json(const nlohmann::json& j, TrainConfig& c) {
  if (!j.is_object()) throw ConfigError("training config must be an object");
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "learning_rate") c.learning_rate = v.get<double>();
      else if (key == "momentum") c.momentum = v.get<double>();
      else if (key == "epochs") c.epochs = v.get<std::size_t>();
      else if (key == "batch_size") c.batch_size = v.get<std::size_t>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "deterministic") c.deterministic = v.get<bool>();
      else if (key == "workers") c.workers = v.get<unsigned>();
      else if (key == "steps_per_epoch") c.steps_per_epoch = v.get<std::size_t>();
      else if (key == "eval_body_mask") c.eval_body_mask = v.get<bool>();
      else if (key == "initial_checkpoint") c.initial_checkpoint = v.get<std::string>();
      else if (key == "augmentation") {
        if (!v.is_object()) throw ConfigError("augmentation must be an object");
        AugmentationConfig& a = c.augmentation;
        for (const auto& [k, x] : v.items()) {
          if (k == "crop_jitter_frac") a.crop_jitter_frac = x.get<double>();
          else if (k == "rotation_deg_max") a.rotation_deg_max = x.get<double>();
          else if (k == "shear_deg_max") a.shear_deg_max = x.get<double>();
          else if (k == "hflip_prob") a.hflip_prob = x.get<double>();
          else if (k == "intensity_shift_max") a.intensity_shift_max = x.get<double>();
          else if (k == "intensity_scale_range") {
            const auto r = x.get<std::vector<double>>();
            if (r.size() != 2) throw ConfigError("intensity_scale_range needs two values");
            a.intensity_scale_lo = r[0];
            a.intensity_scale_hi = r[1];
          } else if (k == "body_mask_enabled") a.body_mask_enabled = x.get<bool>();
          else if (k == "body_mask_threshold") a.body_mask_threshold = x.get<float>();
          else if (k == "seed") a.seed = x.get<std::uint64_t>();
          else throw ConfigError("unknown augmentation key '" + k + "'");
        }
      } else {
        throw ConfigError("unknown training config key '" + key + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("training config: ") + e.what());
  }
}

}  // namespace covidnet
