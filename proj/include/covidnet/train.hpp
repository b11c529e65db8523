#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "covidnet/augment.hpp"
#include "covidnet/checkpoint.hpp"
#include "covidnet/classifier.hpp"
#include "covidnet/data.hpp"
#include "covidnet/graph.hpp"
#include "covidnet/metrics.hpp"

namespace covidnet {

struct TrainConfig {
  double learning_rate = 5e-3;
  double momentum = 0.9;
  std::size_t epochs = 17;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
  bool deterministic = true;
  /// Threads used when not deterministic; 0 picks the hardware count.
  unsigned workers = 1;
  AugmentationConfig augmentation;
  std::optional<std::filesystem::path> initial_checkpoint;
  /// Batches per epoch; 0 means ceil(train images / batch size).
  std::size_t steps_per_epoch = 0;
  /// Body masking of validation images (augmentation masks train images).
  /// Validation images are cropped to the body box whenever training
  /// augmentation masks, so both see the same framing.
  bool eval_body_mask = false;

  /// Throws ConfigError.
  void validate() const;
};

/// v <- mu * v + g, w <- w - lr * v. Throws NumericError on a non-finite
/// gradient before touching anything.
template <typename T>
void sgd_momentum_step(std::span<T> weights, std::span<const T> gradients,
                       std::span<T> velocity, double lr, double mu);

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  MetricsReport val;
};

/// One line: epoch, train loss, val accuracy, per-class val sensitivity and
/// PPV in Normal/Non-COVID-19/COVID-19 order.
std::string format_epoch_log(const EpochLog& log);

struct TrainResult {
  /// Best validation accuracy so far; the initial weights if no epoch
  /// finished.
  Checkpoint best;
  std::vector<EpochLog> log;
  bool diverged = false;
  std::string abort_reason;
};

/// Trains on the train split with rebalanced, augmented batches and checks
/// the val split after each epoch. Progress lines go to `progress`.
TrainResult train(const ArchitectureGraph& graph,
                  const std::vector<ImageRecord>& manifest,
                  const TrainConfig& config, std::ostream* progress = nullptr);

struct EvalOptions {
  bool body_mask = false;
  /// Crop to the body bounding box, matching training with masking on.
  bool body_crop = true;
  std::size_t batch_size = 16;
};

struct EvalResult {
  ConfusionMatrix matrix;
  /// Unreadable images, skipped and absent from the matrix.
  std::vector<Exclusion> skipped;
  std::vector<ClassLabel> predictions;
};

/// Image-level evaluation of `records` (already restricted to one split).
EvalResult evaluate(const Classifier& model, const std::vector<ImageRecord>& records,
                    const EvalOptions& options = {});

/// Evaluates preloaded images.
EvalResult evaluate_images(const Classifier& model, std::span<const Image> images,
                           std::span<const ClassLabel> labels);

nlohmann::json train_config_to_json(const TrainConfig& config);
/// Overlays the keys present in `j` onto `config`; unknown keys throw
/// ConfigError.
void apply_train_config_json(const nlohmann::json& j, TrainConfig& config);

}  // namespace covidnet
