#pragma once

#include <cstddef>
#include <cstdint>

#include "covidnet/image.hpp"
#include "covidnet/random.hpp"

namespace covidnet {

struct AugmentationConfig {
  double crop_jitter_frac = 0.05;
  double rotation_deg_max = 10.0;
  /// Applied independently on both axes.
  double shear_deg_max = 5.0;
  double hflip_prob = 0.5;
  /// Fraction of the [0, 1] dynamic range.
  double intensity_shift_max = 0.1;
  double intensity_scale_lo = 0.9;
  double intensity_scale_hi = 1.1;
  bool body_mask_enabled = true;
  float body_mask_threshold = 0.15f;
  std::uint64_t seed = 0;

  /// Throws ConfigError.
  void validate() const;
  /// No geometric or intensity change and no masking.
  static AugmentationConfig none();
};

/// Per-sample stream, independent of worker scheduling.
inline std::uint64_t sample_seed(std::uint64_t seed, std::uint64_t epoch,
                                 std::uint64_t index) {
  return derive_seed(seed, epoch, index);
}

/// Body mask, jittered crop of the body box resized to out_h x out_w,
/// rotation and shear about the center, horizontal flip, then
/// v * scale + shift clamped to [0, 1]. Draws are made in a fixed order
/// whatever the configured ranges.
Image augment_sample(const Image& image, const AugmentationConfig& config,
                     Rng& rng, std::size_t out_h, std::size_t out_w);

/// Evaluation-time preparation without random draws: optionally crop to
/// the body bounding box (the un-jittered training crop), optionally zero
/// the exterior, then resize.
Image prepare_eval_sample(const Image& image, std::size_t out_h,
                          std::size_t out_w, bool body_mask, bool body_crop,
                          float threshold = 0.15f);

Image horizontal_flip(const Image& image);

/// Rotation by `rotation_deg` combined with shears along x and y, about the
/// image center, bilinear with 0 fill.
Image affine_transform(const Image& image, double rotation_deg,
                       double shear_x_deg, double shear_y_deg);

}  // namespace covidnet
