#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "covidnet/classifier.hpp"
#include "covidnet/data.hpp"
#include "covidnet/image.hpp"

namespace covidnet {

struct ExplainConfig {
  std::size_t grid_h = 16;
  std::size_t grid_w = 16;
  /// Stop once confidence < threshold * confidence_before.
  double threshold = 0.5;
  /// Maximum number of occluded cells.
  std::size_t budget = 32;
  /// Candidate images per model call.
  std::size_t batch = 32;

  /// Throws ConfigError.
  void validate() const;
};

struct CriticalFactorMask {
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;
  /// Row-major grid_h x grid_w, 1 = occluded.
  std::vector<std::uint8_t> cells;
  /// Selected cell indices in selection order.
  std::vector<std::size_t> order;
  double confidence_before = 0.0;
  double confidence_after = 0.0;
  ClassLabel target = ClassLabel::kNormal;
  double threshold = 0.5;
  bool achieved = false;
  std::string stop_reason;

  std::size_t count() const { return order.size(); }
  /// Nearest-neighbor: pixel (y, x) belongs to cell (y*gh/H, x*gw/W).
  std::vector<std::uint8_t> upsample(std::size_t height, std::size_t width) const;

  friend bool operator==(const CriticalFactorMask&, const CriticalFactorMask&) = default;
};

/// Greedy occlusion search. Each round zeroes the remaining cell that lowers
/// the target probability most (ties to the lowest row-major index). Stops
/// when confidence drops below threshold * before (achieved), when the
/// budget is spent, or when no remaining cell lowers confidence at all.
/// Throws PreconditionError unless the model predicts `target` on `image`.
CriticalFactorMask critical_factors(const Classifier& model, const Image& image,
                                    ClassLabel target, const ExplainConfig& config = {});

/// Copy of `image` with every pixel of the selected cells set to 0.
Image occlude(const Image& image, const CriticalFactorMask& mask);

inline constexpr double kOverlayAlpha = 0.45;

/// Gray to RGB; pixels with mask set are blended toward pure red.
/// Throws ShapeError when the mask does not cover the image.
RgbImage render_overlay(const Image& image, const std::vector<std::uint8_t>& pixel_mask);

/// Fraction of masked pixels outside `body` (0 for an empty mask).
double outside_body_fraction(const std::vector<std::uint8_t>& pixel_mask,
                             const std::vector<std::uint8_t>& body);

nlohmann::json mask_to_json(const CriticalFactorMask& mask);

}  // namespace covidnet
