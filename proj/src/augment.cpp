#include "covidnet/augment.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "covidnet/body_mask.hpp"
#include "covidnet/errors.hpp"

namespace covidnet {

namespace {

double radians(double deg) { return deg * std::numbers::pi / 180.0; }

}  // namespace

void AugmentationConfig::validate() const {
  auto non_negative = [](double v, const char* name) {
    if (!(v >= 0.0) || !std::isfinite(v)) {
      throw ConfigError(std::string("augmentation ") + name + " must be non-negative");
    }
  };
  non_negative(crop_jitter_frac, "crop_jitter_frac");
  non_negative(rotation_deg_max, "rotation_deg_max");
  non_negative(shear_deg_max, "shear_deg_max");
  non_negative(intensity_shift_max, "intensity_shift_max");
  non_negative(intensity_scale_lo, "intensity_scale_lo");
  non_negative(intensity_scale_hi, "intensity_scale_hi");
  if (!(hflip_prob >= 0.0 && hflip_prob <= 1.0)) {
    throw ConfigError("augmentation hflip_prob must lie in [0, 1]");
  }
  if (intensity_scale_lo > intensity_scale_hi) {
    throw ConfigError("augmentation intensity scale range has lo > hi");
  }
  if (crop_jitter_frac >= 0.5) {
    throw ConfigError("augmentation crop_jitter_frac must be below 0.5");
  }
  if (shear_deg_max >= 45.0) throw ConfigError("augmentation shear_deg_max must be below 45");
}

AugmentationConfig AugmentationConfig::none() {
  AugmentationConfig c;
  c.crop_jitter_frac = 0.0;
  c.rotation_deg_max = 0.0;
  c.shear_deg_max = 0.0;
  c.hflip_prob = 0.0;
  c.intensity_shift_max = 0.0;
  c.intensity_scale_lo = 1.0;
  c.intensity_scale_hi = 1.0;
  c.body_mask_enabled = false;
  return c;
}

Image horizontal_flip(const Image& image) {
  Image out = image;
  for (std::size_t y = 0; y < image.height; ++y) {
    std::reverse(out.pixels.begin() + static_cast<std::ptrdiff_t>(y * image.width),
                 out.pixels.begin() + static_cast<std::ptrdiff_t>((y + 1) * image.width));
  }
  return out;
}

Image affine_transform(const Image& image, double rotation_deg,
                       double shear_x_deg, double shear_y_deg) {
  if (rotation_deg == 0.0 && shear_x_deg == 0.0 && shear_y_deg == 0.0) return image;
  // Forward map A = R * S with S = [[1, tan sx], [tan sy, 1]]; sample A^-1.
  const double c = std::cos(radians(rotation_deg));
  const double s = std::sin(radians(rotation_deg));
  const double kx = std::tan(radians(shear_x_deg));
  const double ky = std::tan(radians(shear_y_deg));
  const double a00 = c - s * ky, a01 = c * kx - s;
  const double a10 = s + c * ky, a11 = s * kx + c;
  const double det = a00 * a11 - a01 * a10;
  const double i00 = a11 / det, i01 = -a01 / det;
  const double i10 = -a10 / det, i11 = a00 / det;

  const double cy = (static_cast<double>(image.height) - 1.0) / 2.0;
  const double cx = (static_cast<double>(image.width) - 1.0) / 2.0;
  auto sample = [&](std::ptrdiff_t y, std::ptrdiff_t x) -> double {
    if (y < 0 || x < 0 || y >= static_cast<std::ptrdiff_t>(image.height) ||
        x >= static_cast<std::ptrdiff_t>(image.width)) {
      return 0.0;
    }
    return image.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x));
  };
  Image out(image.height, image.width);
  for (std::size_t y = 0; y < image.height; ++y) {
    for (std::size_t x = 0; x < image.width; ++x) {
      // (x, y) as column vector; x horizontal.
      const double dx = static_cast<double>(x) - cx;
      const double dy = static_cast<double>(y) - cy;
      const double sx = i00 * dx + i01 * dy + cx;
      const double sy = i10 * dx + i11 * dy + cy;
      const double x0 = std::floor(sx);
      const double y0 = std::floor(sy);
      const double wx = sx - x0;
      const double wy = sy - y0;
      const auto ix = static_cast<std::ptrdiff_t>(x0);
      const auto iy = static_cast<std::ptrdiff_t>(y0);
      const double v = (1 - wy) * ((1 - wx) * sample(iy, ix) + wx * sample(iy, ix + 1)) +
                       wy * ((1 - wx) * sample(iy + 1, ix) + wx * sample(iy + 1, ix + 1));
      out.at(y, x) = static_cast<float>(v);
    }
  }
  return out;
}

Image augment_sample(const Image& image, const AugmentationConfig& config,
                     Rng& rng, std::size_t out_h, std::size_t out_w) {
  const double j_top = rng.uniform(-1.0, 1.0);
  const double j_left = rng.uniform(-1.0, 1.0);
  const double j_bottom = rng.uniform(-1.0, 1.0);
  const double j_right = rng.uniform(-1.0, 1.0);
  const double rot = rng.uniform(-1.0, 1.0) * config.rotation_deg_max;
  const double shx = rng.uniform(-1.0, 1.0) * config.shear_deg_max;
  const double shy = rng.uniform(-1.0, 1.0) * config.shear_deg_max;
  const bool flip = rng.bernoulli(config.hflip_prob);
  const double shift = rng.uniform(-1.0, 1.0) * config.intensity_shift_max;
  const double scale = rng.uniform(config.intensity_scale_lo, config.intensity_scale_hi);

  Image base = image;
  BoundingBox box{0, 0, image.height, image.width};
  if (config.body_mask_enabled) {
    BodyMaskResult masked = body_region_mask(image, config.body_mask_threshold);
    base = std::move(masked.image);
    if (!masked.empty_foreground) box = masked.bbox;
  }

  Image out;
  if (config.crop_jitter_frac == 0.0 && box.top == 0 && box.left == 0 &&
      box.bottom == image.height && box.right == image.width) {
    out = resize(base, out_h, out_w);
  } else {
    const double bh = static_cast<double>(box.height());
    const double bw = static_cast<double>(box.width());
    const double f = config.crop_jitter_frac;
    double top = static_cast<double>(box.top) + j_top * f * bh;
    double left = static_cast<double>(box.left) + j_left * f * bw;
    double bottom = static_cast<double>(box.bottom) + j_bottom * f * bh;
    double right = static_cast<double>(box.right) + j_right * f * bw;
    top = std::clamp(top, 0.0, static_cast<double>(image.height) - 1.0);
    left = std::clamp(left, 0.0, static_cast<double>(image.width) - 1.0);
    bottom = std::clamp(bottom, top + 1.0, static_cast<double>(image.height));
    right = std::clamp(right, left + 1.0, static_cast<double>(image.width));
    out = resample_box(base, top, left, bottom - top, right - left, out_h, out_w);
  }
  out = affine_transform(out, rot, shx, shy);
  if (flip) out = horizontal_flip(out);
  for (float& v : out.pixels) {
    v = std::clamp(static_cast<float>(v * scale + shift), 0.0f, 1.0f);
  }
  return out;
}

Image prepare_eval_sample(const Image& image, std::size_t out_h,
                          std::size_t out_w, bool body_mask, bool body_crop,
                          float threshold) {
  if (!body_mask && !body_crop) return resize(image, out_h, out_w);
  const BodyMaskResult masked = body_region_mask(image, threshold);
  const Image& base = body_mask ? masked.image : image;
  if (!body_crop || masked.empty_foreground) return resize(base, out_h, out_w);
  const BoundingBox& b = masked.bbox;
  return resample_box(base, static_cast<double>(b.top), static_cast<double>(b.left),
                      static_cast<double>(b.height()), static_cast<double>(b.width()),
                      out_h, out_w);
}

}  // namespace covidnet
