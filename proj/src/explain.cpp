#include "covidnet/explain.hpp"

#include <algorithm>
#include <cmath>

#include "covidnet/errors.hpp"
#include "covidnet/metrics.hpp"

namespace covidnet {

namespace {

void occlude_cell(Image& image, std::size_t gh, std::size_t gw, std::size_t cell) {
  const std::size_t r = cell / gw;
  const std::size_t c = cell % gw;
  // Inverse of y*gh/H == r: y in [ceil(r*H/gh), ceil((r+1)*H/gh)).
  auto lo = [](std::size_t k, std::size_t n, std::size_t g) { return (k * n + g - 1) / g; };
  const std::size_t y0 = lo(r, image.height, gh), y1 = lo(r + 1, image.height, gh);
  const std::size_t x0 = lo(c, image.width, gw), x1 = lo(c + 1, image.width, gw);
  for (std::size_t y = y0; y < y1; ++y) {
    for (std::size_t x = x0; x < x1; ++x) image.at(y, x) = 0.0f;
  }
}

}  // namespace

void ExplainConfig::validate() const {
  if (grid_h == 0 || grid_w == 0) throw ConfigError("explain grid must be non-empty");
  if (!(threshold > 0.0 && threshold < 1.0)) {
    throw ConfigError("explain threshold must lie in (0, 1)");
  }
  if (budget == 0) throw ConfigError("explain budget must be positive");
  if (batch == 0) throw ConfigError("explain batch must be positive");
}

std::vector<std::uint8_t> CriticalFactorMask::upsample(std::size_t height,
                                                       std::size_t width) const {
  std::vector<std::uint8_t> out(height * width, 0);
  for (std::size_t y = 0; y < height; ++y) {
    const std::size_t r = y * grid_h / height;
    for (std::size_t x = 0; x < width; ++x) {
      out[y * width + x] = cells[r * grid_w + x * grid_w / width];
    }
  }
  return out;
}

CriticalFactorMask critical_factors(const Classifier& model, const Image& image,
                                    ClassLabel target, const ExplainConfig& config) {
  config.validate();
  if (image.height < config.grid_h || image.width < config.grid_w) {
    throw ConfigError("explain grid " + std::to_string(config.grid_h) + "x" +
                      std::to_string(config.grid_w) + " is finer than the image");
  }
  const ClassScores initial = model.predict_one(image);
  const ClassLabel predicted = predict_class(initial);
  if (predicted != target) {
    throw PreconditionError("model predicts " + std::string(class_key(predicted)) +
                            ", not the target class " + std::string(class_key(target)));
  }
  const auto t = static_cast<std::size_t>(target);
  const std::size_t n_cells = config.grid_h * config.grid_w;

  CriticalFactorMask mask;
  mask.grid_h = config.grid_h;
  mask.grid_w = config.grid_w;
  mask.cells.assign(n_cells, 0);
  mask.target = target;
  mask.threshold = config.threshold;
  mask.confidence_before = initial[t];
  mask.confidence_after = initial[t];
  const double goal = config.threshold * mask.confidence_before;

  Image current = image;
  while (true) {
    if (mask.confidence_after < goal) {
      mask.achieved = true;
      mask.stop_reason = "confidence below threshold";
      break;
    }
    if (mask.count() >= config.budget) {
      mask.stop_reason = "budget exhausted";
      break;
    }
    std::size_t best_cell = n_cells;
    double best_conf = mask.confidence_after;
    std::vector<std::size_t> candidates;
    for (std::size_t cell = 0; cell < n_cells; ++cell) {
      if (!mask.cells[cell]) candidates.push_back(cell);
    }
    for (std::size_t b = 0; b < candidates.size(); b += config.batch) {
      const std::size_t e = std::min(candidates.size(), b + config.batch);
      std::vector<Image> trial(e - b, current);
      for (std::size_t i = b; i < e; ++i) {
        occlude_cell(trial[i - b], config.grid_h, config.grid_w, candidates[i]);
      }
      const auto scores = model.predict(trial);
      for (std::size_t i = b; i < e; ++i) {
        if (scores[i - b][t] < best_conf) {
          best_conf = scores[i - b][t];
          best_cell = candidates[i];
        }
      }
    }
    if (best_cell == n_cells) {
      mask.stop_reason = "no remaining cell lowers confidence";
      break;
    }
    occlude_cell(current, config.grid_h, config.grid_w, best_cell);
    mask.cells[best_cell] = 1;
    mask.order.push_back(best_cell);
    mask.confidence_after = best_conf;
  }
  return mask;
}

Image occlude(const Image& image, const CriticalFactorMask& mask) {
  Image out = image;
  for (std::size_t cell : mask.order) occlude_cell(out, mask.grid_h, mask.grid_w, cell);
  return out;
}

RgbImage render_overlay(const Image& image, const std::vector<std::uint8_t>& pixel_mask) {
  if (pixel_mask.size() != image.size()) {
    throw ShapeError("H,W", "mask has " + std::to_string(pixel_mask.size()) +
                                " pixels, image has " + std::to_string(image.size()));
  }
  RgbImage out{image.height, image.width, std::vector<std::uint8_t>(image.size() * 3)};
  for (std::size_t p = 0; p < image.size(); ++p) {
    const std::uint8_t g = to_byte(image.pixels[p]);
    std::uint8_t* px = &out.rgb[3 * p];
    if (!pixel_mask[p]) {
      px[0] = px[1] = px[2] = g;
      continue;
    }
    const double keep = (1.0 - kOverlayAlpha) * g;
    px[0] = static_cast<std::uint8_t>(std::lround(keep + kOverlayAlpha * 255.0));
    px[1] = px[2] = static_cast<std::uint8_t>(std::lround(keep));
  }
  return out;
}

double outside_body_fraction(const std::vector<std::uint8_t>& pixel_mask,
                             const std::vector<std::uint8_t>& body) {
  if (pixel_mask.size() != body.size()) {
    throw ShapeError("H,W", "mask and body region differ in size");
  }
  std::size_t total = 0;
  std::size_t outside = 0;
  for (std::size_t p = 0; p < pixel_mask.size(); ++p) {
    if (!pixel_mask[p]) continue;
    ++total;
    if (!body[p]) ++outside;
  }
  return total == 0 ? 0.0 : static_cast<double>(outside) / static_cast<double>(total);
}

nlohmann::json mask_to_json(const CriticalFactorMask& mask) {
  nlohmann::json cells = nlohmann::json::array();
  for (std::size_t cell : mask.order) {
    cells.push_back({cell / mask.grid_w, cell % mask.grid_w});
  }
  return {{"method", "occlusion-based critical factors"},
          {"grid", {mask.grid_h, mask.grid_w}},
          {"target", std::string(class_key(mask.target))},
          {"cells", cells},
          {"confidence_before", mask.confidence_before},
          {"confidence_after", mask.confidence_after},
          {"threshold", mask.threshold},
          {"achieved", mask.achieved},
          {"stop_reason", mask.stop_reason}};
}

}  // namespace covidnet
