#include "covidnet/body_mask.hpp"

#include <algorithm>

namespace covidnet {

namespace {

/// Flood fill from `seed` over pixels where `allowed` is set and `label` is
/// still 0. Returns the number of pixels labeled.
std::size_t flood(const std::vector<std::uint8_t>& allowed, std::size_t h,
                  std::size_t w, std::size_t seed, int label, bool eight,
                  std::vector<int>& labels, std::vector<std::size_t>& stack) {
  std::size_t count = 0;
  stack.clear();
  stack.push_back(seed);
  labels[seed] = label;
  while (!stack.empty()) {
    const std::size_t p = stack.back();
    stack.pop_back();
    ++count;
    const auto y = static_cast<std::ptrdiff_t>(p / w);
    const auto x = static_cast<std::ptrdiff_t>(p % w);
    for (std::ptrdiff_t dy = -1; dy <= 1; ++dy) {
      for (std::ptrdiff_t dx = -1; dx <= 1; ++dx) {
        if (dy == 0 && dx == 0) continue;
        if (!eight && dy != 0 && dx != 0) continue;
        const std::ptrdiff_t ny = y + dy;
        const std::ptrdiff_t nx = x + dx;
        if (ny < 0 || nx < 0 || ny >= static_cast<std::ptrdiff_t>(h) ||
            nx >= static_cast<std::ptrdiff_t>(w)) {
          continue;
        }
        const std::size_t q = static_cast<std::size_t>(ny) * w + static_cast<std::size_t>(nx);
        if (allowed[q] && labels[q] == 0) {
          labels[q] = label;
          stack.push_back(q);
        }
      }
    }
  }
  return count;
}

}  // namespace

std::vector<std::uint8_t> largest_component(const std::vector<std::uint8_t>& mask,
                                            std::size_t height, std::size_t width) {
  std::vector<int> labels(mask.size(), 0);
  std::vector<std::size_t> stack;
  int next = 0;
  int best = 0;
  std::size_t best_size = 0;
  for (std::size_t p = 0; p < mask.size(); ++p) {
    if (!mask[p] || labels[p] != 0) continue;
    const std::size_t n = flood(mask, height, width, p, ++next, true, labels, stack);
    if (n > best_size) {
      best_size = n;
      best = next;
    }
  }
  std::vector<std::uint8_t> out(mask.size(), 0);
  if (best == 0) return out;
  for (std::size_t p = 0; p < mask.size(); ++p) out[p] = labels[p] == best;
  return out;
}

std::vector<std::uint8_t> fill_holes(const std::vector<std::uint8_t>& mask,
                                     std::size_t height, std::size_t width) {
  std::vector<std::uint8_t> background(mask.size());
  for (std::size_t p = 0; p < mask.size(); ++p) background[p] = !mask[p];
  std::vector<int> labels(mask.size(), 0);
  std::vector<std::size_t> stack;
  auto seed = [&](std::size_t p) {
    if (background[p] && labels[p] == 0) {
      flood(background, height, width, p, 1, false, labels, stack);
    }
  };
  for (std::size_t x = 0; x < width; ++x) {
    seed(x);
    seed((height - 1) * width + x);
  }
  for (std::size_t y = 0; y < height; ++y) {
    seed(y * width);
    seed(y * width + width - 1);
  }
  std::vector<std::uint8_t> out(mask.size());
  for (std::size_t p = 0; p < mask.size(); ++p) out[p] = labels[p] == 0;
  return out;
}

BoundingBox mask_bounding_box(const std::vector<std::uint8_t>& mask,
                              std::size_t height, std::size_t width) {
  BoundingBox box{height, width, 0, 0};
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      if (!mask[y * width + x]) continue;
      box.top = std::min(box.top, y);
      box.left = std::min(box.left, x);
      box.bottom = std::max(box.bottom, y + 1);
      box.right = std::max(box.right, x + 1);
    }
  }
  if (box.bottom == 0) return {};
  return box;
}

BodyMaskResult body_region_mask(const Image& image, float threshold) {
  BodyMaskResult result;
  result.image = image;
  if (image.size() == 0) {
    result.empty_foreground = true;
    return result;
  }
  std::vector<std::uint8_t> fg(image.size());
  for (std::size_t p = 0; p < image.size(); ++p) fg[p] = image.pixels[p] > threshold;
  if (std::none_of(fg.begin(), fg.end(), [](std::uint8_t v) { return v != 0; })) {
    result.empty_foreground = true;
    result.body.assign(image.size(), 1);
    result.bbox = {0, 0, image.height, image.width};
    return result;
  }
  result.body = fill_holes(largest_component(fg, image.height, image.width),
                           image.height, image.width);
  for (std::size_t p = 0; p < image.size(); ++p) {
    if (!result.body[p]) result.image.pixels[p] = 0.0f;
  }
  result.bbox = mask_bounding_box(result.body, image.height, image.width);
  return result;
}

}  // namespace covidnet
