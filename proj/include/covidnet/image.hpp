#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

namespace covidnet {

/// Single-channel intensity image, row-major, values nominally in [0, 1].
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(std::size_t h, std::size_t w, float fill = 0.0f)
      : height(h), width(w), pixels(h * w, fill) {}

  float& at(std::size_t y, std::size_t x) { return pixels[y * width + x]; }
  float at(std::size_t y, std::size_t x) const { return pixels[y * width + x]; }
  std::size_t size() const { return pixels.size(); }

  friend bool operator==(const Image&, const Image&) = default;
};

/// 8-bit RGB image, interleaved.
struct RgbImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> rgb;

  friend bool operator==(const RgbImage&, const RgbImage&) = default;
};

/// Reads an 8- or 16-bit grayscale PNG normalized to [0, 1]. Color input is
/// converted to luminance. Throws IoError.
Image read_png(const std::filesystem::path& path);

/// Writes an 8-bit grayscale PNG (values clamped to [0, 1]).
void write_png(const std::filesystem::path& path, const Image& image);
/// Writes a 16-bit grayscale PNG.
void write_png16(const std::filesystem::path& path, const Image& image);
void write_png(const std::filesystem::path& path, const RgbImage& image);

/// Quantizes to the 8-bit value written by write_png.
std::uint8_t to_byte(float v);

/// Bilinear resampling of the box [top, top+box_h) x [left, left+box_w) to
/// out_h x out_w, pixel-center aligned; samples outside the image read 0.
/// Resampling the full image to its own size is exact.
Image resample_box(const Image& image, double top, double left, double box_h,
                   double box_w, std::size_t out_h, std::size_t out_w);

Image resize(const Image& image, std::size_t out_h, std::size_t out_w);

}  // namespace covidnet
