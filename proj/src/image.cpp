#include "covidnet/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <memory>

#include "covidnet/errors.hpp"

namespace covidnet {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_file(const std::filesystem::path& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode));
  if (!f) {
    throw IoError(std::string("cannot open ") + path.string() + " for " +
                  (mode[0] == 'r' ? "reading" : "writing"));
  }
  return f;
}

void png_error_fn(png_structp png, png_const_charp msg) {
  auto* err = static_cast<std::string*>(png_get_error_ptr(png));
  if (err) *err = msg;
  png_longjmp(png, 1);
}

void png_warning_fn(png_structp, png_const_charp) {}

/// Writes rows of `channels` interleaved samples of `bit_depth` bits.
void write_rows(const std::filesystem::path& path, std::size_t height,
                std::size_t width, int color_type, int bit_depth,
                const std::vector<std::uint8_t>& bytes) {
  FilePtr file = open_file(path, "wb");
  std::string error;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &error,
                                            png_error_fn, png_warning_fn);
  if (!png) throw IoError("libpng write init failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw IoError("libpng write init failed");
  }
  const std::size_t channels = color_type == PNG_COLOR_TYPE_RGB ? 3 : 1;
  const std::size_t stride = width * channels * (bit_depth / 8);
  std::vector<png_bytep> rows(height);
  for (std::size_t y = 0; y < height; ++y) {
    rows[y] = const_cast<png_bytep>(bytes.data() + y * stride);
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("failed writing " + path.string() + ": " + error);
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(width),
               static_cast<png_uint_32>(height), bit_depth, color_type,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace

std::uint8_t to_byte(float v) {
  const float c = std::clamp(v, 0.0f, 1.0f);
  return static_cast<std::uint8_t>(std::lround(c * 255.0f));
}

Image read_png(const std::filesystem::path& path) {
  FilePtr file = open_file(path, "rb");
  png_byte sig[8];
  if (std::fread(sig, 1, 8, file.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    throw IoError(path.string() + " is not a PNG file");
  }
  std::string error;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &error,
                                           png_error_fn, png_warning_fn);
  if (!png) throw IoError("libpng read init failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw IoError("libpng read init failed");
  }
  Image image;
  std::vector<std::uint8_t> buffer;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("failed reading " + path.string() + ": " + error);
  }
  png_init_io(png, file.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);

  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) {
    png_set_expand_gray_1_2_4_to_8(png);
  }
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (color == PNG_COLOR_TYPE_RGB || color == PNG_COLOR_TYPE_RGB_ALPHA ||
      color == PNG_COLOR_TYPE_PALETTE) {
    png_set_rgb_to_gray_fixed(png, 1, -1, -1);
  }
  if (depth == 16) png_set_swap(png);  // native little-endian u16
  png_read_update_info(png, info);

  image.height = png_get_image_height(png, info);
  image.width = png_get_image_width(png, info);
  const std::size_t rowbytes = png_get_rowbytes(png, info);
  const int out_depth = png_get_bit_depth(png, info);
  buffer.resize(rowbytes * image.height);
  rows.resize(image.height);
  for (std::size_t y = 0; y < image.height; ++y) {
    rows[y] = buffer.data() + y * rowbytes;
  }
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  image.pixels.resize(image.height * image.width);
  for (std::size_t y = 0; y < image.height; ++y) {
    for (std::size_t x = 0; x < image.width; ++x) {
      float v;
      if (out_depth == 16) {
        std::uint16_t s;
        std::memcpy(&s, rows[y] + 2 * x, 2);
        v = static_cast<float>(s) / 65535.0f;
      } else {
        v = static_cast<float>(rows[y][x]) / 255.0f;
      }
      image.at(y, x) = v;
    }
  }
  return image;
}

void write_png(const std::filesystem::path& path, const Image& image) {
  std::vector<std::uint8_t> bytes(image.size());
  for (std::size_t i = 0; i < image.size(); ++i) bytes[i] = to_byte(image.pixels[i]);
  write_rows(path, image.height, image.width, PNG_COLOR_TYPE_GRAY, 8, bytes);
}

void write_png16(const std::filesystem::path& path, const Image& image) {
  std::vector<std::uint8_t> bytes(image.size() * 2);
  for (std::size_t i = 0; i < image.size(); ++i) {
    const float c = std::clamp(image.pixels[i], 0.0f, 1.0f);
    const auto s = static_cast<std::uint16_t>(std::lround(c * 65535.0f));
    bytes[2 * i] = static_cast<std::uint8_t>(s >> 8);  // PNG is big-endian
    bytes[2 * i + 1] = static_cast<std::uint8_t>(s & 0xFF);
  }
  write_rows(path, image.height, image.width, PNG_COLOR_TYPE_GRAY, 16, bytes);
}

void write_png(const std::filesystem::path& path, const RgbImage& image) {
  if (image.rgb.size() != image.height * image.width * 3) {
    throw IoError("RGB image buffer does not match its dimensions");
  }
  write_rows(path, image.height, image.width, PNG_COLOR_TYPE_RGB, 8, image.rgb);
}

Image resample_box(const Image& image, double top, double left, double box_h,
                   double box_w, std::size_t out_h, std::size_t out_w) {
  Image out(out_h, out_w);
  const double sy = box_h / static_cast<double>(out_h);
  const double sx = box_w / static_cast<double>(out_w);
  auto sample = [&](std::ptrdiff_t y, std::ptrdiff_t x) -> double {
    if (y < 0 || x < 0 || y >= static_cast<std::ptrdiff_t>(image.height) ||
        x >= static_cast<std::ptrdiff_t>(image.width)) {
      return 0.0;
    }
    return image.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x));
  };
  for (std::size_t y = 0; y < out_h; ++y) {
    const double fy = top + (static_cast<double>(y) + 0.5) * sy - 0.5;
    const double y0 = std::floor(fy);
    const double wy = fy - y0;
    for (std::size_t x = 0; x < out_w; ++x) {
      const double fx = left + (static_cast<double>(x) + 0.5) * sx - 0.5;
      const double x0 = std::floor(fx);
      const double wx = fx - x0;
      const auto iy = static_cast<std::ptrdiff_t>(y0);
      const auto ix = static_cast<std::ptrdiff_t>(x0);
      double v = (1 - wy) * (1 - wx) * sample(iy, ix);
      if (wx > 0) v += (1 - wy) * wx * sample(iy, ix + 1);
      if (wy > 0) {
        v += wy * (1 - wx) * sample(iy + 1, ix);
        if (wx > 0) v += wy * wx * sample(iy + 1, ix + 1);
      }
      out.at(y, x) = static_cast<float>(v);
    }
  }
  return out;
}

Image resize(const Image& image, std::size_t out_h, std::size_t out_w) {
  if (image.height == out_h && image.width == out_w) return image;
  return resample_box(image, 0.0, 0.0, static_cast<double>(image.height),
                      static_cast<double>(image.width), out_h, out_w);
}

}  // namespace covidnet
