#pragma once

// 8-bit RGB PNG output and input for [3,H,W] tensors in [0,1] (libpng).

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <string>
#include <vector>

#include "bae/errors.hpp"
#include "bae/tensor.hpp"

namespace bae {

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using File = std::unique_ptr<std::FILE, FileCloser>;

[[noreturn]] inline void png_fail(png_structp, png_const_charp msg) { throw IoError(std::string("png: ") + msg); }
inline void png_quiet(png_structp, png_const_charp) {}

}  // namespace detail

inline std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

/// Writes an RGB image; `scale` > 1 upsamples by pixel replication.
inline void write_png(const std::string& path, const Tensor& image, std::size_t scale = 1) {
  if (image.rank() != 3 || image.dim(0) != 3) throw DimensionError("write_png expects a [3,H,W] image, got " + shape_str(image.shape()));
  if (scale == 0) throw ContractError("png scale must be positive");
  const std::size_t h = image.dim(1), w = image.dim(2), H = h * scale, W = w * scale;
  std::vector<std::uint8_t> rows(H * W * 3);
  const auto& v = image.values();
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x)
      for (std::size_t c = 0; c < 3; ++c) rows[(y * W + x) * 3 + c] = to_byte(v[(c * h + y / scale) * w + x / scale]);

  detail::File f(std::fopen(path.c_str(), "wb"));
  if (!f) throw IoError("cannot open " + path + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, detail::png_fail, detail::png_quiet);
  png_infop info = png_create_info_struct(png);
  try {
    png_init_io(png, f.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(W), static_cast<png_uint_32>(H), 8, PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (std::size_t y = 0; y < H; ++y) png_write_row(png, rows.data() + y * W * 3);
    png_write_end(png, nullptr);
  } catch (...) {
    png_destroy_write_struct(&png, &info);
    throw;
  }
  png_destroy_write_struct(&png, &info);
}

inline Tensor read_png(const std::string& path) {
  detail::File f(std::fopen(path.c_str(), "rb"));
  if (!f) throw IoError("cannot open " + path);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, detail::png_fail, detail::png_quiet);
  png_infop info = png_create_info_struct(png);
  std::vector<double> out;
  std::size_t h = 0, w = 0;
  try {
    png_init_io(png, f.get());
    png_read_info(png, info);
    png_set_expand(png);
    png_set_strip_16(png);
    png_set_strip_alpha(png);
    png_set_gray_to_rgb(png);
    png_read_update_info(png, info);
    w = png_get_image_width(png, info);
    h = png_get_image_height(png, info);
    std::vector<std::uint8_t> row(png_get_rowbytes(png, info));
    out.assign(3 * h * w, 0.0);
    for (std::size_t y = 0; y < h; ++y) {
      png_read_row(png, row.data(), nullptr);
      for (std::size_t x = 0; x < w; ++x)
        for (std::size_t c = 0; c < 3; ++c) out[(c * h + y) * w + x] = row[x * 3 + c] / 255.0;
    }
  } catch (...) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw;
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return Tensor({3, h, w}, std::move(out));
}

}  // namespace bae
