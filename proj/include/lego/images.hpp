// Copyright (c) 2026 The LEGO Bricks Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

// PNG read/write and image-grid assembly. Pixel values in [-1, 1] map to
// 8-bit levels by v = level / 127.5 - 1.

#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <memory>
#include <string>
#include <vector>

#include "lego/errors.hpp"
#include "lego/tensor.hpp"

namespace lego {

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline float from_level(int level) { return static_cast<float>(double(level) / 127.5 - 1.0); }

inline unsigned char to_level(float v) {
  const double x = std::round((double(std::clamp(v, -1.0f, 1.0f)) + 1.0) * 127.5);
  return static_cast<unsigned char>(std::clamp(x, 0.0, 255.0));
}

}  // namespace detail

/// Reads any PNG as 8-bit RGB (palette, gray, alpha and 16-bit are converted).
inline Image read_png(const std::string& path) {
  detail::FilePtr f(std::fopen(path.c_str(), "rb"));
  if (!f) throw IngestError("cannot open '" + path + "'");
  unsigned char sig[8];
  if (std::fread(sig, 1, 8, f.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    throw IngestError("'" + path + "' is not a PNG file");
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw IngestError("libpng initialisation failed");
  }
  std::vector<unsigned char> pixels;
  png_uint_32 w = 0, h = 0;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IngestError("'" + path + "': corrupt PNG data");
  }
  png_init_io(png, f.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  w = png_get_image_width(png, info);
  h = png_get_image_height(png, info);
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);
  const std::size_t stride = png_get_rowbytes(png, info);
  pixels.resize(stride * h);
  std::vector<png_bytep> rows(h);
  for (png_uint_32 y = 0; y < h; ++y) rows[y] = pixels.data() + y * stride;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  Image img({std::size_t(h), std::size_t(w), 3});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) img(y, x, c) = detail::from_level(pixels[y * stride + x * 3 + c]);
  return img;
}

/// Writes an H x W x {1,3} image in [-1, 1] as 8-bit PNG.
inline void write_png(const std::string& path, const Image& img) {
  require_image(img.shape(), "write_png");
  const std::size_t h = img.dim(0), w = img.dim(1), C = img.dim(2);
  if (C != 1 && C != 3) throw ShapeError(detail::concat("write_png: need 1 or 3 channels, got ", C));
  detail::FilePtr f(std::fopen(path.c_str(), "wb"));
  if (!f) throw FormatError("cannot write '" + path + "'");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw FormatError("libpng initialisation failed");
  }
  std::vector<unsigned char> pixels(h * w * C);
  for (std::size_t i = 0; i < pixels.size(); ++i) pixels[i] = detail::to_level(img[i]);
  std::vector<png_bytep> rows(h);
  for (std::size_t y = 0; y < h; ++y) rows[y] = pixels.data() + y * w * C;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw FormatError("'" + path + "': PNG encoding failed");
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, png_uint_32(w), png_uint_32(h), 8, C == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

/// Largest centred square.
inline Image center_crop(const Image& img) {
  const std::size_t h = img.dim(0), w = img.dim(1), C = img.dim(2), s = std::min(h, w);
  const std::size_t top = (h - s) / 2, left = (w - s) / 2;
  Image out({s, s, C});
  for (std::size_t y = 0; y < s; ++y) std::copy_n(&img(top + y, left, 0), s * C, &out(y, 0, 0));
  return out;
}

/// Bilinear resampling with pixel-centre alignment; area-averages when
/// shrinking by an integer factor.
inline Image resize(const Image& img, std::size_t H, std::size_t W) {
  const std::size_t h = img.dim(0), w = img.dim(1), C = img.dim(2);
  if (h == H && w == W) return img;
  Image out({H, W, C});
  if (h % H == 0 && w % W == 0) {
    const std::size_t fy = h / H, fx = w / W;
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x)
        for (std::size_t c = 0; c < C; ++c) {
          double acc = 0.0;
          for (std::size_t a = 0; a < fy; ++a)
            for (std::size_t b = 0; b < fx; ++b) acc += img(y * fy + a, x * fx + b, c);
          out(y, x, c) = static_cast<float>(acc / double(fy * fx));
        }
    return out;
  }
  for (std::size_t y = 0; y < H; ++y) {
    const double sy = std::clamp((double(y) + 0.5) * double(h) / double(H) - 0.5, 0.0, double(h - 1));
    const std::size_t y0 = std::size_t(sy), y1 = std::min(y0 + 1, h - 1);
    const double ty = sy - double(y0);
    for (std::size_t x = 0; x < W; ++x) {
      const double sx = std::clamp((double(x) + 0.5) * double(w) / double(W) - 0.5, 0.0, double(w - 1));
      const std::size_t x0 = std::size_t(sx), x1 = std::min(x0 + 1, w - 1);
      const double tx = sx - double(x0);
      for (std::size_t c = 0; c < C; ++c) {
        const double top = (1 - tx) * img(y0, x0, c) + tx * img(y0, x1, c);
        const double bot = (1 - tx) * img(y1, x0, c) + tx * img(y1, x1, c);
        out(y, x, c) = static_cast<float>((1 - ty) * top + ty * bot);
      }
    }
  }
  return out;
}

/// Tiles equally sized images row-major with a `pad`-pixel border of -1.
inline Image make_grid(const std::vector<Image>& images, std::size_t cols, std::size_t pad = 1) {
  if (images.empty()) throw ParameterError("make_grid: no images");
  const std::size_t h = images[0].dim(0), w = images[0].dim(1), C = images[0].dim(2);
  cols = std::max<std::size_t>(1, std::min(cols, images.size()));
  const std::size_t rows = (images.size() + cols - 1) / cols;
  Image grid({rows * (h + pad) + pad, cols * (w + pad) + pad, C}, -1.0f);
  for (std::size_t i = 0; i < images.size(); ++i) {
    require_same_shape(images[i].shape(), images[0].shape(), "make_grid");
    const std::size_t top = pad + (i / cols) * (h + pad), left = pad + (i % cols) * (w + pad);
    for (std::size_t y = 0; y < h; ++y) std::copy_n(&images[i](y, 0, 0), w * C, &grid(top + y, left, 0));
  }
  return grid;
}

}  // namespace lego
