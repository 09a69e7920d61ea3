#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <memory>
#include <string>
#include <vector>

#include "hsinet/io/weights.hpp"
#include "hsinet/tensor.hpp"

namespace hsinet::io {

// 8-bit interleaved RGB.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;

  Image() = default;
  Image(int w, int h, std::uint8_t fill = 0) : width(w), height(h), rgb(static_cast<std::size_t>(w) * h * 3, fill) {
    if (w < 1 || h < 1) throw ValueError("image dimensions must be positive");
  }
  std::uint8_t* px(int x, int y) { return rgb.data() + (static_cast<std::size_t>(y) * width + x) * 3; }
  const std::uint8_t* px(int x, int y) const { return rgb.data() + (static_cast<std::size_t>(y) * width + x) * 3; }
};

namespace detail {

inline bool is_ws(std::uint8_t c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f'; }

inline Image decode_ppm(std::span<const std::uint8_t> b, const std::string& path) {
  std::size_t pos = 2;
  auto token = [&]() -> long {
    for (;;) {
      while (pos < b.size() && is_ws(b[pos])) ++pos;
      if (pos < b.size() && b[pos] == '#') {
        while (pos < b.size() && b[pos] != '\n') ++pos;
        continue;
      }
      break;
    }
    if (pos >= b.size() || b[pos] < '0' || b[pos] > '9') throw FormatError(path + ": malformed PPM header");
    long v = 0;
    while (pos < b.size() && b[pos] >= '0' && b[pos] <= '9') {
      v = v * 10 + (b[pos++] - '0');
      if (v > 1'000'000) throw FormatError(path + ": PPM header value too large");
    }
    return v;
  };
  const long w = token(), h = token(), maxval = token();
  if (w < 1 || h < 1) throw FormatError(path + ": PPM has zero size");
  if (maxval != 255) throw FormatError(path + ": only 8-bit PPM (maxval 255) is supported, got maxval " + std::to_string(maxval));
  if (pos >= b.size() || !is_ws(b[pos])) throw FormatError(path + ": malformed PPM header");
  ++pos;
  const std::size_t need = static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * 3;
  if (b.size() - pos < need) throw FormatError(path + ": truncated PPM pixel data");
  Image img(static_cast<int>(w), static_cast<int>(h));
  std::copy_n(b.begin() + static_cast<std::ptrdiff_t>(pos), need, img.rgb.begin());
  return img;
}

struct PngReadState {
  std::span<const std::uint8_t> bytes;
  std::size_t pos = 0;
};

inline Image decode_png(std::span<const std::uint8_t> b, const std::string& path) {
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw FormatError(path + ": libpng init failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw FormatError(path + ": libpng init failed");
  }
  PngReadState st{b, 0};
  Image img;
  std::string err;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError(path + ": corrupt PNG" + (err.empty() ? "" : " (" + err + ")"));
  }
  png_set_read_fn(png, &st, [](png_structp p, png_bytep out, png_size_t n) {
    auto* s = static_cast<PngReadState*>(png_get_io_ptr(p));
    if (s->bytes.size() - s->pos < n) png_error(p, "truncated");
    std::copy_n(s->bytes.begin() + static_cast<std::ptrdiff_t>(s->pos), n, out);
    s->pos += n;
  });
  png_read_info(png, info);
  const int depth = png_get_bit_depth(png, info);
  const int color = png_get_color_type(png, info);
  if (depth != 8 || (color != PNG_COLOR_TYPE_RGB && color != PNG_COLOR_TYPE_RGB_ALPHA)) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError(path + ": only 8-bit RGB/RGBA PNG is supported (bit depth " + std::to_string(depth) +
                      ", color type " + std::to_string(color) + ")");
  }
  if (color == PNG_COLOR_TYPE_RGB_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  const int w = static_cast<int>(png_get_image_width(png, info));
  const int h = static_cast<int>(png_get_image_height(png, info));
  img = Image(w, h);
  rows.resize(static_cast<std::size_t>(h));
  for (int y = 0; y < h; ++y) rows[static_cast<std::size_t>(y)] = img.px(0, y);
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

}  // namespace detail

inline Image decode_image(std::span<const std::uint8_t> bytes, const std::string& path = "<memory>") {
  if (bytes.size() >= 8 && png_sig_cmp(bytes.data(), 0, 8) == 0) return detail::decode_png(bytes, path);
  if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '6') return detail::decode_ppm(bytes, path);
  throw FormatError(path + ": unrecognized image format (expected PNG or binary PPM)");
}

inline Image read_image(const std::string& path) { return decode_image(read_file(path), path); }

inline std::vector<std::uint8_t> encode_ppm(const Image& img) {
  const std::string head = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  std::vector<std::uint8_t> out(head.begin(), head.end());
  out.insert(out.end(), img.rgb.begin(), img.rgb.end());
  return out;
}

inline void write_ppm(const Image& img, const std::string& path) { write_file(path, encode_ppm(img)); }

inline void write_png(const Image& img, const std::string& path) {
  FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) throw FormatError("cannot write '" + path + "'");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw FormatError("PNG encode failed for '" + path + "'");
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < img.height; ++y) png_write_row(png, const_cast<png_bytep>(img.px(0, y)));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

/// Maps source-image pixel coordinates onto the letterboxed square and back.
struct LetterboxTransform {
  int src_w = 0, src_h = 0;
  int target = 0;
  double scale = 1;        // min(target / src_w, target / src_h)
  int new_w = 0, new_h = 0;
  int pad_x = 0, pad_y = 0;  // left and top padding

  static LetterboxTransform make(int src_w, int src_h, int target) {
    if (src_w < 1 || src_h < 1 || target < 1) throw ValueError("letterbox: sizes must be positive");
    LetterboxTransform t;
    t.src_w = src_w;
    t.src_h = src_h;
    t.target = target;
    t.scale = std::min(static_cast<double>(target) / src_w, static_cast<double>(target) / src_h);
    t.new_w = std::clamp(static_cast<int>(std::lround(src_w * t.scale)), 1, target);
    t.new_h = std::clamp(static_cast<int>(std::lround(src_h * t.scale)), 1, target);
    t.pad_x = (target - t.new_w) / 2;
    t.pad_y = (target - t.new_h) / 2;
    return t;
  }
  double sx() const { return static_cast<double>(new_w) / src_w; }
  double sy() const { return static_cast<double>(new_h) / src_h; }

  double to_input_x(double x) const { return x * sx() + pad_x; }
  double to_input_y(double y) const { return y * sy() + pad_y; }
  double to_source_x(double x) const { return (x - pad_x) / sx(); }
  double to_source_y(double y) const { return (y - pad_y) / sy(); }
};

/// Bilinear (half-pixel centers) resize into a target x target canvas of gray
/// 114, returned as a 1x3xSxS tensor scaled to [0,1].
template <class T = float>
Tensor<T> letterbox(const Image& img, int target, LetterboxTransform* transform = nullptr) {
  const auto t = LetterboxTransform::make(img.width, img.height, target);
  if (transform) *transform = t;
  Tensor<T> out(Shape{1, 3, target, target}, static_cast<T>(114.0 / 255.0));
  const double fx = static_cast<double>(img.width) / t.new_w;
  const double fy = static_cast<double>(img.height) / t.new_h;
  for (int y = 0; y < t.new_h; ++y) {
    const double sy = std::clamp((y + 0.5) * fy - 0.5, 0.0, static_cast<double>(img.height - 1));
    const int y0 = static_cast<int>(sy);
    const int y1 = std::min(y0 + 1, img.height - 1);
    const double wy = sy - y0;
    for (int x = 0; x < t.new_w; ++x) {
      const double sx = std::clamp((x + 0.5) * fx - 0.5, 0.0, static_cast<double>(img.width - 1));
      const int x0 = static_cast<int>(sx);
      const int x1 = std::min(x0 + 1, img.width - 1);
      const double wx = sx - x0;
      for (int c = 0; c < 3; ++c) {
        const double v = (1 - wy) * ((1 - wx) * img.px(x0, y0)[c] + wx * img.px(x1, y0)[c]) +
                         wy * ((1 - wx) * img.px(x0, y1)[c] + wx * img.px(x1, y1)[c]);
        out.at(0, c, y + t.pad_y, x + t.pad_x) = static_cast<T>(v / 255.0);
      }
    }
  }
  return out;
}

// Direct conversion for images already at the network size.
template <class T = float>
Tensor<T> to_tensor(const Image& img) {
  Tensor<T> out(Shape{1, 3, img.height, img.width});
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) out.at(0, c, y, x) = static_cast<T>(img.px(x, y)[c] / 255.0);
  return out;
}

// One-pixel rectangle outline, clipped to the image.
inline void draw_box(Image& img, double x1, double y1, double x2, double y2, const std::uint8_t color[3]) {
  const int l = std::clamp(static_cast<int>(std::floor(x1)), 0, img.width - 1);
  const int r = std::clamp(static_cast<int>(std::ceil(x2)) - 1, 0, img.width - 1);
  const int t = std::clamp(static_cast<int>(std::floor(y1)), 0, img.height - 1);
  const int b = std::clamp(static_cast<int>(std::ceil(y2)) - 1, 0, img.height - 1);
  for (int x = l; x <= r; ++x) {
    std::copy_n(color, 3, img.px(x, t));
    std::copy_n(color, 3, img.px(x, b));
  }
  for (int y = t; y <= b; ++y) {
    std::copy_n(color, 3, img.px(l, y));
    std::copy_n(color, 3, img.px(r, y));
  }
}

}  // namespace hsinet::io
