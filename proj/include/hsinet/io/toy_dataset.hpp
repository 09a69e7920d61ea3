#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "hsinet/io/annotations.hpp"
#include "hsinet/io/image.hpp"

namespace hsinet::io {

struct ToySample {
  Image image;
  std::vector<GtBox> boxes;  // pixels, class 0
};

struct ToyOptions {
  int min_boxes = 1;
  int max_boxes = 3;
  int min_side = 4;
  int max_side = 20;
  int background_max = 40;  // noise floor is uniform in [0, background_max]
  int bright_min = 200;
};

/// Dark noisy backgrounds with a few bright, non-overlapping axis-aligned
/// rectangles. Rectangles keep a 2 px gap from each other and lie fully inside
/// the image. Pixel-aligned, so the recorded boxes are exact.
inline std::vector<ToySample> make_toy_dataset(int count, int image_size, std::uint64_t seed,
                                               const ToyOptions& opt = {}) {
  if (count < 0) throw ValueError("toy dataset: count must be >= 0");
  if (image_size < 32 || image_size % 32 != 0) throw ValueError("toy dataset: image size must be a positive multiple of 32");
  if (opt.min_side < 1 || opt.max_side < opt.min_side || opt.max_side + 4 > image_size) {
    throw ValueError("toy dataset: bad rectangle side range");
  }
  std::mt19937_64 rng(seed);
  auto uniform = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
  std::vector<ToySample> out;
  for (int i = 0; i < count; ++i) {
    ToySample s;
    s.image = Image(image_size, image_size);
    for (auto& v : s.image.rgb) v = static_cast<std::uint8_t>(uniform(0, opt.background_max));
    const int want = uniform(opt.min_boxes, opt.max_boxes);
    struct Rect {
      int x, y, w, h;
    };
    std::vector<Rect> placed;
    for (int attempt = 0; static_cast<int>(placed.size()) < want && attempt < 1000; ++attempt) {
      const Rect r{0, 0, uniform(opt.min_side, opt.max_side), uniform(opt.min_side, opt.max_side)};
      const Rect p{uniform(1, image_size - r.w - 1), uniform(1, image_size - r.h - 1), r.w, r.h};
      bool clear = true;
      for (const auto& q : placed) {
        if (p.x < q.x + q.w + 2 && q.x < p.x + p.w + 2 && p.y < q.y + q.h + 2 && q.y < p.y + p.h + 2) clear = false;
      }
      if (!clear) continue;
      placed.push_back(p);
      const auto base = static_cast<std::uint8_t>(uniform(opt.bright_min, 255));
      for (int y = p.y; y < p.y + p.h; ++y)
        for (int x = p.x; x < p.x + p.w; ++x)
          for (int c = 0; c < 3; ++c) {
            const int v = base - uniform(0, 10);
            s.image.px(x, y)[c] = static_cast<std::uint8_t>(std::max(0, v));
          }
      s.boxes.push_back(GtBox{0, p.x + p.w / 2.0, p.y + p.h / 2.0, static_cast<double>(p.w), static_cast<double>(p.h)});
    }
    out.push_back(std::move(s));
  }
  return out;
}

// Normalized annotation rows for a toy set whose images are saved as
// name_prefix + index + ".ppm".
inline std::vector<AnnotationRecord> toy_annotations(const std::vector<ToySample>& set, const std::string& name_prefix) {
  std::vector<AnnotationRecord> out;
  for (std::size_t i = 0; i < set.size(); ++i) {
    const double W = set[i].image.width, H = set[i].image.height;
    for (const auto& b : set[i].boxes) {
      out.push_back(AnnotationRecord{name_prefix + std::to_string(i) + ".ppm", b.class_id, b.cx / W, b.cy / H, b.w / W, b.h / H});
    }
  }
  return out;
}

}  // namespace hsinet::io
