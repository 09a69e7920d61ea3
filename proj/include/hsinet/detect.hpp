#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "hsinet/ops.hpp"
#include "hsinet/tensor.hpp"

namespace hsinet {

struct Detection {
  double cx = 0, cy = 0, w = 0, h = 0;  // input-image pixels
  double objectness = 0;
  int class_id = 0;
  double score = 0;  // objectness * class probability

  double x1() const { return cx - w / 2; }
  double y1() const { return cy - h / 2; }
  double x2() const { return cx + w / 2; }
  double y2() const { return cy + h / 2; }
};

// Ground-truth box in input-image pixels.
struct GtBox {
  int class_id = 0;
  double cx = 0, cy = 0, w = 0, h = 0;
};

template <class A, class B>
double box_iou(const A& a, const B& b) {
  const double iw = std::min(a.cx + a.w / 2, b.cx + b.w / 2) - std::max(a.cx - a.w / 2, b.cx - b.w / 2);
  const double ih = std::min(a.cy + a.h / 2, b.cy + b.h / 2) - std::max(a.cy - a.h / 2, b.cy - b.h / 2);
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.w * a.h + b.w * b.h - inter;
  return uni > 0 ? inter / uni : 0.0;
}

struct AnchorWH {
  double w = 0, h = 0;
};

/// Twelve prior boxes, three per pyramid level, ordered by stride 4/8/16/32.
struct AnchorSet {
  std::array<std::array<AnchorWH, 3>, 4> groups{};

  static constexpr std::array<int, 4> kStrides{4, 8, 16, 32};

  static AnchorSet defaults() {
    return AnchorSet{{{
        {{{7, 16}, {10, 9}, {18, 7}}},
        {{{16, 15}, {20, 27}, {34, 16}}},
        {{{37, 30}, {60, 21}, {26, 58}}},
        {{{63, 34}, {45, 54}, {66, 57}}},
    }}};
  }

  // Four lines of three "w,h" pairs, e.g. "7,16, 10,9, 18,7".
  std::string to_text(int precision = 0) const {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(precision);
    for (const auto& grp : groups) {
      for (std::size_t i = 0; i < grp.size(); ++i) {
        if (i) os << ", ";
        os << grp[i].w << "," << grp[i].h;
      }
      os << "\n";
    }
    return os.str();
  }
};

// Everything decode() needs to know about one head level.
struct LevelInfo {
  int stride = 4;
  std::array<AnchorWH, 3> anchors{};
};

inline int head_channels(int ncls) { return 3 * (5 + ncls); }

/// Turns raw head logits into scored boxes for batch item `batch`.
///
/// Per cell (row i, col j) and anchor a with logits t:
///   cx = (2 sigmoid(tx) - 0.5 + j) * stride,   w = (2 sigmoid(tw))^2 * anchor_w
/// A box is kept when objectness * best class probability >= conf_threshold.
template <class T>
std::vector<Detection> decode(const Tensor<T>& head, const LevelInfo& level, int ncls, double conf_threshold,
                              std::int64_t batch = 0) {
  if (conf_threshold < 0 || conf_threshold > 1) throw ValueError("decode: confidence threshold must lie in [0,1]");
  const Shape& s = head.shape();
  const int per = 5 + ncls;
  if (s.c != 3 * per) {
    throw ShapeError("decode: head has " + std::to_string(s.c) + " channels, expected " + std::to_string(3 * per));
  }
  auto sig = [](double v) { return ops::sigmoid_scalar(v); };
  std::vector<Detection> out;
  for (int a = 0; a < 3; ++a) {
    const AnchorWH anc = level.anchors[static_cast<std::size_t>(a)];
    for (std::int64_t i = 0; i < s.h; ++i) {
      for (std::int64_t j = 0; j < s.w; ++j) {
        auto t = [&](int k) { return static_cast<double>(head.at(batch, a * per + k, i, j)); };
        const double obj = sig(t(4));
        int best = 0;
        double best_p = -1;
        for (int c = 0; c < ncls; ++c) {
          const double p = sig(t(5 + c));
          if (p > best_p) {
            best_p = p;
            best = c;
          }
        }
        const double score = obj * best_p;
        if (score < conf_threshold) continue;
        Detection d;
        d.cx = (2 * sig(t(0)) - 0.5 + static_cast<double>(j)) * level.stride;
        d.cy = (2 * sig(t(1)) - 0.5 + static_cast<double>(i)) * level.stride;
        const double sw = 2 * sig(t(2));
        const double sh = 2 * sig(t(3));
        d.w = sw * sw * anc.w;
        d.h = sh * sh * anc.h;
        d.objectness = obj;
        d.class_id = best;
        d.score = score;
        out.push_back(d);
      }
    }
  }
  return out;
}

// Total order used for ranking: score desc, then class, cx, cy, w, h asc.
inline bool detection_before(const Detection& a, const Detection& b) {
  if (a.score != b.score) return a.score > b.score;
  return std::tie(a.class_id, a.cx, a.cy, a.w, a.h) < std::tie(b.class_id, b.cx, b.cy, b.w, b.h);
}

/// Greedy per-class suppression: walking in rank order, a box survives when
/// its IoU with every earlier survivor of the same class is below the
/// threshold. At most max_out survivors are returned, in rank order.
inline std::vector<Detection> nms(std::vector<Detection> dets, double iou_threshold = 0.45,
                                  std::size_t max_out = 300) {
  for (const auto& d : dets) {
    if (!std::isfinite(d.score)) throw ValueError("nms: non-finite score");
  }
  std::sort(dets.begin(), dets.end(), detection_before);
  std::vector<Detection> keep;
  for (const auto& d : dets) {
    if (keep.size() >= max_out) break;
    bool suppressed = false;
    for (const auto& k : keep) {
      if (k.class_id == d.class_id && box_iou(k, d) >= iou_threshold) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) keep.push_back(d);
  }
  return keep;
}

}  // namespace hsinet
