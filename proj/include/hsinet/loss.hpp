#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <numbers>
#include <tuple>
#include <vector>

#include "hsinet/detect.hpp"
#include "hsinet/graph.hpp"

namespace hsinet {

struct LossWeights {
  double box = 0.05;
  double obj = 1.0;
  double cls = 0.5;
  std::vector<double> balance{4.0, 1.0, 0.25, 0.06};  // objectness weight per level, finest first
  double anchor_ratio = 4.0;
  bool scale_by_batch = true;
  // Objectness target of assigned cells: detached CIoU when set, 1 otherwise.
  bool iou_objectness = true;

  void validate() const {
    if (box < 0 || obj < 0 || cls < 0) throw ValueError("loss weights must be nonnegative");
    if (box == 0 && obj == 0 && cls == 0) throw ValueError("at least one loss weight must be positive");
  }
};

// Forward-mode dual number carrying N partial derivatives.
template <int N>
struct Dual {
  double v = 0;
  std::array<double, N> d{};

  Dual() = default;
  Dual(double value) : v(value) {}  // NOLINT: constants promote implicitly
  static Dual variable(double value, int i) {
    Dual x(value);
    x.d[static_cast<std::size_t>(i)] = 1;
    return x;
  }
  friend Dual operator+(Dual a, const Dual& b) {
    a.v += b.v;
    for (int i = 0; i < N; ++i) a.d[i] += b.d[i];
    return a;
  }
  friend Dual operator-(Dual a, const Dual& b) {
    a.v -= b.v;
    for (int i = 0; i < N; ++i) a.d[i] -= b.d[i];
    return a;
  }
  friend Dual operator*(const Dual& a, const Dual& b) {
    Dual r(a.v * b.v);
    for (int i = 0; i < N; ++i) r.d[i] = a.d[i] * b.v + a.v * b.d[i];
    return r;
  }
  friend Dual operator/(const Dual& a, const Dual& b) {
    Dual r(a.v / b.v);
    for (int i = 0; i < N; ++i) r.d[i] = (a.d[i] * b.v - a.v * b.d[i]) / (b.v * b.v);
    return r;
  }
};

inline double value_of(double x) { return x; }
template <int N>
double value_of(const Dual<N>& x) {
  return x.v;
}

template <class S>
S smin(const S& a, const S& b) {
  return value_of(a) <= value_of(b) ? a : b;
}
template <class S>
S smax(const S& a, const S& b) {
  return value_of(a) >= value_of(b) ? a : b;
}
inline double satan(double x) { return std::atan(x); }
template <int N>
Dual<N> satan(const Dual<N>& x) {
  Dual<N> r(std::atan(x.v));
  const double k = 1.0 / (1.0 + x.v * x.v);
  for (int i = 0; i < N; ++i) r.d[i] = k * x.d[i];
  return r;
}
inline double ssigmoid(double x) { return ops::sigmoid_scalar(x); }
template <int N>
Dual<N> ssigmoid(const Dual<N>& x) {
  const double s = ops::sigmoid_scalar(x.v);
  Dual<N> r(s);
  for (int i = 0; i < N; ++i) r.d[i] = s * (1 - s) * x.d[i];
  return r;
}

/// Complete IoU between two center-format boxes:
/// IoU - rho^2/c^2 - alpha*v, with v the aspect-ratio consistency term.
template <class S>
S ciou(const S& x1, const S& y1, const S& w1, const S& h1, const S& x2, const S& y2, const S& w2, const S& h2) {
  constexpr double eps = 1e-7;
  const S half(0.5);
  const S ax1 = x1 - w1 * half, ax2 = x1 + w1 * half, ay1 = y1 - h1 * half, ay2 = y1 + h1 * half;
  const S bx1 = x2 - w2 * half, bx2 = x2 + w2 * half, by1 = y2 - h2 * half, by2 = y2 + h2 * half;
  const S iw = smax(smin(ax2, bx2) - smax(ax1, bx1), S(0.0));
  const S ih = smax(smin(ay2, by2) - smax(ay1, by1), S(0.0));
  const S inter = iw * ih;
  const S uni = w1 * h1 + w2 * h2 - inter + S(eps);
  const S iou = inter / uni;
  const S cw = smax(ax2, bx2) - smin(ax1, bx1);
  const S ch = smax(ay2, by2) - smin(ay1, by1);
  const S c2 = cw * cw + ch * ch + S(eps);
  const S dx = x2 - x1, dy = y2 - y1;
  const S rho2 = dx * dx + dy * dy;
  const S dv = satan(w2 / h2) - satan(w1 / h1);
  const S v = S(4.0 / (std::numbers::pi * std::numbers::pi)) * dv * dv;
  const S alpha = v / (v - iou + S(1.0 + eps));
  return iou - (rho2 / c2 + v * alpha);
}

inline double bce_logits(double x, double y) {
  // max(x,0) - x*y + log(1 + exp(-|x|))
  return std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x)));
}

// One (image, level, anchor, cell) pair responsible for a target.
struct Assignment {
  int level = 0;
  int batch = 0;
  int anchor = 0;
  int gi = 0;  // column
  int gj = 0;  // row
  int class_id = 0;
  double tx = 0, ty = 0, tw = 0, th = 0;  // target box relative to the cell, grid units
  double aw = 0, ah = 0;                  // anchor in grid units
};

/// Anchor/cell assignment in the YOLOv5 style: an anchor matches when every
/// side ratio between target and anchor is below `anchor_ratio`; the target's
/// own cell and the two nearest neighbouring cells (by sub-cell offset) are
/// all made responsible.
inline std::vector<Assignment> assign_targets(const std::vector<std::vector<GtBox>>& targets,
                                              const std::vector<LevelInfo>& levels,
                                              const std::vector<std::pair<int, int>>& grids, double anchor_ratio) {
  std::vector<Assignment> out;
  for (std::size_t l = 0; l < levels.size(); ++l) {
    const double s = levels[l].stride;
    const int H = grids[l].first, W = grids[l].second;
    for (std::size_t b = 0; b < targets.size(); ++b) {
      for (const auto& t : targets[b]) {
        const double gx = t.cx / s, gy = t.cy / s, gw = t.w / s, gh = t.h / s;
        for (int a = 0; a < 3; ++a) {
          const double aw = levels[l].anchors[static_cast<std::size_t>(a)].w / s;
          const double ah = levels[l].anchors[static_cast<std::size_t>(a)].h / s;
          const double r = std::max({gw / aw, aw / gw, gh / ah, ah / gh});
          if (!(r < anchor_ratio)) continue;
          const double fx = gx - std::floor(gx), fy = gy - std::floor(gy);
          const double gxi = W - gx, gyi = H - gy;
          std::vector<std::pair<int, int>> offsets{{0, 0}};
          if (fx < 0.5 && gx > 1) offsets.push_back({-1, 0});
          if (fy < 0.5 && gy > 1) offsets.push_back({0, -1});
          if (gxi - std::floor(gxi) < 0.5 && gxi > 1) offsets.push_back({1, 0});
          if (gyi - std::floor(gyi) < 0.5 && gyi > 1) offsets.push_back({0, 1});
          for (auto [ox, oy] : offsets) {
            const int gi = std::clamp(static_cast<int>(std::floor(gx)) + ox, 0, W - 1);
            const int gj = std::clamp(static_cast<int>(std::floor(gy)) + oy, 0, H - 1);
            Assignment as;
            as.level = static_cast<int>(l);
            as.batch = static_cast<int>(b);
            as.anchor = a;
            as.gi = gi;
            as.gj = gj;
            as.class_id = t.class_id;
            as.tx = gx - gi;
            as.ty = gy - gj;
            as.tw = gw;
            as.th = gh;
            as.aw = aw;
            as.ah = ah;
            out.push_back(as);
          }
        }
      }
    }
  }
  return out;
}

struct LossComponents {
  double box = 0;
  double obj = 0;
  double cls = 0;
  double total = 0;
  std::size_t assigned = 0;
};

template <class T>
struct LossResult {
  Var<T> total;
  LossComponents parts;
};

/// Composite detection loss over all head levels.
///
///   box = mean(1 - CIoU) over assignments
///   obj = sum_l balance_l * mean BCE(obj logit, CIoU target) over level l
///   cls = mean BCE over assignments and classes
///   total = (w_box*box + w_obj*obj + w_cls*cls) * batch (when scale_by_batch)
///
/// The objectness target of an assigned cell is the detached CIoU clamped at
/// zero (the largest one when several targets share a cell); unassigned cells
/// target zero.
template <class T>
LossResult<T> detection_loss(Graph<T>& g, const std::vector<Var<T>>& heads, const std::vector<LevelInfo>& levels,
                             const std::vector<std::vector<GtBox>>& targets, const LossWeights& weights, int ncls) {
  weights.validate();
  if (heads.size() != levels.size()) throw ShapeError("loss: head count does not match level count");
  if (weights.balance.size() < heads.size()) throw ValueError("loss: not enough objectness balance weights");
  const int per = 5 + ncls;
  std::vector<std::pair<int, int>> grids;
  std::int64_t batch = -1;
  for (const auto& h : heads) {
    const Shape& s = h->value.shape();
    if (s.c != 3 * per) throw ShapeError("loss: head channel count " + std::to_string(s.c) + " != " + std::to_string(3 * per));
    if (batch >= 0 && s.n != batch) throw ShapeError("loss: heads disagree on batch size");
    batch = s.n;
    grids.push_back({static_cast<int>(s.h), static_cast<int>(s.w)});
  }
  if (static_cast<std::int64_t>(targets.size()) != batch) throw ShapeError("loss: one target list per image required");

  const auto assigns = assign_targets(targets, levels, grids, weights.anchor_ratio);
  const double bs = weights.scale_by_batch ? static_cast<double>(batch) : 1.0;
  const double n_assigned = static_cast<double>(assigns.size());

  auto logit = [&](const Assignment& as, int k) {
    return static_cast<double>(heads[static_cast<std::size_t>(as.level)]->value.at(as.batch, as.anchor * per + k, as.gj, as.gi));
  };

  using D4 = Dual<4>;
  LossComponents parts;
  parts.assigned = assigns.size();
  // Gradient of (1 - ciou) w.r.t. tx,ty,tw,th for each assignment.
  std::vector<std::array<double, 4>> box_grad(assigns.size());
  // Objectness target per (level, batch, anchor, row, col).
  std::map<std::tuple<int, int, int, int, int>, double> tobj;
  for (std::size_t k = 0; k < assigns.size(); ++k) {
    const auto& as = assigns[k];
    const D4 tx = D4::variable(logit(as, 0), 0), ty = D4::variable(logit(as, 1), 1);
    const D4 tw = D4::variable(logit(as, 2), 2), th = D4::variable(logit(as, 3), 3);
    const D4 px = ssigmoid(tx) * D4(2.0) - D4(0.5);
    const D4 py = ssigmoid(ty) * D4(2.0) - D4(0.5);
    const D4 sw = ssigmoid(tw) * D4(2.0), sh = ssigmoid(th) * D4(2.0);
    const D4 pw = sw * sw * D4(as.aw), ph = sh * sh * D4(as.ah);
    const D4 c = ciou(px, py, pw, ph, D4(as.tx), D4(as.ty), D4(as.tw), D4(as.th));
    parts.box += 1.0 - c.v;
    for (int i = 0; i < 4; ++i) box_grad[k][static_cast<std::size_t>(i)] = -c.d[static_cast<std::size_t>(i)];
    auto key = std::make_tuple(as.level, as.batch, as.anchor, as.gj, as.gi);
    const double target = weights.iou_objectness ? std::max(c.v, 0.0) : 1.0;
    auto it = tobj.find(key);
    if (it == tobj.end()) tobj.emplace(key, target);
    else it->second = std::max(it->second, target);
    for (int cc = 0; cc < ncls; ++cc) parts.cls += bce_logits(logit(as, 5 + cc), cc == as.class_id ? 1.0 : 0.0);
  }
  if (!assigns.empty()) {
    parts.box /= n_assigned;
    parts.cls /= n_assigned * ncls;
  }

  std::vector<double> level_cells(heads.size());
  for (std::size_t l = 0; l < heads.size(); ++l) {
    const Shape& s = heads[l]->value.shape();
    level_cells[l] = static_cast<double>(s.n * 3 * s.h * s.w);
    double acc = 0;
    for (std::int64_t b = 0; b < s.n; ++b)
      for (int a = 0; a < 3; ++a)
        for (std::int64_t i = 0; i < s.h; ++i)
          for (std::int64_t j = 0; j < s.w; ++j) {
            auto it = tobj.find(std::make_tuple(static_cast<int>(l), static_cast<int>(b), a, static_cast<int>(i),
                                                static_cast<int>(j)));
            const double y = it == tobj.end() ? 0.0 : it->second;
            acc += bce_logits(static_cast<double>(heads[l]->value.at(b, a * per + 4, i, j)), y);
          }
    parts.obj += weights.balance[l] * acc / level_cells[l];
  }
  parts.total = (weights.box * parts.box + weights.obj * parts.obj + weights.cls * parts.cls) * bs;

  auto backward = [heads, assigns, box_grad, tobj, level_cells, weights, bs, ncls, per](const Tensor<T>& gy) {
    const double seed = static_cast<double>(gy[0]) * bs;
    const double n = static_cast<double>(assigns.size());
    for (std::size_t k = 0; k < assigns.size(); ++k) {
      const auto& as = assigns[k];
      auto& head = heads[static_cast<std::size_t>(as.level)];
      if (!head->requires_grad) continue;
      Tensor<T>& gh = head->grad_buffer();
      for (int i = 0; i < 4; ++i) {
        gh.at(as.batch, as.anchor * per + i, as.gj, as.gi) +=
            static_cast<T>(seed * weights.box * box_grad[k][static_cast<std::size_t>(i)] / n);
      }
      for (int c = 0; c < ncls; ++c) {
        const double x = static_cast<double>(head->value.at(as.batch, as.anchor * per + 5 + c, as.gj, as.gi));
        const double y = c == as.class_id ? 1.0 : 0.0;
        gh.at(as.batch, as.anchor * per + 5 + c, as.gj, as.gi) +=
            static_cast<T>(seed * weights.cls * (ops::sigmoid_scalar(x) - y) / (n * ncls));
      }
    }
    for (std::size_t l = 0; l < heads.size(); ++l) {
      auto& head = heads[l];
      if (!head->requires_grad) continue;
      const Shape& s = head->value.shape();
      Tensor<T>& gh = head->grad_buffer();
      const double k = seed * weights.obj * weights.balance[l] / level_cells[l];
      for (std::int64_t b = 0; b < s.n; ++b)
        for (int a = 0; a < 3; ++a)
          for (std::int64_t i = 0; i < s.h; ++i)
            for (std::int64_t j = 0; j < s.w; ++j) {
              auto it = tobj.find(std::make_tuple(static_cast<int>(l), static_cast<int>(b), a, static_cast<int>(i),
                                                  static_cast<int>(j)));
              const double y = it == tobj.end() ? 0.0 : it->second;
              const double x = static_cast<double>(head->value.at(b, a * per + 4, i, j));
              gh.at(b, a * per + 4, i, j) += static_cast<T>(k * (ops::sigmoid_scalar(x) - y));
            }
    }
  };
  auto total = g.emit_many(Tensor<T>(Shape{}, static_cast<T>(parts.total)), heads, backward);
  return LossResult<T>{total, parts};
}

}  // namespace hsinet
