#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "hsinet/detect.hpp"

namespace hsinet {

struct BoxWH {
  double w = 0;
  double h = 0;
  double area() const { return w * h; }
};

// IoU of two boxes sharing their top-left corner.
inline double iou_wh(const BoxWH& a, const BoxWH& b) {
  if (!(a.w > 0) || !(a.h > 0) || !(b.w > 0) || !(b.h > 0)) {
    throw ValueError("iou_wh: box sides must be positive");
  }
  const double inter = std::min(a.w, b.w) * std::min(a.h, b.h);
  return inter / (a.w * a.h + b.w * b.h - inter);
}

inline double wh_distance(const BoxWH& a, const BoxWH& b) { return 1.0 - iou_wh(a, b); }

struct ClusterResult {
  std::vector<BoxWH> centers;       // ascending area
  double mean_distance = 0;         // mean (1 - IoU) to the assigned center
  int iterations = 0;
  std::vector<double> history;      // mean distance after every assignment step

  // Groups of three consecutive centers, finest stride first. Needs k = 12.
  AnchorSet anchor_set() const {
    if (centers.size() != 12) throw ValueError("anchor_set: need exactly 12 centers");
    AnchorSet s;
    for (std::size_t i = 0; i < 12; ++i) s.groups[i / 3][i % 3] = AnchorWH{centers[i].w, centers[i].h};
    return s;
  }
};

struct KMeansOptions {
  int k = 12;
  std::uint64_t seed = 0;
  int max_iter = 300;
  double tol = 1e-6;
};

namespace detail {

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace detail

/// Lloyd clustering of box sizes under d = 1 - IoU.
///
/// Seeding is k-means++ with the same distance. Each update moves a center to
/// the coordinatewise median of its members, but only when that does not
/// raise the cluster's total distance; together with nearest-center
/// assignment this makes the mean distance non-increasing. Empty clusters are
/// reseeded on the box farthest from its current center.
inline ClusterResult kmeans_1iou(std::span<const BoxWH> boxes, const KMeansOptions& opt = {}) {
  const std::size_t n = boxes.size();
  const std::size_t k = static_cast<std::size_t>(opt.k);
  if (opt.k < 1) throw ValueError("kmeans_1iou: k must be >= 1");
  if (n < k) {
    throw ValueError("kmeans_1iou: need at least k=" + std::to_string(k) + " boxes, got " + std::to_string(n));
  }
  for (const auto& b : boxes) {
    if (!(b.w > 0) || !(b.h > 0)) throw ValueError("kmeans_1iou: box sides must be positive");
  }

  std::mt19937_64 rng(opt.seed);
  std::vector<BoxWH> centers;
  centers.reserve(k);
  centers.push_back(boxes[std::uniform_int_distribution<std::size_t>(0, n - 1)(rng)]);
  std::vector<double> nearest(n, std::numeric_limits<double>::infinity());
  while (centers.size() < k) {
    double total = 0;
    for (std::size_t i = 0; i < n; ++i) {
      nearest[i] = std::min(nearest[i], wh_distance(boxes[i], centers.back()));
      total += nearest[i] * nearest[i];
    }
    std::size_t pick = 0;
    if (total <= 0) {
      pick = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
    } else {
      double r = std::uniform_real_distribution<double>(0.0, total)(rng);
      for (pick = 0; pick + 1 < n; ++pick) {
        r -= nearest[pick] * nearest[pick];
        if (r < 0) break;
      }
    }
    centers.push_back(boxes[pick]);
  }

  ClusterResult res;
  std::vector<std::size_t> assign(n, k);
  std::vector<double> dist(n);
  for (int it = 0; it < opt.max_iter; ++it) {
    bool changed = false;
    double total = 0;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t best = 0;
      double bd = wh_distance(boxes[i], centers[0]);
      for (std::size_t c = 1; c < k; ++c) {
        const double d = wh_distance(boxes[i], centers[c]);
        if (d < bd) {
          bd = d;
          best = c;
        }
      }
      if (assign[i] != best) changed = true;
      assign[i] = best;
      dist[i] = bd;
      total += bd;
    }
    res.history.push_back(total / static_cast<double>(n));
    res.iterations = it + 1;
    if (!changed && it > 0) break;

    std::vector<std::vector<std::size_t>> members(k);
    for (std::size_t i = 0; i < n; ++i) members[assign[i]].push_back(i);
    std::vector<bool> taken(n, false);
    double max_move = 0;
    for (std::size_t c = 0; c < k; ++c) {
      const BoxWH old = centers[c];
      if (members[c].empty()) {
        std::size_t far = n;
        for (std::size_t i = 0; i < n; ++i) {
          if (!taken[i] && (far == n || dist[i] > dist[far])) far = i;
        }
        taken[far] = true;
        centers[c] = boxes[far];
      } else {
        std::vector<double> ws, hs;
        for (auto i : members[c]) {
          ws.push_back(boxes[i].w);
          hs.push_back(boxes[i].h);
        }
        const BoxWH cand{detail::median(ws), detail::median(hs)};
        double before = 0, after = 0;
        for (auto i : members[c]) {
          before += wh_distance(boxes[i], old);
          after += wh_distance(boxes[i], cand);
        }
        if (after <= before) centers[c] = cand;
      }
      max_move = std::max({max_move, std::abs(centers[c].w - old.w), std::abs(centers[c].h - old.h)});
    }
    if (max_move < opt.tol) {
      // Centers are stationary; one more assignment pass would be identical.
      break;
    }
  }

  // Final objective against the returned centers.
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double bd = std::numeric_limits<double>::infinity();
    for (const auto& c : centers) bd = std::min(bd, wh_distance(boxes[i], c));
    total += bd;
  }
  res.mean_distance = total / static_cast<double>(n);
  res.history.push_back(res.mean_distance);
  std::stable_sort(centers.begin(), centers.end(),
                   [](const BoxWH& a, const BoxWH& b) { return a.area() < b.area(); });
  res.centers = std::move(centers);
  return res;
}

}  // namespace hsinet
