#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "hsinet/detect.hpp"

namespace hsinet {

struct EvalCounts {
  std::int64_t tp = 0;
  std::int64_t fp = 0;
  std::int64_t fn = 0;
};

struct PrPoint {
  double recall = 0;
  double precision = 0;
  std::int64_t tp = 0;  // cumulative counts at this point
  std::int64_t fp = 0;
  double score = 0;
};

struct ApResult {
  std::vector<PrPoint> curve;
  double ap = 0;
};

struct ClassAp {
  int class_id = 0;
  std::int64_t n_gt = 0;
  double ap = 0;
};

struct EvalReport {
  double conf_threshold = 0;
  double iou_threshold = 0.5;
  double precision = 0;  // at conf_threshold, all classes pooled
  double recall = 0;
  EvalCounts counts;
  std::vector<ClassAp> ap;
  double map = 0;
  std::vector<PrPoint> pr_curve;  // pooled over classes

  std::string to_text() const {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(6);
    os << "precision@" << conf_threshold << " " << precision << "\n";
    os << "recall@" << conf_threshold << " " << recall << "\n";
    os << "tp " << counts.tp << " fp " << counts.fp << " fn " << counts.fn << "\n";
    for (const auto& c : ap) os << "AP@" << iou_threshold << " class " << c.class_id << " (" << c.n_gt << " gt) " << c.ap << "\n";
    os << "mAP@" << iou_threshold << " " << map << "\n";
    return os.str();
  }
};

/// Greedy VOC-style matching. `dets` must already be in descending score
/// order; every ground truth (of the same class) is claimed at most once. A
/// detection is a true positive when its best still-unclaimed ground truth
/// overlaps it with IoU >= iou_threshold.
inline std::vector<bool> match(const std::vector<Detection>& dets, const std::vector<GtBox>& gts,
                               double iou_threshold = 0.5) {
  std::vector<bool> claimed(gts.size(), false);
  std::vector<bool> tp(dets.size(), false);
  for (std::size_t i = 0; i < dets.size(); ++i) {
    double best = -1;
    std::size_t best_j = gts.size();
    for (std::size_t j = 0; j < gts.size(); ++j) {
      if (claimed[j] || gts[j].class_id != dets[i].class_id) continue;
      const double iou = box_iou(dets[i], gts[j]);
      if (iou > best) {
        best = iou;
        best_j = j;
      }
    }
    if (best_j < gts.size() && best >= iou_threshold) {
      claimed[best_j] = true;
      tp[i] = true;
    }
  }
  return tp;
}

/// Cumulative precision/recall over detections ranked by descending score,
/// and AP as the exact area under the monotone precision envelope
/// (all-point interpolation).
inline ApResult pr_and_ap(const std::vector<bool>& flags, const std::vector<double>& scores, std::int64_t total_gt) {
  if (flags.size() != scores.size()) throw ValueError("pr_and_ap: flags and scores differ in length");
  if (total_gt < 0) throw ValueError("pr_and_ap: total_gt must be >= 0");
  std::vector<std::size_t> order(flags.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  ApResult r;
  std::int64_t tp = 0, fp = 0;
  for (auto i : order) {
    if (flags[i]) ++tp;
    else ++fp;
    PrPoint p;
    p.tp = tp;
    p.fp = fp;
    p.precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    p.recall = total_gt > 0 ? static_cast<double>(tp) / static_cast<double>(total_gt) : 0.0;
    p.score = scores[i];
    r.curve.push_back(p);
  }
  if (total_gt == 0 || r.curve.empty()) return r;

  std::vector<double> mrec{0.0}, mpre{0.0};
  for (const auto& p : r.curve) {
    mrec.push_back(p.recall);
    mpre.push_back(p.precision);
  }
  mrec.push_back(1.0);
  mpre.push_back(0.0);
  for (std::size_t i = mpre.size() - 1; i-- > 0;) mpre[i] = std::max(mpre[i], mpre[i + 1]);
  double ap = 0;
  for (std::size_t i = 0; i + 1 < mrec.size(); ++i) {
    if (mrec[i + 1] != mrec[i]) ap += (mrec[i + 1] - mrec[i]) * mpre[i + 1];
  }
  r.ap = ap;
  return r;
}

struct ImageResult {
  std::vector<Detection> dets;
  std::vector<GtBox> gts;
};

/// Per-class matching and AP over a dataset; mAP averages the classes that
/// have ground truth. Precision and recall are reported for the detections
/// scoring at least conf_threshold.
inline EvalReport evaluate(const std::vector<ImageResult>& images, double iou_threshold = 0.5,
                           double conf_threshold = 0.25) {
  EvalReport rep;
  rep.conf_threshold = conf_threshold;
  rep.iou_threshold = iou_threshold;

  struct Ranked {
    double score;
    std::size_t image;
    std::size_t rank;
    int class_id;
    bool tp;
  };
  std::vector<Ranked> all;
  std::map<int, std::int64_t> gt_per_class;
  std::int64_t total_gt = 0;
  for (std::size_t im = 0; im < images.size(); ++im) {
    auto dets = images[im].dets;
    std::sort(dets.begin(), dets.end(), detection_before);
    const auto flags = match(dets, images[im].gts, iou_threshold);
    for (std::size_t i = 0; i < dets.size(); ++i) {
      all.push_back(Ranked{dets[i].score, im, i, dets[i].class_id, flags[i]});
    }
    for (const auto& g : images[im].gts) ++gt_per_class[g.class_id];
    total_gt += static_cast<std::int64_t>(images[im].gts.size());
  }
  std::sort(all.begin(), all.end(), [](const Ranked& a, const Ranked& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.image != b.image) return a.image < b.image;
    return a.rank < b.rank;
  });

  std::vector<bool> flags;
  std::vector<double> scores;
  for (const auto& r : all) {
    flags.push_back(r.tp);
    scores.push_back(r.score);
    if (r.score >= conf_threshold) {
      if (r.tp) ++rep.counts.tp;
      else ++rep.counts.fp;
    }
  }
  rep.counts.fn = total_gt - rep.counts.tp;
  rep.precision = rep.counts.tp + rep.counts.fp > 0
                      ? static_cast<double>(rep.counts.tp) / static_cast<double>(rep.counts.tp + rep.counts.fp)
                      : 0.0;
  rep.recall = total_gt > 0 ? static_cast<double>(rep.counts.tp) / static_cast<double>(total_gt) : 0.0;
  rep.pr_curve = pr_and_ap(flags, scores, total_gt).curve;

  double sum = 0;
  for (const auto& [cls, n_gt] : gt_per_class) {
    std::vector<bool> f;
    std::vector<double> s;
    for (const auto& r : all) {
      if (r.class_id != cls) continue;
      f.push_back(r.tp);
      s.push_back(r.score);
    }
    ClassAp c{cls, n_gt, pr_and_ap(f, s, n_gt).ap};
    sum += c.ap;
    rep.ap.push_back(c);
  }
  rep.map = rep.ap.empty() ? 0.0 : sum / static_cast<double>(rep.ap.size());
  return rep;
}

}  // namespace hsinet
