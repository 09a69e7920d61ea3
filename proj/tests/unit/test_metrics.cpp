#include <gtest/gtest.h>

#include <random>

#include "hsinet/metrics.hpp"
#include "oracles.hpp"

using namespace hsinet;

namespace {

Detection det(double cx, double cy, double w, double h, double score, int cls = 0) {
  Detection d;
  d.cx = cx;
  d.cy = cy;
  d.w = w;
  d.h = h;
  d.score = score;
  d.class_id = cls;
  return d;
}

std::vector<ImageResult> random_set(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> n_img(1, 5), n_box(0, 20), cls(0, 2), coarse(0, 9);
  std::uniform_real_distribution<double> pos(10, 90), size(6, 30), u(0, 1), jitter(-6, 6);
  std::vector<ImageResult> out(static_cast<std::size_t>(n_img(rng)));
  for (auto& im : out) {
    const int ng = n_box(rng);
    for (int i = 0; i < ng; ++i) im.gts.push_back(GtBox{cls(rng), pos(rng), pos(rng), size(rng), size(rng)});
    const int nd = n_box(rng);
    for (int i = 0; i < nd; ++i) {
      // Half the detections sit near a ground truth; coarse scores force ties.
      const double score = u(rng) < 0.3 ? coarse(rng) / 10.0 : u(rng);
      if (!im.gts.empty() && u(rng) < 0.5) {
        const auto& g = im.gts[static_cast<std::size_t>(rng() % im.gts.size())];
        im.dets.push_back(det(g.cx + jitter(rng), g.cy + jitter(rng), g.w * (0.7 + 0.6 * u(rng)),
                              g.h * (0.7 + 0.6 * u(rng)), score, u(rng) < 0.8 ? g.class_id : cls(rng)));
      } else {
        im.dets.push_back(det(pos(rng), pos(rng), size(rng), size(rng), score, cls(rng)));
      }
    }
  }
  return out;
}

}  // namespace

TEST(Metrics, PerfectDetectionsGiveApOne) {
  std::vector<ImageResult> set(1);
  set[0].gts = {GtBox{0, 20, 20, 10, 10}, GtBox{0, 60, 60, 12, 8}};
  set[0].dets = {det(20, 20, 10, 10, 0.9), det(60, 60, 12, 8, 0.8)};
  const auto r = evaluate(set, 0.5, 0.25);
  EXPECT_EQ(r.map, 1.0);
  EXPECT_EQ(r.precision, 1.0);
  EXPECT_EQ(r.recall, 1.0);
  EXPECT_EQ(r.counts.fn, 0);
}

TEST(Metrics, OneOfTwoGivesHalf) {
  std::vector<ImageResult> set(1);
  set[0].gts = {GtBox{0, 20, 20, 10, 10}, GtBox{0, 60, 60, 12, 8}};
  set[0].dets = {det(20, 20, 10, 10, 0.9)};
  const auto r = evaluate(set, 0.5, 0.25);
  EXPECT_EQ(r.map, 0.5);
  EXPECT_EQ(r.recall, 0.5);
  EXPECT_EQ(r.precision, 1.0);
}

TEST(Metrics, FalsePositiveRankedFirst) {
  // FP then TP then miss: precision 1/2 at recall 1/2, envelope 1/2 -> AP = 1/4.
  std::vector<ImageResult> set(1);
  set[0].gts = {GtBox{0, 20, 20, 10, 10}, GtBox{0, 60, 60, 12, 8}};
  set[0].dets = {det(80, 80, 5, 5, 0.9), det(20, 20, 10, 10, 0.8)};
  EXPECT_DOUBLE_EQ(evaluate(set, 0.5, 0.0).map, 0.25);
}

TEST(Metrics, DuplicateDetectionIsFalsePositive) {
  std::vector<ImageResult> set(1);
  set[0].gts = {GtBox{0, 20, 20, 10, 10}};
  set[0].dets = {det(20, 20, 10, 10, 0.9), det(20, 21, 10, 10, 0.8)};
  const auto r = evaluate(set, 0.5, 0.25);
  EXPECT_EQ(r.counts.tp, 1);
  EXPECT_EQ(r.counts.fp, 1);
  EXPECT_EQ(r.map, 1.0);  // the duplicate ranks after full recall
}

TEST(Metrics, ClassMismatchNeverMatches) {
  std::vector<ImageResult> set(1);
  set[0].gts = {GtBox{1, 20, 20, 10, 10}};
  set[0].dets = {det(20, 20, 10, 10, 0.9, 0)};
  const auto r = evaluate(set, 0.5, 0.25);
  EXPECT_EQ(r.counts.tp, 0);
  EXPECT_EQ(r.map, 0.0);
  ASSERT_EQ(r.ap.size(), 1u);  // only class 1 has ground truth
  EXPECT_EQ(r.ap[0].class_id, 1);
}

TEST(Metrics, IouThresholdIsInclusive) {
  EXPECT_TRUE(match({det(0, 0, 10, 10, 0.9)}, {GtBox{0, 0, 0, 10, 10}}, 1.0)[0]);
  // Two 10x10 boxes offset by 5 overlap 50 / 150.
  EXPECT_TRUE(match({det(5, 0, 10, 10, 0.9)}, {GtBox{0, 0, 0, 10, 10}}, 1.0 / 3.0)[0]);
  EXPECT_FALSE(match({det(5, 0, 10, 10, 0.9)}, {GtBox{0, 0, 0, 10, 10}}, 0.34)[0]);
}

TEST(Metrics, EmptyInputs) {
  EXPECT_EQ(evaluate({}, 0.5, 0.25).map, 0.0);
  std::vector<ImageResult> only_dets(1);
  only_dets[0].dets = {det(1, 1, 2, 2, 0.5)};
  const auto r = evaluate(only_dets, 0.5, 0.25);
  EXPECT_EQ(r.counts.fp, 1);
  EXPECT_EQ(r.recall, 0.0);
  EXPECT_EQ(pr_and_ap({}, {}, 3).ap, 0.0);
  EXPECT_THROW(pr_and_ap({true}, {}, 1), ValueError);
}

TEST(Metrics, MatchesNaiveEvaluatorOnRandomSets) {
  std::mt19937_64 rng(77);
  for (int trial = 0; trial < 200; ++trial) {
    const auto set = random_set(rng);
    std::vector<oracle::NaiveImage> naive;
    for (const auto& im : set) naive.push_back({im.dets, im.gts});
    for (double conf : {0.0, 0.25}) {
      const auto got = evaluate(set, 0.5, conf);
      const auto want = oracle::evaluate(naive, 0.5, conf);
      ASSERT_NEAR(got.precision, want.precision, 1e-9) << trial;
      ASSERT_NEAR(got.recall, want.recall, 1e-9) << trial;
      ASSERT_NEAR(got.map, want.map, 1e-9) << trial;
      ASSERT_EQ(got.counts.tp, want.tp) << trial;
      ASSERT_EQ(got.counts.fp, want.fp) << trial;
      ASSERT_EQ(got.ap.size(), want.ap.size()) << trial;
      for (const auto& c : got.ap) ASSERT_NEAR(c.ap, want.ap.at(c.class_id), 1e-9) << trial << " class " << c.class_id;
    }
  }
}

TEST(Metrics, Invariants) {
  std::mt19937_64 rng(78);
  for (int trial = 0; trial < 100; ++trial) {
    const auto set = random_set(rng);
    const auto r = evaluate(set, 0.5, 0.0);
    EXPECT_GE(r.map, 0.0);
    EXPECT_LE(r.map, 1.0);
    for (const auto& c : r.ap) EXPECT_LE(c.ap, 1.0);
    // Recall along the pooled curve never decreases.
    for (std::size_t i = 1; i < r.pr_curve.size(); ++i) EXPECT_GE(r.pr_curve[i].recall, r.pr_curve[i - 1].recall);
    // Reversing the detection order inside each image changes nothing.
    auto rev = set;
    for (auto& im : rev) std::reverse(im.dets.begin(), im.dets.end());
    EXPECT_EQ(evaluate(rev, 0.5, 0.0).map, r.map);
    std::int64_t gts = 0;
    for (const auto& im : set) gts += static_cast<std::int64_t>(im.gts.size());
    EXPECT_EQ(r.counts.tp + r.counts.fn, gts);
  }
}
