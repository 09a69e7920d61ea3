#include <gtest/gtest.h>

#include "hsinet/analyzer.hpp"

using namespace hsinet;

namespace {

ComplexityReport trace_ghost(const GhostModuleSpec& spec, int side) {
  ParamStore<float> store;
  GhostModule<float> gm(store, "gm", spec);
  return trace_costs<float>(Shape{1, spec.in_channels, side, side},
                            [&](Graph<float>& g, const Var<float>& x) { gm.forward(g, x); });
}

ComplexityReport trace_conv(int c, int d, int k, int side) {
  ParamStore<float> store;
  ConvBnAct<float> conv(store, "conv", Conv2dSpec::square(c, d, k), false, Activation::None);
  return trace_costs<float>(Shape{1, c, side, side}, [&](Graph<float>& g, const Var<float>& x) { conv.forward(g, x); });
}

GhostModuleSpec plain_ghost(int c, int s) {
  GhostModuleSpec spec{c, 0, s};
  spec.out_channels = c * (1 + s);  // D = m (1 + s) with m = C
  spec.with_bn = false;
  spec.act = Activation::None;
  return spec;
}

}  // namespace

TEST(Analyzer, PointwiseConvCost) {
  const auto r = trace_conv(16, 32, 1, 20);
  EXPECT_EQ(r.total_params, 512);
  EXPECT_EQ(r.total_flops, 409600);
}

TEST(Analyzer, ClosedFormRatioExamples) {
  EXPECT_EQ(ghost_ratios(plain_ghost(64, 1)).flops, Rational::make(73, 128));
  // C = d^2 makes the cheap branch exactly as costly as what it saves.
  EXPECT_EQ(ghost_ratios(plain_ghost(9, 1)).flops, Rational::make(1, 1));
  EXPECT_DOUBLE_EQ(ghost_ratios(plain_ghost(64, 2)).asymptotic, 1.0 / 3.0);
}

TEST(Analyzer, MeasuredRatiosEqualClosedForm) {
  for (int c : {16, 32, 64, 128, 256}) {
    for (int s : {1, 2, 3}) {
      const auto spec = plain_ghost(c, s);
      const auto ghost = trace_ghost(spec, 8);
      const auto dense = trace_conv(c, spec.out_channels, 1, 8);
      const auto expect = Rational::make(c + 9 * s, static_cast<std::int64_t>(c) * (1 + s));
      EXPECT_EQ(Rational::make(ghost.conv_params, dense.conv_params), expect) << c << " " << s;
      EXPECT_EQ(Rational::make(ghost.conv_flops, dense.conv_flops), expect) << c << " " << s;
      EXPECT_EQ(ghost_ratios(spec).params, expect);
    }
  }
}

TEST(Analyzer, RatioApproachesAsymptote) {
  for (int s : {1, 2, 3}) {
    double prev = 1e9;
    for (int c = 16; c <= 4096; c *= 2) {
      const double r = ghost_ratios(plain_ghost(c, s)).flops.value();
      const double lim = 1.0 / (1 + s);
      EXPECT_GT(r, lim);
      EXPECT_LT(r - lim, prev);
      prev = r - lim;
    }
    EXPECT_LT(prev / (1.0 / (1 + s)), 0.01);
  }
}

TEST(Analyzer, TotalsMatchParameterStore) {
  for (double mult : {0.25, 0.5, 1.0}) {
    ModelConfig cfg;
    cfg.width_multiplier = mult;
    cfg.input_size = 320;
    Model<float> m(cfg);
    const auto r = analyze(m, 320);
    EXPECT_EQ(r.total_params, m.params().trainable_count()) << mult;
  }
}

TEST(Analyzer, FlopsScaleWithArea) {
  ModelConfig cfg;
  cfg.width_multiplier = 0.5;
  Model<float> m(cfg);
  const auto a = analyze(m, 320);
  const auto b = analyze(m, 640);
  // Only the pooled attention descriptors do not grow with area.
  EXPECT_GT(b.total_flops, 4 * a.total_flops - a.total_flops / 1000);
  EXPECT_LT(b.total_flops, 4 * a.total_flops);
  const auto pa = trace_ghost(plain_ghost(16, 1), 8), pb = trace_ghost(plain_ghost(16, 1), 16);
  EXPECT_EQ(pb.total_flops, 4 * pa.total_flops);
  EXPECT_EQ(a.total_params, b.total_params);
  EXPECT_THROW(analyze(m, 100), ValueError);
}

TEST(Analyzer, ReportListsLayersAndConvention) {
  ModelConfig cfg;
  cfg.width_multiplier = 0.25;
  Model<float> m(cfg);
  const auto r = analyze(m, 64);
  std::int64_t sum = 0;
  for (const auto& l : r.layers) sum += l.params;
  EXPECT_EQ(sum, r.total_params);
  const auto text = r.to_text();
  EXPECT_NE(text.find("multiply-accumulates"), std::string::npos);
  EXPECT_NE(text.find("backbone.row0"), std::string::npos);
  EXPECT_NE(text.find("TOTAL"), std::string::npos);
}
