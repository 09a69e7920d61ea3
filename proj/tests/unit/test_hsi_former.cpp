#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "hsinet/hsi_former.hpp"
#include "oracles.hpp"

using namespace hsinet;
using hsinet::testing::grad_check;
using hsinet::testing::random_like;
using hsinet::testing::trainable_targets;

TEST(ChannelSchedule, Examples) {
  auto s = channel_schedule(64, 3);
  EXPECT_EQ(s.a0, 16);
  EXPECT_EQ(s.b, (std::vector<int>{16, 32, 64}));
  s = channel_schedule(4, 1);
  EXPECT_EQ(s.a0, 4);
  EXPECT_EQ(s.b, (std::vector<int>{4}));
  s = channel_schedule(8, 2);
  EXPECT_EQ(s.a0, 4);
  EXPECT_EQ(s.b, (std::vector<int>{4, 8}));
}

TEST(ChannelSchedule, SumsToTwiceChannels) {
  int valid = 0;
  for (int n = 1; n <= 4; ++n)
    for (int c = 1; c <= 512; ++c) {
      if (c % (1 << (n - 1)) != 0) {
        EXPECT_THROW(channel_schedule(c, n), ValueError);
        continue;
      }
      ++valid;
      ASSERT_EQ(channel_schedule(c, n).total(), 2 * c) << c << " " << n;
    }
  EXPECT_GT(valid, 900);
}

TEST(ChannelSchedule, DiagnosticNamesValues) {
  try {
    channel_schedule(6, 3);
    FAIL();
  } catch (const ValueError& e) {
    const std::string m = e.what();
    EXPECT_NE(m.find("C=6"), std::string::npos) << m;
    EXPECT_NE(m.find("n=3"), std::string::npos) << m;
  }
  EXPECT_THROW(channel_schedule(8, 0), ValueError);
}

TEST(GnConv, ThirdOrderMatchesUnrolledOracle) {
  ParamStore<double> store;
  store.seed(5);
  GnConv<double> gn(store, "g", GnConvSpec{8, 3, 7});
  auto w = [&](const std::string& n) { return store.find("g." + n + ".conv.weight")->var->value; };
  const oracle::G3Weights ow{w("proj_in"), w("dw0"), w("dw1"), w("dw2"), w("h1"), w("h2"), w("proj_out")};
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto xv = random_like(Shape{1, 8, 4, 4}, seed);
    Graph<double> g(Graph<double>::Options{false, false, false});
    auto y = gn.forward(g, g.input(xv));
    const auto ref = oracle::g3conv(xv, ow);
    ASSERT_EQ(y->value.shape(), ref.shape());
    for (std::size_t i = 0; i < ref.numel(); ++i) {
      EXPECT_LT(std::abs(y->value[i] - ref[i]) / std::max(1e-12, std::abs(ref[i])), 1e-6) << i;
    }
  }
}

TEST(GnConv, ParameterCount) {
  // C=8, n=3: in 8*16, dw 49*(2+4+8), h 2*4 + 4*8, out 8*8
  ParamStore<double> store;
  GnConv<double> gn(store, "g", GnConvSpec{8, 3, 7});
  EXPECT_EQ(store.trainable_count(), 128 + 49 * 14 + 8 + 32 + 64);
}

TEST(HsiFormer, ZeroOutputProjectionsGiveIdentity) {
  ParamStore<double> store;
  HsiFormer<double> block(store, "hsi", HsiFormerSpec{8, 2, 3, 4.0});
  for (const auto& e : store.entries())
    if (e.name.find("proj_out") != std::string::npos || e.name.find("fc2") != std::string::npos) e.var->value.fill(0);
  const auto xv = random_like(Shape{2, 8, 3, 3}, 9);
  for (bool training : {false, true}) {
    Graph<double> g(Graph<double>::Options{false, training, false});
    auto y = block.forward(g, g.input(xv));
    for (std::size_t i = 0; i < xv.numel(); ++i) EXPECT_DOUBLE_EQ(y->value[i], xv[i]);
  }
}

TEST(HsiFormer, RejectsBadSpec) {
  ParamStore<double> store;
  EXPECT_THROW(HsiFormer<double>(store, "a", HsiFormerSpec{8, 0, 3, 4.0}), ValueError);
  EXPECT_THROW(HsiFormer<double>(store, "b", HsiFormerSpec{6, 1, 3, 4.0}), ValueError);
  EXPECT_THROW(HsiFormer<double>(store, "c", HsiFormerSpec{8, 1, 3, 0.0}), ValueError);
}

TEST(GnConv, CentralDifferencesPerOrder) {
  for (int order : {1, 2, 3}) {
    ParamStore<double> store;
    store.seed(70 + static_cast<std::uint64_t>(order));
    GnConv<double> gn(store, "g", GnConvSpec{8, order, 7});
    auto x = make_var(random_like(Shape{1, 8, 4, 4}, 80), true);
    auto targets = trainable_targets(store);
    targets.push_back({"x", x});
    const auto proj = random_like(Shape{1, 8, 4, 4}, 81);
    auto rep = grad_check(targets, [&](Graph<double>& g) { return ops::weighted_sum(g, gn.forward(g, x), proj); },
                          150, 82);
    EXPECT_GE(rep.checked, 100);
    EXPECT_LT(rep.worst, 1e-6) << "n=" << order << " " << rep.worst_at;
  }
}

TEST(HsiFormer, CentralDifferences) {
  ParamStore<double> store;
  store.seed(90);
  HsiFormer<double> block(store, "hsi", HsiFormerSpec{8, 1, 3, 2.0});
  auto x = make_var(random_like(Shape{2, 8, 4, 4}, 91), true);
  auto targets = trainable_targets(store);
  targets.push_back({"x", x});
  const auto proj = random_like(Shape{2, 8, 4, 4}, 92);
  auto rep = grad_check(targets, [&](Graph<double>& g) { return ops::weighted_sum(g, block.forward(g, x), proj); },
                        200, 93);
  EXPECT_GE(rep.checked, 100);
  EXPECT_LT(rep.worst, 1e-6) << rep.worst_at;
}
