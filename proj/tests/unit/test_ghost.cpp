#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "hsinet/ghost.hpp"

using namespace hsinet;
using hsinet::testing::grad_check;
using hsinet::testing::random_like;
using hsinet::testing::trainable_targets;

namespace {

Graph<double> eval_graph() { return Graph<double>(Graph<double>::Options{false, false, false}); }

hsinet::testing::GradCheckReport check_block(ParamStore<double>& store, const std::function<Var<double>(Graph<double>&, const Var<double>&)>& fwd,
                                     const Shape& in, const Shape& out, std::uint64_t seed) {
  auto x = make_var(random_like(in, seed), true);
  auto targets = trainable_targets(store);
  targets.push_back({"x", x});
  const auto proj = random_like(out, seed + 1);
  return grad_check(targets, [&](Graph<double>& g) { return ops::weighted_sum(g, fwd(g, x), proj); }, 150, seed + 2);
}

}  // namespace

TEST(GhostModule, IntrinsicCount) {
  GhostModuleSpec s;
  s.out_channels = 32;
  EXPECT_EQ(s.intrinsic(), 16);
  s.ratio = 2;
  EXPECT_EQ(s.intrinsic(), 11);  // ceil(32 / 3)
  s.ratio = 3;
  EXPECT_EQ(s.intrinsic(), 8);
}

TEST(GhostModule, ParameterCountWithoutNorm) {
  ParamStore<double> store;
  GhostModuleSpec s{16, 32};
  s.with_bn = false;
  GhostModule<double> gm(store, "gm", s);
  // primary 16*16*1*1, cheap 16 depthwise 3x3
  EXPECT_EQ(store.trainable_count(), 256 + 144);
}

TEST(GhostModule, OutputShapeAndTruncation) {
  for (int ratio : {1, 2, 3}) {
    for (int d : {6, 10, 32}) {
      ParamStore<double> store;
      GhostModuleSpec s{5, d, ratio};
      GhostModule<double> gm(store, "gm", s);
      auto g = eval_graph();
      auto y = gm.forward(g, g.input(random_like(Shape{2, 5, 7, 9}, 1)));
      EXPECT_EQ(y->value.shape(), (Shape{2, d, 7, 9})) << ratio << " " << d;
    }
  }
}

TEST(GhostModule, OddOutputWithRatioOneRejected) {
  ParamStore<double> store;
  EXPECT_THROW(GhostModule<double>(store, "gm", GhostModuleSpec{8, 15, 1}), ValueError);
  EXPECT_THROW(GhostModule<double>(store, "gm2", GhostModuleSpec{8, 16, 0}), ValueError);
  GhostModuleSpec even_kernel{8, 16};
  even_kernel.cheap_kernel = 2;
  EXPECT_THROW(even_kernel.validate(), ValueError);
}

TEST(GhostModule, IntrinsicMapsPassThrough) {
  // The first m output channels are the primary convolution alone.
  ParamStore<double> store;
  GhostModuleSpec s{3, 8};
  s.with_bn = false;
  s.act = Activation::None;
  GhostModule<double> gm(store, "gm", s);
  const auto xv = random_like(Shape{1, 3, 4, 4}, 2);
  auto g = eval_graph();
  auto y = gm.forward(g, g.input(xv));
  const auto& w = store.find("gm.primary.conv.weight")->var->value;
  for (int o = 0; o < 4; ++o)
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j) {
        double acc = 0;
        for (int c = 0; c < 3; ++c) acc += w.at(o, c, 0, 0) * xv.at(0, c, i, j);
        EXPECT_NEAR(y->value.at(0, o, i, j), acc, 1e-14);
      }
}

TEST(Gbneck, ShapesForBothStrides) {
  for (int stride : {1, 2}) {
    ParamStore<double> store;
    GbneckSpec s{16, 48, 24, stride, true};
    Gbneck<double> b(store, "b", s);
    auto g = eval_graph();
    auto y = b.forward(g, g.input(random_like(Shape{1, 16, 8, 8}, 3)));
    EXPECT_EQ(y->value.shape(), (Shape{1, 24, 8 / stride, 8 / stride}));
  }
}

TEST(Gbneck, IdentityShortcutWhenBodyIsZero) {
  ParamStore<double> store;
  GbneckSpec s{8, 16, 8, 1, false};
  Gbneck<double> b(store, "b", s);
  EXPECT_TRUE(s.identity_shortcut());
  // Zero batch-norm scale and shift on the reducing ghost module silences the body.
  for (const auto& e : store.entries())
    if (e.name.rfind("b.ghost2", 0) == 0 && e.name.find(".bn.") != std::string::npos && e.trainable) e.var->value.fill(0);
  const auto xv = random_like(Shape{2, 8, 5, 5}, 4);
  auto g = eval_graph();
  auto y = b.forward(g, g.input(xv));
  for (std::size_t i = 0; i < xv.numel(); ++i) EXPECT_DOUBLE_EQ(y->value[i], xv[i]);
}

TEST(Gbneck, RejectsBadStrideAndChannels) {
  ParamStore<double> store;
  EXPECT_THROW(Gbneck<double>(store, "b", GbneckSpec{8, 16, 8, 3}), ValueError);
  Gbneck<double> ok(store, "ok", GbneckSpec{8, 16, 8, 1});
  auto g = eval_graph();
  EXPECT_THROW(ok.forward(g, g.input(Tensor<double>(Shape{1, 4, 4, 4}))), ShapeError);
}

TEST(GhostModule, CentralDifferences) {
  for (int ratio : {1, 2}) {
    ParamStore<double> store;
    store.seed(30 + static_cast<std::uint64_t>(ratio));
    GhostModule<double> gm(store, "gm", GhostModuleSpec{4, 6, ratio});
    auto rep = check_block(store, [&](Graph<double>& g, const Var<double>& x) { return gm.forward(g, x); },
                           Shape{2, 4, 5, 5}, Shape{2, 6, 5, 5}, 40);
    EXPECT_GE(rep.checked, 100);
    EXPECT_LT(rep.worst, 1e-6) << "s=" << ratio << " " << rep.worst_at;
  }
}

TEST(Gbneck, CentralDifferences) {
  for (int stride : {1, 2}) {
    for (bool lhab : {false, true}) {
      ParamStore<double> store;
      store.seed(50 + static_cast<std::uint64_t>(stride));
      const int out = stride == 1 ? 8 : 12;
      Gbneck<double> b(store, "b", GbneckSpec{8, 16, out, stride, lhab});
      auto rep = check_block(store, [&](Graph<double>& g, const Var<double>& x) { return b.forward(g, x); },
                             Shape{2, 8, 6, 6}, Shape{2, out, 6 / stride, 6 / stride}, 60);
      EXPECT_GE(rep.checked, 100);
      EXPECT_LT(rep.worst, 1e-6) << "stride " << stride << " lhab " << lhab << " " << rep.worst_at;
    }
  }
}
