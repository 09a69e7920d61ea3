#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "hsinet/ops.hpp"

using namespace hsinet;
using hsinet::testing::grad_check;
using hsinet::testing::GradTarget;
using hsinet::testing::random_like;

namespace {

Var<double> param(const Shape& s, std::uint64_t seed, double lo = -1, double hi = 1) {
  return make_var(random_like(s, seed, lo, hi), true);
}

// Projects onto a fixed random tensor so every output element matters.
Var<double> project(Graph<double>& g, const Var<double>& y, std::uint64_t seed) {
  return ops::weighted_sum(g, y, random_like(y->value.shape(), seed));
}

}  // namespace

TEST(Autograd, SigmoidDerivativeAtZero) {
  Graph<double> g(Graph<double>::Options{true, false, false});
  auto x = make_var(Tensor<double>(Shape{1, 1, 1, 1}, 0.0), true);
  g.backward(ops::sigmoid(g, x));
  EXPECT_DOUBLE_EQ(x->grad[0], 0.25);
}

TEST(Autograd, PointwiseConvWeightGradientIsInputSum) {
  Graph<double> g(Graph<double>::Options{true, false, false});
  auto x = make_var(random_like(Shape{1, 1, 4, 4}, 1), false);
  auto w = make_var(Tensor<double>(Shape{1, 1, 1, 1}, 0.7), true);
  g.backward(ops::sum(g, ops::conv2d(g, x, w, Var<double>{}, Conv2dSpec::square(1, 1, 1))));
  double s = 0;
  for (auto v : x->value.data()) s += v;
  EXPECT_NEAR(w->grad[0], s, 1e-12);
}

TEST(Autograd, RejectsNonScalarLoss) {
  Graph<double> g(Graph<double>::Options{true, false, false});
  auto x = make_var(Tensor<double>(Shape{1, 1, 2, 2}, 1.0), true);
  auto y = ops::relu(g, x);
  EXPECT_THROW(g.backward(y), ShapeError);
}

TEST(Autograd, GradientsAccumulateAcrossUses) {
  Graph<double> g(Graph<double>::Options{true, false, false});
  auto x = make_var(Tensor<double>(Shape{1, 1, 1, 1}, 3.0), true);
  g.backward(ops::sum(g, ops::mul(g, x, x)));
  EXPECT_DOUBLE_EQ(x->grad[0], 6.0);
}

TEST(Autograd, RandomCompositeOfThreeOps) {
  auto x = param(Shape{2, 3, 5, 5}, 2);
  auto w = param(Shape{4, 3, 3, 3}, 3);
  auto b = param(Shape{4, 1, 1, 1}, 4);
  auto rep = grad_check({{"x", x}, {"w", w}, {"b", b}},
                        [&](Graph<double>& g) {
                          auto y = ops::conv2d(g, x, w, b, Conv2dSpec::square(3, 4, 3, 1, 1, true));
                          return project(g, ops::sigmoid(g, ops::hswish(g, y)), 5);
                        },
                        120, 6, 1e-4);
  EXPECT_LT(rep.worst, 1e-6) << rep.worst_at;
}

struct OpCase {
  const char* name;
  std::function<Var<double>(Graph<double>&, const Var<double>&, const Var<double>&)> fn;
  Shape a, b;
};

TEST(Autograd, EveryOpPassesCentralDifferences) {
  const std::vector<OpCase> cases{
      {"conv_strided_grouped",
       [](Graph<double>& g, const Var<double>& x, const Var<double>& w) {
         return ops::conv2d(g, x, w, Var<double>{}, Conv2dSpec::square(4, 6, 3, 2, 2));
       },
       {2, 4, 7, 6}, {6, 2, 3, 3}},
      {"conv_depthwise",
       [](Graph<double>& g, const Var<double>& x, const Var<double>& w) {
         return ops::conv2d(g, x, w, Var<double>{}, Conv2dSpec::square(3, 3, 5, 1, 3));
       },
       {1, 3, 6, 6}, {3, 1, 5, 5}},
      {"conv_pointwise",
       [](Graph<double>& g, const Var<double>& x, const Var<double>& w) {
         return ops::conv2d(g, x, w, Var<double>{}, Conv2dSpec::square(5, 3, 1));
       },
       {2, 5, 4, 4}, {3, 5, 1, 1}},
      {"conv1d_channels",
       [](Graph<double>& g, const Var<double>& x, const Var<double>& k) { return ops::conv1d_channels(g, x, k); },
       {2, 9, 1, 1}, {1, 1, 1, 5}},
      {"pool_spatial_max",
       [](Graph<double>& g, const Var<double>& x, const Var<double>& y) {
         return ops::mul(g, ops::pool_spatial(g, x, PoolMode::Max), ops::pool_spatial(g, y, PoolMode::Avg));
       },
       {2, 3, 4, 4}, {2, 3, 4, 4}},
      {"pool_channel",
       [](Graph<double>& g, const Var<double>& x, const Var<double>& y) {
         return ops::add(g, ops::pool_channel(g, x, PoolMode::Max), ops::pool_channel(g, y, PoolMode::Avg));
       },
       {2, 5, 3, 3}, {2, 5, 3, 3}},
      {"relu_hswish_sigmoid",
       [](Graph<double>& g, const Var<double>& x, const Var<double>& y) {
         return ops::mul(g, ops::relu(g, x), ops::add(g, ops::hswish(g, ops::scale(g, y, 4.0)), ops::sigmoid(g, x)));
       },
       {1, 2, 4, 4}, {1, 2, 4, 4}},
      {"mul_broadcast_channel",
       [](Graph<double>& g, const Var<double>& x, const Var<double>& gate) { return ops::mul_broadcast(g, x, gate); },
       {2, 4, 3, 3}, {2, 4, 1, 1}},
      {"mul_broadcast_spatial",
       [](Graph<double>& g, const Var<double>& x, const Var<double>& gate) { return ops::mul_broadcast(g, x, gate); },
       {2, 4, 3, 3}, {2, 1, 3, 3}},
      {"upsample_concat_split",
       [](Graph<double>& g, const Var<double>& x, const Var<double>& y) {
         auto cat = ops::concat_channels(g, {ops::upsample_nearest_2x(g, x), y});
         auto parts = ops::split_channels(g, cat, {1, 4});
         return ops::mul(g, parts[1], parts[1]);
       },
       {1, 2, 2, 3}, {1, 3, 4, 6}},
  };
  for (const auto& c : cases) {
    auto a = param(c.a, 7);
    auto b = param(c.b, 8);
    auto rep = grad_check({{"a", a}, {"b", b}},
                          [&](Graph<double>& g) { return project(g, c.fn(g, a, b), 9); }, 100, 10);
    EXPECT_LT(rep.worst, 1e-6) << c.name << ": " << rep.worst_at;
    EXPECT_GE(rep.checked, 100);
  }
}

TEST(Autograd, BatchNormTrainingAndEval) {
  auto x = param(Shape{3, 4, 3, 3}, 11);
  ops::BatchNormParams<double> p{param(Shape{4, 1, 1, 1}, 12, 0.5, 1.5), param(Shape{4, 1, 1, 1}, 13),
                            make_var(random_like(Shape{4, 1, 1, 1}, 14)), make_var(random_like(Shape{4, 1, 1, 1}, 15, 0.5, 2))};
  for (bool training : {true, false}) {
    auto rep = grad_check({{"x", x}, {"gamma", p.gamma}, {"beta", p.beta}},
                          [&](Graph<double>& g) { return project(g, ops::batch_norm(g, x, p), 16); }, 100, 17, 1e-6,
                          training);
    EXPECT_LT(rep.worst, 1e-6) << (training ? "train: " : "eval: ") << rep.worst_at;
  }
}
