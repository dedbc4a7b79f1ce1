#include "despos/autodiff.hpp"
#include "despos/nn.hpp"
#include "gradcheck.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace despos;
using despos::testing::check_gradients;

namespace {

Parameter random_param(const std::string& name, Eigen::Index r, Eigen::Index c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  Parameter p{name, Mat(r, c), false};
  for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value(i) = n(rng);
  return p;
}

// Weighted sum so every output entry gets a distinct upstream gradient.
Var weigh(Graph& g, Var v) {
  Mat w(v.rows(), v.cols());
  for (Eigen::Index i = 0; i < w.size(); ++i) w(i) = 0.3 + 0.17 * static_cast<double>(i % 7) - 0.05 * static_cast<double>(i);
  return sum(mul(v, g.constant(w)));
}

}  // namespace

TEST(Autodiff, ForwardValues) {
  Graph g;
  Mat a(2, 2), b(2, 2);
  a << 1, 2, 3, 4;
  b << 5, 6, 7, 8;
  Var va = g.constant(a), vb = g.constant(b);
  Mat ab(2, 2);
  ab << 19, 22, 43, 50;
  EXPECT_TRUE(matmul(va, vb).value().isApprox(ab));
  Mat abt(2, 2);
  abt << 17, 23, 39, 53;
  EXPECT_TRUE(matmul_nt(va, vb).value().isApprox(abt));
  EXPECT_DOUBLE_EQ(trace(va).scalar(), 5.0);
  EXPECT_DOUBLE_EQ(l2_norm(va).scalar(), std::sqrt(30.0));
  EXPECT_DOUBLE_EQ(mean(va).scalar(), 2.5);
  const Mat mx = max_rows(va).value();
  EXPECT_DOUBLE_EQ(mx(0, 0), 3.0);
  EXPECT_DOUBLE_EQ(mx(0, 1), 4.0);
  const Mat sm = softmax_rows(va).value();
  EXPECT_NEAR(sm(0, 1), 1.0 / (1.0 + std::exp(-1.0)), 1e-15);
  EXPECT_NEAR(sm.row(1).sum(), 1.0, 1e-15);
  const Mat sh = shift_rows(va, 1).value();
  EXPECT_EQ(sh(0, 0), 0.0);
  EXPECT_EQ(sh(1, 0), 1.0);
  const Mat ga = gather_rows(va, {1, 1, 0}).value();
  EXPECT_EQ(ga.rows(), 3);
  EXPECT_EQ(ga(1, 1), 4.0);
  EXPECT_EQ(ga(2, 0), 1.0);
}

TEST(Autodiff, LogSoftmaxIsStableForLargeLogits) {
  Graph g;
  Mat a(1, 3);
  a << 1000.0, 1001.0, 999.0;
  const Mat ls = log_softmax_rows(g.constant(a)).value();
  const double lse = 1001.0 + std::log(std::exp(-1.0) + 1.0 + std::exp(-2.0));
  EXPECT_NEAR(ls(0, 0), 1000.0 - lse, 1e-12);
  EXPECT_TRUE(ls.allFinite());
}

TEST(Autodiff, MaxRowsTieGoesToFirstRow) {
  Graph g;
  Mat a(3, 1);
  a << 2.0, 2.0, 1.0;
  Var x = g.input(a);
  g.backward(sum(max_rows(x)));
  const Mat gr = g.grad(x);
  EXPECT_EQ(gr(0, 0), 1.0);
  EXPECT_EQ(gr(1, 0), 0.0);
}

TEST(Autodiff, SharedNodeAccumulates) {
  Graph g;
  Var x = g.input(Mat::Constant(1, 1, 3.0));
  g.backward(mul(x, x));
  EXPECT_DOUBLE_EQ(g.grad(x)(0, 0), 6.0);
}

TEST(Autodiff, FrozenParameterGetsNoGradient) {
  Parameter p = random_param("p", 2, 2, 1);
  p.frozen = true;
  Parameter q = random_param("q", 2, 2, 2);
  Graph g;
  g.backward(sum(mul(g.param(p), g.param(q))));
  const auto grads = g.gradients();
  ASSERT_EQ(grads.size(), 1u);
  EXPECT_EQ(grads[0].first, &q);
  EXPECT_TRUE(grads[0].second.isApprox(p.value));
}

TEST(Autodiff, BackwardRequiresScalar) {
  Graph g;
  Var x = g.input(Mat::Ones(2, 2));
  EXPECT_THROW(g.backward(x), std::invalid_argument);
}

struct OpCase {
  const char* name;
  std::function<Var(Graph&, Var, Var)> op;
  Eigen::Index ar, ac, br, bc;
};

class OpGradient : public ::testing::TestWithParam<OpCase> {};

TEST_P(OpGradient, MatchesFiniteDifferences) {
  const OpCase& c = GetParam();
  Parameter a = random_param("a", c.ar, c.ac, 11);
  Parameter b = random_param("b", c.br, c.bc, 12);
  const auto r = check_gradients({&a, &b}, [&](Graph& g) { return weigh(g, c.op(g, g.param(a), g.param(b))); });
  EXPECT_GT(r.checked, 0);
  EXPECT_LT(r.worst, 1e-6) << c.name << " at " << r.where;
}

INSTANTIATE_TEST_SUITE_P(
    Ops, OpGradient,
    ::testing::Values(
        OpCase{"matmul", [](Graph&, Var a, Var b) { return matmul(a, b); }, 3, 4, 4, 2},
        OpCase{"matmul_nt", [](Graph&, Var a, Var b) { return matmul_nt(a, b); }, 3, 4, 2, 4},
        OpCase{"add", [](Graph&, Var a, Var b) { return add(a, b); }, 3, 2, 3, 2},
        OpCase{"sub", [](Graph&, Var a, Var b) { return sub(a, b); }, 3, 2, 3, 2},
        OpCase{"add_row", [](Graph&, Var a, Var b) { return add_row(a, b); }, 3, 2, 1, 2},
        OpCase{"mul", [](Graph&, Var a, Var b) { return mul(a, b); }, 3, 2, 3, 2},
        OpCase{"scale", [](Graph&, Var a, Var b) { return add(scale(a, -1.7), b); }, 2, 2, 2, 2},
        OpCase{"transpose", [](Graph&, Var a, Var b) { return matmul(transpose(a), b); }, 3, 2, 3, 2},
        OpCase{"relu", [](Graph&, Var a, Var b) { return relu(add(a, b)); }, 3, 3, 3, 3},
        OpCase{"sigmoid", [](Graph&, Var a, Var b) { return sigmoid(mul(a, b)); }, 3, 3, 3, 3},
        OpCase{"tanh", [](Graph&, Var a, Var b) { return tanh(mul(a, b)); }, 3, 3, 3, 3},
        OpCase{"softmax_rows", [](Graph&, Var a, Var b) { return softmax_rows(matmul(a, b)); }, 3, 2, 2, 4},
        OpCase{"log_softmax_rows", [](Graph&, Var a, Var b) { return log_softmax_rows(matmul(a, b)); }, 3, 2, 2, 4},
        OpCase{"concat_cols", [](Graph&, Var a, Var b) { return concat_cols({a, b, a}); }, 2, 3, 2, 1},
        OpCase{"concat_rows", [](Graph&, Var a, Var b) { return concat_rows({b, a}); }, 2, 3, 1, 3},
        OpCase{"slice_rows", [](Graph&, Var a, Var b) { return add(slice_rows(a, 1, 2), slice_rows(b, 0, 2)); }, 4, 2, 3, 2},
        OpCase{"slice_cols", [](Graph&, Var a, Var b) { return mul(slice_cols(a, 1, 2), b); }, 2, 4, 2, 2},
        OpCase{"broadcast_rows", [](Graph&, Var a, Var b) { return mul(broadcast_rows(a, 3), b); }, 1, 2, 3, 2},
        OpCase{"shift_rows", [](Graph&, Var a, Var b) { return add(shift_rows(a, 1), shift_rows(b, -2)); }, 4, 2, 4, 2},
        OpCase{"gather_rows", [](Graph&, Var a, Var b) { return mul(gather_rows(a, {2, 0, 2}), b); }, 3, 2, 3, 2},
        OpCase{"max_rows", [](Graph&, Var a, Var b) { return max_rows(add(a, b)); }, 4, 3, 4, 3},
        OpCase{"mean_rows", [](Graph&, Var a, Var b) { return mul(mean_rows(a), b); }, 4, 3, 1, 3},
        OpCase{"trace", [](Graph&, Var a, Var b) { return trace(matmul(a, b)); }, 3, 2, 2, 3},
        OpCase{"l2_norm", [](Graph&, Var a, Var b) { return mul(l2_norm(a), b); }, 3, 2, 1, 1},
        OpCase{"l2_normalize", [](Graph&, Var a, Var b) { return mul(l2_normalize(a), b); }, 1, 5, 1, 5},
        OpCase{"layer_norm",
               [](Graph&, Var a, Var b) { return layer_norm(a, slice_rows(b, 0, 1), slice_rows(b, 1, 1)); },
               3, 4, 2, 4}),
    [](const ::testing::TestParamInfo<OpCase>& info) { return std::string(info.param.name); });

TEST(NnGradient, TransformerLayerMatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  TransformerLayer layer("t", 8, 2, 16, rng);
  ParamList params;
  layer.collect(params);
  Parameter x = random_param("x", 5, 8, 9);
  params.push_back(&x);
  const auto r = check_gradients(params, [&](Graph& g) { return weigh(g, layer(g, g.param(x))); }, 1e-5, 3);
  EXPECT_LT(r.worst, 1e-5) << r.where;
}

TEST(NnGradient, BlockwiseAttentionMatchesFiniteDifferences) {
  std::mt19937_64 rng(6);
  TransformerLayer layer("t", 4, 1, 8, rng);
  ParamList params;
  layer.collect(params);
  Parameter x = random_param("x", 5, 4, 10);
  params.push_back(&x);
  const auto r =
      check_gradients(params, [&](Graph& g) { return weigh(g, layer.blockwise(g, g.param(x), {2, 5})); }, 1e-5, 2);
  EXPECT_LT(r.worst, 1e-5) << r.where;
}

TEST(Nn, BlockwiseAttentionIsolatesBlocks) {
  std::mt19937_64 rng(7);
  TransformerLayer layer("t", 4, 2, 8, rng);
  Mat x = random_param("x", 5, 4, 3).value;
  Graph g1;
  const Mat full = layer.blockwise(g1, g1.constant(x), {2, 5}).value();
  x.row(4).array() += 3.0;
  Graph g2;
  const Mat changed = layer.blockwise(g2, g2.constant(x), {2, 5}).value();
  EXPECT_TRUE(full.topRows(2).isApprox(changed.topRows(2)));
  EXPECT_FALSE(full.bottomRows(3).isApprox(changed.bottomRows(3)));
}

TEST(Nn, GlorotBoundsAndFloatRounding) {
  std::mt19937_64 rng(1);
  const Mat w = glorot_uniform(30, 20, rng);
  const double bound = std::sqrt(6.0 / 50.0);
  EXPECT_LE(w.cwiseAbs().maxCoeff(), bound);
  for (Eigen::Index i = 0; i < w.size(); ++i) EXPECT_EQ(w(i), static_cast<double>(static_cast<float>(w(i))));
}
