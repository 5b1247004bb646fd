#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "fd_check.hpp"
#include "hft/graph.hpp"
#include "hft/rng.hpp"

using namespace hft;

namespace {

void randomize(Tensor<double>& t, Rng& rng, double lo = -1.0, double hi = 1.0) {
  for (auto& x : t.data) x = rng.uniform(lo, hi);
}

// Builds loss = sum(w .* f(x)) and returns max relative FD error on x.
template <class F>
double fd_on(Param<double>& p, const Tensor<double>& w, F&& forward) {
  Graph<double> g;
  Var out = forward(g, g.param(p));
  Var loss = g.weighted_sum(out, w);
  p.grad.zero();
  g.backward(loss);
  auto value = [&](const Tensor<double>&) {
    Graph<double> g2;
    Var o = forward(g2, g2.param(p));
    double acc = 0;
    const Tensor<double>& ov = g2.val(o);
    for (std::int64_t i = 0; i < ov.numel(); ++i) acc += ov[i] * w[i];
    return acc;
  };
  return hft_test::fd_check_tensor(p.value, value, p.grad);
}

}  // namespace

TEST(Graph, MatmulForwardAndGradient) {
  Rng rng(1);
  ParamStore<double> store;
  auto& a = store.create("a", {3, 4});
  auto& b = store.create("b", {4, 5});
  randomize(a.value, rng);
  randomize(b.value, rng);
  Tensor<double> w({3, 5});
  randomize(w, rng);

  Graph<double> g;
  Var prod = g.matmul(g.param(a), g.param(b));
  const Tensor<double>& pv = g.val(prod);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 5; ++j) {
      double acc = 0;
      for (int k = 0; k < 4; ++k) acc += a.value.at2(i, k) * b.value.at2(k, j);
      EXPECT_NEAR(pv.at2(i, j), acc, 1e-12);
    }

  EXPECT_LT(fd_on(a, w, [&](Graph<double>& gg, Var x) { return gg.matmul(x, gg.param(b)); }), 1e-6);
  EXPECT_LT(fd_on(b, w, [&](Graph<double>& gg, Var x) { return gg.matmul(gg.param(a), x); }), 1e-6);
}

TEST(Graph, Conv2dGradient) {
  Rng rng(2);
  ParamStore<double> store;
  auto& x = store.create("x", {2, 6, 5});
  auto& w = store.create("w", {3, 2, 3, 3});
  auto& b = store.create("b", {3});
  randomize(x.value, rng);
  randomize(w.value, rng);
  randomize(b.value, rng);
  Tensor<double> lw({3, 3, 3});  // stride 2, pad 1: 6x5 -> 3x3
  randomize(lw, rng);

  EXPECT_LT(fd_on(x, lw,
                  [&](Graph<double>& g, Var v) { return g.conv2d(v, g.param(w), g.param(b), 2, 1); }),
            1e-6);
  EXPECT_LT(fd_on(w, lw,
                  [&](Graph<double>& g, Var v) { return g.conv2d(g.param(x), v, g.param(b), 2, 1); }),
            1e-6);
  EXPECT_LT(fd_on(b, lw,
                  [&](Graph<double>& g, Var v) { return g.conv2d(g.param(x), g.param(w), v, 2, 1); }),
            1e-6);
}

TEST(Graph, ElementwiseAndReductionGradients) {
  Rng rng(3);
  ParamStore<double> store;
  auto& x = store.create("x", {4, 3});
  randomize(x.value, rng, 0.1, 2.0);
  Tensor<double> w({4, 3});
  randomize(w, rng);

  EXPECT_LT(fd_on(x, w, [](Graph<double>& g, Var v) { return g.relu(v); }), 1e-5);
  EXPECT_LT(fd_on(x, w, [](Graph<double>& g, Var v) { return g.sigmoid(v); }), 1e-6);
  EXPECT_LT(fd_on(x, w, [](Graph<double>& g, Var v) { return g.log_(v); }), 1e-6);
  EXPECT_LT(fd_on(x, w, [](Graph<double>& g, Var v) { return g.sqrt_(v); }), 1e-6);
  EXPECT_LT(fd_on(x, w, [](Graph<double>& g, Var v) { return g.mul(v, v); }), 1e-6);

  Graph<double> g;
  Var m = g.mean(g.param(x));
  EXPECT_NEAR(g.val(m)[0], [&] {
    double acc = 0;
    for (auto v : x.value.data) acc += v;
    return acc / x.value.numel();
  }(), 1e-12);
}

TEST(Graph, SoftmaxRowsGradient) {
  Rng rng(4);
  ParamStore<double> store;
  auto& x = store.create("x", {3, 5});
  randomize(x.value, rng, -2.0, 2.0);
  Tensor<double> w({3, 5});
  randomize(w, rng);
  EXPECT_LT(fd_on(x, w, [](Graph<double>& g, Var v) { return g.softmax_rows(v); }), 1e-6);

  Graph<double> g;
  Var s = g.softmax_rows(g.param(x));
  const Tensor<double>& sv = g.val(s);
  for (int i = 0; i < 3; ++i) {
    double acc = 0;
    for (int j = 0; j < 5; ++j) acc += sv.at2(i, j);
    EXPECT_NEAR(acc, 1.0, 1e-12);
  }
}

TEST(Graph, ConcatAxesAndGather) {
  Rng rng(5);
  ParamStore<double> store;
  auto& a = store.create("a", {2, 3, 4});
  auto& b = store.create("b", {2, 2, 4});
  randomize(a.value, rng);
  randomize(b.value, rng);
  Tensor<double> w({2, 5, 4});
  randomize(w, rng);

  EXPECT_LT(fd_on(a, w,
                  [&](Graph<double>& g, Var v) {
                    return g.concat({v, g.param(b)}, 1);
                  }),
            1e-6);

  Graph<double> g;
  Var cat = g.concat({g.param(a), g.param(b)}, 1);
  const Tensor<double>& cv = g.val(cat);
  EXPECT_EQ(cv.shape, (std::vector<int>{2, 5, 4}));
  for (int c = 0; c < 2; ++c)
    for (int j = 0; j < 4; ++j) {
      EXPECT_DOUBLE_EQ(cv.at3(c, 0, j), a.value.at3(c, 0, j));
      EXPECT_DOUBLE_EQ(cv.at3(c, 3, j), b.value.at3(c, 0, j));
    }

  Tensor<double> gw({3});
  randomize(gw, rng);
  EXPECT_LT(fd_on(a, gw, [](Graph<double>& g2, Var v) { return g2.gather(v, {0, 5, 17}); }), 1e-6);
}

TEST(Graph, StopGradBlocksFlow) {
  ParamStore<double> store;
  auto& x = store.create("x", {3});
  x.value.data = {1.0, 2.0, 3.0};
  Graph<double> g;
  Var loss = g.sum(g.mul(g.stop_grad(g.param(x)), g.param(x)));
  g.backward(loss);
  // d/dx sum(sg(x) * x) = sg(x) = x, not 2x.
  EXPECT_DOUBLE_EQ(g.val(loss)[0], 14.0);
  EXPECT_DOUBLE_EQ(x.grad[0], 1.0);
  EXPECT_DOUBLE_EQ(x.grad[1], 2.0);
  EXPECT_DOUBLE_EQ(x.grad[2], 3.0);
}

TEST(Graph, ParamUsedTwiceAccumulates) {
  ParamStore<double> store;
  auto& x = store.create("x", {2});
  x.value.data = {1.5, -0.5};
  Graph<double> g;
  Var leaf1 = g.param(x);
  Var leaf2 = g.param(x);
  Var loss = g.sum(g.add(leaf1, leaf2));
  g.backward(loss);
  EXPECT_DOUBLE_EQ(x.grad[0], 2.0);
  EXPECT_DOUBLE_EQ(x.grad[1], 2.0);
}

TEST(Graph, BiasBroadcastGradients) {
  Rng rng(6);
  ParamStore<double> store;
  auto& a = store.create("a", {3, 4});
  auto& br = store.create("br", {3});
  auto& bc = store.create("bc", {4});
  randomize(a.value, rng);
  randomize(br.value, rng);
  randomize(bc.value, rng);
  Tensor<double> w({3, 4});
  randomize(w, rng);
  EXPECT_LT(fd_on(br, w, [&](Graph<double>& g, Var v) { return g.add_bias_rows(g.param(a), v); }),
            1e-6);
  EXPECT_LT(fd_on(bc, w, [&](Graph<double>& g, Var v) { return g.add_bias_cols(g.param(a), v); }),
            1e-6);
}
