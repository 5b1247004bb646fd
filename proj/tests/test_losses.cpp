#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "fd_check.hpp"
#include "hft/losses.hpp"
#include "hft/rng.hpp"

using namespace hft;

namespace {

void randomize01(Tensor<double>& t, Rng& rng, double lo = 0.05, double hi = 0.95) {
  for (auto& x : t.data) x = rng.uniform(lo, hi);
}

// Independent scalar-loop re-statement of the hard-mined weighted cross entropy.
double semantic_oracle(const Tensor<double>& scores, const Tensor<double>& labels,
                       const std::vector<double>& w, int ratio = 3) {
  const int classes = scores.dim(0);
  const std::int64_t per_class = scores.numel() / classes;
  auto clampp = [](double p) { return std::min(std::max(p, kProbEps), 1.0 - kProbEps); };
  double pos_term = 0.0;
  std::int64_t n_pos = 0;
  struct N {
    double l;
    std::int64_t i;
    double f;
  };
  std::vector<N> negs;
  for (std::int64_t i = 0; i < scores.numel(); ++i) {
    const int c = static_cast<int>(i / per_class);
    if (labels[i] != 0.0) {
      pos_term += w[static_cast<size_t>(c)] * std::log(clampp(scores[i]));
      ++n_pos;
    } else {
      const double f = 1.0 - std::min(w[static_cast<size_t>(c)], 0.99);
      negs.push_back({-f * std::log(1.0 - clampp(scores[i])), i, f});
    }
  }
  std::sort(negs.begin(), negs.end(), [](const N& a, const N& b) {
    return a.l != b.l ? a.l > b.l : a.i < b.i;
  });
  const size_t keep = std::min<size_t>(negs.size(), static_cast<size_t>(ratio) * n_pos);
  double neg_term = 0.0;
  for (size_t k = 0; k < keep; ++k) neg_term += negs[k].f * std::log(1.0 - clampp(scores[negs[k].i]));
  return (-pos_term - neg_term) / std::max<std::int64_t>(n_pos, 1);
}

double uncertainty_oracle(const Tensor<double>& scores) {
  double acc = 0.0;
  for (double c : scores.data) {
    const double cc = std::max(c, kProbEps);
    acc += 1.0 - cc * std::log(cc);
  }
  return acc / scores.numel();
}

double dist_oracle(const Tensor<double>& a, const Tensor<double>& b, MlDistance d) {
  if (d == MlDistance::L2) {
    double acc = 0;
    for (std::int64_t i = 0; i < a.numel(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(acc / a.numel() + 1e-30);
  }
  if (d == MlDistance::L1) {
    double acc = 0;
    for (std::int64_t i = 0; i < a.numel(); ++i) acc += std::abs(a[i] - b[i]);
    return acc / a.numel();
  }
  // symmetrized KL after per-cell channel softmax
  const int c = a.dim(0);
  const std::int64_t cells = a.numel() / c;
  double acc = 0;
  for (std::int64_t k = 0; k < cells; ++k) {
    std::vector<double> p(static_cast<size_t>(c)), q(static_cast<size_t>(c));
    double zp = 0, zq = 0;
    for (int i = 0; i < c; ++i) {
      p[static_cast<size_t>(i)] = std::exp(a[i * cells + k]);
      q[static_cast<size_t>(i)] = std::exp(b[i * cells + k]);
      zp += p[static_cast<size_t>(i)];
      zq += q[static_cast<size_t>(i)];
    }
    for (int i = 0; i < c; ++i) {
      const double pi = p[static_cast<size_t>(i)] / zp;
      const double qi = q[static_cast<size_t>(i)] / zq;
      const double lp = std::log(std::max(pi, kProbEps));
      const double lq = std::log(std::max(qi, kProbEps));
      acc += 0.5 * (pi * (lp - lq) + qi * (lq - lp));
    }
  }
  return acc / cells;
}

}  // namespace

TEST(ClassWeights, RawValuesAndRescale) {
  const auto unit = compute_class_weights({1.0, 1.0});
  EXPECT_DOUBLE_EQ(unit.raw[0], 1.0);
  EXPECT_DOUBLE_EQ(unit.raw[1], 1.0);

  const auto r = compute_class_weights({0.64, 0.04});
  EXPECT_DOUBLE_EQ(r.raw[0], 1.25);
  EXPECT_DOUBLE_EQ(r.raw[1], 5.0);
  EXPECT_NEAR((r.weights[0] + r.weights[1]) / 2.0, 1.0, 1e-12);  // mean-one rescale

  const auto capped = compute_class_weights({0.64, 0.04}, WeightRescale::MaxCap, 2.0);
  EXPECT_DOUBLE_EQ(capped.weights[1], 2.0);
  EXPECT_DOUBLE_EQ(capped.weights[0], 0.5);
}

TEST(ClassWeights, PermutationEquivariance) {
  const auto a = compute_class_weights({0.5, 0.1, 0.25});
  const auto b = compute_class_weights({0.25, 0.5, 0.1});
  EXPECT_DOUBLE_EQ(a.weights[0], b.weights[1]);
  EXPECT_DOUBLE_EQ(a.weights[1], b.weights[2]);
  EXPECT_DOUBLE_EQ(a.weights[2], b.weights[0]);
}

TEST(ClassWeights, ZeroFrequencyExcluded) {
  const auto r = compute_class_weights({0.5, 0.0, 0.25});
  EXPECT_TRUE(r.any_excluded);
  EXPECT_EQ(r.excluded[1], 1);
  EXPECT_DOUBLE_EQ(r.weights[1], 0.0);
  EXPECT_GT(r.weights[0], 0.0);
}

TEST(SemanticLoss, PerfectPredictionsApproachZero) {
  Graph<double> g;
  Tensor<double> labels({1, 4}, std::vector<double>{1, 1, 0, 0});
  Tensor<double> scores({1, 4}, std::vector<double>{1.0, 1.0, 0.0, 0.0});
  auto r = semantic_loss(g, g.input(scores), labels, {1.0});
  EXPECT_NEAR(g.val(r.loss)[0], 0.0, 1e-5);
}

TEST(SemanticLoss, SinglePositiveHandValue) {
  Graph<double> g;
  Tensor<double> labels({1, 1}, std::vector<double>{1});
  Tensor<double> scores({1, 1}, std::vector<double>{0.5});
  auto r = semantic_loss(g, g.input(scores), labels, {1.0});
  EXPECT_NEAR(g.val(r.loss)[0], 0.6931, 5e-5);  // -ln 0.5
  EXPECT_EQ(r.n_pos, 1);
  EXPECT_EQ(r.n_neg_mined, 0);
}

TEST(SemanticLoss, MatchesScalarOracleOnRandomTensors) {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor<double> scores({2, 4, 4});
    Tensor<double> labels({2, 4, 4});
    randomize01(scores, rng);
    for (auto& y : labels.data) y = rng.bernoulli(0.3) ? 1.0 : 0.0;
    const std::vector<double> w = {rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0)};
    Graph<double> g;
    auto r = semantic_loss(g, g.input(scores), labels, w);
    EXPECT_NEAR(g.val(r.loss)[0], semantic_oracle(scores, labels, w), 1e-8);
  }
}

TEST(SemanticLoss, NoPositivesFlagged) {
  Graph<double> g;
  Tensor<double> labels({1, 3}, std::vector<double>{0, 0, 0});
  Tensor<double> scores({1, 3}, std::vector<double>{0.2, 0.6, 0.4});
  auto r = semantic_loss(g, g.input(scores), labels, {1.0});
  EXPECT_TRUE(r.no_positives);
  EXPECT_TRUE(std::isfinite(g.val(r.loss)[0]));
}

TEST(SemanticLoss, ShapeMismatchThrows) {
  Graph<double> g;
  Tensor<double> labels({1, 2});
  Tensor<double> scores({1, 3}, 0.5);
  EXPECT_THROW(semantic_loss(g, g.input(scores), labels, {1.0}), ContractError);
}

TEST(SemanticLoss, GradientMatchesFiniteDifferences) {
  Rng rng(9);
  ParamStore<double> store;
  auto& p = store.create("scores", {2, 3, 3});
  randomize01(p.value, rng, 0.2, 0.8);
  Tensor<double> labels({2, 3, 3});
  for (auto& y : labels.data) y = rng.bernoulli(0.4) ? 1.0 : 0.0;
  const std::vector<double> w = {1.3, 0.7};

  Graph<double> g;
  auto r = semantic_loss(g, g.param(p), labels, w);
  g.backward(r.loss);
  auto value = [&](const Tensor<double>& s) { return semantic_oracle(s, labels, w); };
  EXPECT_LT(hft_test::fd_check_tensor(p.value, value, p.grad), 1e-4);
}

TEST(UncertaintyLoss, HandValues) {
  Graph<double> g;
  Tensor<double> ones({2, 3}, 1.0);
  EXPECT_NEAR(g.val(uncertainty_loss(g, g.input(ones)))[0], 1.0, 1e-12);
  Tensor<double> inv_e({2, 3}, std::exp(-1.0));
  EXPECT_NEAR(g.val(uncertainty_loss(g, g.input(inv_e)))[0], 1.0 + std::exp(-1.0), 1e-10);
}

TEST(UncertaintyLoss, MatchesScalarOracle) {
  Rng rng(13);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor<double> scores({3, 5, 2});
    randomize01(scores, rng, 0.01, 1.0);
    Graph<double> g;
    EXPECT_NEAR(g.val(uncertainty_loss(g, g.input(scores)))[0], uncertainty_oracle(scores), 1e-8);
  }
}

TEST(UncertaintyLoss, GradientMatchesFiniteDifferences) {
  Rng rng(15);
  ParamStore<double> store;
  auto& p = store.create("scores", {2, 4});
  randomize01(p.value, rng, 0.1, 0.9);
  Graph<double> g;
  Var loss = uncertainty_loss(g, g.param(p));
  g.backward(loss);
  auto value = [&](const Tensor<double>& s) { return uncertainty_oracle(s); };
  EXPECT_LT(hft_test::fd_check_tensor(p.value, value, p.grad), 1e-6);
}

TEST(MutualLoss, IdenticalInputsGiveZero) {
  Rng rng(21);
  Tensor<double> f({2, 3, 4});
  for (auto& x : f.data) x = rng.uniform(-1.0, 1.0);
  Graph<double> g;
  Var a = g.input(f), b = g.input(f);
  LossWeights lw;
  Var loss = mutual_learning_loss(g, a, {a}, b, {b}, lw, MlDistance::L2);
  EXPECT_NEAR(g.val(loss)[0], 0.0, 1e-12);
}

TEST(MutualLoss, UnitHandValue) {
  Graph<double> g;
  Tensor<double> one({1, 1, 1}, 1.0), zero({1, 1, 1}, 0.0);
  Var geo = g.input(one), glo = g.input(zero);
  LossWeights lw;  // lambda1 = 0.05, lambda2 = 0.01
  Var loss = mutual_learning_loss(g, geo, {geo}, glo, {glo}, lw, MlDistance::L2);
  EXPECT_NEAR(g.val(loss)[0], 0.06, 1e-10);
}

TEST(MutualLoss, MatchesOracleAllDistances) {
  Rng rng(23);
  LossWeights lw;
  for (MlDistance d : {MlDistance::L1, MlDistance::KL, MlDistance::L2}) {
    Tensor<double> a({3, 2, 4}), b({3, 2, 4}), sa({3, 1, 4}), sb({3, 1, 4});
    for (auto* t : {&a, &b, &sa, &sb})
      for (auto& x : t->data) x = rng.uniform(-1.5, 1.5);
    Graph<double> g;
    Var loss = mutual_learning_loss(g, g.input(a), {g.input(sa)}, g.input(b), {g.input(sb)}, lw, d);
    const double expect = lw.lambda1 * dist_oracle(a, b, d) + lw.lambda2 * dist_oracle(sa, sb, d);
    EXPECT_NEAR(g.val(loss)[0], expect, 1e-8) << to_string(d);
  }
}

TEST(MutualLoss, SymmetricForL1AndL2) {
  Rng rng(29);
  Tensor<double> a({2, 3, 3}), b({2, 3, 3});
  for (auto* t : {&a, &b})
    for (auto& x : t->data) x = rng.uniform(-1.0, 1.0);
  LossWeights lw;
  for (MlDistance d : {MlDistance::L1, MlDistance::L2}) {
    Graph<double> g;
    Var ab = mutual_learning_loss(g, g.input(a), {g.input(a)}, g.input(b), {g.input(b)}, lw, d);
    Var ba = mutual_learning_loss(g, g.input(b), {g.input(b)}, g.input(a), {g.input(a)}, lw, d);
    EXPECT_DOUBLE_EQ(g.val(ab)[0], g.val(ba)[0]);
  }
}

TEST(MutualLoss, GradientMatchesFiniteDifferences) {
  Rng rng(31);
  LossWeights lw;
  for (MlDistance d : {MlDistance::L1, MlDistance::KL, MlDistance::L2}) {
    ParamStore<double> store;
    auto& p = store.create("geo", {2, 2, 3});
    for (auto& x : p.value.data) x = rng.uniform(-1.0, 1.0);
    Tensor<double> b({2, 2, 3});
    for (auto& x : b.data) x = rng.uniform(-1.0, 1.0);

    Graph<double> g;
    Var loss = g.scale(feature_distance(g, g.param(p), g.input(b), d), lw.lambda1);
    g.backward(loss);
    auto value = [&](const Tensor<double>& s) { return lw.lambda1 * dist_oracle(s, b, d); };
    EXPECT_LT(hft_test::fd_check_tensor(p.value, value, p.grad), 1e-4) << to_string(d);
  }
}

TEST(ApplyScheme, TeacherBlocksGradientIntoFrozenBranch) {
  Rng rng(37);
  ParamStore<double> store;
  auto& geo = store.create("geo", {1, 2, 2});
  auto& glo = store.create("glo", {1, 2, 2});
  for (auto& x : geo.value.data) x = rng.uniform(0.5, 1.5);
  for (auto& x : glo.value.data) x = rng.uniform(-1.5, -0.5);
  LossWeights lw;

  Graph<double> g;
  BranchFeatures<double> bf_geo{g.param(geo), {}}, bf_glo{g.param(glo), {}};
  auto [geo2, glo2] = apply_scheme(g, MlScheme::CbftTeacher, bf_geo, bf_glo);
  Var loss = mutual_learning_loss(g, geo2.concat, geo2.subs, glo2.concat, glo2.subs, lw,
                                  MlDistance::L2);
  g.backward(loss);
  EXPECT_GT(g.val(loss)[0], 0.0);
  for (auto v : geo.grad.data) EXPECT_DOUBLE_EQ(v, 0.0);
  bool any = false;
  for (auto v : glo.grad.data) any = any || v != 0.0;
  EXPECT_TRUE(any);

  // Perturbing the frozen branch still changes the loss value.
  auto& geo_pert = store.create("geo_pert", {1, 2, 2});
  geo_pert.value = geo.value;
  geo_pert.value[0] += 0.25;
  Graph<double> g2;
  auto [gp, gl] = apply_scheme(g2, MlScheme::CbftTeacher,
                               BranchFeatures<double>{g2.param(geo_pert), {}},
                               BranchFeatures<double>{g2.param(glo), {}});
  Var loss2 = mutual_learning_loss(g2, gp.concat, gp.subs, gl.concat, gl.subs, lw, MlDistance::L2);
  EXPECT_NE(g2.val(loss2)[0], g.val(loss)[0]);
}

TEST(ApplyScheme, CfftTeacherIsSymmetric) {
  ParamStore<double> store;
  auto& geo = store.create("geo", {1, 1, 2});
  auto& glo = store.create("glo", {1, 1, 2});
  geo.value.data = {1.0, 2.0};
  glo.value.data = {0.0, -1.0};
  LossWeights lw;
  Graph<double> g;
  auto [geo2, glo2] = apply_scheme(g, MlScheme::CfftTeacher,
                                   BranchFeatures<double>{g.param(geo), {}},
                                   BranchFeatures<double>{g.param(glo), {}});
  Var loss = mutual_learning_loss(g, geo2.concat, geo2.subs, glo2.concat, glo2.subs, lw,
                                  MlDistance::L2);
  g.backward(loss);
  for (auto v : glo.grad.data) EXPECT_DOUBLE_EQ(v, 0.0);
  bool any = false;
  for (auto v : geo.grad.data) any = any || v != 0.0;
  EXPECT_TRUE(any);
}

TEST(ApplyScheme, OutputSimZeroForIdenticalScores) {
  Rng rng(41);
  Tensor<double> s({2, 3, 3});
  randomize01(s, rng);
  Graph<double> g;
  LossWeights lw;
  SchemeConfig cfg{MlScheme::OutputSim, MlDistance::L2};
  BranchFeatures<double> dummy{g.input(Tensor<double>({1, 1, 1})), {}};
  auto lm = scheme_mutual_loss(g, cfg, dummy, dummy, g.input(s), g.input(s), lw);
  ASSERT_TRUE(lm.has_value());
  EXPECT_NEAR(g.val(*lm)[0], 0.0, 1e-12);
}

TEST(ApplyScheme, SubfeatureSimEqualsLambda1Zero) {
  Rng rng(43);
  LossWeights lw;
  Tensor<double> ca({2, 4, 3}), cb({2, 4, 3}), sa({2, 2, 3}), sb({2, 2, 3});
  for (auto* t : {&ca, &cb, &sa, &sb})
    for (auto& x : t->data) x = rng.uniform(-1.0, 1.0);

  Graph<double> g;
  SchemeConfig cfg{MlScheme::SubfeatureSim, MlDistance::L2};
  BranchFeatures<double> geo{g.input(ca), {g.input(sa)}}, glo{g.input(cb), {g.input(sb)}};
  auto lm = scheme_mutual_loss(g, cfg, geo, glo, g.input(ca), g.input(cb), lw);
  ASSERT_TRUE(lm.has_value());

  LossWeights lw0 = lw;
  lw0.lambda1 = 0.0;
  Graph<double> g2;
  Var ref = mutual_learning_loss(g2, g2.input(ca), {g2.input(sa)}, g2.input(cb), {g2.input(sb)}, lw0,
                                 MlDistance::L2);
  EXPECT_NEAR(g.val(*lm)[0], g2.val(ref)[0], 1e-10);
}

TEST(ApplyScheme, SchemeNoneExcludesTerm) {
  Graph<double> g;
  LossWeights lw;
  SchemeConfig cfg;  // none
  BranchFeatures<double> dummy{g.input(Tensor<double>({1, 1, 1})), {}};
  Var s = g.input(Tensor<double>({1, 1, 1}, 0.5));
  EXPECT_FALSE(scheme_mutual_loss(g, cfg, dummy, dummy, s, s, lw).has_value());
}

TEST(TotalLoss, HandValueAndZeroComponents) {
  Graph<double> g;
  LossWeights lw;  // alpha = 0.001, beta = 1.0
  Var ls = g.input(Tensor<double>({1}, 1.0));
  Var lu = g.input(Tensor<double>({1}, 1.0));
  Var lm = g.input(Tensor<double>({1}, 0.06));
  EXPECT_NEAR(g.val(total_loss(g, ls, lu, std::optional<Var>(lm), lw))[0], 1.061, 1e-12);

  Var zero = g.input(Tensor<double>({1}, 0.0));
  EXPECT_DOUBLE_EQ(g.val(total_loss(g, ls, zero, std::optional<Var>(zero), lw))[0], 1.0);
}

TEST(TotalLoss, BetaZeroRemovesMutualGradient) {
  Rng rng(47);
  LossWeights lw_zero;
  lw_zero.beta = 0.0;
  ParamStore<double> store;
  auto& p = store.create("f", {1, 2, 2});
  for (auto& x : p.value.data) x = rng.uniform(0.3, 0.7);
  Tensor<double> other({1, 2, 2});
  randomize01(other, rng);
  Tensor<double> labels({1, 2, 2}, std::vector<double>{1, 0, 0, 1});

  auto run = [&](bool with_mutual, const LossWeights& lw) {
    p.grad.zero();
    Graph<double> g;
    Var scores = g.clamp(g.param(p), 1e-7, 1.0 - 1e-7);
    auto sem = semantic_loss(g, scores, labels, {1.0});
    Var lu = uncertainty_loss(g, scores);
    std::optional<Var> lm;
    if (with_mutual)
      lm = g.scale(feature_distance(g, scores, g.input(other), MlDistance::L2), lw.lambda1);
    Var tot = total_loss(g, sem.loss, lu, lm, lw);
    g.backward(tot);
    return p.grad;
  };

  const auto g_none = run(false, lw_zero);
  const auto g_beta0 = run(true, lw_zero);
  for (std::int64_t i = 0; i < g_none.numel(); ++i) EXPECT_DOUBLE_EQ(g_none[i], g_beta0[i]);
}

TEST(TotalLoss, NonFiniteAborts) {
  Graph<double> g;
  LossWeights lw;
  Var bad = g.input(Tensor<double>({1}, std::nan("")));
  Var ok = g.input(Tensor<double>({1}, 0.5));
  EXPECT_THROW(total_loss(g, bad, ok, std::nullopt, lw), NumericalError);
}
