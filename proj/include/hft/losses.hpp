#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "hft/graph.hpp"
#include "hft/tensor.hpp"

namespace hft {

// Probabilities entering logarithms are clamped to [kProbEps, 1 - kProbEps].
inline constexpr double kProbEps = 1e-7;

// Mutual-learning and total-loss coefficients. lambda1/lambda2 weight the
// concatenated and per-extent feature distances, alpha/beta balance the
// uncertainty and mutual-learning terms in the total loss.
struct LossWeights {
  double lambda1 = 0.05;
  double lambda2 = 0.01;
  double alpha = 0.001;
  double beta = 1.0;
  std::vector<double> class_weights;

  void validate() const {
    if (lambda1 < 0 || lambda2 < 0 || alpha < 0 || beta < 0)
      throw ConfigError("loss weights must be non-negative");
    for (double w : class_weights)
      if (!(w > 0)) throw ConfigError("class weights must be strictly positive");
  }
};

enum class MlScheme { None, CbftTeacher, CfftTeacher, OutputSim, SubfeatureSim };
enum class MlDistance { L1, KL, L2 };

struct SchemeConfig {
  MlScheme scheme = MlScheme::None;
  MlDistance distance = MlDistance::L2;
};

inline const char* to_string(MlScheme s) {
  switch (s) {
    case MlScheme::None: return "none";
    case MlScheme::CbftTeacher: return "cbft_teacher";
    case MlScheme::CfftTeacher: return "cfft_teacher";
    case MlScheme::OutputSim: return "output_sim";
    case MlScheme::SubfeatureSim: return "subfeature_sim";
  }
  return "?";
}

inline const char* to_string(MlDistance d) {
  switch (d) {
    case MlDistance::L1: return "L1";
    case MlDistance::KL: return "KL";
    case MlDistance::L2: return "L2";
  }
  return "?";
}

inline MlScheme scheme_from_string(const std::string& s) {
  if (s == "none") return MlScheme::None;
  if (s == "cbft_teacher") return MlScheme::CbftTeacher;
  if (s == "cfft_teacher") return MlScheme::CfftTeacher;
  if (s == "output_sim") return MlScheme::OutputSim;
  if (s == "subfeature_sim") return MlScheme::SubfeatureSim;
  throw ConfigError("unknown mutual-learning scheme: " + s);
}

inline MlDistance distance_from_string(const std::string& s) {
  if (s == "L1" || s == "l1") return MlDistance::L1;
  if (s == "KL" || s == "kl") return MlDistance::KL;
  if (s == "L2" || s == "l2") return MlDistance::L2;
  throw ConfigError("unknown mutual-learning distance: " + s);
}

enum class WeightRescale { MeanOne, MaxCap };

struct ClassWeightResult {
  std::vector<double> weights;        // rescaled; 0 for excluded classes
  std::vector<double> raw;            // f^{-1/2} before rescaling
  std::vector<std::uint8_t> excluded; // 1 where frequency was zero
  bool any_excluded = false;
};

// Per-class weights from relative frequencies: w_i = f_i^{-1/2}, rescaled so
// that mean(w) = 1 over the included classes (default) or so that max(w)
// equals `cap`. Zero-frequency classes are excluded and flagged.
inline ClassWeightResult compute_class_weights(const std::vector<double>& freq,
                                               WeightRescale mode = WeightRescale::MeanOne,
                                               double cap = 10.0) {
  ClassWeightResult r;
  const size_t n = freq.size();
  r.weights.assign(n, 0.0);
  r.raw.assign(n, 0.0);
  r.excluded.assign(n, 0);
  double sum = 0.0, mx = 0.0;
  int included = 0;
  for (size_t i = 0; i < n; ++i) {
    if (!(freq[i] > 0.0)) {
      r.excluded[i] = 1;
      r.any_excluded = true;
      continue;
    }
    if (freq[i] > 1.0) throw ContractError("class frequency must lie in (0, 1]");
    r.raw[i] = 1.0 / std::sqrt(freq[i]);
    sum += r.raw[i];
    mx = std::max(mx, r.raw[i]);
    ++included;
  }
  if (included == 0) return r;
  const double scale = (mode == WeightRescale::MeanOne) ? included / sum : cap / mx;
  for (size_t i = 0; i < n; ++i)
    if (!r.excluded[i]) r.weights[i] = r.raw[i] * scale;
  return r;
}

template <class T>
struct SemanticLossResult {
  Var loss;
  std::int64_t n_pos = 0;
  std::int64_t n_neg_mined = 0;
  bool no_positives = false;  // flagged: loss fell back to divisor 1
};

// Class-weighted cross entropy with online hard negative mining. `scores` is
// a [C, M] probability tensor, `labels` a binary tensor of the same shape,
// `class_weights` one positive weight per class row. The negative term keeps
// the mining_ratio * N_pos highest-loss negatives (ties broken by lowest flat
// index) and is weighted by (1 - min(w_c, 0.99)); both sums are divided by
// N_pos. The mined selection is treated as fixed for the backward pass.
template <class T>
SemanticLossResult<T> semantic_loss(Graph<T>& g, Var scores, const Tensor<T>& labels,
                                    const std::vector<double>& class_weights, int mining_ratio = 3) {
  const Tensor<T>& sv = g.val(scores);
  if (!sv.same_shape(labels)) throw ContractError("semantic_loss: score/label shape mismatch");
  if (sv.ndim() < 1) throw ContractError("semantic_loss: scores must have a class axis");
  const int classes = sv.dim(0);
  if (static_cast<size_t>(classes) != class_weights.size())
    throw ContractError("semantic_loss: class weight count mismatch");
  const std::int64_t per_class = sv.numel() / classes;

  std::vector<std::int64_t> pos_idx;
  std::vector<T> pos_w;
  struct NegCand {
    T loss;
    std::int64_t idx;
    T factor;
  };
  std::vector<NegCand> negs;
  for (std::int64_t i = 0; i < sv.numel(); ++i) {
    const int c = static_cast<int>(i / per_class);
    if (labels[i] != T(0)) {
      pos_idx.push_back(i);
      pos_w.push_back(static_cast<T>(class_weights[static_cast<size_t>(c)]));
    } else {
      const T factor = static_cast<T>(1.0 - std::min(class_weights[static_cast<size_t>(c)], 0.99));
      const T p = std::min(std::max(sv[i], static_cast<T>(kProbEps)), static_cast<T>(1.0 - kProbEps));
      negs.push_back({-factor * std::log(T(1) - p), i, factor});
    }
  }

  SemanticLossResult<T> r;
  r.n_pos = static_cast<std::int64_t>(pos_idx.size());
  r.no_positives = r.n_pos == 0;
  const std::int64_t keep =
      std::min<std::int64_t>(static_cast<std::int64_t>(negs.size()),
                             static_cast<std::int64_t>(mining_ratio) * r.n_pos);
  std::sort(negs.begin(), negs.end(), [](const NegCand& a, const NegCand& b) {
    if (a.loss != b.loss) return a.loss > b.loss;
    return a.idx < b.idx;
  });
  negs.resize(static_cast<size_t>(keep));
  r.n_neg_mined = keep;

  const T inv_n = T(1) / static_cast<T>(std::max<std::int64_t>(r.n_pos, 1));
  Var clamped = g.clamp(scores, static_cast<T>(kProbEps), static_cast<T>(1.0 - kProbEps));
  std::optional<Var> acc;
  if (!pos_idx.empty()) {
    Tensor<T> w({static_cast<int>(pos_w.size())}, pos_w);
    for (auto& x : w.data) x = -x * inv_n;
    acc = g.weighted_sum(g.log_(g.gather(clamped, pos_idx)), std::move(w));
  }
  if (keep > 0) {
    std::vector<std::int64_t> idx(static_cast<size_t>(keep));
    Tensor<T> w({static_cast<int>(keep)});
    for (std::int64_t i = 0; i < keep; ++i) {
      idx[static_cast<size_t>(i)] = negs[static_cast<size_t>(i)].idx;
      w[i] = -negs[static_cast<size_t>(i)].factor * inv_n;
    }
    Var one_minus = g.add_const(g.scale(g.gather(clamped, std::move(idx)), T(-1)), T(1));
    Var neg_term = g.weighted_sum(g.log_(one_minus), std::move(w));
    acc = acc ? g.add(*acc, neg_term) : neg_term;
  }
  r.loss = acc ? *acc : g.input(Tensor<T>({1}, T(0)));
  return r;
}

// Mean over all entries of (1 - c * log c), written exactly as stated; the
// minimum over (0, 1] is 1, reached as c -> 1 (or the c -> 0 limit).
template <class T>
Var uncertainty_loss(Graph<T>& g, Var scores) {
  Var c = g.clamp(scores, static_cast<T>(kProbEps), T(1));
  Var one_minus_clogc = g.add_const(g.scale(g.mul(c, g.log_(c)), T(-1)), T(1));
  return g.mean(one_minus_clogc);
}

// Element-count-normalized distances between two equally-shaped tensors.
template <class T>
Var feature_distance(Graph<T>& g, Var a, Var b, MlDistance distance) {
  if (!g.val(a).same_shape(g.val(b))) throw ContractError("feature_distance: shape mismatch");
  switch (distance) {
    case MlDistance::L2: {
      Var d = g.sub(a, b);
      // Tiny floor keeps the sqrt differentiable when a == b.
      return g.sqrt_(g.add_const(g.mean(g.mul(d, d)), static_cast<T>(1e-30)));
    }
    case MlDistance::L1: {
      Var d = g.sub(a, b);
      return g.mean(g.add(g.relu(d), g.relu(g.scale(d, T(-1)))));
    }
    case MlDistance::KL: {
      // Per-cell softmax over the channel axis, then the symmetrized KL
      // divergence 0.5*(KL(p||q) + KL(q||p)), averaged over cells.
      const Tensor<T>& av = g.val(a);
      if (av.ndim() != 3) throw ContractError("feature_distance: KL expects [C,Z,W]");
      const int c = av.dim(0);
      const std::int64_t cells = av.numel() / c;
      auto tokens = [&](Var x) {
        return g.softmax_rows(g.transpose(g.reshape(x, {c, static_cast<int>(cells)})));
      };
      Var p = tokens(a), q = tokens(b);
      Var logp = g.log_(g.clamp(p, static_cast<T>(kProbEps), T(1)));
      Var logq = g.log_(g.clamp(q, static_cast<T>(kProbEps), T(1)));
      Var diff = g.sub(logp, logq);
      Var kl_pq = g.sum(g.mul(p, diff));
      Var kl_qp = g.sum(g.mul(q, g.scale(diff, T(-1))));
      return g.scale(g.add(kl_pq, kl_qp), T(0.5) / static_cast<T>(cells));
    }
  }
  throw ContractError("feature_distance: unknown distance");
}

// L_m = lambda1 * d(concat_geo, concat_glo) + sum_i lambda2 * d(sub_geo_i, sub_glo_i).
template <class T>
Var mutual_learning_loss(Graph<T>& g, Var geo_concat, const std::vector<Var>& geo_subs, Var glo_concat,
                         const std::vector<Var>& glo_subs, const LossWeights& lw, MlDistance distance) {
  if (geo_subs.size() != glo_subs.size())
    throw ContractError("mutual_learning_loss: sub-feature count mismatch");
  Var total = g.scale(feature_distance(g, geo_concat, glo_concat, distance),
                      static_cast<T>(lw.lambda1));
  for (size_t i = 0; i < geo_subs.size(); ++i) {
    Var d = feature_distance(g, geo_subs[i], glo_subs[i], distance);
    total = g.add(total, g.scale(d, static_cast<T>(lw.lambda2)));
  }
  return total;
}

// Branch features (concatenated + per-extent sub-features) as seen by the
// mutual-learning loss.
template <class T>
struct BranchFeatures {
  Var concat;
  std::vector<Var> subs;
};

// Applies the gradient-flow annotation of a teacher scheme: the teacher
// branch is detached so the mutual-learning loss cannot update it.
template <class T>
std::pair<BranchFeatures<T>, BranchFeatures<T>> apply_scheme(Graph<T>& g, MlScheme scheme,
                                                             BranchFeatures<T> geo,
                                                             BranchFeatures<T> glo) {
  auto detach = [&](BranchFeatures<T>& f) {
    f.concat = g.stop_grad(f.concat);
    for (auto& s : f.subs) s = g.stop_grad(s);
  };
  if (scheme == MlScheme::CbftTeacher) detach(geo);
  if (scheme == MlScheme::CfftTeacher) detach(glo);
  return {std::move(geo), std::move(glo)};
}

// Full scheme dispatch: returns the mutual-learning term, or nothing when the
// scheme is `none` (the term is then excluded from the total loss).
template <class T>
std::optional<Var> scheme_mutual_loss(Graph<T>& g, const SchemeConfig& cfg, BranchFeatures<T> geo,
                                      BranchFeatures<T> glo, Var geo_scores, Var glo_scores,
                                      const LossWeights& lw) {
  switch (cfg.scheme) {
    case MlScheme::None:
      return std::nullopt;
    case MlScheme::CbftTeacher:
    case MlScheme::CfftTeacher: {
      auto [geo2, glo2] = apply_scheme(g, cfg.scheme, std::move(geo), std::move(glo));
      return mutual_learning_loss(g, geo2.concat, geo2.subs, glo2.concat, glo2.subs, lw, cfg.distance);
    }
    case MlScheme::OutputSim:
      return g.scale(feature_distance(g, geo_scores, glo_scores, cfg.distance),
                     static_cast<T>(lw.lambda1));
    case MlScheme::SubfeatureSim: {
      LossWeights no_concat = lw;
      no_concat.lambda1 = 0.0;
      return mutual_learning_loss(g, geo.concat, geo.subs, glo.concat, glo.subs, no_concat,
                                  cfg.distance);
    }
  }
  throw ContractError("scheme_mutual_loss: unknown scheme");
}

// L_tot = L_s + alpha * L_u + beta * L_m. Non-finite components raise the
// training-abort signal.
template <class T>
Var total_loss(Graph<T>& g, Var semantic, Var uncertainty, std::optional<Var> mutual,
               const LossWeights& lw) {
  for (const Var* v : {&semantic, &uncertainty}) {
    if (!std::isfinite(static_cast<double>(g.val(*v)[0])))
      throw NumericalError("total_loss: non-finite loss component");
  }
  if (mutual && !std::isfinite(static_cast<double>(g.val(*mutual)[0])))
    throw NumericalError("total_loss: non-finite mutual-learning loss");
  Var total = g.add(semantic, g.scale(uncertainty, static_cast<T>(lw.alpha)));
  if (mutual) total = g.add(total, g.scale(*mutual, static_cast<T>(lw.beta)));
  return total;
}

}  // namespace hft
