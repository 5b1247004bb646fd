#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "hft/graph.hpp"
#include "hft/tensor.hpp"

namespace hft {

struct OptimizerConfig {
  std::string algorithm = "adamw";
  double learning_rate = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  double clip_max_norm = 10.0;
  std::vector<int> decay_epochs = {22, 26};
  double decay_factor = 0.1;

  void validate() const {
    if (algorithm != "adamw") throw ConfigError("optimizer: only the adamw family is supported");
    if (!(learning_rate > 0)) throw ConfigError("optimizer: learning rate must be positive");
    if (!(clip_max_norm > 0)) throw ConfigError("optimizer: clip max-norm must be positive");
    if (!(decay_factor > 0)) throw ConfigError("optimizer: decay factor must be positive");
  }

  double lr_at_epoch(int epoch) const {
    double lr = learning_rate;
    for (int e : decay_epochs)
      if (epoch >= e) lr *= decay_factor;
    return lr;
  }
};

// Global gradient-norm clipping. Returns the pre-clip norm; after the call
// the global norm is min(norm, max_norm).
template <class T>
double clip_global_norm(const std::vector<Param<T>*>& params, double max_norm) {
  double sq = 0.0;
  for (const auto* p : params)
    for (const T& g : p->grad.data) sq += static_cast<double>(g) * static_cast<double>(g);
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const T scale = static_cast<T>(max_norm / norm);
    for (auto* p : params)
      for (T& g : p->grad.data) g *= scale;
  }
  return norm;
}

// AdamW with decoupled weight decay. Moment buffers live on the parameters so
// they serialize with the checkpoint; `t_` counts completed steps.
template <class T>
class AdamW {
 public:
  explicit AdamW(OptimizerConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

  const OptimizerConfig& config() const { return cfg_; }
  std::int64_t step_count() const { return t_; }
  void set_step_count(std::int64_t t) { t_ = t; }

  void step(const std::vector<Param<T>*>& params, double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
    const T one_m_b1 = static_cast<T>(1.0 - cfg_.beta1), one_m_b2 = static_cast<T>(1.0 - cfg_.beta2);
    const T eps = static_cast<T>(cfg_.eps);
    const T step_lr = static_cast<T>(lr);
    const T wd = static_cast<T>(cfg_.weight_decay);
    const T inv_bc1 = static_cast<T>(1.0 / bc1), inv_bc2 = static_cast<T>(1.0 / bc2);
    for (auto* p : params) {
      T* m = p->m.ptr();
      T* v = p->v.ptr();
      T* g = p->grad.ptr();
      T* x = p->value.ptr();
      const std::int64_t n = p->numel();
      for (std::int64_t i = 0; i < n; ++i) {
        m[i] = b1 * m[i] + one_m_b1 * g[i];
        v[i] = b2 * v[i] + one_m_b2 * g[i] * g[i];
        const T mhat = m[i] * inv_bc1;
        const T vhat = v[i] * inv_bc2;
        x[i] -= step_lr * (mhat / (std::sqrt(vhat) + eps) + wd * x[i]);
      }
    }
  }

 private:
  OptimizerConfig cfg_;
  std::int64_t t_ = 0;
};

}  // namespace hft
