#pragma once

#include <cmath>
#include <concepts>
#include <cstdint>
#include <span>
#include <vector>

#include "persona_guard/io.hpp"

namespace persona_guard {

struct OptimizerSettings {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  int warmup_steps = 0;
  /// Global gradient-norm clip; 0 disables it.
  double clip_norm = 0.0;
};

inline json to_json(const OptimizerSettings& o) {
  return {{"lr", o.lr},       {"beta1", o.beta1},
          {"beta2", o.beta2}, {"eps", o.eps},
          {"weight_decay", o.weight_decay}, {"warmup_steps", o.warmup_steps},
          {"clip_norm", o.clip_norm}};
}

inline OptimizerSettings optimizer_settings_from_json(const json& j, OptimizerSettings o = {}) {
  o.lr = j.value("lr", o.lr);
  o.beta1 = j.value("beta1", o.beta1);
  o.beta2 = j.value("beta2", o.beta2);
  o.eps = j.value("eps", o.eps);
  o.weight_decay = j.value("weight_decay", o.weight_decay);
  o.warmup_steps = j.value("warmup_steps", o.warmup_steps);
  o.clip_norm = j.value("clip_norm", o.clip_norm);
  return o;
}

/// Linear warmup to the peak rate, then linear decay to zero at total_steps.
inline double scheduled_lr(double peak, int step, int warmup_steps, int total_steps) {
  if (warmup_steps > 0 && step < warmup_steps)
    return peak * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
  if (total_steps <= warmup_steps) return peak;
  const double remaining = static_cast<double>(total_steps - step) /
                           static_cast<double>(total_steps - warmup_steps);
  return peak * std::max(0.0, remaining);
}

/// Scales `grads` so its L2 norm is at most max_norm; returns the norm
/// before clipping. max_norm <= 0 leaves the gradients alone.
template <std::floating_point Real>
double clip_grad_norm(std::span<Real> grads, double max_norm) {
  double sq = 0.0;
  for (Real g : grads) sq += static_cast<double>(g) * static_cast<double>(g);
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const auto scale = static_cast<Real>(max_norm / norm);
    for (auto& g : grads) g *= scale;
  }
  return norm;
}

/// Adam with decoupled weight decay.
template <std::floating_point Real>
class AdamW {
 public:
  AdamW() = default;
  AdamW(std::size_t num_params, OptimizerSettings settings)
      : settings_(settings), m_(num_params, Real(0)), v_(num_params, Real(0)) {}

  const OptimizerSettings& settings() const { return settings_; }
  std::int64_t steps_taken() const { return t_; }

  /// decay_mask, when non-empty, selects the parameters that receive weight decay.
  void step(std::span<Real> params, std::span<const Real> grads, double lr,
            std::span<const std::uint8_t> decay_mask = {}) {
    ++t_;
    const double b1 = settings_.beta1;
    const double b2 = settings_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      const double g = static_cast<double>(grads[i]);
      const double m = b1 * static_cast<double>(m_[i]) + (1.0 - b1) * g;
      const double v = b2 * static_cast<double>(v_[i]) + (1.0 - b2) * g * g;
      m_[i] = static_cast<Real>(m);
      v_[i] = static_cast<Real>(v);
      const bool decay = decay_mask.empty() || decay_mask[i] != 0;
      double p = static_cast<double>(params[i]);
      if (decay) p -= lr * settings_.weight_decay * p;
      p -= lr * (m / c1) / (std::sqrt(v / c2) + settings_.eps);
      params[i] = static_cast<Real>(p);
    }
  }

 private:
  OptimizerSettings settings_;
  std::vector<Real> m_;
  std::vector<Real> v_;
  std::int64_t t_ = 0;
};

}  // namespace persona_guard
