#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "m3p/nn.hpp"

namespace m3p {

/// base * min(step / warmup, sqrt(warmup / step)); steps count from 1.
inline double inverse_sqrt_lr(double base, std::size_t step, std::size_t warmup) {
  if (step == 0) return 0.0;
  if (warmup == 0) return base;
  const double s = static_cast<double>(step), w = static_cast<double>(warmup);
  return base * std::min(s / w, std::sqrt(w / s));
}

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
};

/// Adam with bias correction over every tensor of a ParamStore.
template <class T>
class Adam {
 public:
  Adam(ParamStore<T>& params, AdamConfig cfg) : params_(&params), cfg_(cfg) {
    for (const auto& [_, p] : params.items()) {
      m_.emplace_back(p.numel(), T(0));
      v_.emplace_back(p.numel(), T(0));
    }
  }

  std::uint64_t steps() const { return t_; }
  void set_steps(std::uint64_t t) { t_ = t; }
  std::vector<std::vector<T>>& first_moments() { return m_; }
  std::vector<std::vector<T>>& second_moments() { return v_; }
  const std::vector<std::vector<T>>& first_moments() const { return m_; }
  const std::vector<std::vector<T>>& second_moments() const { return v_; }

  /// One update with learning rate `lr`. A zero rate leaves parameters untouched.
  void step(double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    auto& items = params_->items();
    for (std::size_t i = 0; i < items.size(); ++i) {
      Tensor<T>& p = items[i].second;
      const auto g = p.grad();
      auto& m = m_[i];
      auto& v = v_[i];
      if (g.empty()) continue;
      for (std::size_t k = 0; k < m.size(); ++k) {
        m[k] = static_cast<T>(cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * g[k]);
        v[k] = static_cast<T>(cfg_.beta2 * v[k] + (1.0 - cfg_.beta2) * g[k] * g[k]);
      }
      if (lr == 0.0) continue;
      auto data = p.mutable_data();
      for (std::size_t k = 0; k < data.size(); ++k) {
        const double mh = m[k] / c1, vh = v[k] / c2;
        data[k] = static_cast<T>(data[k] - lr * mh / (std::sqrt(vh) + cfg_.eps));
      }
    }
  }

 private:
  ParamStore<T>* params_;
  AdamConfig cfg_;
  std::uint64_t t_ = 0;
  std::vector<std::vector<T>> m_, v_;
};

/// Global L2 norm of all gradients.
template <class T>
double grad_norm(const ParamStore<T>& params) {
  double s = 0.0;
  for (const auto& [_, p] : params.items())
    for (T g : p.grad()) s += static_cast<double>(g) * g;
  return std::sqrt(s);
}

/// Rescales gradients so the global norm is at most `max_norm`; returns the pre-clip norm.
template <class T>
double clip_grad_norm(ParamStore<T>& params, double max_norm) {
  const double n = grad_norm(params);
  if (max_norm > 0.0 && n > max_norm) {
    const T f = static_cast<T>(max_norm / n);
    for (auto& [_, p] : params.items())
      if (p.has_grad())
        for (T& g : p.mutable_grad()) g *= f;
  }
  return n;
}

}  // namespace m3p
