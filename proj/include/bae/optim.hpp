#pragma once

#include <cmath>
#include <vector>

#include "bae/nets.hpp"

namespace bae {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam over a fixed parameter list; reads each parameter's accumulated grad.
class Adam {
 public:
  Adam(ParamList params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    for (const auto& p : params_) {
      m_.emplace_back(p.tensor.numel(), 0.0);
      v_.emplace_back(p.tensor.numel(), 0.0);
    }
  }

  void zero_grad() { zero_grads(params_); }

  void step() {
    ++t_;
    double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = params_[k].tensor;
      if (!p.has_grad()) continue;
      auto g = p.grad();
      auto w = p.data_mut();
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < w.size(); ++i) {
        m[i] = cfg_.beta1 * m[i] + (1 - cfg_.beta1) * g[i];
        v[i] = cfg_.beta2 * v[i] + (1 - cfg_.beta2) * g[i] * g[i];
        w[i] -= cfg_.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.eps);
      }
    }
  }

  /// Multiplies every accumulated gradient by s (used to average over a
  /// batch accumulated sample by sample).
  void scale_grads(double s) {
    for (auto& p : params_) {
      if (!p.tensor.has_grad()) continue;
      auto& g = p.tensor.node().grad;
      for (auto& x : g) x *= s;
    }
  }

  std::size_t steps() const { return t_; }

 private:
  ParamList params_;
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

}  // namespace bae
