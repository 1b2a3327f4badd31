#pragma once

#include <cmath>
#include <map>
#include <string>

#include "exnode/param_store.hpp"

namespace exnode {

/// Training aborted because the objective became non-finite or collapsed.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 0.0;  // global gradient-norm clip; 0 disables
};

/// Step decay: lr * factor^floor(epoch / every).
struct StepSchedule {
  double factor = 1.0;
  int every = 0;

  double at(double base_lr, int epoch) const {
    if (every <= 0 || factor == 1.0) return base_lr;
    return base_lr * std::pow(factor, epoch / every);
  }
};

class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  void set_lr(double lr) { cfg_.lr = lr; }
  double lr() const { return cfg_.lr; }
  long steps() const { return t_; }

  /// Gradient descent step; parameters without a gradient entry are left alone.
  void step(ParamStore& params, const std::map<std::string, DenseArray>& grads) {
    ++t_;
    double scale = 1.0;
    if (cfg_.clip_norm > 0.0) {
      double sq = 0.0;
      for (const auto& [k, g] : grads)
        for (double v : g.values()) sq += v * v;
      const double norm = std::sqrt(sq);
      if (norm > cfg_.clip_norm) scale = cfg_.clip_norm / norm;
    }
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (auto& [name, p] : params) {
      auto it = grads.find(name);
      if (it == grads.end()) continue;
      const DenseArray& g = it->second;
      auto [mit, _m] = m_.try_emplace(name, p.shape(), 0.0);
      auto [vit, _v] = v_.try_emplace(name, p.shape(), 0.0);
      DenseArray& m = mit->second;
      DenseArray& v = vit->second;
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = g[i] * scale;
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
        p[i] -= cfg_.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg_.eps);
      }
    }
  }

 private:
  AdamConfig cfg_;
  long t_ = 0;
  std::map<std::string, DenseArray> m_, v_;
};

}  // namespace exnode
