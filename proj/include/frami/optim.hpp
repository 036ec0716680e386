#pragma once

#include <cmath>
#include <vector>

#include "frami/tensor.hpp"

namespace frami {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with bias correction. `step` zeroes the gradients it consumed.
class Adam {
 public:
  explicit Adam(std::vector<Parameter> params, AdamOptions opt = {}) : params_(std::move(params)), opt_(opt) {
    for (const auto& p : params_) {
      m_.emplace_back(p.tensor.size(), 0.0);
      v_.emplace_back(p.tensor.size(), 0.0);
    }
  }

  const AdamOptions& options() const { return opt_; }
  void set_lr(double lr) { opt_.lr = lr; }
  std::size_t steps() const { return t_; }
  const std::vector<Parameter>& parameters() const { return params_; }

  void step() { step(opt_.lr); }

  void step(double lr) {
    if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
    for (auto& p : params_) {
      if (!p.tensor.has_grad()) continue;
      for (double g : p.tensor.grad())
        if (!std::isfinite(g)) throw NumericalError("non-finite gradient in parameter '" + p.name + "'");
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = params_[k].tensor;
      if (!p.has_grad()) continue;
      auto w = p.mutable_values();
      auto g = p.mutable_grad();
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < w.size(); ++i) {
        m[i] = opt_.beta1 * m[i] + (1.0 - opt_.beta1) * g[i];
        v[i] = opt_.beta2 * v[i] + (1.0 - opt_.beta2) * g[i] * g[i];
        w[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + opt_.eps);
        g[i] = 0.0;
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

 private:
  std::vector<Parameter> params_;
  AdamOptions opt_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

inline void zero_grad(std::vector<Parameter>& params) {
  for (auto& p : params) p.tensor.zero_grad();
}

}  // namespace frami
