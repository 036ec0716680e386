#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "frami/tensor.hpp"

namespace frami {

struct GradCheckReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::string worst;  // "name[index]" of the worst entry
  std::size_t checked = 0;

  bool passed(double tolerance) const { return max_rel_error < tolerance; }
};

// Compares analytic gradients of `build()` against central differences for
// every entry of `params`. The relative error of an entry is
// |analytic - numeric| / max(|analytic|, |numeric|, abs_floor).
inline GradCheckReport grad_check(const std::function<Tensor()>& build, std::vector<Parameter> params,
                                  double eps = 1e-5, double abs_floor = 1e-3) {
  std::size_t total = 0;
  for (const auto& p : params) total += p.tensor.size();
  if (total > 10000) throw ContractError("grad_check limited to 1e4 parameters, got " + std::to_string(total));

  for (auto& p : params) p.tensor.zero_grad();
  backward(build());
  std::vector<std::vector<double>> analytic;
  for (auto& p : params) {
    if (p.tensor.has_grad())
      analytic.emplace_back(p.tensor.grad().begin(), p.tensor.grad().end());
    else
      analytic.emplace_back(p.tensor.size(), 0.0);
    p.tensor.zero_grad();
  }

  GradCheckReport report;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto values = params[k].tensor.mutable_values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double orig = values[i];
      values[i] = orig + eps;
      const double up = build().item();
      values[i] = orig - eps;
      const double down = build().item();
      values[i] = orig;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic[k][i];
      const double abs_err = std::abs(a - numeric);
      const double rel = abs_err / std::max({std::abs(a), std::abs(numeric), abs_floor});
      report.max_abs_error = std::max(report.max_abs_error, abs_err);
      if (rel > report.max_rel_error || report.worst.empty()) {
        if (rel >= report.max_rel_error) report.worst = params[k].name + "[" + std::to_string(i) + "]";
        report.max_rel_error = std::max(report.max_rel_error, rel);
      }
      ++report.checked;
    }
  }
  return report;
}

}  // namespace frami
