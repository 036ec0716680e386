#pragma once

#include <cmath>
#include <vector>

#include "frami/ops.hpp"

namespace frami {

// Mean of squared elementwise differences.
inline Tensor mse(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mse");
  return mean(square(sub(a, b)));
}

// mean_b KL(softmax(p/tau) || softmax(q/tau)) for logits of shape [B, C].
inline Tensor kld(const Tensor& p_logits, const Tensor& q_logits, double tau) {
  if (!(tau > 0.0)) throw ConfigError("kld temperature must be positive, got " + std::to_string(tau));
  detail::require_same_shape(p_logits, q_logits, "kld");
  if (p_logits.rank() != 2) throw ShapeError("kld expects [batch, classes], got " + to_string(p_logits.shape()));
  const Tensor log_p = log_softmax(mul_scalar(p_logits, 1.0 / tau));
  const Tensor log_q = log_softmax(mul_scalar(q_logits, 1.0 / tau));
  const Tensor terms = mul(exp(log_p), sub(log_p, log_q));
  return mul_scalar(sum(terms), 1.0 / static_cast<double>(p_logits.dim(0)));
}

// -log softmax(logits)[label], averaged over the batch.
inline Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& labels) {
  if (logits.rank() != 2 || labels.size() != logits.dim(0))
    throw ShapeError("cross_entropy: logits " + to_string(logits.shape()) + " with " +
                     std::to_string(labels.size()) + " labels");
  const std::size_t b = logits.dim(0), c = logits.dim(1);
  for (auto l : labels)
    if (l >= c) throw IndexError("label " + std::to_string(l) + " out of range for " + std::to_string(c) + " classes");
  std::vector<double> probs(b * c);
  double loss = 0.0;
  const auto x = logits.values();
  for (std::size_t i = 0; i < b; ++i) {
    const double* p = x.data() + i * c;
    double mx = p[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, p[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += (probs[i * c + j] = std::exp(p[j] - mx));
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] /= s;
    loss += mx + std::log(s) - p[labels[i]];
  }
  loss /= static_cast<double>(b);
  return detail::make_result({1}, {loss}, {logits},
                             [b, c, labels, probs = std::move(probs)](detail::Node& self) {
                               double* g = detail::parent_grad(self, 0);
                               const double k = self.grad[0] / static_cast<double>(b);
                               for (std::size_t i = 0; i < b; ++i)
                                 for (std::size_t j = 0; j < c; ++j)
                                   g[i * c + j] += k * (probs[i * c + j] - (j == labels[i] ? 1.0 : 0.0));
                             });
}

struct Cosine {
  Tensor value;  // scalar in [-1, 1]
  bool degenerate = false;
};

// dot(a, b) / (|a| |b|), clamped to [-1, 1]. A vector with norm below
// 1e-12 yields 0 and sets `degenerate`.
inline Cosine cosine_sim(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "cosine_sim");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  na = std::sqrt(na);
  nb = std::sqrt(nb);
  constexpr double kFloor = 1e-12;
  if (na < kFloor || nb < kFloor)
    return {detail::make_result({1}, {0.0}, {a, b}, [](detail::Node&) {}), true};
  const double cos = dot / (na * nb);
  const double value = std::clamp(cos, -1.0, 1.0);
  return {detail::make_result({1}, {value}, {a, b},
                              [na, nb, cos](detail::Node& self) {
                                const auto& av = self.parents[0]->value;
                                const auto& bv = self.parents[1]->value;
                                const double g0 = self.grad[0];
                                if (double* g = detail::parent_grad(self, 0))
                                  for (std::size_t i = 0; i < av.size(); ++i)
                                    g[i] += g0 * (bv[i] / (na * nb) - cos * av[i] / (na * na));
                                if (double* g = detail::parent_grad(self, 1))
                                  for (std::size_t i = 0; i < bv.size(); ++i)
                                    g[i] += g0 * (av[i] / (na * nb) - cos * bv[i] / (nb * nb));
                              }),
          false};
}

}  // namespace frami
