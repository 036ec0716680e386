#pragma once

// Differentiable operations over frami::Tensor. Every op checks shapes
// eagerly and records its backward rule only when an input needs a grad.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "frami/tensor.hpp"

namespace frami {

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": " + to_string(a.shape()) + " vs " + to_string(b.shape()));
}

struct AxisSplit {
  std::size_t outer, n, inner;
};

inline AxisSplit split_axis(const Shape& shape, std::size_t axis, const char* op) {
  if (axis >= shape.size())
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " +
                     to_string(shape));
  AxisSplit s{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

inline Shape drop_axis(Shape shape, std::size_t axis) {
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  if (shape.empty()) shape = {1};
  return shape;
}

template <class F, class DF>
Tensor unary(const Tensor& a, F f, DF df) {
  std::vector<double> out(a.size());
  const auto x = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i]);
  return make_result(a.shape(), std::move(out), {a}, [df](Node& self) {
    double* g = parent_grad(self, 0);
    const auto& x = self.parents[0]->value;
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * df(x[i], self.value[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return detail::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    for (std::size_t k = 0; k < 2; ++k)
      if (double* g = detail::parent_grad(self, k))
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return detail::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    if (double* g = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    if (double* g = detail::parent_grad(self, 1))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return detail::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    const auto& x = self.parents[0]->value;
    const auto& y = self.parents[1]->value;
    if (double* g = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * y[i];
    if (double* g = detail::parent_grad(self, 1))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * x[i];
  });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "div");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] / b[i];
  return detail::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    const auto& y = self.parents[1]->value;
    if (double* g = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] / y[i];
    if (double* g = detail::parent_grad(self, 1))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i] * self.value[i] / y[i];
  });
}

inline Tensor add_scalar(const Tensor& a, double s) {
  return detail::unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

inline Tensor mul_scalar(const Tensor& a, double s) {
  return detail::unary(a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

inline Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

inline Tensor relu(const Tensor& a) {
  return detail::unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Tensor exp(const Tensor& a) {
  return detail::unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& a) {
  for (double v : a.values())
    if (!(v > 0.0)) throw DomainError("log of non-positive value");
  return detail::unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Tensor square(const Tensor& a) {
  return detail::unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

// ---------------------------------------------------------------- reductions

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  return detail::make_result({1}, {s}, {a}, [](detail::Node& self) {
    double* g = detail::parent_grad(self, 0);
    const std::size_t n = self.parents[0]->value.size();
    for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[0];
  });
}

inline Tensor mean(const Tensor& a) { return mul_scalar(sum(a), 1.0 / static_cast<double>(a.size())); }

inline Tensor sum_axis(const Tensor& a, std::size_t axis) {
  const auto s = detail::split_axis(a.shape(), axis, "sum_axis");
  std::vector<double> out(s.outer * s.inner, 0.0);
  const auto x = a.values();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t k = 0; k < s.n; ++k)
      for (std::size_t i = 0; i < s.inner; ++i) out[o * s.inner + i] += x[(o * s.n + k) * s.inner + i];
  return detail::make_result(detail::drop_axis(a.shape(), axis), std::move(out), {a}, [s](detail::Node& self) {
    double* g = detail::parent_grad(self, 0);
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t k = 0; k < s.n; ++k)
        for (std::size_t i = 0; i < s.inner; ++i) g[(o * s.n + k) * s.inner + i] += self.grad[o * s.inner + i];
  });
}

inline Tensor mean_axis(const Tensor& a, std::size_t axis) {
  const auto s = detail::split_axis(a.shape(), axis, "mean_axis");
  return mul_scalar(sum_axis(a, axis), 1.0 / static_cast<double>(s.n));
}

// Population standard deviation along `axis`. Its gradient is bounded by
// 1/sqrt(n) everywhere; at zero variance the zero subgradient is used.
inline Tensor std_axis(const Tensor& a, std::size_t axis) {
  const auto s = detail::split_axis(a.shape(), axis, "std_axis");
  if (s.n < 2) throw DomainError("std over axis of length " + std::to_string(s.n));
  const auto x = a.values();
  std::vector<double> mu(s.outer * s.inner, 0.0), out(s.outer * s.inner, 0.0);
  const double inv_n = 1.0 / static_cast<double>(s.n);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      double m = 0.0;
      for (std::size_t k = 0; k < s.n; ++k) m += x[(o * s.n + k) * s.inner + i];
      m *= inv_n;
      double v = 0.0;
      for (std::size_t k = 0; k < s.n; ++k) {
        const double d = x[(o * s.n + k) * s.inner + i] - m;
        v += d * d;
      }
      mu[o * s.inner + i] = m;
      out[o * s.inner + i] = std::sqrt(v * inv_n);
    }
  return detail::make_result(detail::drop_axis(a.shape(), axis), std::move(out), {a},
                             [s, mu = std::move(mu), inv_n](detail::Node& self) {
                               double* g = detail::parent_grad(self, 0);
                               const auto& x = self.parents[0]->value;
                               for (std::size_t o = 0; o < s.outer; ++o)
                                 for (std::size_t i = 0; i < s.inner; ++i) {
                                   const std::size_t r = o * s.inner + i;
                                   if (self.value[r] == 0.0) continue;
                                   const double c = self.grad[r] * inv_n / self.value[r];
                                   for (std::size_t k = 0; k < s.n; ++k) {
                                     const std::size_t j = (o * s.n + k) * s.inner + i;
                                     g[j] += c * (x[j] - mu[r]);
                                   }
                                 }
                             });
}

// [.., ] -> [.., n] by repeating along a new trailing axis.
inline Tensor expand_last(const Tensor& a, std::size_t n) {
  Shape shape = a.shape();
  shape.push_back(n);
  std::vector<double> out(a.size() * n);
  for (std::size_t i = 0; i < a.size(); ++i) std::fill_n(out.begin() + static_cast<std::ptrdiff_t>(i * n), n, a[i]);
  return detail::make_result(std::move(shape), std::move(out), {a}, [n](detail::Node& self) {
    double* g = detail::parent_grad(self, 0);
    const std::size_t m = self.parents[0]->value.size();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t k = 0; k < n; ++k) g[i] += self.grad[i * n + k];
  });
}

// ---------------------------------------------------------------- linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n);
  detail::MapMat(out.data(), m, n).noalias() =
      detail::ConstMapMat(a.values().data(), m, k) * detail::ConstMapMat(b.values().data(), k, n);
  return detail::make_result({m, n}, std::move(out), {a, b}, [m, k, n](detail::Node& self) {
    detail::ConstMapMat dy(self.grad.data(), m, n);
    if (double* g = detail::parent_grad(self, 0))
      detail::MapMat(g, m, k).noalias() += dy * detail::ConstMapMat(self.parents[1]->value.data(), k, n).transpose();
    if (double* g = detail::parent_grad(self, 1))
      detail::MapMat(g, k, n).noalias() += detail::ConstMapMat(self.parents[0]->value.data(), m, k).transpose() * dy;
  });
}

inline Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose expects rank 2, got " + to_string(a.shape()));
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(m * n);
  detail::MapMat(out.data(), n, m) = detail::ConstMapMat(a.values().data(), m, n).transpose();
  return detail::make_result({n, m}, std::move(out), {a}, [m, n](detail::Node& self) {
    double* g = detail::parent_grad(self, 0);
    detail::MapMat(g, m, n) += detail::ConstMapMat(self.grad.data(), n, m).transpose();
  });
}

// x [B, in] * W^T [in, out] + bias [out]
inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (x.rank() != 2 || weight.rank() != 2 || x.dim(1) != weight.dim(1) || bias.size() != weight.dim(0))
    throw ShapeError("linear: x " + to_string(x.shape()) + ", W " + to_string(weight.shape()) + ", b " +
                     to_string(bias.shape()));
  const std::size_t b = x.dim(0), in = x.dim(1), out_dim = weight.dim(0);
  std::vector<double> out(b * out_dim);
  detail::MapMat y(out.data(), b, out_dim);
  y.noalias() = detail::ConstMapMat(x.values().data(), b, in) *
                detail::ConstMapMat(weight.values().data(), out_dim, in).transpose();
  y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.values().data(), out_dim);
  return detail::make_result({b, out_dim}, std::move(out), {x, weight, bias}, [b, in, out_dim](detail::Node& self) {
    detail::ConstMapMat dy(self.grad.data(), b, out_dim);
    if (double* g = detail::parent_grad(self, 0))
      detail::MapMat(g, b, in).noalias() += dy * detail::ConstMapMat(self.parents[1]->value.data(), out_dim, in);
    if (double* g = detail::parent_grad(self, 1))
      detail::MapMat(g, out_dim, in).noalias() +=
          dy.transpose() * detail::ConstMapMat(self.parents[0]->value.data(), b, in);
    if (double* g = detail::parent_grad(self, 2))
      for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = 0; j < out_dim; ++j) g[j] += self.grad[i * out_dim + j];
  });
}

// Left-multiplies every [Fs, N] slice of x [B, Fs, N] by W [Ft, Fs].
inline Tensor channel_mix(const Tensor& weight, const Tensor& x) {
  if (weight.rank() != 2 || x.rank() != 3 || x.dim(1) != weight.dim(1))
    throw ShapeError("channel_mix: W " + to_string(weight.shape()) + ", x " + to_string(x.shape()));
  const std::size_t ft = weight.dim(0), fs = weight.dim(1), b = x.dim(0), n = x.dim(2);
  std::vector<double> out(b * ft * n);
  detail::ConstMapMat w(weight.values().data(), ft, fs);
  for (std::size_t i = 0; i < b; ++i)
    detail::MapMat(out.data() + i * ft * n, ft, n).noalias() =
        w * detail::ConstMapMat(x.values().data() + i * fs * n, fs, n);
  return detail::make_result({b, ft, n}, std::move(out), {weight, x}, [ft, fs, b, n](detail::Node& self) {
    const auto& wv = self.parents[0]->value;
    const auto& xv = self.parents[1]->value;
    double* gw = detail::parent_grad(self, 0);
    double* gx = detail::parent_grad(self, 1);
    for (std::size_t i = 0; i < b; ++i) {
      detail::ConstMapMat dy(self.grad.data() + i * ft * n, ft, n);
      if (gw) detail::MapMat(gw, ft, fs).noalias() += dy * detail::ConstMapMat(xv.data() + i * fs * n, fs, n).transpose();
      if (gx) detail::MapMat(gx + i * fs * n, fs, n).noalias() += detail::ConstMapMat(wv.data(), ft, fs).transpose() * dy;
    }
  });
}

// Sum over the last axis of a * b, for rank-2 operands: [B, D] -> [B].
inline Tensor rowwise_dot(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "rowwise_dot");
  if (a.rank() != 2) throw ShapeError("rowwise_dot expects rank 2, got " + to_string(a.shape()));
  return sum_axis(mul(a, b), 1);
}

struct Conv2dOptions {
  std::size_t stride_h = 1, stride_w = 1;
  std::size_t pad_h = 0, pad_w = 0;
};

// NCHW convolution (cross-correlation) with zero padding. x [N, C, H, W],
// weight [O, C, KH, KW].
inline Tensor conv2d(const Tensor& x, const Tensor& weight, Conv2dOptions opt = {}) {
  if (x.rank() != 4 || weight.rank() != 4 || x.dim(1) != weight.dim(1))
    throw ShapeError("conv2d: x " + to_string(x.shape()) + ", W " + to_string(weight.shape()));
  if (opt.stride_h == 0 || opt.stride_w == 0) throw ShapeError("conv2d: zero stride");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t o = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  if (h + 2 * opt.pad_h < kh || w + 2 * opt.pad_w < kw)
    throw ShapeError("conv2d: kernel " + to_string(weight.shape()) + " larger than padded input " +
                     to_string(x.shape()));
  const std::size_t ho = (h + 2 * opt.pad_h - kh) / opt.stride_h + 1;
  const std::size_t wo = (w + 2 * opt.pad_w - kw) / opt.stride_w + 1;
  const std::size_t ckk = c * kh * kw, hw = ho * wo;

  std::vector<double> cols(n * ckk * hw, 0.0);
  const auto xv = x.values();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ci = 0; ci < c; ++ci)
      for (std::size_t i = 0; i < kh; ++i)
        for (std::size_t j = 0; j < kw; ++j) {
          double* row = cols.data() + (b * ckk + (ci * kh + i) * kw + j) * hw;
          for (std::size_t oh = 0; oh < ho; ++oh) {
            const auto ih = static_cast<std::ptrdiff_t>(oh * opt.stride_h + i) - static_cast<std::ptrdiff_t>(opt.pad_h);
            if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(h)) continue;
            const double* src = xv.data() + ((b * c + ci) * h + static_cast<std::size_t>(ih)) * w;
            for (std::size_t ow = 0; ow < wo; ++ow) {
              const auto iw = static_cast<std::ptrdiff_t>(ow * opt.stride_w + j) - static_cast<std::ptrdiff_t>(opt.pad_w);
              if (iw >= 0 && iw < static_cast<std::ptrdiff_t>(w)) row[oh * wo + ow] = src[iw];
            }
          }
        }

  std::vector<double> out(n * o * hw);
  detail::ConstMapMat wm(weight.values().data(), o, ckk);
  for (std::size_t b = 0; b < n; ++b)
    detail::MapMat(out.data() + b * o * hw, o, hw).noalias() = wm * detail::ConstMapMat(cols.data() + b * ckk * hw, ckk, hw);

  const bool keep_cols = weight.requires_grad();
  return detail::make_result(
      {n, o, ho, wo}, std::move(out), {x, weight},
      [=, cols = keep_cols ? std::move(cols) : std::vector<double>{}](detail::Node& self) {
        const auto& wv = self.parents[1]->value;
        double* gx = detail::parent_grad(self, 0);
        double* gw = detail::parent_grad(self, 1);
        std::vector<double> dcols(gx ? ckk * hw : 0);
        for (std::size_t b = 0; b < n; ++b) {
          detail::ConstMapMat dy(self.grad.data() + b * o * hw, o, hw);
          if (gw) detail::MapMat(gw, o, ckk).noalias() += dy * detail::ConstMapMat(cols.data() + b * ckk * hw, ckk, hw).transpose();
          if (!gx) continue;
          detail::MapMat(dcols.data(), ckk, hw).noalias() = detail::ConstMapMat(wv.data(), o, ckk).transpose() * dy;
          for (std::size_t ci = 0; ci < c; ++ci)
            for (std::size_t i = 0; i < kh; ++i)
              for (std::size_t j = 0; j < kw; ++j) {
                const double* row = dcols.data() + ((ci * kh + i) * kw + j) * hw;
                for (std::size_t oh = 0; oh < ho; ++oh) {
                  const auto ih = static_cast<std::ptrdiff_t>(oh * opt.stride_h + i) - static_cast<std::ptrdiff_t>(opt.pad_h);
                  if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(h)) continue;
                  double* dst = gx + ((b * c + ci) * h + static_cast<std::size_t>(ih)) * w;
                  for (std::size_t ow = 0; ow < wo; ++ow) {
                    const auto iw = static_cast<std::ptrdiff_t>(ow * opt.stride_w + j) - static_cast<std::ptrdiff_t>(opt.pad_w);
                    if (iw >= 0 && iw < static_cast<std::ptrdiff_t>(w)) dst[iw] += row[oh * wo + ow];
                  }
                }
              }
        }
      });
}

// ---------------------------------------------------------------- normalization

namespace detail {

inline AxisSplit channel_split(const Tensor& x, const char* op) {
  if (x.rank() < 2) throw ShapeError(std::string(op) + " expects [N, C, ...], got " + to_string(x.shape()));
  AxisSplit s{x.dim(0), x.dim(1), 1};
  for (std::size_t i = 2; i < x.rank(); ++i) s.inner *= x.dim(i);
  return s;
}

inline void channel_moments(const Tensor& x, const AxisSplit& s, std::vector<double>& mean, std::vector<double>& var) {
  mean.assign(s.n, 0.0);
  var.assign(s.n, 0.0);
  const auto v = x.values();
  const double m = static_cast<double>(s.outer * s.inner);
  for (std::size_t b = 0; b < s.outer; ++b)
    for (std::size_t c = 0; c < s.n; ++c) {
      const double* p = v.data() + (b * s.n + c) * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i) mean[c] += p[i];
    }
  for (auto& mu : mean) mu /= m;
  for (std::size_t b = 0; b < s.outer; ++b)
    for (std::size_t c = 0; c < s.n; ++c) {
      const double* p = v.data() + (b * s.n + c) * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i) {
        const double d = p[i] - mean[c];
        var[c] += d * d;
      }
    }
  for (auto& vv : var) vv /= m;
}

}  // namespace detail

// Batch statistics of x [N, C, ...] per channel, reduced over every other axis.
inline Tensor channel_mean(const Tensor& x) {
  const auto s = detail::channel_split(x, "channel_mean");
  std::vector<double> mean, var;
  detail::channel_moments(x, s, mean, var);
  const double inv_m = 1.0 / static_cast<double>(s.outer * s.inner);
  return detail::make_result({s.n}, std::move(mean), {x}, [s, inv_m](detail::Node& self) {
    double* g = detail::parent_grad(self, 0);
    for (std::size_t b = 0; b < s.outer; ++b)
      for (std::size_t c = 0; c < s.n; ++c) {
        double* p = g + (b * s.n + c) * s.inner;
        for (std::size_t i = 0; i < s.inner; ++i) p[i] += self.grad[c] * inv_m;
      }
  });
}

// sqrt(population variance + eps) per channel.
inline Tensor channel_std(const Tensor& x, double eps) {
  const auto s = detail::channel_split(x, "channel_std");
  std::vector<double> mean, var;
  detail::channel_moments(x, s, mean, var);
  std::vector<double> out(s.n);
  for (std::size_t c = 0; c < s.n; ++c) out[c] = std::sqrt(var[c] + eps);
  const double inv_m = 1.0 / static_cast<double>(s.outer * s.inner);
  return detail::make_result({s.n}, std::move(out), {x}, [s, inv_m, mean = std::move(mean)](detail::Node& self) {
    double* g = detail::parent_grad(self, 0);
    const auto& xv = self.parents[0]->value;
    for (std::size_t b = 0; b < s.outer; ++b)
      for (std::size_t c = 0; c < s.n; ++c) {
        const double k = self.grad[c] * inv_m / self.value[c];
        const std::size_t off = (b * s.n + c) * s.inner;
        for (std::size_t i = 0; i < s.inner; ++i) g[off + i] += k * (xv[off + i] - mean[c]);
      }
  });
}

struct BatchMoments {
  std::vector<double> mean;
  std::vector<double> var;  // population (biased)
};

// Training-mode batch norm: normalizes with batch statistics, which are
// also returned through `moments` for the running-average update.
inline Tensor batch_norm_train(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps,
                               BatchMoments* moments = nullptr) {
  const auto s = detail::channel_split(x, "batch_norm");
  if (gamma.size() != s.n || beta.size() != s.n)
    throw ShapeError("batch_norm: affine width mismatch for " + to_string(x.shape()));
  std::vector<double> mean, var;
  detail::channel_moments(x, s, mean, var);
  std::vector<double> inv_std(s.n), xhat(x.size()), out(x.size());
  for (std::size_t c = 0; c < s.n; ++c) inv_std[c] = 1.0 / std::sqrt(var[c] + eps);
  const auto xv = x.values();
  for (std::size_t b = 0; b < s.outer; ++b)
    for (std::size_t c = 0; c < s.n; ++c) {
      const std::size_t off = (b * s.n + c) * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i) {
        xhat[off + i] = (xv[off + i] - mean[c]) * inv_std[c];
        out[off + i] = gamma[c] * xhat[off + i] + beta[c];
      }
    }
  if (moments) *moments = {mean, var};
  const double m = static_cast<double>(s.outer * s.inner);
  return detail::make_result(
      x.shape(), std::move(out), {x, gamma, beta},
      [s, m, inv_std = std::move(inv_std), xhat = std::move(xhat)](detail::Node& self) {
        const auto& gv = self.parents[1]->value;
        std::vector<double> sum_dy(s.n, 0.0), sum_dy_xhat(s.n, 0.0);
        for (std::size_t b = 0; b < s.outer; ++b)
          for (std::size_t c = 0; c < s.n; ++c) {
            const std::size_t off = (b * s.n + c) * s.inner;
            for (std::size_t i = 0; i < s.inner; ++i) {
              sum_dy[c] += self.grad[off + i];
              sum_dy_xhat[c] += self.grad[off + i] * xhat[off + i];
            }
          }
        if (double* g = detail::parent_grad(self, 1))
          for (std::size_t c = 0; c < s.n; ++c) g[c] += sum_dy_xhat[c];
        if (double* g = detail::parent_grad(self, 2))
          for (std::size_t c = 0; c < s.n; ++c) g[c] += sum_dy[c];
        if (double* g = detail::parent_grad(self, 0))
          for (std::size_t b = 0; b < s.outer; ++b)
            for (std::size_t c = 0; c < s.n; ++c) {
              const double k = gv[c] * inv_std[c] / m;
              const std::size_t off = (b * s.n + c) * s.inner;
              for (std::size_t i = 0; i < s.inner; ++i)
                g[off + i] += k * (m * self.grad[off + i] - sum_dy[c] - xhat[off + i] * sum_dy_xhat[c]);
            }
      });
}

// Evaluation-mode batch norm with fixed running statistics.
inline Tensor batch_norm_eval(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                              std::span<const double> running_mean, std::span<const double> running_var, double eps) {
  const auto s = detail::channel_split(x, "batch_norm");
  if (gamma.size() != s.n || beta.size() != s.n || running_mean.size() != s.n || running_var.size() != s.n)
    throw ShapeError("batch_norm: statistics width mismatch for " + to_string(x.shape()));
  std::vector<double> inv_std(s.n), xhat(x.size()), out(x.size());
  for (std::size_t c = 0; c < s.n; ++c) inv_std[c] = 1.0 / std::sqrt(running_var[c] + eps);
  const auto xv = x.values();
  for (std::size_t b = 0; b < s.outer; ++b)
    for (std::size_t c = 0; c < s.n; ++c) {
      const std::size_t off = (b * s.n + c) * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i) {
        xhat[off + i] = (xv[off + i] - running_mean[c]) * inv_std[c];
        out[off + i] = gamma[c] * xhat[off + i] + beta[c];
      }
    }
  return detail::make_result(
      x.shape(), std::move(out), {x, gamma, beta},
      [s, inv_std = std::move(inv_std), xhat = std::move(xhat)](detail::Node& self) {
        const auto& gv = self.parents[1]->value;
        double* gx = detail::parent_grad(self, 0);
        double* gg = detail::parent_grad(self, 1);
        double* gb = detail::parent_grad(self, 2);
        for (std::size_t b = 0; b < s.outer; ++b)
          for (std::size_t c = 0; c < s.n; ++c) {
            const std::size_t off = (b * s.n + c) * s.inner;
            for (std::size_t i = 0; i < s.inner; ++i) {
              const double dy = self.grad[off + i];
              if (gx) gx[off + i] += dy * gv[c] * inv_std[c];
              if (gg) gg[c] += dy * xhat[off + i];
              if (gb) gb[c] += dy;
            }
          }
      });
}

// Rows of x [B, D] scaled to unit L2 norm; rows with norm below `eps`
// become zero (their cosine with anything is then 0).
inline Tensor normalize_rows(const Tensor& x, double eps = 1e-12) {
  if (x.rank() != 2) throw ShapeError("normalize_rows expects rank 2, got " + to_string(x.shape()));
  const std::size_t b = x.dim(0), d = x.dim(1);
  std::vector<double> out(x.size(), 0.0), norms(b);
  const auto xv = x.values();
  for (std::size_t i = 0; i < b; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += xv[i * d + j] * xv[i * d + j];
    norms[i] = std::sqrt(s);
    if (norms[i] >= eps)
      for (std::size_t j = 0; j < d; ++j) out[i * d + j] = xv[i * d + j] / norms[i];
  }
  return detail::make_result(x.shape(), std::move(out), {x}, [b, d, eps, norms = std::move(norms)](detail::Node& self) {
    double* g = detail::parent_grad(self, 0);
    for (std::size_t i = 0; i < b; ++i) {
      if (norms[i] < eps) continue;
      double dot = 0.0;
      for (std::size_t j = 0; j < d; ++j) dot += self.value[i * d + j] * self.grad[i * d + j];
      for (std::size_t j = 0; j < d; ++j)
        g[i * d + j] += (self.grad[i * d + j] - self.value[i * d + j] * dot) / norms[i];
    }
  });
}

// Euclidean norm of all entries; the subgradient at 0 is 0.
inline Tensor l2_norm(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v * v;
  return detail::make_result({1}, {std::sqrt(s)}, {x}, [](detail::Node& self) {
    const double n = self.value[0];
    if (n == 0.0) return;
    double* g = detail::parent_grad(self, 0);
    const auto& xv = self.parents[0]->value;
    for (std::size_t i = 0; i < xv.size(); ++i) g[i] += self.grad[0] * xv[i] / n;
  });
}

// ---------------------------------------------------------------- softmax family

inline Tensor log_softmax(const Tensor& a) {
  const std::size_t n = a.shape().back(), rows = a.size() / n;
  std::vector<double> out(a.size());
  const auto x = a.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* p = x.data() + r * n;
    const double mx = *std::max_element(p, p + n);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += std::exp(p[j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = p[j] - lse;
  }
  return detail::make_result(a.shape(), std::move(out), {a}, [n, rows](detail::Node& self) {
    double* g = detail::parent_grad(self, 0);
    for (std::size_t r = 0; r < rows; ++r) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += self.grad[r * n + j];
      for (std::size_t j = 0; j < n; ++j) g[r * n + j] += self.grad[r * n + j] - std::exp(self.value[r * n + j]) * s;
    }
  });
}

inline Tensor softmax(const Tensor& a) {
  const std::size_t n = a.shape().back(), rows = a.size() / n;
  std::vector<double> out(a.size());
  const auto x = a.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* p = x.data() + r * n;
    const double mx = *std::max_element(p, p + n);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += (out[r * n + j] = std::exp(p[j] - mx));
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] /= s;
  }
  return detail::make_result(a.shape(), std::move(out), {a}, [n, rows](detail::Node& self) {
    double* g = detail::parent_grad(self, 0);
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += self.grad[r * n + j] * self.value[r * n + j];
      for (std::size_t j = 0; j < n; ++j) g[r * n + j] += self.value[r * n + j] * (self.grad[r * n + j] - dot);
    }
  });
}

// log(sum(exp(.))) over the last axis; drops that axis.
inline Tensor logsumexp_last(const Tensor& a) {
  const std::size_t n = a.shape().back(), rows = a.size() / n;
  std::vector<double> out(rows);
  const auto x = a.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* p = x.data() + r * n;
    const double mx = *std::max_element(p, p + n);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += std::exp(p[j] - mx);
    out[r] = mx + std::log(s);
  }
  return detail::make_result(detail::drop_axis(a.shape(), a.rank() - 1), std::move(out), {a},
                             [n, rows](detail::Node& self) {
                               double* g = detail::parent_grad(self, 0);
                               const auto& x = self.parents[0]->value;
                               for (std::size_t r = 0; r < rows; ++r)
                                 for (std::size_t j = 0; j < n; ++j)
                                   g[r * n + j] += self.grad[r] * std::exp(x[r * n + j] - self.value[r]);
                             });
}

// ---------------------------------------------------------------- layout

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.size())
    throw ShapeError("reshape " + to_string(a.shape()) + " -> " + to_string(shape));
  return detail::make_result(std::move(shape), std::vector<double>(a.values().begin(), a.values().end()), {a},
                             [](detail::Node& self) {
                               double* g = detail::parent_grad(self, 0);
                               for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
                             });
}

inline Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length) {
  const auto s = detail::split_axis(a.shape(), axis, "slice");
  if (length == 0 || start + length > s.n)
    throw ShapeError("slice [" + std::to_string(start) + ", " + std::to_string(start + length) + ") of axis " +
                     std::to_string(axis) + " in " + to_string(a.shape()));
  Shape shape = a.shape();
  shape[axis] = length;
  std::vector<double> out(s.outer * length * s.inner);
  const auto x = a.values();
  for (std::size_t o = 0; o < s.outer; ++o)
    std::copy_n(x.data() + (o * s.n + start) * s.inner, length * s.inner, out.data() + o * length * s.inner);
  return detail::make_result(std::move(shape), std::move(out), {a}, [s, start, length](detail::Node& self) {
    double* g = detail::parent_grad(self, 0);
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < length * s.inner; ++i)
        g[(o * s.n + start) * s.inner + i] += self.grad[o * length * s.inner + i];
  });
}

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  Shape shape = parts[0].shape();
  const auto s0 = detail::split_axis(shape, axis, "concat");
  std::size_t total = 0;
  std::vector<std::size_t> lens;
  for (const auto& p : parts) {
    Shape probe = p.shape();
    if (probe.size() != shape.size()) throw ShapeError("concat rank mismatch");
    probe[axis] = shape[axis];
    if (probe != shape)
      throw ShapeError("concat along axis " + std::to_string(axis) + ": " + to_string(parts[0].shape()) + " vs " +
                       to_string(p.shape()));
    lens.push_back(p.dim(axis));
    total += p.dim(axis);
  }
  shape[axis] = total;
  std::vector<double> out(s0.outer * total * s0.inner);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto x = parts[k].values();
    for (std::size_t o = 0; o < s0.outer; ++o)
      std::copy_n(x.data() + o * lens[k] * s0.inner, lens[k] * s0.inner,
                  out.data() + (o * total + offset) * s0.inner);
    offset += lens[k];
  }
  return detail::make_result(std::move(shape), std::move(out), parts,
                             [s0, total, lens](detail::Node& self) {
                               std::size_t offset = 0;
                               for (std::size_t k = 0; k < lens.size(); ++k) {
                                 if (double* g = detail::parent_grad(self, k))
                                   for (std::size_t o = 0; o < s0.outer; ++o)
                                     for (std::size_t i = 0; i < lens[k] * s0.inner; ++i)
                                       g[o * lens[k] * s0.inner + i] += self.grad[(o * total + offset) * s0.inner + i];
                                 offset += lens[k];
                               }
                             });
}

// Edge-replicating padding along one axis.
inline Tensor pad_replicate(const Tensor& a, std::size_t axis, std::size_t before, std::size_t after) {
  const auto s = detail::split_axis(a.shape(), axis, "pad_replicate");
  const std::size_t n_out = s.n + before + after;
  Shape shape = a.shape();
  shape[axis] = n_out;
  auto src_index = [s, before](std::size_t k) {
    const auto j = static_cast<std::ptrdiff_t>(k) - static_cast<std::ptrdiff_t>(before);
    return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(j, 0, static_cast<std::ptrdiff_t>(s.n) - 1));
  };
  std::vector<double> out(s.outer * n_out * s.inner);
  const auto x = a.values();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t k = 0; k < n_out; ++k)
      std::copy_n(x.data() + (o * s.n + src_index(k)) * s.inner, s.inner, out.data() + (o * n_out + k) * s.inner);
  return detail::make_result(std::move(shape), std::move(out), {a}, [s, n_out, src_index](detail::Node& self) {
    double* g = detail::parent_grad(self, 0);
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t k = 0; k < n_out; ++k) {
        const std::size_t src = (o * s.n + src_index(k)) * s.inner;
        for (std::size_t i = 0; i < s.inner; ++i) g[src + i] += self.grad[(o * n_out + k) * s.inner + i];
      }
  });
}

// Nearest-neighbour upsampling: every entry along `axis` repeated `factor` times.
inline Tensor upsample_nearest(const Tensor& a, std::size_t axis, std::size_t factor) {
  const auto s = detail::split_axis(a.shape(), axis, "upsample_nearest");
  if (factor == 0) throw ShapeError("upsample factor 0");
  Shape shape = a.shape();
  shape[axis] = s.n * factor;
  std::vector<double> out(a.size() * factor);
  const auto x = a.values();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t k = 0; k < s.n * factor; ++k)
      std::copy_n(x.data() + (o * s.n + k / factor) * s.inner, s.inner,
                  out.data() + (o * s.n * factor + k) * s.inner);
  return detail::make_result(std::move(shape), std::move(out), {a}, [s, factor](detail::Node& self) {
    double* g = detail::parent_grad(self, 0);
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t k = 0; k < s.n * factor; ++k)
        for (std::size_t i = 0; i < s.inner; ++i)
          g[(o * s.n + k / factor) * s.inner + i] += self.grad[(o * s.n * factor + k) * s.inner + i];
  });
}

// Per-item reindexing of the last axis: out[b, ..., t] = a[b, ..., index[b][t]].
// All index rows must have the same length.
inline Tensor gather_last(const Tensor& a, const std::vector<std::vector<std::size_t>>& index) {
  if (a.rank() < 2 || index.size() != a.dim(0))
    throw ShapeError("gather_last: " + std::to_string(index.size()) + " index rows for " + to_string(a.shape()));
  const std::size_t b = a.dim(0), t = a.shape().back(), len = index[0].size();
  const std::size_t mid = a.size() / (b * t);
  for (const auto& row : index) {
    if (row.size() != len || len == 0) throw ShapeError("gather_last: ragged or empty index rows");
    for (auto k : row)
      if (k >= t) throw IndexError("gather_last index " + std::to_string(k) + " >= " + std::to_string(t));
  }
  Shape shape = a.shape();
  shape.back() = len;
  std::vector<double> out(b * mid * len);
  const auto x = a.values();
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t m = 0; m < mid; ++m)
      for (std::size_t k = 0; k < len; ++k) out[(i * mid + m) * len + k] = x[(i * mid + m) * t + index[i][k]];
  return detail::make_result(std::move(shape), std::move(out), {a}, [b, t, len, mid, index](detail::Node& self) {
    double* g = detail::parent_grad(self, 0);
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t m = 0; m < mid; ++m)
        for (std::size_t k = 0; k < len; ++k) g[(i * mid + m) * t + index[i][k]] += self.grad[(i * mid + m) * len + k];
  });
}

}  // namespace frami
