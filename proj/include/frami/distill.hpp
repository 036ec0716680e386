#pragma once

// Knowledge distillation from the memory bank: chunk statistics with
// pseudo-variance, learned projections, reused frame-level and
// utterance-level losses, and the vanilla KD term.

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "frami/corpus.hpp"
#include "frami/inversion.hpp"
#include "frami/losses.hpp"
#include "frami/nets.hpp"
#include "frami/optim.hpp"

namespace frami {

struct DistillConfig {
  double eta = 1.0;  // reused frame-level weight
  double xi = 1.0;   // reused utterance-level weight
  double kd_tau = 4.0;
  std::size_t n_min = 2;
  std::size_t n_max = 8;
  std::size_t steps = 100;
  std::size_t batch = 32;
  double lr_student = 1e-3;
  bool mean_pseudo_var = false;  // overall pseudo-variance as mean (not sum) of chunks

  void validate() const {
    if (eta < 0.0 || xi < 0.0) throw ConfigError("eta and xi must be >= 0");
    if (!(kd_tau > 0.0)) throw ConfigError("kd_tau must be > 0");
    if (n_min < 2 || n_max < n_min) throw ConfigError("need 2 <= n_min <= n_max");
    if (steps == 0 || batch == 0) throw ConfigError("distillation steps and batch must be positive");
    if (!(lr_student > 0.0)) throw ConfigError("lr_student must be > 0");
  }
};

struct ChunkStats {
  Tensor means;               // [B, F, N]
  Tensor pseudo_vars;         // [B, F, N]
  Tensor overall_mean;        // [B, F]
  Tensor overall_pseudo_var;  // [B, F]
  std::size_t n = 0;
};

// Chunk n covers the same frames as chunk_time. Its pseudo-variance is
// (1/T) * sum over its frames of (h - overall mean)^2, so the chunk values
// add up to the population variance of the whole sequence.
inline ChunkStats chunk_stats(const Tensor& h, std::size_t n, bool mean_pseudo_var = false) {
  if (h.rank() != 3) throw ShapeError("chunk_stats expects [B, F, T], got " + to_string(h.shape()));
  const std::size_t b = h.dim(0), f = h.dim(1), t = h.dim(2);
  if (n < 2 || n > t)
    throw ContractError("chunk_stats needs 2 <= N <= T, got N=" + std::to_string(n) + " T=" + std::to_string(t));
  const auto lengths = chunk_lengths(t, n, 1);
  const Tensor centered_sq = square(sub(h, expand_last(mean_axis(h, 2), t)));
  const double inv_t = 1.0 / static_cast<double>(t);
  std::vector<Tensor> means, pvars;
  Tensor weighted, total_pv;
  std::size_t start = 0;
  for (std::size_t len : lengths) {
    Tensor m = mean_axis(slice(h, 2, start, len), 2);
    Tensor pv = mul_scalar(sum_axis(slice(centered_sq, 2, start, len), 2), inv_t);
    Tensor w = mul_scalar(m, static_cast<double>(len) * inv_t);
    weighted = weighted.node() ? add(weighted, w) : w;
    total_pv = total_pv.node() ? add(total_pv, pv) : pv;
    means.push_back(reshape(m, {b, f, 1}));
    pvars.push_back(reshape(pv, {b, f, 1}));
    start += len;
  }
  if (mean_pseudo_var) total_pv = mul_scalar(total_pv, 1.0 / static_cast<double>(n));
  return {concat(means, 2), concat(pvars, 2), weighted, total_pv, n};
}

inline ChunkStats detach(const ChunkStats& s) {
  return {s.means.detach(), s.pseudo_vars.detach(), s.overall_mean.detach(), s.overall_pseudo_var.detach(), s.n};
}

class ProjectionPair {
 public:
  // Ones on the leading diagonal of an [F_t, F_s] matrix, zeros elsewhere.
  ProjectionPair(std::size_t teacher_dim, std::size_t student_dim)
      : wm_(identity_like(teacher_dim, student_dim)), wv_(identity_like(teacher_dim, student_dim)) {}

  ProjectionPair(Tensor wm, Tensor wv) : wm_(std::move(wm)), wv_(std::move(wv)) {
    if (wm_.shape() != wv_.shape() || wm_.rank() != 2) throw ShapeError("projection matrices must share an [F_t, F_s] shape");
  }

  const Tensor& wm() const { return wm_; }
  const Tensor& wv() const { return wv_; }
  std::size_t teacher_dim() const { return wm_.dim(0); }
  std::size_t student_dim() const { return wm_.dim(1); }

  // [B, F_s, N] -> [B, F_t, N]; [B, F_s] -> [B, F_t].
  Tensor mean_map(const Tensor& x) const { return apply(wm_, x); }
  Tensor var_map(const Tensor& x) const { return apply(wv_, x); }

  std::vector<Parameter> parameters() const { return {{"proj.wm", wm_}, {"proj.wv", wv_}}; }

 private:
  static Tensor identity_like(std::size_t rows, std::size_t cols) {
    std::vector<double> v(rows * cols, 0.0);
    for (std::size_t i = 0; i < std::min(rows, cols); ++i) v[i * cols + i] = 1.0;
    return Tensor({rows, cols}, std::move(v), true);
  }

  static Tensor apply(const Tensor& w, const Tensor& x) {
    if (x.rank() == 2) return reshape(channel_mix(w, reshape(x, {x.dim(0), x.dim(1), 1})), {x.dim(0), w.dim(0)});
    return channel_mix(w, x);
  }

  Tensor wm_, wv_;
};

inline Tensor rfl_loss(const ChunkStats& teacher, const ChunkStats& student, const ProjectionPair& proj) {
  if (teacher.n != student.n)
    throw ContractError("teacher and student chunked into " + std::to_string(teacher.n) + " and " +
                        std::to_string(student.n) + " chunks");
  return add(mse(proj.mean_map(student.means), teacher.means.detach()),
             mse(proj.var_map(student.pseudo_vars), teacher.pseudo_vars.detach()));
}

inline Tensor rul_loss(const ChunkStats& teacher, const ChunkStats& student, const ProjectionPair& proj) {
  return add(mse(proj.mean_map(student.overall_mean), teacher.overall_mean.detach()),
             mse(proj.var_map(student.overall_pseudo_var), teacher.overall_pseudo_var.detach()));
}

inline Tensor kd_loss(const Tensor& teacher_logits, const Tensor& student_logits, double tau) {
  return kld(teacher_logits.detach(), student_logits, tau);
}

// L_KD + eta * L_rfl + xi * L_rul; zero-weighted terms are left out of the graph.
inline Tensor rkd_loss(const Tensor& kd, const Tensor& rfl, const Tensor& rul, double eta, double xi) {
  if (eta < 0.0 || xi < 0.0) throw ConfigError("eta and xi must be >= 0");
  Tensor total = kd;
  if (eta != 0.0) total = add(total, mul_scalar(rfl, eta));
  if (xi != 0.0) total = add(total, mul_scalar(rul, xi));
  return total;
}

struct KdStepLoss {
  Tensor total, kd, rfl, rul;
  std::size_t n = 0;
};

// Losses for one batch x [B, bins, T]. The student runs in training mode.
inline KdStepLoss kd_objective(ModelBundle& teacher, ModelBundle& student, const ProjectionPair& proj, const Tensor& x,
                               const DistillConfig& cfg, Rng& rng) {
  const Tensor h_t = teacher.frame_level(x.detach(), {Mode::Eval, nullptr}).detach();
  const Tensor h_s = student.frame_level(x.detach(), {Mode::Train, nullptr});
  KdStepLoss out;
  out.kd = kd_loss(teacher.classify(stats_pool(h_t)), student.classify(stats_pool(h_s)), cfg.kd_tau);
  const std::size_t n_cap = std::min({cfg.n_max, h_t.dim(2), h_s.dim(2)});
  if (n_cap < cfg.n_min || (cfg.eta == 0.0 && cfg.xi == 0.0)) {
    out.total = out.kd;
    return out;
  }
  out.n = static_cast<std::size_t>(
      rng.uniform_int(static_cast<std::int64_t>(cfg.n_min), static_cast<std::int64_t>(n_cap)));
  const ChunkStats st = chunk_stats(h_t, out.n, cfg.mean_pseudo_var);
  const ChunkStats ss = chunk_stats(h_s, out.n, cfg.mean_pseudo_var);
  out.rfl = rfl_loss(st, ss, proj);
  out.rul = rul_loss(st, ss, proj);
  out.total = rkd_loss(out.kd, out.rfl, out.rul, cfg.eta, cfg.xi);
  return out;
}

// Top-1 accuracy of `model` in eval mode; the predicted class per item is
// written to `predictions` when given.
inline double accuracy(ModelBundle& model, const LabelledCorpus& corpus, std::vector<std::size_t>* predictions = nullptr,
                       std::size_t batch = 64) {
  if (corpus.size() == 0) throw ContractError("accuracy on an empty corpus");
  std::size_t correct = 0;
  for (std::size_t start = 0; start < corpus.size(); start += batch) {
    const std::size_t end = std::min(corpus.size(), start + batch);
    const std::vector<Spectrogram> items(corpus.items.begin() + static_cast<std::ptrdiff_t>(start),
                                         corpus.items.begin() + static_cast<std::ptrdiff_t>(end));
    const Tensor logits = model.forward_logits(stack(items));
    const std::size_t c = logits.dim(1);
    for (std::size_t i = 0; i < end - start; ++i) {
      const auto row = logits.values().subspan(i * c, c);
      const auto pred = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
      if (predictions) predictions->push_back(pred);
      if (pred == corpus.labels[start + i]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(corpus.size());
}

struct KdResult {
  std::vector<double> trace, rfl_trace, rul_trace;
  std::optional<double> eval_accuracy;

  static double mean_of(const std::vector<double>& v) {
    if (v.empty()) return 0.0;
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  }
};

// Student (and projections) trained on minibatches drawn from the bank.
// `opt` must hold the student and projection parameters.
inline KdResult kd_epoch(ModelBundle& teacher, ModelBundle& student, const ProjectionPair& proj, Adam& opt,
                         const MemoryBank& bank, const DistillConfig& cfg, Rng& rng,
                         const LabelledCorpus* eval = nullptr) {
  cfg.validate();
  if (bank.empty()) throw ContractError("knowledge distillation needs a nonempty memory bank");
  teacher.set_trainable(false);
  student.set_trainable(true);
  KdResult result;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const auto x = bank_sample(bank, cfg.batch, rng);
    const auto loss = kd_objective(teacher, student, proj, *x, cfg, rng);
    const double value = loss.total.item();
    if (!std::isfinite(value))
      throw NumericalError("distillation loss is not finite at step " + std::to_string(step));
    result.trace.push_back(value);
    if (loss.rfl.node()) result.rfl_trace.push_back(loss.rfl.item());
    if (loss.rul.node()) result.rul_trace.push_back(loss.rul.item());
    backward(loss.total);
    opt.step();
  }
  if (eval) result.eval_accuracy = accuracy(student, *eval);
  return result;
}

}  // namespace frami
