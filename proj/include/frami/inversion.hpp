#pragma once

// Generator-based model inversion: chunking, the feature-invariant term,
// the feature-invariance contrastive loss, deep-inversion losses and the
// spectral memory bank of best batches.

#include <cmath>
#include <filesystem>
#include <cstdio>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "frami/corpus.hpp"
#include "frami/io.hpp"
#include "frami/losses.hpp"
#include "frami/nets.hpp"
#include "frami/optim.hpp"

namespace frami {

struct InversionConfig {
  double alpha = 1.0;      // BN statistics weight
  double beta = 1.0;       // class confidence weight
  double gamma = 1.0;      // adversarial weight
  double alpha_fic = 1.0;  // contrastive term in the total objective
  double beta_inv = 1.0;   // deep-inversion term in the total objective
  double tau = 0.07;
  double adv_tau = 1.0;
  std::size_t k_min = 2;
  std::size_t k_max = 4;
  std::size_t min_chunk_frames = 8;
  std::size_t steps = 200;
  std::size_t batch = 32;
  AudioMode mode = AudioMode::TID;
  bool use_fic = true;
  bool use_finv = true;
  bool standard_infonce = false;
  bool augment_inv = false;  // deep-inversion losses on an augmented copy
  double lr_generator = 1e-3;
  double lr_head = 1e-3;
  std::size_t latent_dim = 64;

  void validate() const {
    for (double w : {alpha, beta, gamma, alpha_fic, beta_inv})
      if (!(w >= 0.0)) throw ConfigError("inversion loss weights must be >= 0");
    if (!(tau > 0.0) || !(adv_tau > 0.0)) throw ConfigError("inversion temperatures must be > 0");
    if (k_min < 2 || k_max < k_min) throw ConfigError("need 2 <= k_min <= k_max");
    if (min_chunk_frames < 1) throw ConfigError("min_chunk_frames must be positive");
    if (steps == 0 || batch == 0) throw ConfigError("inversion steps and batch must be positive");
    if (!(lr_generator > 0.0) || !(lr_head > 0.0)) throw ConfigError("learning rates must be > 0");
  }
};

// ---------------------------------------------------------------- chunking

// First K-1 chunks have floor(T/K) frames; the last takes the remainder.
inline std::vector<std::size_t> chunk_lengths(std::size_t frames, std::size_t k, std::size_t min_frames = 8) {
  if (k == 0 || frames < k * min_frames)
    throw ContractError("cannot split " + std::to_string(frames) + " frames into " + std::to_string(k) +
                        " chunks of >= " + std::to_string(min_frames) + " frames");
  std::vector<std::size_t> len(k, frames / k);
  len.back() += frames % k;
  return len;
}

struct ChunkSet {
  std::vector<Spectrogram> chunks;
  std::size_t size() const { return chunks.size(); }
};

inline ChunkSet chunk_time(const Spectrogram& x, std::size_t k, std::size_t min_frames = 8) {
  ChunkSet out;
  std::size_t start = 0;
  for (std::size_t len : chunk_lengths(x.frames, k, min_frames)) {
    std::vector<std::size_t> idx(len);
    for (std::size_t t = 0; t < len; ++t) idx[t] = start + t;
    out.chunks.push_back(apply_index_map(x, idx));
    start += len;
  }
  return out;
}

// Time slices of a [B, F, T] batch with the same boundaries as chunk_time.
inline std::vector<Tensor> chunk_batch(const Tensor& x, std::size_t k, std::size_t min_frames = 8) {
  std::vector<Tensor> out;
  std::size_t start = 0;
  for (std::size_t len : chunk_lengths(x.dim(2), k, min_frames)) {
    out.push_back(slice(x, 2, start, len));
    start += len;
  }
  return out;
}

// ---------------------------------------------------------------- losses

// Mean pairwise similarity of chunk embeddings. Each tensor is [B, D]
// (or [D] for a single sample) of unit rows; the result is [B].
inline Tensor finv_term(const std::vector<Tensor>& chunk_embeddings) {
  const std::size_t k = chunk_embeddings.size();
  if (k < 2) throw ContractError("finv_term needs at least 2 chunk embeddings, got " + std::to_string(k));
  std::vector<Tensor> rows;
  for (const auto& e : chunk_embeddings) rows.push_back(e.rank() == 1 ? reshape(e, {1, e.dim(0)}) : e);
  Tensor acc;
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = i + 1; j < k; ++j) {
      Tensor s = rowwise_dot(rows[i], rows[j]);
      acc = acc.node() ? add(acc, s) : s;
    }
  return mul_scalar(acc, 2.0 / static_cast<double>(k * (k - 1)));
}

// Contrastive loss from precomputed similarities: pos [B], finv [B],
// neg [B, M] (excluded entries set to a large negative value).
// Mean over b of -(pos + finv)/tau + log sum_j exp(neg_j/tau); the
// standard form also puts the positive term in the denominator.
inline Tensor fic_from_similarities(const Tensor& pos, const Tensor& finv, const Tensor& neg, double tau,
                                    bool standard = false) {
  if (!(tau > 0.0)) throw ConfigError("contrastive temperature must be > 0");
  if (neg.rank() != 2 || neg.dim(1) == 0) throw ContractError("contrastive loss needs at least one negative");
  const std::size_t b = neg.dim(0);
  if (pos.size() != b || finv.size() != b) throw ShapeError("contrastive loss: positive/negative batch mismatch");
  const Tensor numer = mul_scalar(add(reshape(pos, {b}), reshape(finv, {b})), 1.0 / tau);
  Tensor logits = mul_scalar(neg, 1.0 / tau);
  if (standard) logits = concat({reshape(numer, {b, 1}), logits}, 1);
  return mean(sub(logsumexp_last(logits), numer));
}

inline constexpr double kExcluded = -1e9;

// Similarities of anchors [B, D] to the rest of the batch and to optional
// bank embeddings [M, D]; the diagonal (self) is excluded.
inline Tensor negative_similarities(const Tensor& anchors, const std::optional<Tensor>& bank) {
  const std::size_t b = anchors.dim(0);
  if (b < 2 && !bank) throw ContractError("no negatives: batch of 1 with an empty bank");
  std::vector<double> mask(b * b, 0.0);
  for (std::size_t i = 0; i < b; ++i) mask[i * b + i] = kExcluded;
  Tensor in_batch = add(matmul(anchors, transpose(anchors)), Tensor({b, b}, std::move(mask)));
  if (!bank) return in_batch;
  return concat({in_batch, matmul(anchors, transpose(*bank))}, 1);
}

struct FicInputs {
  Tensor anchors;                     // [B, D]
  Tensor positives;                   // [B, D]
  std::vector<Tensor> chunks;         // K x [B, D]; empty disables the invariant term
  std::optional<Tensor> bank;         // [M, D]
};

inline Tensor fic_loss(const FicInputs& in, double tau, bool standard = false) {
  const std::size_t b = in.anchors.dim(0);
  const Tensor pos = rowwise_dot(in.anchors, in.positives);
  const Tensor finv = in.chunks.empty() ? Tensor::zeros({b}) : finv_term(in.chunks);
  return fic_from_similarities(pos, finv, negative_similarities(in.anchors, in.bank), tau, standard);
}

inline Tensor cls_loss(const Tensor& teacher_logits, const std::vector<std::size_t>& targets) {
  return cross_entropy(teacher_logits, targets);
}

inline Tensor adv_loss(const Tensor& teacher_logits, const Tensor& student_logits, double tau) {
  return neg(kld(teacher_logits, student_logits, tau));
}

// Sum over recorded BN layers of the L2 distances between batch and
// running mean, and between batch and running standard deviation.
inline Tensor bn_loss(const std::vector<BnRecord>& records) {
  if (records.empty()) throw ConfigError("teacher has no batch-norm layers to match");
  Tensor acc;
  for (const auto& r : records) {
    const std::size_t c = r.running_mean.size();
    const Tensor mu = Tensor({c}, r.running_mean);
    const Tensor sd = Tensor({c}, r.running_std);
    Tensor term = add(l2_norm(sub(r.batch_mean, mu)), l2_norm(sub(r.batch_std, sd)));
    acc = acc.node() ? add(acc, term) : term;
  }
  return acc;
}

struct InvComponents {
  Tensor bn, cls, adv;
};

inline Tensor inv_loss(const InvComponents& c, const InversionConfig& cfg) {
  if (cfg.alpha < 0.0 || cfg.beta < 0.0 || cfg.gamma < 0.0) throw ConfigError("inversion loss weights must be >= 0");
  Tensor total = add(mul_scalar(c.bn, cfg.alpha), mul_scalar(c.cls, cfg.beta));
  return c.adv.node() ? add(total, mul_scalar(c.adv, cfg.gamma)) : total;
}

// ---------------------------------------------------------------- memory bank

struct BankEntry {
  Tensor batch;  // [B, F, T], values representable in float32
  std::size_t epoch = 0;
  double loss = 0.0;
  std::vector<std::size_t> targets;
};

class MemoryBank {
 public:
  void append(Tensor batch, std::size_t epoch, double loss, std::vector<std::size_t> targets) {
    if (batch.rank() != 3) throw ShapeError("bank entries must be [B, F, T], got " + to_string(batch.shape()));
    if (!entries_.empty() && (batch.dim(1) != entries_[0].batch.dim(1) || batch.dim(2) != entries_[0].batch.dim(2)))
      throw ShapeError("bank entry shape " + to_string(batch.shape()) + " differs from " +
                       to_string(entries_[0].batch.shape()));
    std::vector<double> v(batch.values().begin(), batch.values().end());
    round_to_f32(v);
    entries_.push_back({Tensor(batch.shape(), std::move(v)), epoch, loss, std::move(targets)});
    items_ += batch.dim(0);
  }

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  std::size_t item_count() const { return items_; }
  const std::vector<BankEntry>& entries() const { return entries_; }

  // One stored spectrogram as a [F, T] slice of its entry.
  std::pair<std::size_t, std::size_t> locate(std::size_t item) const {
    for (std::size_t e = 0; e < entries_.size(); ++e) {
      if (item < entries_[e].batch.dim(0)) return {e, item};
      item -= entries_[e].batch.dim(0);
    }
    throw IndexError("bank item " + std::to_string(item) + " out of range");
  }

  void save(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    json manifest;
    manifest["entries"] = json::array();
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      const auto& e = entries_[i];
      char file[32];
      std::snprintf(file, sizeof file, "entry_%04zu.f32", i);
      const auto bytes = encode_f32(e.batch.values());
      write_file_atomic(dir / file, bytes);
      manifest["entries"].push_back({{"epoch", e.epoch},
                                     {"loss", e.loss},
                                     {"targets", e.targets},
                                     {"shape", e.batch.shape()},
                                     {"file", file},
                                     {"sha256", sha256_hex(bytes)}});
    }
    write_json(dir / "manifest.json", manifest);
  }

  static MemoryBank load(const std::filesystem::path& dir) {
    if (!std::filesystem::exists(dir / "manifest.json"))
      throw IngestionError("no bank manifest in " + dir.string());
    const json manifest = read_json(dir / "manifest.json");
    MemoryBank bank;
    for (const auto& e : manifest.at("entries")) {
      const auto bytes = read_file(dir / e.at("file").get<std::string>());
      if (sha256_hex(bytes) != e.at("sha256").get<std::string>())
        throw IntegrityError("bank payload hash mismatch: " + e.at("file").get<std::string>());
      const auto shape = e.at("shape").get<Shape>();
      auto values = decode_f32(bytes);
      if (values.size() != numel(shape)) throw IntegrityError("bank payload size mismatch");
      bank.append(Tensor(shape, std::move(values)), e.at("epoch"), e.at("loss"),
                  e.at("targets").get<std::vector<std::size_t>>());
    }
    return bank;
  }

 private:
  std::vector<BankEntry> entries_;
  std::size_t items_ = 0;
};

// n stored spectrograms drawn uniformly with replacement over all entries,
// stacked to [n, F, T]; nothing when n == 0 or the bank is empty.
inline std::optional<Tensor> bank_sample(const MemoryBank& bank, std::size_t n, Rng& rng,
                                         std::vector<std::size_t>* targets = nullptr) {
  if (n == 0 || bank.empty()) return std::nullopt;
  const Shape& s = bank.entries()[0].batch.shape();
  const std::size_t per = s[1] * s[2];
  std::vector<double> out;
  out.reserve(n * per);
  for (std::size_t i = 0; i < n; ++i) {
    const auto [e, item] = bank.locate(rng.uniform_index(bank.item_count()));
    const auto& entry = bank.entries()[e];
    const auto v = entry.batch.values().subspan(item * per, per);
    out.insert(out.end(), v.begin(), v.end());
    if (targets) targets->push_back(item < entry.targets.size() ? entry.targets[item] : 0);
  }
  return Tensor({n, s[1], s[2]}, std::move(out));
}

// ---------------------------------------------------------------- epoch

struct InversionResult {
  Tensor best_batch;
  double best_loss = std::numeric_limits<double>::infinity();
  std::size_t best_step = 0;
  std::vector<double> trace;
  std::vector<std::size_t> targets;
  double first_confidence = 0.0;  // teacher probability of the targets, step-0 batch
  double best_confidence = 0.0;   // same, best batch
};

inline std::vector<std::size_t> round_robin_targets(std::size_t batch, std::size_t classes) {
  std::vector<std::size_t> t(batch);
  for (std::size_t i = 0; i < batch; ++i) t[i] = i % classes;
  return t;
}

inline double target_confidence(ModelBundle& teacher, const Tensor& x, const std::vector<std::size_t>& targets) {
  const Tensor p = softmax(teacher.forward_logits(x.detach()));
  const std::size_t c = p.dim(1);
  double acc = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) acc += p[i * c + targets[i]];
  return acc / static_cast<double>(targets.size());
}

// Generator initialized so its output matches the teacher's input statistics.
inline Generator make_generator(ModelBundle& teacher, std::size_t frames, std::size_t latent_dim, Rng& rng) {
  Generator g(frames, rng, latent_dim, teacher.input_bins());
  const BatchNorm& in = *teacher.batch_norms().front();
  std::vector<double> sd(in.channels());
  for (std::size_t c = 0; c < sd.size(); ++c) sd[c] = std::sqrt(in.running_var()[c] + BatchNorm::kEps);
  g.match_output_stats(in.running_mean(), sd);
  return g;
}

// Losses for one generated batch. Exposed for gradient checks.
struct InversionStepLoss {
  Tensor total;
  Tensor fic;
  Tensor inv;
  std::size_t chunks = 0;  // K of the feature-invariance term, 0 when it is off
};

inline InversionStepLoss inversion_objective(const Tensor& x, ModelBundle& teacher, ModelBundle* student,
                                             const Discriminator& head, const MemoryBank& bank,
                                             const std::vector<std::size_t>& targets, const InversionConfig& cfg,
                                             Rng& rng) {
  const std::size_t b = x.dim(0), frames = x.dim(2);
  const Tensor inv_input = cfg.augment_inv ? gather_last(x, batch_index_maps(b, frames, cfg.mode, rng)) : x;
  std::vector<BnRecord> records;
  const Tensor t_pooled = teacher.pooled(inv_input, {Mode::Eval, &records});
  const Tensor t_logits = teacher.classify(t_pooled);
  InvComponents parts{bn_loss(records), cls_loss(t_logits, targets), {}};
  if (student && cfg.gamma > 0.0) parts.adv = adv_loss(t_logits, student->forward_logits(inv_input), cfg.adv_tau);
  InversionStepLoss out{{}, {}, inv_loss(parts, cfg), 0};
  out.total = mul_scalar(out.inv, cfg.beta_inv);
  if (!cfg.use_fic || cfg.alpha_fic == 0.0) return out;

  FicInputs in;
  in.anchors = cfg.augment_inv ? embed(head, teacher, x) : head.project(t_pooled);
  in.positives = embed(head, teacher, gather_last(x, batch_index_maps(b, frames, cfg.mode, rng)));
  if (cfg.use_finv && cfg.mode == AudioMode::TID) {
    const std::size_t k_cap = std::min(cfg.k_max, frames / cfg.min_chunk_frames);
    if (k_cap >= cfg.k_min) {
      const auto k = static_cast<std::size_t>(
          rng.uniform_int(static_cast<std::int64_t>(cfg.k_min), static_cast<std::int64_t>(k_cap)));
      for (const auto& chunk : chunk_batch(x, k, cfg.min_chunk_frames)) in.chunks.push_back(embed(head, teacher, chunk));
      out.chunks = k;
    }
  }
  if (auto negatives = bank_sample(bank, cfg.batch, rng)) in.bank = embed(head, teacher, *negatives);
  out.fic = fic_loss(in, cfg.tau, cfg.standard_infonce);
  out.total = add(mul_scalar(out.fic, cfg.alpha_fic), out.total);
  return out;
}

// One outer-epoch inversion phase: a fresh generator is optimized together
// with the projection head; teacher and student stay frozen. The batch with
// the lowest total loss is returned (and appended to the bank by the caller).
inline InversionResult inversion_epoch(ModelBundle& teacher, ModelBundle* student, Discriminator& head, Adam& head_opt,
                                       const MemoryBank& bank, std::size_t frames, const InversionConfig& cfg,
                                       Rng& rng, std::size_t epoch = 0) {
  cfg.validate();
  teacher.set_trainable(false);
  if (student) student->set_trainable(false);
  Generator gen = make_generator(teacher, frames, cfg.latent_dim, rng);
  Adam gen_opt(gen.parameters(), {.lr = cfg.lr_generator});
  const auto targets = round_robin_targets(cfg.batch, teacher.class_count());
  const bool train_head = cfg.use_fic && cfg.alpha_fic > 0.0;

  InversionResult result;
  result.targets = targets;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const Tensor x = gen.generate(gen.sample_latent(cfg.batch, rng));
    const auto loss = inversion_objective(x, teacher, student, head, bank, targets, cfg, rng);
    const double value = loss.total.item();
    if (!std::isfinite(value))
      throw NumericalError("inversion loss is not finite at epoch " + std::to_string(epoch) + " step " +
                           std::to_string(step));
    result.trace.push_back(value);
    if (step == 0) result.first_confidence = target_confidence(teacher, x, targets);
    if (value < result.best_loss) {
      result.best_loss = value;
      result.best_step = step;
      result.best_batch = x.detach();
    }
    backward(loss.total);
    gen_opt.step();
    if (train_head) head_opt.step();
    else head_opt.zero_grad();
  }
  result.best_confidence = target_confidence(teacher, result.best_batch, targets);
  return result;
}

}  // namespace frami
