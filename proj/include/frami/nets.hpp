#pragma once

// Convolutional backbones with statistics pooling, the spectrogram
// generator and the projection head used as instance discriminator.
//
// Spectrogram batches are [B, bins, T]. Inside the backbone they are laid
// out as [B, bins, 1, T] so that mel bins act as input channels and every
// convolution slides along time only.

#include <cmath>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "frami/io.hpp"
#include "frami/ops.hpp"
#include "frami/rng.hpp"
#include "frami/tensor.hpp"

namespace frami {

enum class Mode { Train, Eval };

// Batch statistics captured at one BN layer: differentiable batch moments
// of the layer input next to the layer's stored running statistics.
struct BnRecord {
  std::string layer;
  Tensor batch_mean;
  Tensor batch_std;
  std::vector<double> running_mean;
  std::vector<double> running_std;
};

struct ForwardContext {
  Mode mode = Mode::Eval;
  std::vector<BnRecord>* records = nullptr;
};

namespace detail {

inline Tensor he_uniform(const Shape& shape, std::size_t fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = rng.uniform(-bound, bound);
  return Tensor(shape, std::move(v), true);
}

}  // namespace detail

class BatchNorm {
 public:
  static constexpr double kMomentum = 0.1;
  static constexpr double kEps = 1e-5;

  BatchNorm() = default;
  BatchNorm(std::string name, std::size_t channels)
      : name_(std::move(name)),
        gamma_(Tensor::full({channels}, 1.0, true)),
        beta_(Tensor::zeros({channels}, true)),
        running_mean_(channels, 0.0),
        running_var_(channels, 1.0) {}

  Tensor forward(const Tensor& x, const ForwardContext& ctx) {
    if (ctx.records) {
      std::vector<double> rs(running_var_.size());
      for (std::size_t c = 0; c < rs.size(); ++c) rs[c] = std::sqrt(running_var_[c] + kEps);
      ctx.records->push_back({name_, channel_mean(x), channel_std(x, kEps), running_mean_, std::move(rs)});
    }
    if (ctx.mode == Mode::Eval) return batch_norm_eval(x, gamma_, beta_, running_mean_, running_var_, kEps);
    BatchMoments m;
    Tensor y = batch_norm_train(x, gamma_, beta_, kEps, &m);
    for (std::size_t c = 0; c < running_mean_.size(); ++c) {
      running_mean_[c] = (1.0 - kMomentum) * running_mean_[c] + kMomentum * m.mean[c];
      running_var_[c] = (1.0 - kMomentum) * running_var_[c] + kMomentum * m.var[c];
    }
    return y;
  }

  const std::string& name() const { return name_; }
  std::size_t channels() const { return running_mean_.size(); }
  std::vector<double>& running_mean() { return running_mean_; }
  std::vector<double>& running_var() { return running_var_; }
  const std::vector<double>& running_mean() const { return running_mean_; }
  const std::vector<double>& running_var() const { return running_var_; }
  Tensor& gamma() { return gamma_; }
  Tensor& beta() { return beta_; }

  std::vector<Parameter> parameters() const { return {{name_ + ".gamma", gamma_}, {name_ + ".beta", beta_}}; }

 private:
  std::string name_;
  Tensor gamma_, beta_;
  std::vector<double> running_mean_, running_var_;
};

// ---------------------------------------------------------------- backbone

struct ArchSpec {
  std::string name;
  std::size_t channels = 0;
  std::vector<std::size_t> strides;  // time stride per block
  std::size_t kernel = 3;
};

inline ArchSpec arch_spec(const std::string& name) {
  if (name == "tiny_t") return {name, 64, {1, 2, 1, 2}};
  if (name == "tiny_s") return {name, 32, {1, 2, 1}};
  throw ConfigError("unknown architecture '" + name + "' (expected tiny_t or tiny_s)");
}

// Population mean and standard deviation over time, concatenated: [B, F, T] -> [B, 2F].
inline Tensor stats_pool(const Tensor& h) {
  if (h.rank() != 3) throw ShapeError("stats_pool expects [B, F, T], got " + to_string(h.shape()));
  if (h.dim(2) < 2) throw DomainError("stats_pool needs at least 2 frames, got " + std::to_string(h.dim(2)));
  return concat({mean_axis(h, 2), std_axis(h, 2)}, 1);
}

struct ConvBlock {
  Tensor weight;  // [out, in, 1, kernel]
  BatchNorm bn;
  std::size_t stride = 1;
  std::string name;

  Tensor forward(const Tensor& x, const ForwardContext& ctx) {
    const std::size_t half = weight.dim(3) / 2;
    Tensor padded = half ? pad_replicate(x, 3, half, half) : x;
    return relu(bn.forward(conv2d(padded, weight, {1, stride, 0, 0}), ctx));
  }
};

class ModelBundle {
 public:
  ModelBundle(ArchSpec arch, std::size_t class_count, Rng& rng, std::size_t input_bins = 40)
      : arch_(std::move(arch)), class_count_(class_count), input_bins_(input_bins) {
    if (arch_.channels == 0 || arch_.strides.empty()) throw ConfigError("architecture has no blocks");
    if (class_count_ < 2) throw ConfigError("class_count must be at least 2");
    input_bn_ = BatchNorm("input_bn", input_bins_);
    std::size_t in = input_bins_;
    for (std::size_t i = 0; i < arch_.strides.size(); ++i) {
      const std::string name = "block" + std::to_string(i);
      const std::size_t out = arch_.channels;
      blocks_.push_back({detail::he_uniform({out, in, 1, arch_.kernel}, in * arch_.kernel, rng),
                         BatchNorm(name + ".bn", out), arch_.strides[i], name});
      in = out;
    }
    classifier_w_ = detail::he_uniform({class_count_, 2 * arch_.channels}, 2 * arch_.channels, rng);
    classifier_b_ = Tensor::zeros({class_count_}, true);
  }

  ModelBundle(const ModelBundle&) = delete;
  ModelBundle& operator=(const ModelBundle&) = delete;
  ModelBundle(ModelBundle&&) = default;
  ModelBundle& operator=(ModelBundle&&) = default;

  const ArchSpec& arch() const { return arch_; }
  std::size_t class_count() const { return class_count_; }
  std::size_t input_bins() const { return input_bins_; }
  std::size_t frame_dim() const { return arch_.channels; }
  std::size_t embedding_dim() const { return 2 * arch_.channels; }

  std::size_t output_frames(std::size_t frames) const {
    for (std::size_t s : arch_.strides) frames = (frames - 1) / s + 1;
    return frames;
  }

  // [B, bins, T] -> [B, F, T'].
  Tensor frame_level(const Tensor& x, const ForwardContext& ctx = {}) {
    if (x.rank() != 3 || x.dim(1) != input_bins_)
      throw ShapeError("model input must be [B, " + std::to_string(input_bins_) + ", T], got " +
                       to_string(x.shape()));
    if (output_frames(x.dim(2)) < 2)
      throw ShapeError("input of " + std::to_string(x.dim(2)) + " frames is too short for " + arch_.name);
    const std::size_t b = x.dim(0);
    Tensor h = input_bn_.forward(reshape(x, {b, input_bins_, 1, x.dim(2)}), ctx);
    for (auto& block : blocks_) h = block.forward(h, ctx);
    return reshape(h, {b, h.dim(1), h.dim(3)});
  }

  Tensor pooled(const Tensor& x, const ForwardContext& ctx = {}) { return stats_pool(frame_level(x, ctx)); }

  Tensor classify(const Tensor& pooled_features) { return linear(pooled_features, classifier_w_, classifier_b_); }

  Tensor forward_logits(const Tensor& x, const ForwardContext& ctx = {}) { return classify(pooled(x, ctx)); }

  std::vector<BatchNorm*> batch_norms() {
    std::vector<BatchNorm*> out{&input_bn_};
    for (auto& block : blocks_) out.push_back(&block.bn);
    return out;
  }

  std::vector<Parameter> parameters() const {
    std::vector<Parameter> out = input_bn_.parameters();
    for (const auto& block : blocks_) {
      out.push_back({block.name + ".conv.weight", block.weight});
      for (auto& p : block.bn.parameters()) out.push_back(std::move(p));
    }
    out.push_back({"classifier.weight", classifier_w_});
    out.push_back({"classifier.bias", classifier_b_});
    return out;
  }

  void set_trainable(bool on) {
    for (auto& p : parameters()) p.tensor.set_requires_grad(on);
  }

 private:
  ArchSpec arch_;
  std::size_t class_count_ = 0;
  std::size_t input_bins_ = 40;
  BatchNorm input_bn_;
  std::vector<ConvBlock> blocks_;
  Tensor classifier_w_, classifier_b_;
};

inline ModelBundle build_model(const std::string& arch, std::size_t class_count, Rng& rng,
                               std::size_t input_bins = 40) {
  return ModelBundle(arch_spec(arch), class_count, rng, input_bins);
}

// Stacks spectrograms of equal shape into a [B, bins, T] constant tensor.
inline Tensor stack(const std::vector<Spectrogram>& items) {
  if (items.empty()) throw ContractError("cannot stack an empty batch");
  const std::size_t f = items[0].mel_bins, t = items[0].frames;
  std::vector<double> v;
  v.reserve(items.size() * f * t);
  for (const auto& s : items) {
    if (s.mel_bins != f || s.frames != t)
      throw ShapeError("stack: spectrogram " + std::to_string(s.mel_bins) + "x" + std::to_string(s.frames) +
                       " differs from " + std::to_string(f) + "x" + std::to_string(t));
    v.insert(v.end(), s.data.begin(), s.data.end());
  }
  return Tensor({items.size(), f, t}, std::move(v));
}

inline std::vector<Spectrogram> unstack(const Tensor& x, const MelConfig& mel = {}) {
  if (x.rank() != 3) throw ShapeError("unstack expects [B, bins, T], got " + to_string(x.shape()));
  std::vector<Spectrogram> out;
  const std::size_t f = x.dim(1), t = x.dim(2);
  const auto v = x.values();
  for (std::size_t b = 0; b < x.dim(0); ++b) {
    Spectrogram s;
    s.mel_bins = f;
    s.frames = t;
    s.hop_ms = 1000.0 * static_cast<double>(mel.hop_length) / mel.sample_rate;
    s.win_ms = 1000.0 * static_cast<double>(mel.win_length) / mel.sample_rate;
    s.data.assign(v.begin() + static_cast<std::ptrdiff_t>(b * f * t),
                  v.begin() + static_cast<std::ptrdiff_t>((b + 1) * f * t));
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------- generator

class Generator {
 public:
  Generator(std::size_t frames, Rng& rng, std::size_t latent_dim = 64, std::size_t bins = 40,
            std::size_t width = 64)
      : frames_(frames), latent_dim_(latent_dim), bins_(bins), width_(width), base_((frames + 3) / 4) {
    if (frames < 2) throw ConfigError("generator needs at least 2 output frames");
    fc_w_ = detail::he_uniform({width_ * base_, latent_dim_}, latent_dim_, rng);
    fc_b_ = Tensor::zeros({width_ * base_}, true);
    bn0_ = BatchNorm("gen.bn0", width_);
    conv1_ = detail::he_uniform({width_, width_, 1, 3}, width_ * 3, rng);
    bn1_ = BatchNorm("gen.bn1", width_);
    conv2_ = detail::he_uniform({bins_, width_, 1, 3}, width_ * 3, rng);
    out_bn_ = BatchNorm("gen.out_bn", bins_);
  }

  Generator(const Generator&) = delete;
  Generator& operator=(const Generator&) = delete;
  Generator(Generator&&) = default;
  Generator& operator=(Generator&&) = default;

  std::size_t latent_dim() const { return latent_dim_; }
  std::size_t frames() const { return frames_; }
  std::size_t bins() const { return bins_; }

  // Sets the output layer's affine parameters to a target per-bin mean and
  // standard deviation.
  void match_output_stats(const std::vector<double>& mean, const std::vector<double>& sd) {
    if (mean.size() != bins_ || sd.size() != bins_) throw ShapeError("output statistics width mismatch");
    auto g = out_bn_.gamma().mutable_values();
    auto b = out_bn_.beta().mutable_values();
    for (std::size_t i = 0; i < bins_; ++i) {
      g[i] = sd[i];
      b[i] = mean[i];
    }
  }

  Tensor sample_latent(std::size_t batch, Rng& rng) const {
    std::vector<double> v(batch * latent_dim_);
    for (auto& x : v) x = rng.normal();
    return Tensor({batch, latent_dim_}, std::move(v));
  }

  // z [B, latent] -> [B, bins, frames]. Batch statistics are always used.
  Tensor generate(const Tensor& z) {
    if (z.rank() != 2 || z.dim(1) != latent_dim_)
      throw ShapeError("latent must be [B, " + std::to_string(latent_dim_) + "], got " + to_string(z.shape()));
    const std::size_t b = z.dim(0);
    const ForwardContext train{Mode::Train, nullptr};
    Tensor h = reshape(linear(z, fc_w_, fc_b_), {b, width_, 1, base_});
    h = relu(bn0_.forward(h, train));
    h = pad_replicate(upsample_nearest(h, 3, 2), 3, 1, 1);
    h = relu(bn1_.forward(conv2d(h, conv1_), train));
    h = pad_replicate(upsample_nearest(h, 3, 2), 3, 1, 1);
    h = reshape(conv2d(h, conv2_), {b, bins_, 4 * base_});
    if (4 * base_ != frames_) h = slice(h, 2, 0, frames_);
    return out_bn_.forward(h, train);
  }

  std::vector<Parameter> parameters() const {
    std::vector<Parameter> out{{"gen.fc.weight", fc_w_}, {"gen.fc.bias", fc_b_}};
    for (auto& p : bn0_.parameters()) out.push_back(std::move(p));
    out.push_back({"gen.conv1.weight", conv1_});
    for (auto& p : bn1_.parameters()) out.push_back(std::move(p));
    out.push_back({"gen.conv2.weight", conv2_});
    for (auto& p : out_bn_.parameters()) out.push_back(std::move(p));
    return out;
  }

 private:
  std::size_t frames_, latent_dim_, bins_, width_, base_;
  Tensor fc_w_, fc_b_, conv1_, conv2_;
  BatchNorm bn0_, bn1_, out_bn_;
};

// ---------------------------------------------------------------- discriminator head

class Discriminator {
 public:
  Discriminator(std::size_t input_dim, Rng& rng, std::size_t hidden = 256, std::size_t output = 128)
      : w1_(detail::he_uniform({hidden, input_dim}, input_dim, rng)),
        b1_(Tensor::zeros({hidden}, true)),
        w2_(detail::he_uniform({output, hidden}, hidden, rng)),
        b2_(Tensor::zeros({output}, true)) {}

  std::size_t input_dim() const { return w1_.dim(1); }
  std::size_t output_dim() const { return w2_.dim(0); }

  // Pooled features [B, input_dim] -> unit-norm embeddings [B, output_dim].
  Tensor project(const Tensor& pooled) const {
    return normalize_rows(linear(relu(linear(pooled, w1_, b1_)), w2_, b2_));
  }

  std::vector<Parameter> parameters() const {
    return {{"head.fc1.weight", w1_}, {"head.fc1.bias", b1_}, {"head.fc2.weight", w2_}, {"head.fc2.bias", b2_}};
  }

 private:
  Tensor w1_, b1_, w2_, b2_;
};

// Teacher frame-level features, pooled, projected and normalized.
inline Tensor embed(const Discriminator& head, ModelBundle& teacher, const Tensor& x) {
  return head.project(teacher.pooled(x, {Mode::Eval, nullptr}));
}

// ---------------------------------------------------------------- checkpoints

// Writes `stem.json` (architecture, parameter layout, BN running statistics)
// and `stem.bin` (float32 little-endian parameters in manifest order).
inline void save_checkpoint(ModelBundle& m, const std::filesystem::path& stem) {
  json manifest;
  manifest["arch"] = {{"name", m.arch().name}, {"channels", m.arch().channels}, {"strides", m.arch().strides},
                      {"kernel", m.arch().kernel}};
  manifest["class_count"] = m.class_count();
  manifest["input_bins"] = m.input_bins();
  std::vector<double> flat;
  json params = json::array();
  for (const auto& p : m.parameters()) {
    params.push_back({{"name", p.name}, {"shape", p.tensor.shape()}});
    const auto v = p.tensor.values();
    flat.insert(flat.end(), v.begin(), v.end());
  }
  manifest["parameters"] = params;
  json stats = json::array();
  for (const auto* bn : m.batch_norms())
    stats.push_back({{"name", bn->name()}, {"mean", bn->running_mean()}, {"var", bn->running_var()}});
  manifest["batch_norm"] = stats;
  const auto bytes = encode_f32(flat);
  manifest["sha256"] = sha256_hex(bytes);
  write_file_atomic(stem.string() + ".bin", bytes);
  write_json(stem.string() + ".json", manifest);
}

inline ModelBundle load_checkpoint(const std::filesystem::path& stem) {
  const json manifest = read_json(stem.string() + ".json");
  const auto bytes = read_file(stem.string() + ".bin");
  if (sha256_hex(bytes) != manifest.at("sha256").get<std::string>())
    throw IntegrityError("checkpoint payload hash mismatch: " + stem.string() + ".bin");
  ArchSpec arch{manifest.at("arch").at("name"), manifest.at("arch").at("channels"),
                manifest.at("arch").at("strides").get<std::vector<std::size_t>>(), manifest.at("arch").at("kernel")};
  Rng rng(0);
  ModelBundle m(arch, manifest.at("class_count").get<std::size_t>(), rng,
                manifest.at("input_bins").get<std::size_t>());
  const auto flat = decode_f32(bytes);
  const auto params = m.parameters();
  const auto& listed = manifest.at("parameters");
  if (listed.size() != params.size()) throw IntegrityError("checkpoint parameter count mismatch");
  std::size_t offset = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (listed[i].at("name") != params[i].name || listed[i].at("shape").get<Shape>() != params[i].tensor.shape())
      throw IntegrityError("checkpoint parameter layout mismatch at " + params[i].name);
    Tensor target = params[i].tensor;
    auto dst = target.mutable_values();
    if (offset + dst.size() > flat.size()) throw IntegrityError("checkpoint payload truncated");
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(offset), dst.size(), dst.begin());
    offset += dst.size();
  }
  if (offset != flat.size()) throw IntegrityError("checkpoint payload has trailing data");
  auto bns = m.batch_norms();
  const auto& stats = manifest.at("batch_norm");
  if (stats.size() != bns.size()) throw IntegrityError("checkpoint batch-norm count mismatch");
  for (std::size_t i = 0; i < bns.size(); ++i) {
    bns[i]->running_mean() = stats[i].at("mean").get<std::vector<double>>();
    bns[i]->running_var() = stats[i].at("var").get<std::vector<double>>();
  }
  return m;
}

}  // namespace frami
