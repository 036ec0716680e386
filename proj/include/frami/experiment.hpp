#pragma once

// Experiment lifecycle: corpus preparation, teacher training, the outer
// inversion + distillation loop for every method, and evaluation.

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "frami/config.hpp"
#include "frami/distill.hpp"
#include "frami/inversion.hpp"
#include "frami/nets.hpp"

namespace frami {

inline constexpr const char* kCodeVersion = "frami 1.0.0";

namespace fs = std::filesystem;

// ---------------------------------------------------------------- corpora

struct CorpusPair {
  LabelledCorpus train;
  LabelledCorpus eval;
};

inline void save_corpus(const fs::path& dir, const LabelledCorpus& corpus) {
  fs::create_directories(dir);
  json items = json::array();
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    char stem[32];
    std::snprintf(stem, sizeof stem, "item_%05zu", i);
    save_spectrogram(dir / stem, corpus.items[i]);
    items.push_back({{"stem", stem}, {"label", corpus.labels[i]}});
  }
  write_json(dir / "labels.json", {{"class_count", corpus.class_count}, {"mode", to_string(corpus.mode)}, {"items", items}});
}

inline LabelledCorpus load_corpus(const fs::path& dir) {
  if (!fs::exists(dir / "labels.json")) throw IngestionError("no labels.json in " + dir.string());
  const json j = read_json(dir / "labels.json");
  LabelledCorpus corpus;
  corpus.class_count = j.at("class_count");
  corpus.mode = parse_mode(j.at("mode"));
  for (const auto& item : j.at("items")) {
    corpus.items.push_back(load_spectrogram(dir / item.at("stem").get<std::string>()));
    corpus.labels.push_back(item.at("label"));
    if (corpus.labels.back() >= corpus.class_count) throw IngestionError("label out of range in " + dir.string());
  }
  return corpus;
}

// `<root>/<class>/*.wav`, classes in name order; every third file of a
// class (by name) is held out.
inline CorpusPair load_wav_tree(const fs::path& root, AudioMode mode, const MelConfig& mel = {}) {
  std::vector<fs::path> classes;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) classes.push_back(e.path());
  std::sort(classes.begin(), classes.end());
  if (classes.size() < 2) throw IngestionError("need at least 2 class directories under " + root.string());
  CorpusPair out;
  out.train.class_count = out.eval.class_count = classes.size();
  out.train.mode = out.eval.mode = mode;
  std::size_t frames = 0;
  for (std::size_t c = 0; c < classes.size(); ++c) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(classes[c]))
      if (e.is_regular_file() && e.path().extension() == ".wav") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    if (files.size() < 2) throw IngestionError("class " + classes[c].filename().string() + " has fewer than 2 WAV files");
    for (std::size_t i = 0; i < files.size(); ++i) {
      Spectrogram s = mel_spectrogram(load_wav(files[i], mel.sample_rate), mel);
      if (frames == 0) frames = s.frames;
      if (s.frames != frames)
        throw IngestionError(files[i].string() + " yields " + std::to_string(s.frames) + " frames, expected " +
                             std::to_string(frames) + " (all clips must share one duration)");
      auto& dst = i % 3 == 2 ? out.eval : out.train;
      dst.items.push_back(std::move(s));
      dst.labels.push_back(c);
    }
  }
  return out;
}

inline CorpusPair load_data(const DataConfig& d) {
  if (d.source == "synthetic") {
    const Rng root(d.seed);
    Rng train_rng = root.fork(1), eval_rng = root.fork(2);
    CorpusSpec spec{d.classes, d.items_per_class, d.duration_s, d.mode, d.noise_level, d.freq_jitter};
    CorpusSpec held = spec;
    held.items_per_class = d.eval_items_per_class;
    return {synth_corpus(train_rng, spec), synth_corpus(eval_rng, held)};
  }
  if (!fs::exists(d.path)) throw ConfigError("corpus path does not exist: " + d.path);
  if (d.source == "corpus_dir") return {load_corpus(fs::path(d.path) / "train"), load_corpus(fs::path(d.path) / "eval")};
  return load_wav_tree(d.path, d.mode);
}

inline void check_data_paths(const DataConfig& d) {
  if (d.source != "synthetic" && !fs::exists(d.path)) throw ConfigError("corpus path does not exist: " + d.path);
}

// ---------------------------------------------------------------- evaluation

struct EvalReport {
  double accuracy = 0.0;
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]

  json to_json() const { return {{"accuracy", accuracy}, {"confusion", confusion}}; }
};

inline EvalReport evaluate(ModelBundle& model, const LabelledCorpus& corpus) {
  if (model.class_count() != corpus.class_count)
    throw ConfigError("model has " + std::to_string(model.class_count()) + " classes, corpus has " +
                      std::to_string(corpus.class_count));
  std::vector<std::size_t> pred;
  EvalReport r;
  r.accuracy = accuracy(model, corpus, &pred);
  r.confusion.assign(corpus.class_count, std::vector<std::size_t>(corpus.class_count, 0));
  for (std::size_t i = 0; i < pred.size(); ++i) ++r.confusion[corpus.labels[i]][pred[i]];
  return r;
}

// ---------------------------------------------------------------- supervised training

inline Tensor gather_batch(const LabelledCorpus& corpus, const std::vector<std::size_t>& idx,
                           std::vector<std::size_t>* labels = nullptr) {
  std::vector<Spectrogram> items;
  for (auto i : idx) {
    items.push_back(corpus.items[i]);
    if (labels) labels->push_back(corpus.labels[i]);
  }
  return stack(items);
}

// One shuffled pass of cross-entropy training; returns the mean loss.
inline double supervised_epoch(ModelBundle& model, Adam& opt, const LabelledCorpus& corpus, std::size_t batch,
                               Rng& rng) {
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.uniform_index(i)]);
  double total = 0.0;
  std::size_t steps = 0;
  for (std::size_t start = 0; start < order.size(); start += batch) {
    const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                       order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), start + batch)));
    if (idx.size() < 2) continue;
    std::vector<std::size_t> labels;
    const Tensor x = gather_batch(corpus, idx, &labels);
    const Tensor loss = cross_entropy(model.forward_logits(x, {Mode::Train, nullptr}), labels);
    if (!std::isfinite(loss.item())) throw NumericalError("supervised loss is not finite");
    total += loss.item();
    ++steps;
    backward(loss);
    opt.step();
  }
  return steps ? total / static_cast<double>(steps) : 0.0;
}

inline double mean_cross_entropy(ModelBundle& model, const LabelledCorpus& corpus, std::size_t batch = 64) {
  double total = 0.0;
  for (std::size_t start = 0; start < corpus.size(); start += batch) {
    std::vector<std::size_t> idx(std::min(batch, corpus.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    std::vector<std::size_t> labels;
    const Tensor x = gather_batch(corpus, idx, &labels);
    total += cross_entropy(model.forward_logits(x), labels).item() * static_cast<double>(idx.size());
  }
  return total / static_cast<double>(corpus.size());
}

struct TeacherReport {
  double train_accuracy = 0.0;
  double eval_accuracy = 0.0;
  std::size_t epochs = 0;
  std::size_t best_epoch = 0;
  fs::path checkpoint;

  json to_json() const {
    return {{"train_accuracy", train_accuracy},
            {"eval_accuracy", eval_accuracy},
            {"epochs", epochs},
            {"best_epoch", best_epoch},
            {"checkpoint", checkpoint.string()}};
  }
};

// Cross-entropy training until held-out accuracy has not improved for
// `patience` epochs; at equal accuracy a lower held-out loss counts as an
// improvement. The best epoch is kept as `<out>/teacher`.
inline TeacherReport train_teacher(const ExperimentConfig& cfg, const CorpusPair& data, std::ostream* log = nullptr) {
  const Rng root(cfg.seed);
  Rng init = root.fork(11), shuffle = root.fork(12);
  auto model = build_model(cfg.teacher.arch, data.train.class_count, init);
  Adam opt(model.parameters(), {.lr = cfg.teacher.lr});
  const fs::path stem = fs::path(cfg.out) / "teacher";
  TeacherReport report;
  report.checkpoint = stem;
  double best = -1.0, best_loss = 0.0;
  std::size_t since = 0;
  for (std::size_t epoch = 1; epoch <= cfg.teacher.max_epochs; ++epoch) {
    const double loss = supervised_epoch(model, opt, data.train, cfg.teacher.batch, shuffle);
    const double acc = accuracy(model, data.eval);
    const double eval_loss = mean_cross_entropy(model, data.eval);
    report.epochs = epoch;
    if (log)
      *log << "teacher epoch " << epoch << " loss " << loss << " eval_loss " << eval_loss << " eval_accuracy " << acc
           << "\n";
    if (acc > best || (acc == best && eval_loss < best_loss)) {
      best = acc;
      best_loss = eval_loss;
      report.best_epoch = epoch;
      since = 0;
      save_checkpoint(model, stem);
    } else if (++since >= cfg.teacher.patience) {
      break;
    }
  }
  auto kept = load_checkpoint(stem);
  report.eval_accuracy = accuracy(kept, data.eval);
  report.train_accuracy = accuracy(kept, data.train);
  const double chance = 1.0 / static_cast<double>(data.train.class_count);
  if (report.eval_accuracy < 1.5 * chance)
    throw DataError("teacher reached only " + std::to_string(report.eval_accuracy) +
                    " held-out accuracy (chance " + std::to_string(chance) + "); corpus looks non-separable");
  write_json(fs::path(cfg.out) / "teacher_report.json", report.to_json());
  return report;
}

// ---------------------------------------------------------------- method selection

struct MethodSettings {
  InversionConfig inversion;
  DistillConfig distill;
};

inline MethodSettings method_settings(const ExperimentConfig& cfg) {
  MethodSettings s{cfg.inversion, cfg.distill};
  s.inversion.mode = cfg.data.mode;
  switch (cfg.run.method) {
    case Method::FramiFull:
      break;
    case Method::FramiNoFinv:
      s.inversion.use_finv = false;
      break;
    case Method::FramiNoReused:
      s.distill.eta = s.distill.xi = 0.0;
      break;
    case Method::FramiNoFinvNoReused:
      s.inversion.use_finv = false;
      s.distill.eta = s.distill.xi = 0.0;
      break;
    case Method::AdiBaseline:
      s.inversion.use_fic = false;
      s.inversion.alpha_fic = 0.0;
      s.inversion.augment_inv = true;
      s.distill.eta = s.distill.xi = 0.0;
      break;
    case Method::VanillaKd:
    case Method::ScratchStudent:
      s.distill.eta = s.distill.xi = 0.0;
      break;
  }
  return s;
}

// ---------------------------------------------------------------- loss-graph topology

struct GradientSignature {
  std::set<std::string> updated;  // parameter groups that receive a nonzero gradient
  std::set<std::string> terms;    // loss terms present in the optimized objectives

  bool operator==(const GradientSignature&) const = default;
};

inline bool has_nonzero_grad(const std::vector<Parameter>& params) {
  for (const auto& p : params)
    if (p.tensor.has_grad())
      for (double g : p.tensor.grad())
        if (g != 0.0) return true;
  return false;
}

// One inversion step (data-free methods only) and one student step of
// `cfg.run.method`, recording where gradient flows.
inline GradientSignature gradient_signature(const ExperimentConfig& cfg, ModelBundle& teacher, ModelBundle& student,
                                            const LabelledCorpus& corpus, std::size_t batch = 4) {
  const Method method = cfg.run.method;
  MethodSettings settings = method_settings(cfg);
  settings.inversion.batch = settings.distill.batch = batch;
  Rng rng = Rng(cfg.seed).fork(7);
  teacher.set_trainable(false);
  const std::size_t frames = corpus.items.at(0).frames;
  Discriminator head(teacher.embedding_dim(), rng);
  ProjectionPair proj(teacher.frame_dim(), student.frame_dim());
  auto teacher_params = teacher.parameters(), student_params = student.parameters(), head_params = head.parameters(),
       proj_params = proj.parameters();
  GradientSignature sig;
  const auto note = [&](const std::string& name, std::vector<Parameter>& params) {
    if (has_nonzero_grad(params)) sig.updated.insert(name);
    zero_grad(params);
  };

  Tensor x;
  if (is_data_free(method)) {
    student.set_trainable(false);
    Generator gen = make_generator(teacher, frames, settings.inversion.latent_dim, rng);
    auto gen_params = gen.parameters();
    MemoryBank bank;
    const auto targets = round_robin_targets(batch, teacher.class_count());
    bank.append(gen.generate(gen.sample_latent(batch, rng)).detach(), 0, 0.0, targets);
    const auto loss =
        inversion_objective(gen.generate(gen.sample_latent(batch, rng)), teacher, &student, head, bank, targets,
                            settings.inversion, rng);
    sig.terms.insert("inv");
    if (loss.fic.node()) sig.terms.insert("fic");
    if (loss.chunks > 0) sig.terms.insert("finv");
    backward(loss.total);
    note("generator", gen_params);
    note("head", head_params);
    note("teacher", teacher_params);
    note("student", student_params);
    x = *bank_sample(bank, batch, rng);
  } else {
    std::vector<std::size_t> idx(std::min(batch, corpus.size()));
    std::iota(idx.begin(), idx.end(), 0);
    x = gather_batch(corpus, idx);
  }

  student.set_trainable(true);
  Tensor total;
  if (method == Method::ScratchStudent) {
    std::vector<std::size_t> labels(x.dim(0));
    for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = i % corpus.class_count;
    total = cross_entropy(student.forward_logits(x, {Mode::Train, nullptr}), labels);
    sig.terms.insert("ce");
  } else {
    const auto loss = kd_objective(teacher, student, proj, x, settings.distill, rng);
    total = loss.total;
    sig.terms.insert("kd");
    if (loss.rfl.node() && settings.distill.eta > 0.0) sig.terms.insert("rfl");
    if (loss.rul.node() && settings.distill.xi > 0.0) sig.terms.insert("rul");
  }
  backward(total);
  note("teacher", teacher_params);
  note("student", student_params);
  note("proj", proj_params);
  return sig;
}

// ---------------------------------------------------------------- run

struct EpochMetrics {
  std::size_t epoch = 0;
  std::optional<double> inv_loss_best;
  double kd_loss_mean = 0.0;
  std::optional<double> rfl_mean, rul_mean;
  double eval_accuracy = 0.0;
  std::uint64_t seed = 0;

  std::string to_line() const {
    nlohmann::ordered_json j;
    j["epoch"] = epoch;
    j["inv_loss_best"] = inv_loss_best ? json(*inv_loss_best) : json(nullptr);
    j["kd_loss_mean"] = kd_loss_mean;
    j["rfl_mean"] = rfl_mean ? json(*rfl_mean) : json(nullptr);
    j["rul_mean"] = rul_mean ? json(*rul_mean) : json(nullptr);
    j["eval_accuracy"] = eval_accuracy;
    j["seed"] = seed;
    return j.dump();
  }
};

struct RunSummary {
  std::vector<EpochMetrics> metrics;
  double final_accuracy = 0.0;
  fs::path out;
  std::size_t bank_size = 0;
  std::vector<std::vector<double>> inversion_traces;
  std::vector<double> first_confidence, best_confidence;
};

inline std::vector<std::size_t> sample_indices(std::size_t n, std::size_t count, Rng& rng) {
  std::vector<std::size_t> idx(count);
  for (auto& i : idx) i = rng.uniform_index(n);
  return idx;
}

// Algorithm driver for every method. Data-free methods alternate an
// inversion phase (one bank entry per epoch) with a distillation phase
// on the bank; data-driven references train on the labelled corpus.
inline RunSummary run_experiment(const ExperimentConfig& cfg, const CorpusPair& data, std::ostream* log = nullptr) {
  cfg.validate();
  const auto wall_start = std::chrono::steady_clock::now();
  const fs::path out(cfg.out);
  fs::create_directories(out);
  write_json(out / "config.json", to_json(cfg));

  const Method method = cfg.run.method;
  const MethodSettings settings = method_settings(cfg);
  const Rng root(cfg.seed);
  Rng init = root.fork(1), inv_rng = root.fork(2), kd_rng = root.fork(3);

  std::optional<ModelBundle> teacher;
  if (method != Method::ScratchStudent) {
    if (cfg.run.teacher_checkpoint.empty()) throw ConfigError("run.teacher_checkpoint is required for " + to_string(method));
    if (!fs::exists(cfg.run.teacher_checkpoint + ".json"))
      throw ConfigError("teacher checkpoint not found: " + cfg.run.teacher_checkpoint);
    teacher.emplace(load_checkpoint(cfg.run.teacher_checkpoint));
    if (teacher->class_count() != data.train.class_count) throw ConfigError("teacher class count differs from corpus");
    teacher->set_trainable(false);
  }
  auto student = build_model(cfg.run.student_arch, data.train.class_count, init);
  Discriminator head(teacher ? teacher->embedding_dim() : 2, init);
  ProjectionPair proj(teacher ? teacher->frame_dim() : student.frame_dim(), student.frame_dim());
  auto student_params = student.parameters();
  for (auto& p : proj.parameters()) student_params.push_back(p);
  Adam student_opt(student_params, {.lr = settings.distill.lr_student});
  Adam head_opt(head.parameters(), {.lr = settings.inversion.lr_head});
  const std::size_t frames = data.train.items.at(0).frames;

  MemoryBank bank;
  RunSummary summary;
  summary.out = out;
  const fs::path metrics_path = out / "metrics.jsonl";
  std::ofstream metrics(metrics_path, std::ios::trunc);
  if (!metrics) throw IngestionError("cannot write " + metrics_path.string());

  for (std::size_t epoch = 1; epoch <= cfg.run.epochs; ++epoch) {
    EpochMetrics m;
    m.epoch = epoch;
    m.seed = cfg.seed;
    if (is_data_free(method)) {
      InversionConfig inv = settings.inversion;
      if (epoch <= cfg.run.gamma_warmup_epochs) inv.gamma = 0.0;
      InversionResult r;
      try {
        r = inversion_epoch(*teacher, &student, head, head_opt, bank, frames, inv, inv_rng, epoch);
      } catch (const NumericalError& e) {
        throw NumericalError(std::string(e.what()) + " (inversion phase, epoch " + std::to_string(epoch) + ")");
      }
      bank.append(r.best_batch, epoch, r.best_loss, r.targets);
      m.inv_loss_best = r.best_loss;
      summary.inversion_traces.push_back(r.trace);
      summary.first_confidence.push_back(r.first_confidence);
      summary.best_confidence.push_back(r.best_confidence);
      const auto kd = kd_epoch(*teacher, student, proj, student_opt, bank, settings.distill, kd_rng, &data.eval);
      m.kd_loss_mean = KdResult::mean_of(kd.trace);
      if (!kd.rfl_trace.empty()) m.rfl_mean = KdResult::mean_of(kd.rfl_trace);
      if (!kd.rul_trace.empty()) m.rul_mean = KdResult::mean_of(kd.rul_trace);
      m.eval_accuracy = *kd.eval_accuracy;
    } else {
      student.set_trainable(true);
      std::vector<double> trace;
      for (std::size_t step = 0; step < settings.distill.steps; ++step) {
        std::vector<std::size_t> labels;
        const Tensor x = gather_batch(data.train, sample_indices(data.train.size(), settings.distill.batch, kd_rng),
                                      &labels);
        const Tensor loss = method == Method::VanillaKd
                                ? kd_objective(*teacher, student, proj, x, settings.distill, kd_rng).total
                                : cross_entropy(student.forward_logits(x, {Mode::Train, nullptr}), labels);
        if (!std::isfinite(loss.item()))
          throw NumericalError("training loss is not finite at epoch " + std::to_string(epoch));
        trace.push_back(loss.item());
        backward(loss);
        student_opt.step();
      }
      m.kd_loss_mean = KdResult::mean_of(trace);
      m.eval_accuracy = accuracy(student, data.eval);
    }
    metrics << m.to_line() << "\n" << std::flush;
    if (log)
      *log << to_string(method) << " seed " << cfg.seed << " epoch " << epoch << " eval_accuracy " << m.eval_accuracy
           << (m.inv_loss_best ? " inv_loss_best " + std::to_string(*m.inv_loss_best) : std::string()) << "\n";
    summary.metrics.push_back(m);
  }
  metrics.close();

  save_checkpoint(student, out / "student");
  summary.bank_size = bank.size();
  if (is_data_free(method)) bank.save(out / "bank");
  summary.final_accuracy = summary.metrics.back().eval_accuracy;

  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - wall_start).count();
  json manifest = {{"config", to_json(cfg)},
                   {"code_version", kCodeVersion},
                   {"seed", cfg.seed},
                   {"method", to_string(method)},
                   {"metrics", "metrics.jsonl"},
                   {"checkpoints", {{"student", "student"}}},
                   {"bank", is_data_free(method) ? json("bank") : json(nullptr)},
                   {"bank_entries", bank.size()},
                   {"final_eval_accuracy", summary.final_accuracy},
                   {"wall_clock_s", wall}};
  write_json(out / "manifest.json", manifest);
  return summary;
}

}  // namespace frami
