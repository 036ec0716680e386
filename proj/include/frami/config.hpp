#pragma once

// Experiment configuration: built-in defaults, overridden by a JSON file,
// overridden by `section.key=value` flags.

#include <string>
#include <vector>

#include "frami/corpus.hpp"
#include "frami/distill.hpp"
#include "frami/inversion.hpp"
#include "frami/io.hpp"

namespace frami {

enum class Method {
  FramiFull,
  FramiNoFinv,
  FramiNoReused,
  FramiNoFinvNoReused,
  AdiBaseline,
  VanillaKd,
  ScratchStudent,
};

inline const std::vector<std::pair<Method, std::string>>& method_names() {
  static const std::vector<std::pair<Method, std::string>> names{
      {Method::FramiFull, "frami_full"},
      {Method::FramiNoFinv, "frami_no_finv"},
      {Method::FramiNoReused, "frami_no_reused"},
      {Method::FramiNoFinvNoReused, "frami_no_finv_no_reused"},
      {Method::AdiBaseline, "adi_baseline"},
      {Method::VanillaKd, "vanilla_kd"},
      {Method::ScratchStudent, "scratch_student"},
  };
  return names;
}

inline std::string to_string(Method m) {
  for (const auto& [k, v] : method_names())
    if (k == m) return v;
  return "unknown";
}

inline Method parse_method(const std::string& s) {
  for (const auto& [k, v] : method_names())
    if (v == s) return k;
  std::string all;
  for (const auto& [k, v] : method_names()) all += (all.empty() ? "" : ", ") + v;
  throw ConfigError("unknown method '" + s + "' (expected one of " + all + ")");
}

inline bool is_data_free(Method m) { return m != Method::VanillaKd && m != Method::ScratchStudent; }

struct DataConfig {
  std::string source = "synthetic";  // synthetic | corpus_dir | wav_dir
  std::string path;
  std::size_t classes = 4;
  std::size_t items_per_class = 50;
  std::size_t eval_items_per_class = 25;
  double duration_s = 2.0;
  AudioMode mode = AudioMode::TID;
  double noise_level = 0.01;
  double freq_jitter = 0.06;
  std::uint64_t seed = 1234;
};

struct TeacherConfig {
  std::string arch = "tiny_t";
  std::size_t max_epochs = 40;
  std::size_t patience = 5;
  std::size_t batch = 32;
  double lr = 1e-3;
};

struct RunConfig {
  Method method = Method::FramiFull;
  std::string student_arch = "tiny_s";
  std::size_t epochs = 30;
  std::size_t gamma_warmup_epochs = 1;  // adversarial term off while the student is untrained
  std::string teacher_checkpoint;
};

struct ExperimentConfig {
  DataConfig data;
  TeacherConfig teacher;
  InversionConfig inversion;
  DistillConfig distill;
  RunConfig run;
  std::uint64_t seed = 0;
  std::string out = "runs/default";
  bool single_thread = false;

  void validate() const {
    if (data.source != "synthetic" && data.source != "corpus_dir" && data.source != "wav_dir")
      throw ConfigError("data.source must be synthetic, corpus_dir or wav_dir");
    if (data.source != "synthetic" && data.path.empty()) throw ConfigError("data.path is required for " + data.source);
    if (data.source == "synthetic") {
      CorpusSpec spec{data.classes, data.items_per_class, data.duration_s, data.mode, data.noise_level,
                      data.freq_jitter};
      validate_spec(spec);
      if (data.eval_items_per_class == 0) throw ConfigError("data.eval_items_per_class must be positive");
    }
    arch_spec(teacher.arch);
    arch_spec(run.student_arch);
    if (teacher.max_epochs == 0 || teacher.batch == 0 || !(teacher.lr > 0.0))
      throw ConfigError("teacher.max_epochs, teacher.batch and teacher.lr must be positive");
    if (run.epochs == 0) throw ConfigError("run.epochs must be positive");
    inversion.validate();
    distill.validate();
  }

 private:
  static void validate_spec(const CorpusSpec& spec) { frami::validate(spec); }
};

// ---------------------------------------------------------------- JSON mapping

inline json to_json(const ExperimentConfig& c) {
  const auto& d = c.data;
  const auto& i = c.inversion;
  const auto& k = c.distill;
  return {
      {"data",
       {{"source", d.source},
        {"path", d.path},
        {"classes", d.classes},
        {"items_per_class", d.items_per_class},
        {"eval_items_per_class", d.eval_items_per_class},
        {"duration_s", d.duration_s},
        {"mode", to_string(d.mode)},
        {"noise_level", d.noise_level},
        {"freq_jitter", d.freq_jitter},
        {"seed", d.seed}}},
      {"teacher",
       {{"arch", c.teacher.arch},
        {"max_epochs", c.teacher.max_epochs},
        {"patience", c.teacher.patience},
        {"batch", c.teacher.batch},
        {"lr", c.teacher.lr}}},
      {"inversion",
       {{"alpha", i.alpha},
        {"beta", i.beta},
        {"gamma", i.gamma},
        {"alpha_fic", i.alpha_fic},
        {"beta_inv", i.beta_inv},
        {"tau", i.tau},
        {"adv_tau", i.adv_tau},
        {"k_min", i.k_min},
        {"k_max", i.k_max},
        {"min_chunk_frames", i.min_chunk_frames},
        {"steps", i.steps},
        {"batch", i.batch},
        {"standard_infonce", i.standard_infonce},
        {"lr_generator", i.lr_generator},
        {"lr_head", i.lr_head},
        {"latent_dim", i.latent_dim}}},
      {"distill",
       {{"eta", k.eta},
        {"xi", k.xi},
        {"kd_tau", k.kd_tau},
        {"n_min", k.n_min},
        {"n_max", k.n_max},
        {"steps", k.steps},
        {"batch", k.batch},
        {"lr_student", k.lr_student},
        {"mean_pseudo_var", k.mean_pseudo_var}}},
      {"run",
       {{"method", to_string(c.run.method)},
        {"student_arch", c.run.student_arch},
        {"epochs", c.run.epochs},
        {"gamma_warmup_epochs", c.run.gamma_warmup_epochs},
        {"teacher_checkpoint", c.run.teacher_checkpoint},
        {"seed", c.seed},
        {"out", c.out},
        {"single_thread", c.single_thread}}},
  };
}

inline ExperimentConfig from_json(const json& j) {
  ExperimentConfig c;
  try {
    const auto& d = j.at("data");
    c.data = {d.at("source"),        d.at("path"),     d.at("classes"),     d.at("items_per_class"),
              d.at("eval_items_per_class"), d.at("duration_s"), parse_mode(d.at("mode")), d.at("noise_level"),
              d.at("freq_jitter"),   d.at("seed")};
    const auto& t = j.at("teacher");
    c.teacher = {t.at("arch"), t.at("max_epochs"), t.at("patience"), t.at("batch"), t.at("lr")};
    const auto& i = j.at("inversion");
    auto& inv = c.inversion;
    inv.alpha = i.at("alpha");
    inv.beta = i.at("beta");
    inv.gamma = i.at("gamma");
    inv.alpha_fic = i.at("alpha_fic");
    inv.beta_inv = i.at("beta_inv");
    inv.tau = i.at("tau");
    inv.adv_tau = i.at("adv_tau");
    inv.k_min = i.at("k_min");
    inv.k_max = i.at("k_max");
    inv.min_chunk_frames = i.at("min_chunk_frames");
    inv.steps = i.at("steps");
    inv.batch = i.at("batch");
    inv.standard_infonce = i.at("standard_infonce");
    inv.lr_generator = i.at("lr_generator");
    inv.lr_head = i.at("lr_head");
    inv.latent_dim = i.at("latent_dim");
    const auto& k = j.at("distill");
    auto& kd = c.distill;
    kd.eta = k.at("eta");
    kd.xi = k.at("xi");
    kd.kd_tau = k.at("kd_tau");
    kd.n_min = k.at("n_min");
    kd.n_max = k.at("n_max");
    kd.steps = k.at("steps");
    kd.batch = k.at("batch");
    kd.lr_student = k.at("lr_student");
    kd.mean_pseudo_var = k.at("mean_pseudo_var");
    const auto& r = j.at("run");
    c.run = {parse_method(r.at("method")), r.at("student_arch"), r.at("epochs"), r.at("gamma_warmup_epochs"),
             r.at("teacher_checkpoint")};
    c.seed = r.at("seed");
    c.out = r.at("out");
    c.single_thread = r.at("single_thread");
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed configuration: ") + e.what());
  }
  c.inversion.mode = c.data.mode;
  return c;
}

namespace detail {

// Overlays `patch` onto `base`; every key must already exist with a
// compatible type.
inline void merge_checked(json& base, const json& patch, const std::string& where) {
  if (!patch.is_object()) throw ConfigError("configuration section '" + where + "' must be an object");
  for (const auto& [key, value] : patch.items()) {
    const std::string path = where.empty() ? key : where + "." + key;
    if (!base.contains(key)) throw ConfigError("unknown configuration key '" + path + "'");
    json& slot = base[key];
    if (slot.is_object()) {
      merge_checked(slot, value, path);
      continue;
    }
    const bool ok = (slot.is_number() && value.is_number() && (slot.is_number_float() || !value.is_number_float())) ||
                    (slot.is_boolean() && value.is_boolean()) || (slot.is_string() && value.is_string());
    if (!ok) throw ConfigError("configuration key '" + path + "' expects " + slot.type_name() + ", got " + value.dump());
    if (slot.is_number_unsigned() && value.is_number_integer() && value.get<std::int64_t>() < 0)
      throw ConfigError("configuration key '" + path + "' must be non-negative");
    slot = value;
  }
}

}  // namespace detail

// `section.key=value`; the value is read as JSON when it parses, else as a string.
inline void apply_flag(json& cfg, const std::string& flag) {
  const auto eq = flag.find('=');
  const auto dot = flag.find('.');
  if (eq == std::string::npos || dot == std::string::npos || dot > eq)
    throw ConfigError("override '" + flag + "' is not of the form section.key=value");
  const std::string section = flag.substr(0, dot), key = flag.substr(dot + 1, eq - dot - 1), raw = flag.substr(eq + 1);
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  detail::merge_checked(cfg, json{{section, json{{key, value}}}}, "");
}

// defaults < file < flags.
inline ExperimentConfig resolve_config(const std::string& file, const std::vector<std::string>& flags) {
  json cfg = to_json(ExperimentConfig{});
  if (!file.empty()) {
    if (!std::filesystem::exists(file)) throw ConfigError("config file not found: " + file);
    json loaded;
    try {
      loaded = read_json(file);
    } catch (const Error&) {
      throw ConfigError("config file is not valid JSON: " + file);
    }
    detail::merge_checked(cfg, loaded, "");
  }
  for (const auto& f : flags) apply_flag(cfg, f);
  auto out = from_json(cfg);
  out.validate();
  return out;
}

}  // namespace frami
