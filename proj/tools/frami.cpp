// frami: teacher training, data-free distillation runs, evaluation and export.

#include <CLI11.hpp>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "frami/config.hpp"
#include "frami/experiment.hpp"
#include "frami/export.hpp"

namespace {

struct CommonOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool single_thread = false;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("--config", o.config, "JSON configuration file");
  cmd->add_option("--seed", o.seed, "run seed");
  cmd->add_option("--out", o.out, "output directory");
  cmd->add_flag("--single-thread", o.single_thread, "pin computation to one thread");
  cmd->allow_extras();
  cmd->footer("Any field can be overridden with --section.key=value, e.g. --inversion.steps=50");
}

// Leftover arguments are `--section.key=value` (or `section.key=value`) overrides.
std::vector<std::string> overrides(const CLI::App* cmd) {
  std::vector<std::string> flags;
  const auto extras = cmd->remaining();
  for (std::size_t i = 0; i < extras.size(); ++i) {
    std::string a = extras[i];
    if (a.rfind("--", 0) == 0) a.erase(0, 2);
    if (a.find('=') == std::string::npos && i + 1 < extras.size() && extras[i + 1].rfind("--", 0) != 0)
      a += "=" + extras[++i];
    flags.push_back(a);
  }
  return flags;
}

frami::ExperimentConfig resolve(const CLI::App* cmd, const CommonOptions& o) {
  auto flags = overrides(cmd);
  if (o.seed) flags.push_back("run.seed=" + std::to_string(*o.seed));
  if (!o.out.empty()) flags.push_back("run.out=" + nlohmann::json(o.out).dump());
  if (o.single_thread) flags.push_back("run.single_thread=true");
  return frami::resolve_config(o.config, flags);
}

std::vector<std::uint64_t> parse_seeds(const std::string& list) {
  std::vector<std::uint64_t> seeds;
  std::stringstream ss(list);
  for (std::string item; std::getline(ss, item, ',');) {
    try {
      std::size_t used = 0;
      seeds.push_back(std::stoull(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw frami::ConfigError("--seeds expects comma-separated integers, got '" + list + "'");
    }
  }
  if (seeds.empty()) throw frami::ConfigError("--seeds is empty");
  return seeds;
}

void print(const nlohmann::json& j) { std::cout << j.dump(2) << "\n"; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Data-free knowledge distillation for sound classification"};
  app.require_subcommand(1);

  CommonOptions gen_opts, teacher_opts, run_opts, eval_opts, export_opts;
  auto* gen = app.add_subcommand("gen-corpus", "Write the synthetic train/eval corpus to disk");
  add_common(gen, gen_opts);

  auto* teacher = app.add_subcommand("train-teacher", "Train the teacher with cross-entropy");
  add_common(teacher, teacher_opts);

  auto* run = app.add_subcommand("run", "Inversion and distillation outer loop for the selected method");
  add_common(run, run_opts);
  std::string seeds;
  run->add_option("--seeds", seeds, "comma-separated seeds, run one after another into <out>/seed_<n>");

  auto* eval = app.add_subcommand("eval", "Top-1 accuracy and confusion counts of a checkpoint");
  add_common(eval, eval_opts);
  std::string checkpoint, corpus_dir;
  eval->add_option("--checkpoint", checkpoint, "checkpoint stem (without .json/.bin)")->required();
  eval->add_option("--corpus", corpus_dir, "corpus directory with labels.json (default: held-out split of the config)");

  auto* exporter = app.add_subcommand("export", "Render a bank or spectrogram as PNG or WAV");
  add_common(exporter, export_opts);
  std::string input, format = "png";
  exporter->add_option("--input", input, "bank directory or spectrogram stem")->required();
  exporter->add_option("--format", format, "png or wav")->check(CLI::IsMember({"png", "wav"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*gen) {
      const auto cfg = resolve(gen, gen_opts);
      if (cfg.data.source != "synthetic") throw frami::ConfigError("gen-corpus needs data.source=synthetic");
      const auto data = frami::load_data(cfg.data);
      frami::save_corpus(std::filesystem::path(cfg.out) / "train", data.train);
      frami::save_corpus(std::filesystem::path(cfg.out) / "eval", data.eval);
      print({{"train_items", data.train.size()}, {"eval_items", data.eval.size()}, {"out", cfg.out}});
    } else if (*teacher) {
      const auto cfg = resolve(teacher, teacher_opts);
      frami::check_data_paths(cfg.data);
      std::filesystem::create_directories(cfg.out);
      frami::write_json(std::filesystem::path(cfg.out) / "config.json", frami::to_json(cfg));
      const auto data = frami::load_data(cfg.data);
      print(frami::train_teacher(cfg, data, &std::cerr).to_json());
    } else if (*run) {
      const auto base = resolve(run, run_opts);
      frami::check_data_paths(base.data);
      const auto data = frami::load_data(base.data);
      if (seeds.empty()) {
        const auto summary = frami::run_experiment(base, data, &std::cerr);
        print({{"method", frami::to_string(base.run.method)},
               {"final_eval_accuracy", summary.final_accuracy},
               {"manifest", (summary.out / "manifest.json").string()}});
      } else {
        nlohmann::json results = nlohmann::json::array();
        for (auto s : parse_seeds(seeds)) {
          auto cfg = base;
          cfg.seed = s;
          cfg.out = (std::filesystem::path(base.out) / ("seed_" + std::to_string(s))).string();
          const auto summary = frami::run_experiment(cfg, data, &std::cerr);
          results.push_back({{"seed", s}, {"final_eval_accuracy", summary.final_accuracy}, {"out", cfg.out}});
        }
        print({{"method", frami::to_string(base.run.method)}, {"runs", results}});
      }
    } else if (*eval) {
      const auto cfg = resolve(eval, eval_opts);
      if (!std::filesystem::exists(checkpoint + ".json")) throw frami::ConfigError("checkpoint not found: " + checkpoint);
      frami::LabelledCorpus corpus;
      if (!corpus_dir.empty()) {
        if (!std::filesystem::exists(corpus_dir)) throw frami::ConfigError("corpus path does not exist: " + corpus_dir);
        corpus = frami::load_corpus(corpus_dir);
      } else {
        frami::check_data_paths(cfg.data);
        corpus = frami::load_data(cfg.data).eval;
      }
      auto model = frami::load_checkpoint(checkpoint);
      const auto report = frami::evaluate(model, corpus).to_json();
      if (!eval_opts.out.empty()) frami::write_json(std::filesystem::path(cfg.out) / "eval.json", report);
      print(report);
    } else if (*exporter) {
      const auto cfg = resolve(exporter, export_opts);
      if (!std::filesystem::exists(input)) throw frami::ConfigError("export input does not exist: " + input);
      nlohmann::json files = nlohmann::json::array();
      for (const auto& p : frami::export_artifacts(input, cfg.out, format)) files.push_back(p.string());
      print({{"files", files}});
    }
  } catch (const frami::Error& e) {
    std::cerr << "frami: " << e.what() << "\n";
    return e.exit_code();
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "frami: data error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "frami: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
