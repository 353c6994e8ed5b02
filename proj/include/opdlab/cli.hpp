#pragma once

// opdlab command-line surface. Exit codes: 0 success, 1 usage error, 2 runtime failure.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "opdlab/checkpoint.hpp"
#include "opdlab/plot.hpp"
#include "opdlab/rkl_analysis.hpp"
#include "opdlab/runner.hpp"
#include "opdlab/tasks.hpp"

namespace opdlab::cli {

class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

// Flat key=value overrides for the subcommands that are not driven by a config file.
inline std::map<std::string, std::string> parse_sets(const std::vector<std::string>& sets,
                                                     const std::vector<std::string>& allowed) {
  std::map<std::string, std::string> out;
  for (const auto& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) throw UsageError("--set '" + s + "' is not key=value");
    const auto key = s.substr(0, eq);
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      throw UsageError("--set: unknown key '" + key + "'");
    }
    out[key] = s.substr(eq + 1);
  }
  return out;
}

template <class T>
T get_or(const std::map<std::string, std::string>& m, const std::string& key, T fallback) {
  auto it = m.find(key);
  if (it == m.end()) return fallback;
  try {
    if constexpr (std::is_same_v<T, int>) return std::stoi(it->second);
    else if constexpr (std::is_same_v<T, double>) return std::stod(it->second);
    else if constexpr (std::is_same_v<T, std::size_t>) return static_cast<std::size_t>(std::stoull(it->second));
    else return it->second;
  } catch (const std::exception&) {
    throw UsageError("--set " + key + ": cannot parse '" + it->second + "'");
  }
}

inline std::vector<double> parse_csv_doubles(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(item, &used);
    } catch (const std::exception&) {
      throw UsageError("--epsilons: cannot parse '" + item + "'");
    }
    if (used != item.size()) throw UsageError("--epsilons: cannot parse '" + item + "'");
    if (!(v > 0.0) || !(v < 0.3)) throw UsageError("--epsilons: values must lie in (0, 0.3), got " + item);
    out.push_back(v);
  }
  if (out.empty()) throw UsageError("--epsilons: empty list");
  return out;
}

}  // namespace detail

struct MakeTaskArgs {
  std::string out;
  std::uint64_t seed = 1;
  std::vector<std::string> sets;
};

inline void cmd_make_task(const MakeTaskArgs& a, std::ostream& os) {
  const auto s = detail::parse_sets(a.sets, {"operand_lo", "operand_hi", "n_train", "n_heldout"});
  tasks::TaskSpec spec;
  spec.lo = detail::get_or(s, "operand_lo", 0);
  spec.hi = detail::get_or(s, "operand_hi", 99);
  spec.seed = a.seed;
  spec.max_prompt_len = spec.prompt_len();
  spec.max_response_len = spec.longest_response();
  try {
    spec.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  const auto n_train = detail::get_or<std::size_t>(s, "n_train", 2000);
  const auto n_heldout = detail::get_or<std::size_t>(s, "n_heldout", 200);
  if (n_train < 1 || n_heldout < 1) throw UsageError("n_train and n_heldout must be >= 1");
  const std::filesystem::path out(a.out);
  tasks::save_dataset(out / "train.jsonl", tasks::gen_dataset(spec, n_train, tasks::Split::Train));
  tasks::save_dataset(out / "heldout.jsonl", tasks::gen_dataset(spec, n_heldout, tasks::Split::Heldout));
  const auto corpora = tasks::make_family_corpora(spec);
  tasks::save_corpus(out / "corpora" / "student_format.jsonl", corpora.student_format);
  tasks::save_corpus(out / "corpora" / "in_family.jsonl", corpora.in_family);
  tasks::save_corpus(out / "corpora" / "cross_family.jsonl", corpora.cross_family);
  std::ofstream(out / "task.json") << nlohmann::json{{"operand_lo", spec.lo}, {"operand_hi", spec.hi}, {"seed", spec.seed}}.dump(2)
                                   << '\n';
  os << "wrote " << (out / "train.jsonl").string() << ", " << (out / "heldout.jsonl").string() << ", "
     << (out / "corpora").string() << "/\n";
}

struct TrainTeacherArgs {
  std::string corpus;
  std::string out;
  std::uint64_t seed = 0;
  bool freeze = false;
  std::vector<std::string> sets;
};

inline void cmd_train_teacher(const TrainTeacherArgs& a, std::ostream& os) {
  const auto s = detail::parse_sets(a.sets, {"steps", "learning_rate", "batch_size", "embed_dim", "num_layers",
                                             "num_heads", "max_context"});
  ModelConfig mc;
  mc.embed_dim = detail::get_or(s, "embed_dim", mc.embed_dim);
  mc.num_layers = detail::get_or(s, "num_layers", mc.num_layers);
  mc.num_heads = detail::get_or(s, "num_heads", mc.num_heads);
  mc.max_context = detail::get_or(s, "max_context", mc.max_context);
  mc.vocab_size = tasks::Vocab::size();
  mc.seed = a.seed;
  try {
    mc.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  tasks::PretrainOptions opt;
  opt.steps = detail::get_or(s, "steps", 2000);
  opt.learning_rate = detail::get_or(s, "learning_rate", 1e-3);
  opt.batch_size = detail::get_or<std::size_t>(s, "batch_size", 32);
  opt.seed = a.seed;
  if (opt.steps < 0 || opt.batch_size < 1) throw UsageError("steps must be >= 0 and batch_size >= 1");
  const auto corpus = tasks::load_corpus(a.corpus);
  PolicyModel model(mc);
  const auto r = tasks::pretrain_supervised(model, corpus, opt);
  if (a.freeze) model.freeze();
  save_checkpoint(model, {opt.steps, "seed=" + std::to_string(a.seed)}, a.out);
  os << "initial_loss=" << r.initial_loss << " final_loss=" << r.final_loss << "\ncheckpoint " << a.out << '\n';
}

struct TrainArgs {
  std::string config;
  std::vector<std::string> sets;
  std::string algo, teacher, student, out, dataset;
  std::optional<std::uint64_t> seed;
  std::optional<int> steps;
};

inline runner::TrainConfig resolve_train_config(const TrainArgs& a) {
  nlohmann::json doc = nlohmann::json::object();
  if (!a.config.empty()) {
    std::ifstream in(a.config);
    if (!in) throw UsageError("cannot read config " + a.config);
    try {
      doc = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw UsageError("config " + a.config + ": " + e.what());
    }
  }
  try {
    for (const auto& s : a.sets) runner::apply_override(doc, s);
    if (!a.algo.empty()) doc["algo"] = a.algo;
    if (!a.teacher.empty()) doc["teacher"] = a.teacher;
    if (!a.student.empty()) doc["student"] = a.student;
    if (!a.out.empty()) doc["out"] = a.out;
    if (!a.dataset.empty()) doc["dataset"] = a.dataset;
    if (a.seed) doc["seed"] = *a.seed;
    if (a.steps) doc["steps"] = *a.steps;
    auto cfg = runner::config_from_json(doc);
    if (algos::needs_teacher(cfg.algo) && cfg.teacher.empty()) {
      throw UsageError("algorithm " + algos::to_string(cfg.algo) + " requires --teacher");
    }
    if (cfg.student.empty()) throw UsageError("missing --student");
    if (cfg.dataset.empty()) throw UsageError("missing --dataset");
    return cfg;
  } catch (const runner::ConfigError& e) {
    throw UsageError(e.what());
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(e.what());
  }
}

inline void cmd_train(const TrainArgs& a, std::ostream& os) {
  const auto cfg = resolve_train_config(a);
  auto outputs = runner::train_loop(cfg);
  const auto& m = outputs.result.metrics;
  if (outputs.result.aborted) throw std::runtime_error("training aborted: " + outputs.result.abort_reason);
  os << "final mean_reward=" << (m.empty() ? 0.0 : m.back().mean_reward) << '\n'
     << "metrics " << outputs.metrics_path.string() << '\n'
     << "checkpoint " << outputs.checkpoint_dir.string() << '\n';
}

struct EvalArgs {
  std::string student, dataset;
  int k = 4;
  double temperature = 0.6;
  int max_new = 24;
  std::uint64_t seed = 0;
  int operand_lo = 0, operand_hi = 99;
};

inline void cmd_eval(const EvalArgs& a, std::ostream& os) {
  if (a.k < 1) throw UsageError("--k must be >= 1");
  if (a.temperature < 0.0) throw UsageError("--temperature must be >= 0");
  tasks::TaskSpec spec;
  spec.lo = a.operand_lo;
  spec.hi = a.operand_hi;
  spec.max_prompt_len = spec.prompt_len();
  spec.max_response_len = spec.longest_response();
  auto model = load_checkpoint(a.student, true).model;
  const auto data = tasks::load_dataset(a.dataset, spec);
  const auto r = runner::eval_pass(model, data, a.k, a.temperature, a.max_new, a.seed);
  os << nlohmann::json{{"accuracy_avg_at_k", r.accuracy_avg_at_k}, {"mean_length", r.mean_length}, {"k", a.k}}.dump()
     << '\n';
}

struct AnalyzeArgs {
  std::string out = "analysis";
  std::string epsilons = "1e-2,1e-4,1e-6,1e-8";
  std::uint64_t seed = 0;
};

struct AnalyzeSummary {
  double dual_gradient_max_abs_diff = 0.0;
  std::vector<rkl::SweepPoint> sweep;
  rkl::AsymmetryReport asymmetry;
};

inline AnalyzeSummary run_analysis(const std::vector<double>& epsilons, std::uint64_t seed) {
  AnalyzeSummary s;
  Rng rng(derive_seed(seed, {0xa11ULL}));
  for (int i = 0; i < 100; ++i) {
    const std::size_t n = 8 + uniform_index(rng, 57);
    const auto p = rkl::CategoricalPolicy::random(n, rng, 2.0);
    const auto q = rkl::CategoricalPolicy::random(n, rng, 2.0);
    s.dual_gradient_max_abs_diff = std::max(s.dual_gradient_max_abs_diff, rkl::exact_rkl_gradient(p, q).max_abs_diff);
  }
  const rkl::OutcomeSpace space{4, 3};
  const auto base = rkl::CategoricalPolicy::random(space.size(), rng);
  const auto student = rkl::with_outcome_mass(base, 0, 0.3);
  s.sweep = rkl::second_moment_sweep(student, 0, epsilons, 0.3);
  // Half the student's mass sits where the teacher has almost none: penalties
  // reach ln(0.5/1e-6) while the best bonus elsewhere is only ln 2.
  const auto concentrated = rkl::with_outcome_mass(base, 0, 0.5);
  const auto teacher = rkl::rejecting_teacher(concentrated, 0, 1e-6);
  s.asymmetry = rkl::asymmetry_report(concentrated, teacher, 100000, rng);
  return s;
}

inline void cmd_analyze_rkl(const AnalyzeArgs& a, std::ostream& os) {
  const auto eps = detail::parse_csv_doubles(a.epsilons);
  const auto s = run_analysis(eps, a.seed);
  const std::filesystem::path out(a.out);
  std::filesystem::create_directories(out);
  {
    std::ofstream csv(out / "second_moment.csv", std::ios::binary | std::ios::trunc);
    csv << "epsilon,second_moment,ratio\n";
    for (const auto& p : s.sweep) csv << plot::fmt(p.epsilon) << ',' << p.second_moment << ',' << p.ratio << '\n';
  }
  std::ostringstream summary;
  summary.precision(6);
  summary << "dual_gradient_max_abs_diff=" << s.dual_gradient_max_abs_diff << '\n'
          << "dual_gradient_agree=" << (s.dual_gradient_max_abs_diff <= 1e-10 ? "yes" : "no") << '\n'
          << "asymmetry_max_positive_reward=" << s.asymmetry.max_positive_reward << '\n'
          << "asymmetry_max_negative_reward=" << s.asymmetry.max_negative_reward << '\n'
          << "asymmetry_positive_tail_frequency=" << s.asymmetry.positive_tail_frequency << '\n'
          << "asymmetry_negative_tail_frequency=" << s.asymmetry.negative_tail_frequency << '\n';
  std::ofstream(out / "summary.txt", std::ios::binary | std::ios::trunc) << summary.str();
  os << summary.str() << "csv " << (out / "second_moment.csv").string() << '\n';
}

struct PlotArgs {
  std::vector<std::string> metrics;
  std::string out = "metrics.svg";
};

inline void cmd_plot(const PlotArgs& a, std::ostream& os) {
  std::vector<plot::Series> series;
  for (const auto& path : a.metrics) {
    if (!std::filesystem::exists(path)) throw std::runtime_error("missing metrics file " + path);
    auto recs = runner::read_metrics(path);
    if (recs.empty()) throw std::runtime_error("empty metrics file " + path);
    std::filesystem::path p(path);
    const auto label = p.filename() == "metrics.jsonl" && p.has_parent_path() ? p.parent_path().filename().string()
                                                                              : p.stem().string();
    series.push_back({label, std::move(recs)});
  }
  const auto svg = plot::render_svg(series);
  const std::filesystem::path out(a.out);
  if (out.has_parent_path()) std::filesystem::create_directories(out.parent_path());
  std::ofstream(out, std::ios::binary | std::ios::trunc) << svg;
  os << "svg " << out.string() << '\n';
}

/// Entry point shared by the binary and the tests.
inline int run(int argc, const char* const* argv, std::ostream& os = std::cout, std::ostream& es = std::cerr) {
  CLI::App app{"opdlab: on-policy distillation laboratory"};
  app.require_subcommand(1);

  MakeTaskArgs mk;
  auto* make = app.add_subcommand("make-task", "generate datasets and supervised corpora");
  make->add_option("--out", mk.out, "output directory")->required();
  make->add_option("--seed", mk.seed, "task seed");
  make->add_option("--set", mk.sets, "operand_lo|operand_hi|n_train|n_heldout=value");

  TrainTeacherArgs tt;
  auto* teach = app.add_subcommand("train-teacher", "supervised training of a student init or a teacher");
  teach->add_option("--corpus", tt.corpus, "corpus JSONL")->required()->check(CLI::ExistingFile);
  teach->add_option("--out", tt.out, "checkpoint directory")->required();
  teach->add_option("--seed", tt.seed, "initialization and batching seed");
  teach->add_flag("--freeze", tt.freeze, "mark the checkpoint frozen");
  teach->add_option("--set", tt.sets, "steps|learning_rate|batch_size|embed_dim|num_layers|num_heads|max_context=value");

  TrainArgs tr;
  std::uint64_t train_seed = 0;
  auto* train = app.add_subcommand("train", "RL / distillation training");
  train->add_option("--config", tr.config, "config JSON");
  train->add_option("--set", tr.sets, "dot-path override key=value");
  train->add_option("--algo", tr.algo, "grpo|rkl_opd|kdrl|tgpo|sft");
  train->add_option("--teacher", tr.teacher, "teacher checkpoint");
  train->add_option("--student", tr.student, "student checkpoint");
  train->add_option("--dataset", tr.dataset, "prompt dataset JSONL");
  train->add_option("--out", tr.out, "output directory");
  auto* seed_opt = train->add_option("--seed", train_seed, "run seed");
  int train_steps = 0;
  auto* steps_opt = train->add_option("--steps", train_steps, "optimizer steps");

  EvalArgs ev;
  auto* eval = app.add_subcommand("eval", "avg@k accuracy");
  eval->add_option("--student", ev.student, "checkpoint")->required();
  eval->add_option("--dataset", ev.dataset, "prompt dataset JSONL")->required()->check(CLI::ExistingFile);
  eval->add_option("--k", ev.k, "rollouts per prompt");
  eval->add_option("--temperature", ev.temperature, "sampling temperature");
  eval->add_option("--max-new", ev.max_new, "response token cap");
  eval->add_option("--seed", ev.seed, "sampling seed");

  AnalyzeArgs an;
  auto* analyze = app.add_subcommand("analyze-rkl", "reverse-KL gradient analysis on enumerable spaces");
  analyze->add_option("--out", an.out, "output directory");
  analyze->add_option("--epsilons", an.epsilons, "comma-separated teacher masses");
  analyze->add_option("--seed", an.seed, "seed");

  PlotArgs pl;
  auto* plot_cmd = app.add_subcommand("plot", "three-panel SVG from metrics files");
  plot_cmd->add_option("metrics", pl.metrics, "metrics JSONL files")->required();
  plot_cmd->add_option("--out", pl.out, "output SVG path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    os << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    es << "error: " << e.what() << '\n';
    return 1;
  }
  if (seed_opt->count() > 0) tr.seed = train_seed;
  if (steps_opt->count() > 0) tr.steps = train_steps;

  try {
    if (*make) cmd_make_task(mk, os);
    else if (*teach) cmd_train_teacher(tt, os);
    else if (*train) cmd_train(tr, os);
    else if (*eval) cmd_eval(ev, os);
    else if (*analyze) cmd_analyze_rkl(an, os);
    else if (*plot_cmd) cmd_plot(pl, os);
  } catch (const UsageError& e) {
    es << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    es << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}

}  // namespace opdlab::cli
