#pragma once

// Experiment orchestration: rollouts, teacher scoring, loss selection, one
// Adam update per rollout batch, metrics and checkpoints.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "opdlab/algos.hpp"
#include "opdlab/checkpoint.hpp"
#include "opdlab/model.hpp"
#include "opdlab/optim.hpp"
#include "opdlab/parallel.hpp"
#include "opdlab/tasks.hpp"

namespace opdlab::runner {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct TrainConfig {
  std::string preset = "toy";
  algos::Algo algo = algos::Algo::Grpo;
  int group_size = 8;
  int steps = 300;
  int prompts_per_step = 8;
  int max_new_tokens = 24;
  double train_temperature = 1.0;
  double learning_rate = 3e-4;
  double w_init = 0.02;
  double delta = 1e-4;
  double kdrl_k = 1e-3;
  std::uint64_t seed = 0;
  std::string student;
  std::string teacher;
  std::string dataset;
  std::string out = "runs/out";
  bool clip_enabled = false;
  double clip_eps = 0.2;
  double grad_clip_norm = 0.0;  // 0 disables global-norm clipping
  double tau = 2.0;
  double tau_c = 0.5;
  bool sequence_level_opd = false;
  bool record_wall_time = false;
  int operand_lo = 0;
  int operand_hi = 99;

  algos::GuidanceSchedule schedule() const { return {w_init, delta}; }

  tasks::TaskSpec task_spec() const {
    tasks::TaskSpec spec;
    spec.lo = operand_lo;
    spec.hi = operand_hi;
    spec.max_prompt_len = spec.prompt_len();
    spec.max_response_len = spec.longest_response();
    return spec;
  }

  void validate() const {
    if (steps < 1) throw ConfigError("steps must be >= 1");
    if (group_size < 2) throw ConfigError("group_size must be >= 2");
    if (prompts_per_step < 1) throw ConfigError("prompts_per_step must be >= 1");
    if (max_new_tokens < 1) throw ConfigError("max_new_tokens must be >= 1");
    if (train_temperature <= 0.0) throw ConfigError("train_temperature must be > 0");
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
    if (w_init < 0.0 || delta < 0.0) throw ConfigError("w_init and delta must be >= 0");
    if (kdrl_k < 0.0) throw ConfigError("kdrl_k must be >= 0");
    if (!(tau > 0.0) || !(tau_c > 0.0)) throw ConfigError("tau and tau_c must be > 0");
    if (clip_enabled && !(clip_eps > 0.0)) throw ConfigError("clip_eps must be > 0");
    if (grad_clip_norm < 0.0) throw ConfigError("grad_clip_norm must be >= 0");
  }
};

/// Toy-scale defaults.
inline nlohmann::json toy_preset() {
  return {{"preset", "toy"},
          {"algo", "grpo"},
          {"group_size", 8},
          {"steps", 300},
          {"prompts_per_step", 8},
          {"max_new_tokens", 24},
          {"train_temperature", 1.0},
          {"learning_rate", 3e-4},
          {"w_init", 0.02},
          {"delta", 1e-4},
          {"kdrl_k", 1e-3},
          {"seed", 0},
          {"student", ""},
          {"teacher", ""},
          {"dataset", ""},
          {"out", "runs/out"},
          {"clip_enabled", false},
          {"clip_eps", 0.2},
          {"grad_clip_norm", 0.0},
          {"tau", 2.0},
          {"tau_c", 0.5},
          {"sequence_level_opd", false},
          {"record_wall_time", false},
          {"operand_lo", 0},
          {"operand_hi", 99}};
}

/// Large-model settings (K=8 rollouts, lr 1e-6, 300 steps, w_init 2e-3 decaying
/// to zero at step 200). Too small a learning rate to move a toy model.
inline nlohmann::json paper_preset() {
  auto j = toy_preset();
  j["preset"] = "paper";
  j["learning_rate"] = 1e-6;
  j["w_init"] = 2e-3;
  j["delta"] = 1e-5;
  return j;
}

inline nlohmann::json preset(const std::string& name) {
  if (name == "toy") return toy_preset();
  if (name == "paper") return paper_preset();
  throw ConfigError("unknown preset '" + name + "' (expected toy or paper)");
}

// Parses a --set value: JSON literal when it parses, otherwise a plain string.
inline nlohmann::json parse_override_value(const std::string& text) {
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception&) {
    return text;
  }
}

// Applies "a.b=value" with a dot-path into the document.
inline void apply_override(nlohmann::json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  std::string pointer;
  std::string key = assignment.substr(0, eq);
  std::size_t start = 0;
  while (start <= key.size()) {
    const auto dot = key.find('.', start);
    const auto part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("override key '" + key + "' has an empty path segment");
    pointer += "/" + part;
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  doc[nlohmann::json::json_pointer(pointer)] = parse_override_value(assignment.substr(eq + 1));
}

/// Builds a config from a preset merged with `doc`; unknown keys are rejected.
inline TrainConfig config_from_json(const nlohmann::json& doc) {
  if (!doc.is_object()) throw ConfigError("config must be a JSON object");
  auto merged = preset(doc.value("preset", std::string("toy")));
  for (auto it = doc.begin(); it != doc.end(); ++it) {
    if (!merged.contains(it.key())) throw ConfigError("unknown config key '" + it.key() + "'");
    merged[it.key()] = it.value();
  }
  TrainConfig c;
  try {
    c.preset = merged.at("preset").get<std::string>();
    c.algo = algos::parse_algo(merged.at("algo").get<std::string>());
    c.group_size = merged.at("group_size").get<int>();
    c.steps = merged.at("steps").get<int>();
    c.prompts_per_step = merged.at("prompts_per_step").get<int>();
    c.max_new_tokens = merged.at("max_new_tokens").get<int>();
    c.train_temperature = merged.at("train_temperature").get<double>();
    c.learning_rate = merged.at("learning_rate").get<double>();
    c.w_init = merged.at("w_init").get<double>();
    c.delta = merged.at("delta").get<double>();
    c.kdrl_k = merged.at("kdrl_k").get<double>();
    c.seed = merged.at("seed").get<std::uint64_t>();
    c.student = merged.at("student").get<std::string>();
    c.teacher = merged.at("teacher").get<std::string>();
    c.dataset = merged.at("dataset").get<std::string>();
    c.out = merged.at("out").get<std::string>();
    c.clip_enabled = merged.at("clip_enabled").get<bool>();
    c.clip_eps = merged.at("clip_eps").get<double>();
    c.grad_clip_norm = merged.at("grad_clip_norm").get<double>();
    c.tau = merged.at("tau").get<double>();
    c.tau_c = merged.at("tau_c").get<double>();
    c.sequence_level_opd = merged.at("sequence_level_opd").get<bool>();
    c.record_wall_time = merged.at("record_wall_time").get<bool>();
    c.operand_lo = merged.at("operand_lo").get<int>();
    c.operand_hi = merged.at("operand_hi").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

inline nlohmann::json config_to_json(const TrainConfig& c) {
  auto j = toy_preset();
  j["preset"] = c.preset;
  j["algo"] = algos::to_string(c.algo);
  j["group_size"] = c.group_size;
  j["steps"] = c.steps;
  j["prompts_per_step"] = c.prompts_per_step;
  j["max_new_tokens"] = c.max_new_tokens;
  j["train_temperature"] = c.train_temperature;
  j["learning_rate"] = c.learning_rate;
  j["w_init"] = c.w_init;
  j["delta"] = c.delta;
  j["kdrl_k"] = c.kdrl_k;
  j["seed"] = c.seed;
  j["student"] = c.student;
  j["teacher"] = c.teacher;
  j["dataset"] = c.dataset;
  j["out"] = c.out;
  j["clip_enabled"] = c.clip_enabled;
  j["clip_eps"] = c.clip_eps;
  j["grad_clip_norm"] = c.grad_clip_norm;
  j["tau"] = c.tau;
  j["tau_c"] = c.tau_c;
  j["sequence_level_opd"] = c.sequence_level_opd;
  j["record_wall_time"] = c.record_wall_time;
  j["operand_lo"] = c.operand_lo;
  j["operand_hi"] = c.operand_hi;
  return j;
}

// ---- metrics -------------------------------------------------------------

struct MetricsRecord {
  std::int64_t step = 0;
  double mean_reward = 0.0;
  double mean_response_length = 0.0;
  double grad_norm = 0.0;
  double mean_seq_log_rho = 0.0;
  double rejection_fraction = 0.0;
  double consensus_fraction = 0.0;
  double guidance_weight = 0.0;
  double loss_total = 0.0;
  double loss_rl = 0.0;
  double loss_guidance = 0.0;
  double loss_rkl = 0.0;
  double wall_ms = 0.0;

  bool all_finite() const {
    for (double v : {mean_reward, mean_response_length, grad_norm, mean_seq_log_rho, rejection_fraction,
                     consensus_fraction, guidance_weight, loss_total, loss_rl, loss_guidance, loss_rkl, wall_ms})
      if (!std::isfinite(v)) return false;
    return true;
  }
};

inline const std::vector<std::string>& metrics_fields() {
  static const std::vector<std::string> fields = {
      "step",         "mean_reward",  "mean_response_length", "grad_norm",     "mean_seq_log_rho",
      "rejection_fraction", "consensus_fraction", "guidance_weight", "loss_total", "loss_rl",
      "loss_guidance", "loss_rkl",    "wall_ms"};
  return fields;
}

inline nlohmann::ordered_json to_json(const MetricsRecord& r) {
  nlohmann::ordered_json j;
  j["step"] = r.step;
  j["mean_reward"] = r.mean_reward;
  j["mean_response_length"] = r.mean_response_length;
  j["grad_norm"] = r.grad_norm;
  j["mean_seq_log_rho"] = r.mean_seq_log_rho;
  j["rejection_fraction"] = r.rejection_fraction;
  j["consensus_fraction"] = r.consensus_fraction;
  j["guidance_weight"] = r.guidance_weight;
  j["loss_total"] = r.loss_total;
  j["loss_rl"] = r.loss_rl;
  j["loss_guidance"] = r.loss_guidance;
  j["loss_rkl"] = r.loss_rkl;
  j["wall_ms"] = r.wall_ms;
  return j;
}

inline double number_or_nan(const nlohmann::json& j, const char* key) {
  const auto& v = j.at(key);
  return v.is_null() ? std::nan("") : v.get<double>();
}

inline MetricsRecord metrics_from_json(const nlohmann::json& j) {
  MetricsRecord r;
  r.step = j.at("step").get<std::int64_t>();
  r.mean_reward = number_or_nan(j, "mean_reward");
  r.mean_response_length = number_or_nan(j, "mean_response_length");
  r.grad_norm = number_or_nan(j, "grad_norm");
  r.mean_seq_log_rho = number_or_nan(j, "mean_seq_log_rho");
  r.rejection_fraction = number_or_nan(j, "rejection_fraction");
  r.consensus_fraction = number_or_nan(j, "consensus_fraction");
  r.guidance_weight = number_or_nan(j, "guidance_weight");
  r.loss_total = number_or_nan(j, "loss_total");
  r.loss_rl = number_or_nan(j, "loss_rl");
  r.loss_guidance = number_or_nan(j, "loss_guidance");
  r.loss_rkl = number_or_nan(j, "loss_rkl");
  r.wall_ms = number_or_nan(j, "wall_ms");
  return r;
}

inline std::vector<MetricsRecord> read_metrics(const std::filesystem::path& path) {
  std::vector<MetricsRecord> out;
  for (const auto& j : tasks::read_lines(path)) out.push_back(metrics_from_json(j));
  return out;
}

// ---- training ------------------------------------------------------------

struct TrainResult {
  PolicyModel student;
  std::vector<MetricsRecord> metrics;
  bool aborted = false;
  std::string abort_reason;
};

using MetricsSink = std::function<void(const MetricsRecord&, const std::string& abort_reason)>;

namespace detail {

inline std::vector<Trajectory> sample_group(const PolicyModel& model, const tasks::PromptInstance& p, int group_size,
                                            double temperature, int max_new, std::uint64_t seed, std::int64_t step,
                                            std::size_t prompt_index) {
  std::vector<Trajectory> trajs(static_cast<std::size_t>(group_size));
  parallel_for(trajs.size(), [&](std::size_t i) {
    trajs[i] = rollout(model, p.prompt, temperature, max_new, tasks::Vocab::kEos,
                       derive_seed(seed, {static_cast<std::uint64_t>(step), prompt_index, i, 0x7011ULL}));
  });
  return trajs;
}

}  // namespace detail

/// In-memory training loop. The sink (if any) receives each record as it is
/// produced; an aborted run ends with one diagnostic record.
inline TrainResult train(const TrainConfig& cfg, PolicyModel student, const PolicyModel* teacher,
                         const std::vector<tasks::PromptInstance>& dataset, const MetricsSink& sink = {}) {
  cfg.validate();
  if (dataset.empty()) throw ConfigError("train: dataset is empty");
  if (algos::needs_teacher(cfg.algo) && teacher == nullptr) {
    throw ConfigError("train: algorithm " + algos::to_string(cfg.algo) + " requires a teacher");
  }
  if (teacher != nullptr) {
    if (!teacher->frozen()) throw std::logic_error("train: teacher must be frozen");
    check_shared_vocab(student, *teacher);
  }
  if (student.frozen()) throw std::logic_error("train: student is frozen");
  const std::size_t need = static_cast<std::size_t>(cfg.task_spec().prompt_len() + cfg.max_new_tokens);
  if (need > static_cast<std::size_t>(student.config().max_context)) {
    throw ContextOverflow("train: prompts plus max_new_tokens need " + std::to_string(need) +
                          " positions, student max_context is " + std::to_string(student.config().max_context));
  }

  TrainResult result;
  AdamState adam(student.params(), AdamConfig{cfg.learning_rate});
  const auto G = cfg.group_size;

  for (std::int64_t step = 0; step < cfg.steps; ++step) {
    const auto t0 = std::chrono::steady_clock::now();
    MetricsRecord rec;
    rec.step = step;
    std::string abort_reason;
    try {
      Rng prompt_rng(derive_seed(cfg.seed, {static_cast<std::uint64_t>(step), 0x9e0ULL}));
      algos::GrpoBatch batch;
      for (int p = 0; p < cfg.prompts_per_step; ++p) {
        const auto& inst = dataset[uniform_index(prompt_rng, dataset.size())];
        auto trajs = detail::sample_group(student, inst, G, cfg.train_temperature, cfg.max_new_tokens, cfg.seed, step,
                                          static_cast<std::size_t>(p));
        batch.groups.push_back(algos::make_group(inst, std::move(trajs)));
      }
      if (teacher != nullptr) algos::attach_teacher(batch, *teacher, student);

      double reward_sum = 0.0, len_sum = 0.0, seq_rho_sum = 0.0;
      double rej = 0.0, con = 0.0, tokens = 0.0, trajectories = 0.0;
      for (const auto& g : batch.groups) {
        for (std::size_t i = 0; i < g.trajectories.size(); ++i) {
          const auto& tr = g.trajectories[i];
          for (double lp : tr.behavior_logprobs)
            if (!std::isfinite(lp)) throw std::domain_error("non-finite behavior log-probability");
          reward_sum += g.rewards[i];
          len_sum += static_cast<double>(tr.response.size());
          trajectories += 1.0;
          if (teacher == nullptr) continue;
          SequenceLogRatio lr;
          if (cfg.train_temperature == 1.0) {
            for (std::size_t t = 0; t < tr.response.size(); ++t) {
              const double v = tr.behavior_logprobs[t] - g.guidance[i].teacher_logprobs_on_student_tokens[t];
              lr.per_token.push_back(v);
              lr.total += v;
            }
          } else {
            lr = sequence_log_ratio(student, *teacher, tr);
          }
          auto stats = algos::make_rkl_stats(lr);
          algos::classify_regime(stats, cfg.tau, cfg.tau_c);
          seq_rho_sum += stats.sequence;
          const double n = static_cast<double>(stats.per_token.size());
          rej += stats.rejection_fraction * n;
          con += stats.consensus_fraction * n;
          tokens += n;
        }
      }
      rec.mean_reward = reward_sum / trajectories;
      rec.mean_response_length = len_sum / trajectories;
      rec.mean_seq_log_rho = teacher != nullptr ? seq_rho_sum / trajectories : 0.0;
      rec.rejection_fraction = tokens > 0.0 ? rej / tokens : 0.0;
      rec.consensus_fraction = tokens > 0.0 ? con / tokens : 0.0;

      zero_grads(student.params());
      if (cfg.algo == algos::Algo::Sft) {
        // Off-policy targets: responses sampled from the teacher.
        tasks::Corpus corpus;
        for (std::size_t p = 0; p < batch.groups.size(); ++p) {
          const auto& inst = batch.groups[p].instance;
          auto trajs = detail::sample_group(*teacher, inst, G, cfg.train_temperature, cfg.max_new_tokens,
                                            derive_seed(cfg.seed, {0x5f7ULL}), step, p);
          for (const auto& tr : trajs) corpus.push_back({inst.prompt_text(), tasks::Vocab::decode(tr.response)});
        }
        rec.loss_total = rec.loss_rl = algos::sft_loss(corpus, student, true);
      } else {
        algos::ObjectiveOptions opt;
        opt.algo = cfg.algo;
        opt.temperature = cfg.train_temperature;
        opt.kdrl_k = cfg.kdrl_k;
        opt.sequence_level_opd = cfg.sequence_level_opd;
        if (cfg.algo == algos::Algo::Tgpo) opt.guidance_weight = algos::annealed_weight(cfg.schedule(), step);
        if (cfg.clip_enabled) opt.clip_eps = cfg.clip_eps;
        const auto loss = algos::batch_loss(batch, student, opt, true);
        rec.loss_total = loss.total;
        rec.loss_rl = loss.rl_term;
        rec.loss_guidance = loss.guidance_term;
        rec.loss_rkl = loss.rkl_term;
        rec.guidance_weight = loss.guidance_weight_used;
      }
      if (!std::isfinite(rec.loss_total)) throw std::domain_error("non-finite loss");
      rec.grad_norm = global_grad_norm(student.params());
      if (!std::isfinite(rec.grad_norm)) throw std::domain_error("non-finite gradient norm");
      if (cfg.grad_clip_norm > 0.0) clip_grad_norm(student.params(), cfg.grad_clip_norm);
      adam_step(student.params(), adam);
    } catch (const std::domain_error& e) {
      abort_reason = "step " + std::to_string(step) + ": " + e.what();
    }
    if (cfg.record_wall_time) {
      rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    }
    if (abort_reason.empty() && !rec.all_finite()) abort_reason = "step " + std::to_string(step) + ": non-finite metrics";
    result.metrics.push_back(rec);
    if (sink) sink(rec, abort_reason);
    if (!abort_reason.empty()) {
      result.aborted = true;
      result.abort_reason = abort_reason;
      break;
    }
  }
  zero_grads(student.params());
  result.student = std::move(student);
  return result;
}

/// JSONL writer; one flushed line per record.
class MetricsWriter {
 public:
  explicit MetricsWriter(const std::filesystem::path& path) : out_(path, std::ios::binary | std::ios::trunc) {
    if (!out_) throw std::runtime_error("cannot write " + path.string());
  }
  void write(const MetricsRecord& r, const std::string& abort_reason) {
    auto j = to_json(r);
    if (!abort_reason.empty()) {
      j["aborted"] = true;
      j["abort_reason"] = abort_reason;
    }
    out_ << j.dump() << '\n';
    out_.flush();
  }

 private:
  std::ofstream out_;
};

struct TrainOutputs {
  std::filesystem::path metrics_path;
  std::filesystem::path checkpoint_dir;
  TrainResult result;
};

/// File-based driver: loads checkpoints and dataset named in the config,
/// writes <out>/metrics.jsonl, <out>/config.json and <out>/final/.
inline TrainOutputs train_loop(const TrainConfig& cfg) {
  cfg.validate();
  if (cfg.student.empty()) throw ConfigError("train_loop: student checkpoint path is required");
  if (cfg.dataset.empty()) throw ConfigError("train_loop: dataset path is required");
  if (algos::needs_teacher(cfg.algo) && cfg.teacher.empty()) {
    throw ConfigError("train_loop: algorithm " + algos::to_string(cfg.algo) + " requires --teacher");
  }
  auto student = load_checkpoint(cfg.student, false).model;
  std::optional<PolicyModel> teacher;
  if (!cfg.teacher.empty()) teacher = load_checkpoint(cfg.teacher, true).model;
  const auto dataset = tasks::load_dataset(cfg.dataset, cfg.task_spec());

  const std::filesystem::path out(cfg.out);
  std::filesystem::create_directories(out);
  {
    std::ofstream cf(out / "config.json", std::ios::binary | std::ios::trunc);
    cf << config_to_json(cfg).dump(2) << '\n';
  }
  TrainOutputs outputs;
  outputs.metrics_path = out / "metrics.jsonl";
  outputs.checkpoint_dir = out / "final";
  MetricsWriter writer(outputs.metrics_path);
  outputs.result = train(cfg, std::move(student), teacher ? &*teacher : nullptr, dataset,
                         [&](const MetricsRecord& r, const std::string& reason) { writer.write(r, reason); });
  CheckpointState state;
  state.step = static_cast<std::int64_t>(outputs.result.metrics.size());
  state.rng_state = "seed=" + std::to_string(cfg.seed) + ";step=" + std::to_string(state.step);
  save_checkpoint(outputs.result.student, state, outputs.checkpoint_dir);
  return outputs;
}

// ---- evaluation ----------------------------------------------------------

struct EvalResult {
  double accuracy_avg_at_k = 0.0;
  double mean_length = 0.0;
};

/// k independent rollouts per prompt; accuracy averaged over all rollouts.
inline EvalResult eval_pass(const PolicyModel& model, const std::vector<tasks::PromptInstance>& dataset, int k,
                            double temperature, int max_new, std::uint64_t seed = 0) {
  if (k < 1) throw std::invalid_argument("eval_pass: k must be >= 1");
  if (dataset.empty()) throw std::invalid_argument("eval_pass: dataset is empty");
  const std::size_t n = dataset.size() * static_cast<std::size_t>(k);
  std::vector<double> reward(n), length(n);
  parallel_for(n, [&](std::size_t idx) {
    const std::size_t p = idx / static_cast<std::size_t>(k), r = idx % static_cast<std::size_t>(k);
    auto tr = rollout(model, dataset[p].prompt, temperature, max_new, tasks::Vocab::kEos,
                      derive_seed(seed, {p, r, 0xe7a1ULL}));
    reward[idx] = tasks::verify(dataset[p], tr).reward;
    length[idx] = static_cast<double>(tr.response.size());
  });
  EvalResult e;
  for (std::size_t i = 0; i < n; ++i) {
    e.accuracy_avg_at_k += reward[i];
    e.mean_length += length[i];
  }
  e.accuracy_avg_at_k /= static_cast<double>(n);
  e.mean_length /= static_cast<double>(n);
  return e;
}

}  // namespace opdlab::runner
