#pragma once

// Training objectives over rollout groups.
//
// Every group-based loss is normalized per group by Z = Σ_i |y_i| and then
// averaged over the groups of a batch. All returned loss values follow the
// minimization convention (loss = −objective).

#include <algorithm>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "opdlab/autodiff.hpp"
#include "opdlab/model.hpp"
#include "opdlab/parallel.hpp"
#include "opdlab/tasks.hpp"

namespace opdlab::algos {

enum class Algo { Grpo, RklOpd, Kdrl, Tgpo, Sft };

inline std::string to_string(Algo a) {
  switch (a) {
    case Algo::Grpo: return "grpo";
    case Algo::RklOpd: return "rkl_opd";
    case Algo::Kdrl: return "kdrl";
    case Algo::Tgpo: return "tgpo";
    case Algo::Sft: return "sft";
  }
  return "?";
}

inline Algo parse_algo(const std::string& s) {
  for (Algo a : {Algo::Grpo, Algo::RklOpd, Algo::Kdrl, Algo::Tgpo, Algo::Sft})
    if (to_string(a) == s) return a;
  throw std::invalid_argument("unknown algorithm '" + s + "' (expected grpo, rkl_opd, kdrl, tgpo or sft)");
}

inline bool needs_teacher(Algo a) { return a != Algo::Grpo; }

// ---- advantages ----------------------------------------------------------

struct GroupAdvantages {
  double mean = 0.0;
  double std = 0.0;  // population
  std::vector<double> advantages;
};

/// A_i = (r_i − μ)/σ with population σ; a zero-variance group gets all-zero advantages.
inline GroupAdvantages compute_group_advantages(std::span<const double> rewards) {
  if (rewards.size() < 2) throw std::invalid_argument("compute_group_advantages: need at least 2 rewards");
  GroupAdvantages g;
  const double n = static_cast<double>(rewards.size());
  for (double r : rewards) g.mean += r;
  g.mean /= n;
  double var = 0.0;
  for (double r : rewards) var += (r - g.mean) * (r - g.mean);
  g.std = std::sqrt(var / n);
  g.advantages.assign(rewards.size(), 0.0);
  // Identical rewards can still leave a rounding-level σ; treat them as degenerate.
  if (std::all_of(rewards.begin(), rewards.end(), [&](double r) { return r == rewards[0]; })) {
    g.std = 0.0;
    return g;
  }
  if (g.std > 0.0)
    for (std::size_t i = 0; i < rewards.size(); ++i) g.advantages[i] = (rewards[i] - g.mean) / g.std;
  return g;
}

struct RolloutGroup {
  tasks::PromptInstance instance;
  std::vector<Trajectory> trajectories;
  std::vector<double> rewards;
  double group_mean = 0.0;
  double group_std = 0.0;
  std::vector<double> advantages;
  // Filled by attach_teacher(); one entry per trajectory.
  std::vector<GuidanceTargets> guidance;
  const PolicyModel* guidance_teacher = nullptr;  // which teacher filled `guidance`

  std::size_t token_count() const {
    std::size_t z = 0;
    for (const auto& t : trajectories) z += t.response.size();
    return z;
  }
};

struct GrpoBatch {
  std::vector<RolloutGroup> groups;
};

/// Verifies every trajectory and fills rewards and advantages.
inline RolloutGroup make_group(tasks::PromptInstance instance, std::vector<Trajectory> trajectories) {
  RolloutGroup g;
  g.instance = std::move(instance);
  g.trajectories = std::move(trajectories);
  for (const auto& t : g.trajectories) g.rewards.push_back(tasks::verify(g.instance, t).reward);
  auto adv = compute_group_advantages(g.rewards);
  g.group_mean = adv.mean;
  g.group_std = adv.std;
  g.advantages = std::move(adv.advantages);
  return g;
}

/// Single teacher pass per trajectory: argmax targets and teacher log-probs.
inline void attach_teacher(GrpoBatch& batch, const PolicyModel& teacher, const PolicyModel& student) {
  for (auto& g : batch.groups) {
    if (g.guidance_teacher == &teacher && g.guidance.size() == g.trajectories.size()) continue;
    g.guidance.assign(g.trajectories.size(), {});
    g.guidance_teacher = &teacher;
    parallel_for(g.trajectories.size(),
                 [&](std::size_t i) { g.guidance[i] = teacher_targets(teacher, student, g.trajectories[i]); });
  }
}

// ---- schedule ------------------------------------------------------------

struct GuidanceSchedule {
  double w_init = 0.0;
  double decay_rate = 0.0;
};

/// w(t) = max(w_init − decay_rate·t, 0)
inline double annealed_weight(const GuidanceSchedule& s, std::int64_t t) {
  if (t < 0) throw std::invalid_argument("annealed_weight: step must be >= 0");
  if (s.decay_rate > 0.0 && static_cast<double>(t) >= std::ceil(s.w_init / s.decay_rate)) return 0.0;
  return std::max(s.w_init - s.decay_rate * static_cast<double>(t), 0.0);
}

// ---- regimes -------------------------------------------------------------

enum class Regime { Consensus, Rejection, Other };

struct RklStats {
  std::vector<double> per_token;  // log ρ_t
  double sequence = 0.0;          // log ρ(y)
  std::vector<Regime> labels;
  double rejection_fraction = 0.0;
  double consensus_fraction = 0.0;
};

inline RklStats make_rkl_stats(const SequenceLogRatio& r) {
  RklStats s;
  s.per_token = r.per_token;
  s.sequence = r.total;
  return s;
}

/// Rejection iff log ρ_t > tau (strict); consensus iff |log ρ_t| <= tau_c.
inline void classify_regime(RklStats& stats, double tau, double tau_c = 0.5) {
  if (!(tau > 0.0)) throw std::invalid_argument("classify_regime: tau must be > 0");
  stats.labels.clear();
  std::size_t rej = 0, con = 0;
  for (double v : stats.per_token) {
    if (v > tau) {
      stats.labels.push_back(Regime::Rejection);
      ++rej;
    } else if (std::abs(v) <= tau_c) {
      stats.labels.push_back(Regime::Consensus);
      ++con;
    } else {
      stats.labels.push_back(Regime::Other);
    }
  }
  const double n = static_cast<double>(stats.per_token.size());
  stats.rejection_fraction = n > 0 ? static_cast<double>(rej) / n : 0.0;
  stats.consensus_fraction = n > 0 ? static_cast<double>(con) / n : 0.0;
}

/// Intrinsic reward −log ρ(y).
inline double rkl_intrinsic_reward(const RklStats& stats) { return -stats.sequence; }

inline std::vector<double> rkl_intrinsic_token_rewards(const RklStats& stats) {
  std::vector<double> r(stats.per_token.size());
  for (std::size_t i = 0; i < r.size(); ++i) r[i] = -stats.per_token[i];
  return r;
}

// ---- losses --------------------------------------------------------------

struct LossBreakdown {
  double total = 0.0;
  double rl_term = 0.0;
  double guidance_term = 0.0;
  double rkl_term = 0.0;  // already multiplied by the KDRL coefficient
  double guidance_weight_used = 0.0;
};

struct ObjectiveOptions {
  Algo algo = Algo::Grpo;
  double guidance_weight = 0.0;
  double kdrl_k = 0.0;
  double temperature = 1.0;
  bool sequence_level_opd = false;
  std::optional<double> clip_eps;  // PPO-style ratio clip; off by default
};

class NonFiniteRatio : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

namespace detail {

struct GroupTerms {
  double rl = 0.0, guidance = 0.0, rkl = 0.0;
};

// Builds one group's loss on the tape. Values of each component go to `terms`.
inline ad::Tensor group_loss(ad::Tape& tape, const Weights& w, const ModelConfig& cfg, const RolloutGroup& g,
                             const ObjectiveOptions& opt, double group_scale, GroupTerms& terms) {
  const double Z = static_cast<double>(g.token_count());
  std::vector<ad::Tensor> parts;
  const bool uses_teacher = opt.algo == Algo::RklOpd || opt.algo == Algo::Kdrl || opt.algo == Algo::Tgpo;
  if (uses_teacher && g.guidance.size() != g.trajectories.size()) {
    throw std::logic_error("loss: teacher guidance missing; call attach_teacher() first");
  }
  if (Z == 0.0) return tape.add_scalars(parts);
  const double norm = group_scale / Z;
  for (std::size_t i = 0; i < g.trajectories.size(); ++i) {
    const auto& tr = g.trajectories[i];
    const std::size_t R = tr.response.size();
    if (R == 0) continue;
    auto rows = score_rows(tape, w, cfg, tr.prompt, tr.response, opt.temperature);
    auto logp = tape.gather(rows, tr.response);

    // Per-token advantages for the policy-gradient surrogate.
    std::vector<double> adv(R, 0.0);
    if (opt.algo == Algo::RklOpd) {
      const auto& tl = g.guidance[i].teacher_logprobs_on_student_tokens;
      double seq = 0.0;
      for (std::size_t t = 0; t < R; ++t) {
        adv[t] = -(logp[t] - tl[t]);
        seq += adv[t];
      }
      if (opt.sequence_level_opd) std::fill(adv.begin(), adv.end(), seq);
    } else if (opt.algo != Algo::Sft) {
      std::fill(adv.begin(), adv.end(), g.advantages[i]);
    }

    if (std::any_of(adv.begin(), adv.end(), [](double a) { return a != 0.0; })) {
      std::vector<double> behavior(tr.behavior_logprobs.begin(), tr.behavior_logprobs.end());
      auto ratio = tape.exp(tape.sub(logp, ad::Tensor({R}, behavior)));
      std::vector<double> weights(R);
      double clipped_const = 0.0;
      for (std::size_t t = 0; t < R; ++t) {
        const double rho = ratio[t];
        if (!std::isfinite(rho) || rho <= 0.0) {
          throw NonFiniteRatio("loss: importance ratio " + std::to_string(rho) + " at trajectory " +
                               std::to_string(i) + " position " + std::to_string(t));
        }
        weights[t] = -adv[t] * norm;
        if (opt.clip_eps) {
          const double lo = 1.0 - *opt.clip_eps, hi = 1.0 + *opt.clip_eps;
          if ((adv[t] > 0.0 && rho > hi) || (adv[t] < 0.0 && rho < lo)) {
            clipped_const += -adv[t] * norm * std::clamp(rho, lo, hi);
            weights[t] = 0.0;
          }
        }
      }
      auto term = tape.weighted_sum(ratio, weights);
      terms.rl += term.item() + clipped_const;
      parts.push_back(term);
    }

    if (opt.algo == Algo::Kdrl && opt.kdrl_k != 0.0) {
      const auto& tl = g.guidance[i].teacher_logprobs_on_student_tokens;
      std::vector<double> weights(R, opt.kdrl_k * norm);
      auto term = tape.weighted_sum(logp, weights);
      double teacher_part = 0.0;
      for (std::size_t t = 0; t < R; ++t) teacher_part += opt.kdrl_k * norm * tl[t];
      terms.rkl += term.item() - teacher_part;
      parts.push_back(term);
    }

    if (opt.algo == Algo::Tgpo && opt.guidance_weight != 0.0) {
      auto grow = opt.temperature == 1.0 ? rows : score_rows(tape, w, cfg, tr.prompt, tr.response, 1.0);
      auto picked = tape.gather(grow, g.guidance[i].targets);
      std::vector<double> weights(R, -norm);
      auto ce = tape.weighted_sum(picked, weights);
      terms.guidance += ce.item();
      parts.push_back(tape.scale(ce, opt.guidance_weight));
    }
  }
  return tape.add_scalars(parts);
}

}  // namespace detail

/// Shared driver for grpo / rkl_opd / kdrl / tgpo. When accumulate_grads is
/// set, gradients of `total` are added into the student's parameter grads.
inline LossBreakdown batch_loss(const GrpoBatch& batch, PolicyModel& student, const ObjectiveOptions& opt,
                                bool accumulate_grads = true) {
  if (batch.groups.empty()) throw std::invalid_argument("loss: empty batch");
  const double group_scale = 1.0 / static_cast<double>(batch.groups.size());
  std::vector<detail::GroupTerms> terms(batch.groups.size());
  auto fn = [&](std::size_t s, ad::Tape& tape, const Weights& w) {
    terms[s] = {};
    return detail::group_loss(tape, w, student.config(), batch.groups[s], opt, group_scale, terms[s]);
  };
  if (accumulate_grads) {
    sharded_backward(student, batch.groups.size(), fn);
  } else {
    parallel_for(batch.groups.size(), [&](std::size_t s) {
      ad::Tape tape;
      (void)fn(s, tape, PolicyModel::weights_of(student.replicate(false), student.config()));
    });
  }
  LossBreakdown out;
  for (const auto& t : terms) {
    out.rl_term += t.rl;
    out.guidance_term += t.guidance;
    out.rkl_term += t.rkl;
  }
  out.guidance_weight_used = opt.algo == Algo::Tgpo ? opt.guidance_weight : 0.0;
  out.total = out.rl_term + out.guidance_weight_used * out.guidance_term + out.rkl_term;
  return out;
}

/// −(1/Z) Σ_i Σ_t ρ_{i,t}·A_i per group, averaged over groups. Unclipped unless requested.
inline LossBreakdown grpo_loss(const GrpoBatch& batch, PolicyModel& student, bool accumulate_grads = true,
                               double temperature = 1.0) {
  ObjectiveOptions opt;
  opt.algo = Algo::Grpo;
  opt.temperature = temperature;
  return batch_loss(batch, student, opt, accumulate_grads);
}

/// Policy gradient with per-token advantage −(log π_θ − log π_T), no verifier reward.
inline LossBreakdown opd_rkl_loss(GrpoBatch& batch, PolicyModel& student, const PolicyModel& teacher,
                                  bool accumulate_grads = true, bool sequence_level = false) {
  attach_teacher(batch, teacher, student);
  ObjectiveOptions opt;
  opt.algo = Algo::RklOpd;
  opt.sequence_level_opd = sequence_level;
  return batch_loss(batch, student, opt, accumulate_grads);
}

/// GRPO plus k·(1/Z) Σ (log π_θ − log π_T), differentiable through π_θ.
inline LossBreakdown kdrl_loss(GrpoBatch& batch, PolicyModel& student, const PolicyModel& teacher, double k,
                               bool accumulate_grads = true) {
  if (k < 0.0) throw std::invalid_argument("kdrl_loss: k must be >= 0");
  attach_teacher(batch, teacher, student);
  ObjectiveOptions opt;
  opt.algo = Algo::Kdrl;
  opt.kdrl_k = k;
  return batch_loss(batch, student, opt, accumulate_grads);
}

/// GRPO plus w(t)·J_G, with J_G the Z-normalized cross-entropy on teacher argmax targets.
inline LossBreakdown tgpo_loss(GrpoBatch& batch, PolicyModel& student, const PolicyModel& teacher,
                               const GuidanceSchedule& schedule, std::int64_t t, bool accumulate_grads = true) {
  attach_teacher(batch, teacher, student);
  ObjectiveOptions opt;
  opt.algo = Algo::Tgpo;
  opt.guidance_weight = annealed_weight(schedule, t);
  return batch_loss(batch, student, opt, accumulate_grads);
}

/// Per-token cross-entropy of the student against teacher argmax tokens at
/// the trajectory's own prefixes (normalized by |y|).
inline double guidance_loss(const Trajectory& traj, const GuidanceTargets& targets, const PolicyModel& student) {
  if (targets.targets.size() != traj.response.size()) {
    throw std::invalid_argument("guidance_loss: " + std::to_string(targets.targets.size()) + " targets for response of " +
                                std::to_string(traj.response.size()) + " tokens");
  }
  if (traj.response.empty()) return 0.0;
  auto rows = forward_logprobs(student, traj.prompt, traj.response);
  double s = 0.0;
  for (std::size_t t = 0; t < rows.rows; ++t) s -= rows.at(t, targets.targets[t]);
  return s / static_cast<double>(rows.rows);
}

/// Teacher-forcing cross-entropy on off-policy targets, per target token.
/// When accumulate_grads is set, gradients are added into the student's grads.
inline double sft_loss(const tasks::Corpus& batch, PolicyModel& student, bool accumulate_grads = false) {
  if (batch.empty()) throw std::invalid_argument("sft_loss: empty batch");
  std::vector<std::pair<Tokens, Tokens>> enc;
  double tokens = 0.0;
  for (const auto& p : batch) {
    enc.emplace_back(tasks::Vocab::encode(p.prompt), tasks::Vocab::encode(p.target));
    tokens += static_cast<double>(enc.back().second.size());
  }
  if (!accumulate_grads) {
    double s = 0.0;
    for (const auto& [prompt, target] : enc) {
      auto rows = forward_logprobs(student, prompt, target);
      for (std::size_t t = 0; t < target.size(); ++t) s -= rows.at(t, target[t]);
    }
    return s / tokens;
  }
  auto losses = sharded_backward(student, enc.size(), [&](std::size_t i, ad::Tape& tape, const Weights& w) {
    return tape.scale(tasks::teacher_forcing_nll(tape, w, student.config(), enc[i].first, enc[i].second), 1.0 / tokens);
  });
  double s = 0.0;
  for (double l : losses) s += l;
  return s;
}

/// ρ_{i,t} = π_θ(y_t|·)/π_behavior(y_t|·) for every trajectory of a group.
inline std::vector<std::vector<double>> importance_ratios(const RolloutGroup& g, const PolicyModel& student,
                                                          double temperature = 1.0) {
  std::vector<std::vector<double>> out;
  for (const auto& tr : g.trajectories) {
    std::vector<double> r;
    if (!tr.response.empty()) {
      auto rows = forward_logprobs(student, tr.prompt, tr.response, temperature);
      for (std::size_t t = 0; t < tr.response.size(); ++t)
        r.push_back(std::exp(rows.at(t, tr.response[t]) - tr.behavior_logprobs[t]));
    }
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace opdlab::algos
