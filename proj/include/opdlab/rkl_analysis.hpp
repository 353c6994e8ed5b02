#pragma once

// Exact enumeration and Monte Carlo checks of reverse-KL gradient behaviour
// on categorical policies over small outcome spaces.
//
// All gradients are with respect to the student's logits. For a softmax
// policy the score is ∇ log π(y) = e_y − π.

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "opdlab/autodiff.hpp"
#include "opdlab/rng.hpp"

namespace opdlab::rkl {

/// Every token sequence of length 1..max_len over a vocabulary (empty prompt).
struct OutcomeSpace {
  int vocab = 2;
  int max_len = 1;

  std::size_t size() const {
    std::size_t n = 0, p = 1;
    for (int l = 1; l <= max_len; ++l) {
      p *= static_cast<std::size_t>(vocab);
      n += p;
    }
    return n;
  }

  std::vector<int> sequence(std::size_t index) const {
    std::size_t p = 1;
    for (int l = 1; l <= max_len; ++l) {
      p *= static_cast<std::size_t>(vocab);
      if (index < p) {
        std::vector<int> seq(static_cast<std::size_t>(l));
        for (int k = l - 1; k >= 0; --k) {
          seq[static_cast<std::size_t>(k)] = static_cast<int>(index % static_cast<std::size_t>(vocab));
          index /= static_cast<std::size_t>(vocab);
        }
        return seq;
      }
      index -= p;
    }
    throw std::out_of_range("OutcomeSpace: index beyond space");
  }
};

inline constexpr std::size_t kMaxOutcomes = 100000;

class CategoricalPolicy {
 public:
  CategoricalPolicy() = default;
  explicit CategoricalPolicy(std::vector<double> logits) : logits_(std::move(logits)) {
    if (logits_.empty() || logits_.size() > kMaxOutcomes) {
      throw std::invalid_argument("CategoricalPolicy: outcome count must be in [1, 1e5]");
    }
    refresh();
  }

  static CategoricalPolicy from_probs(const std::vector<double>& probs) {
    std::vector<double> logits(probs.size());
    for (std::size_t i = 0; i < probs.size(); ++i) {
      if (!(probs[i] > 0.0)) throw std::invalid_argument("CategoricalPolicy: probabilities must be > 0");
      logits[i] = std::log(probs[i]);
    }
    return CategoricalPolicy(std::move(logits));
  }

  static CategoricalPolicy random(std::size_t n, Rng& rng, double scale = 1.0) {
    std::vector<double> logits(n);
    for (auto& l : logits) l = scale * normal(rng);
    return CategoricalPolicy(std::move(logits));
  }

  std::size_t size() const { return logits_.size(); }
  const std::vector<double>& logits() const { return logits_; }
  const std::vector<double>& probs() const { return probs_; }
  const std::vector<double>& log_probs() const { return log_probs_; }

  std::size_t sample(Rng& rng) const { return sample_categorical(rng, probs_); }

 private:
  void refresh() {
    log_probs_.resize(logits_.size());
    ad::kernel::log_softmax_row(logits_.data(), log_probs_.data(), logits_.size());
    probs_.resize(logits_.size());
    for (std::size_t i = 0; i < logits_.size(); ++i) probs_[i] = std::exp(log_probs_[i]);
  }

  std::vector<double> logits_;
  std::vector<double> probs_;
  std::vector<double> log_probs_;
};

inline void same_space(const CategoricalPolicy& a, const CategoricalPolicy& b) {
  if (a.size() != b.size()) {
    throw std::invalid_argument("outcome spaces differ: " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
  }
}

/// Product policy over fixed-length sequences: π(y) = Π_t π_t(y_t).
/// Outcome index is the base-V number of the sequence, first token most significant.
inline CategoricalPolicy product_policy(const std::vector<std::vector<double>>& per_position_logits) {
  std::vector<double> logits{0.0};
  for (const auto& pos : per_position_logits) {
    std::vector<double> lp(pos.size());
    ad::kernel::log_softmax_row(pos.data(), lp.data(), pos.size());
    std::vector<double> next;
    next.reserve(logits.size() * lp.size());
    for (double a : logits)
      for (double b : lp) next.push_back(a + b);
    logits = std::move(next);
  }
  return CategoricalPolicy(std::move(logits));
}

inline std::vector<double> log_ratios(const CategoricalPolicy& student, const CategoricalPolicy& teacher) {
  same_space(student, teacher);
  std::vector<double> lr(student.size());
  for (std::size_t y = 0; y < lr.size(); ++y) lr[y] = student.log_probs()[y] - teacher.log_probs()[y];
  return lr;
}

/// Σ_y π_θ(y)(log π_θ(y) − log π_T(y)) by full enumeration.
inline double exact_rkl(const CategoricalPolicy& student, const CategoricalPolicy& teacher) {
  const auto lr = log_ratios(student, teacher);
  double kl = 0.0;
  for (std::size_t y = 0; y < lr.size(); ++y) kl += student.probs()[y] * lr[y];
  return kl;
}

/// Enumerated E_y[(e_y − π)·f(y)].
inline std::vector<double> score_weighted_expectation(const CategoricalPolicy& policy, const std::vector<double>& f) {
  const auto& p = policy.probs();
  double pf = 0.0;
  for (std::size_t y = 0; y < p.size(); ++y) pf += p[y] * f[y];
  // Σ_y p_y (e_y − p) f_y = p ⊙ f − p·E[f]
  std::vector<double> g(p.size());
  for (std::size_t j = 0; j < p.size(); ++j) g[j] = p[j] * f[j] - p[j] * pf;
  return g;
}

struct DualGradient {
  std::vector<double> autodiff;        // ∇ of the enumerated sum, via the tape
  std::vector<double> score_function;  // E[∇log π_θ(y)·(log ρ(y) + 1)]
  double max_abs_diff = 0.0;
};

/// ∇_θ KL(π_θ‖π_T) computed two independent ways.
inline DualGradient exact_rkl_gradient(const CategoricalPolicy& student, const CategoricalPolicy& teacher) {
  same_space(student, teacher);
  DualGradient out;
  {
    ad::Tape tape;
    ad::Tensor logits({1, student.size()}, student.logits(), true);
    ad::Tensor teacher_logp({1, teacher.size()}, teacher.log_probs());
    auto logp = tape.log_softmax(logits);
    auto kl = tape.sum(tape.mul(tape.exp(logp), tape.sub(logp, teacher_logp)));
    tape.backward(kl);
    out.autodiff = logits.grad();
  }
  auto weight = log_ratios(student, teacher);
  for (auto& w : weight) w += 1.0;
  out.score_function = score_weighted_expectation(student, weight);
  for (std::size_t j = 0; j < out.autodiff.size(); ++j)
    out.max_abs_diff = std::max(out.max_abs_diff, std::abs(out.autodiff[j] - out.score_function[j]));
  return out;
}

/// Same expectation with the "+1" term dropped.
inline std::vector<double> score_gradient_without_baseline(const CategoricalPolicy& student,
                                                           const CategoricalPolicy& teacher) {
  return score_weighted_expectation(student, log_ratios(student, teacher));
}

struct GradientStats {
  std::vector<double> exact_gradient;
  std::vector<double> mc_gradient_mean;
  std::vector<double> mc_standard_error;
  std::vector<double> score_mean;            // E_n[∇log π_θ], ≈ 0
  std::vector<double> score_standard_error;
  double second_moment = 0.0;  // exact E[‖∇log π_θ‖²·(log ρ)²]
  double mc_variance_trace = 0.0;  // Σ_j per-component sample variance of the estimator
  std::size_t sample_count = 0;
};

/// Monte Carlo estimate of E[(e_y − π)·f(y)], y ~ π, with per-component standard errors.
inline GradientStats mc_score_gradient(const CategoricalPolicy& policy, const std::vector<double>& f,
                                       std::size_t n_samples, Rng& rng) {
  if (n_samples < 100) throw std::invalid_argument("mc_gradient: n_samples must be >= 100");
  if (f.size() != policy.size()) throw std::invalid_argument("mc_gradient: weight vector size mismatch");
  const auto& p = policy.probs();
  const std::size_t K = p.size();
  // Counts suffice: every sample of outcome y contributes the same vector.
  std::vector<std::size_t> counts(K, 0);
  for (std::size_t s = 0; s < n_samples; ++s) ++counts[policy.sample(rng)];
  GradientStats st;
  st.sample_count = n_samples;
  st.exact_gradient = score_weighted_expectation(policy, f);
  st.mc_gradient_mean.assign(K, 0.0);
  st.mc_standard_error.assign(K, 0.0);
  st.score_mean.assign(K, 0.0);
  st.score_standard_error.assign(K, 0.0);
  const double n = static_cast<double>(n_samples);
  for (std::size_t j = 0; j < K; ++j) {
    double g1 = 0.0, g2 = 0.0, s1 = 0.0, s2 = 0.0;
    for (std::size_t y = 0; y < K; ++y) {
      if (counts[y] == 0) continue;
      const double c = static_cast<double>(counts[y]);
      const double score = (y == j ? 1.0 : 0.0) - p[j];
      const double g = score * f[y];
      g1 += c * g;
      g2 += c * g * g;
      s1 += c * score;
      s2 += c * score * score;
    }
    const double gm = g1 / n, sm = s1 / n;
    const double gvar = std::max(0.0, (g2 - n * gm * gm) / (n - 1.0));
    const double svar = std::max(0.0, (s2 - n * sm * sm) / (n - 1.0));
    st.mc_gradient_mean[j] = gm;
    st.mc_standard_error[j] = std::sqrt(gvar / n);
    st.score_mean[j] = sm;
    st.score_standard_error[j] = std::sqrt(svar / n);
    st.mc_variance_trace += gvar;
  }
  return st;
}

/// Exact E[‖∇log π_θ(y)‖²·(log ρ(y))²].
inline double second_moment(const CategoricalPolicy& student, const CategoricalPolicy& teacher) {
  const auto lr = log_ratios(student, teacher);
  const auto& p = student.probs();
  double p2 = 0.0;
  for (double v : p) p2 += v * v;
  double m = 0.0;
  for (std::size_t y = 0; y < p.size(); ++y) {
    const double score_sq = 1.0 - 2.0 * p[y] + p2;  // ‖e_y − p‖²
    m += p[y] * score_sq * lr[y] * lr[y];
  }
  return m;
}

/// Intrinsic-reward policy gradient ĝ(y) = ∇log π_θ(y)·(−log ρ(y)), y ~ π_θ.
inline GradientStats mc_gradient(const CategoricalPolicy& student, const CategoricalPolicy& teacher,
                                 std::size_t n_samples, Rng& rng) {
  auto f = log_ratios(student, teacher);
  for (auto& v : f) v = -v;
  auto st = mc_score_gradient(student, f, n_samples, rng);
  st.second_moment = second_moment(student, teacher);
  return st;
}

/// Teacher equal to the student except on `bad_outcome`, which gets mass epsilon;
/// the remaining mass is rescaled to 1 − epsilon.
inline CategoricalPolicy rejecting_teacher(const CategoricalPolicy& student, std::size_t bad_outcome, double epsilon) {
  if (!(epsilon > 0.0) || !(epsilon < 1.0)) {
    throw std::invalid_argument("rejecting_teacher: epsilon must lie in (0, 1), got " + std::to_string(epsilon));
  }
  const auto& p = student.probs();
  const double rest = 1.0 - p[bad_outcome];
  std::vector<double> q(p.size());
  for (std::size_t y = 0; y < p.size(); ++y) q[y] = y == bad_outcome ? epsilon : p[y] * (1.0 - epsilon) / rest;
  return CategoricalPolicy::from_probs(q);
}

/// Student with probability `mass` on `bad_outcome` and the given logits' shape elsewhere.
inline CategoricalPolicy with_outcome_mass(const CategoricalPolicy& base, std::size_t bad_outcome, double mass) {
  const auto& p = base.probs();
  const double rest = 1.0 - p[bad_outcome];
  std::vector<double> q(p.size());
  for (std::size_t y = 0; y < p.size(); ++y) q[y] = y == bad_outcome ? mass : p[y] * (1.0 - mass) / rest;
  return CategoricalPolicy::from_probs(q);
}

struct SweepPoint {
  double epsilon = 0.0;
  double second_moment = 0.0;
  double ratio = 0.0;  // second_moment / ln(delta_floor/epsilon)²
};

inline std::vector<SweepPoint> second_moment_sweep(const CategoricalPolicy& student, std::size_t bad_outcome,
                                                   const std::vector<double>& epsilons, double delta_floor = 0.3) {
  if (bad_outcome >= student.size()) throw std::out_of_range("second_moment_sweep: bad_outcome outside space");
  if (student.probs()[bad_outcome] < delta_floor) {
    throw std::invalid_argument("second_moment_sweep: student mass on bad outcome is below delta_floor");
  }
  std::vector<SweepPoint> out;
  for (double eps : epsilons) {
    if (!(eps > 0.0)) throw std::invalid_argument("second_moment_sweep: epsilon must be > 0");
    if (!(eps < delta_floor)) throw std::invalid_argument("second_moment_sweep: epsilon must be < delta_floor");
    const auto teacher = rejecting_teacher(student, bad_outcome, eps);
    const double m = second_moment(student, teacher);
    const double l = std::log(delta_floor / eps);
    out.push_back({eps, m, m / (l * l)});
  }
  return out;
}

struct AsymmetryReport {
  double max_positive_reward = 0.0;
  double max_negative_reward = 0.0;  // most negative observed value (<= 0)
  double positive_tail_frequency = 0.0;  // fraction with r > +1
  double negative_tail_frequency = 0.0;  // fraction with r < −1
};

/// Samples y ~ π_θ and summarizes the intrinsic reward −log ρ(y).
inline AsymmetryReport asymmetry_report(const CategoricalPolicy& student, const CategoricalPolicy& teacher,
                                        std::size_t n_samples, Rng& rng) {
  if (n_samples < 10000) throw std::invalid_argument("asymmetry_report: n_samples must be >= 1e4");
  const auto lr = log_ratios(student, teacher);
  AsymmetryReport r;
  r.max_positive_reward = -std::numeric_limits<double>::infinity();
  r.max_negative_reward = std::numeric_limits<double>::infinity();
  std::size_t pos = 0, neg = 0;
  for (std::size_t s = 0; s < n_samples; ++s) {
    const double reward = -lr[student.sample(rng)];
    r.max_positive_reward = std::max(r.max_positive_reward, reward);
    r.max_negative_reward = std::min(r.max_negative_reward, reward);
    if (reward > 1.0) ++pos;
    if (reward < -1.0) ++neg;
  }
  r.positive_tail_frequency = static_cast<double>(pos) / static_cast<double>(n_samples);
  r.negative_tail_frequency = static_cast<double>(neg) / static_cast<double>(n_samples);
  return r;
}

}  // namespace opdlab::rkl
