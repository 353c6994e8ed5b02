#pragma once

// Small decoder-only transformer policy: pre-norm blocks, learned positional
// embeddings, fused causal multi-head attention, GELU MLP.
//
// Two forward paths share the same kernels:
//   * score_rows()  records on a Tape (training)
//   * Decoder       incremental KV-cached inference (sampling and scoring
//                   without gradients)

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "opdlab/autodiff.hpp"
#include "opdlab/optim.hpp"
#include "opdlab/rng.hpp"

namespace opdlab {

using Tokens = std::vector<int>;

struct ModelConfig {
  int vocab_size = 16;
  int embed_dim = 64;
  int num_layers = 2;
  int num_heads = 4;
  int max_context = 40;
  std::uint64_t seed = 0;
  bool zero_init_head = false;

  void validate() const {
    if (vocab_size < 2) throw std::invalid_argument("ModelConfig: vocab_size must be >= 2");
    if (embed_dim < 1 || num_layers < 0 || num_heads < 1 || max_context < 1) {
      throw std::invalid_argument("ModelConfig: dimensions must be positive");
    }
    if (embed_dim % num_heads != 0) {
      throw std::invalid_argument("ModelConfig: embed_dim " + std::to_string(embed_dim) +
                                  " not divisible by num_heads " + std::to_string(num_heads));
    }
  }
  bool operator==(const ModelConfig&) const = default;
};

class ContextOverflow : public std::length_error {
 public:
  using std::length_error::length_error;
};

struct BlockWeights {
  ad::Tensor ln1_g, ln1_b, qkv_w, qkv_b, proj_w, proj_b;
  ad::Tensor ln2_g, ln2_b, fc_w, fc_b, out_w, out_b;
};

struct Weights {
  ad::Tensor tok_emb, pos_emb;
  std::vector<BlockWeights> blocks;
  ad::Tensor lnf_g, lnf_b, head_w, head_b;
};

class PolicyModel {
 public:
  PolicyModel() = default;
  explicit PolicyModel(const ModelConfig& config) : config_(config) {
    config_.validate();
    init_params();
  }

  PolicyModel(PolicyModel&&) noexcept = default;
  PolicyModel& operator=(PolicyModel&&) noexcept = default;
  PolicyModel(const PolicyModel&) = delete;
  PolicyModel& operator=(const PolicyModel&) = delete;

  // Deep copy with independent storage.
  PolicyModel clone() const {
    PolicyModel m;
    m.config_ = config_;
    m.frozen_ = frozen_;
    m.params_ = replicate(!frozen_);
    return m;
  }

  const ModelConfig& config() const { return config_; }
  ParamList& params() { return params_; }
  const ParamList& params() const { return params_; }
  bool frozen() const { return frozen_; }

  void freeze() {
    frozen_ = true;
    for (auto& p : params_) {
      p.tensor.set_requires_grad(false);
      p.tensor.clear_grad();
    }
  }

  std::size_t num_parameters() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.tensor.size();
    return n;
  }

  ad::Tensor& param(const std::string& name) {
    for (auto& p : params_)
      if (p.name == name) return p.tensor;
    throw std::out_of_range("PolicyModel: no parameter named '" + name + "'");
  }

  // Fresh leaf tensors holding copies of the current parameter values; used
  // to give each worker private gradient buffers.
  ParamList replicate(bool requires_grad) const {
    ParamList out;
    out.reserve(params_.size());
    for (const auto& p : params_) out.push_back({p.name, ad::Tensor(p.tensor.shape(), p.tensor.data(), requires_grad)});
    return out;
  }

  Weights weights() const { return weights_of(params_, config_); }

  static Weights weights_of(const ParamList& params, const ModelConfig& cfg) {
    const std::size_t expected = 2 + 12 * static_cast<std::size_t>(cfg.num_layers) + 4;
    if (params.size() != expected) throw std::invalid_argument("weights_of: parameter list does not match config");
    std::size_t k = 0;
    auto next = [&]() { return params[k++].tensor; };
    Weights w;
    w.tok_emb = next();
    w.pos_emb = next();
    for (int l = 0; l < cfg.num_layers; ++l) {
      BlockWeights b;
      b.ln1_g = next(); b.ln1_b = next();
      b.qkv_w = next(); b.qkv_b = next();
      b.proj_w = next(); b.proj_b = next();
      b.ln2_g = next(); b.ln2_b = next();
      b.fc_w = next(); b.fc_b = next();
      b.out_w = next(); b.out_b = next();
      w.blocks.push_back(std::move(b));
    }
    w.lnf_g = next(); w.lnf_b = next();
    w.head_w = next(); w.head_b = next();
    return w;
  }

 private:
  void init_params() {
    Rng rng(config_.seed);
    const auto V = static_cast<std::size_t>(config_.vocab_size);
    const auto d = static_cast<std::size_t>(config_.embed_dim);
    const auto C = static_cast<std::size_t>(config_.max_context);
    const double std0 = 0.02;
    const double std_res = 0.02 / std::sqrt(2.0 * std::max(1, config_.num_layers));
    auto randn = [&](ad::Shape shape, double s) {
      std::vector<double> v(ad::numel(shape));
      for (auto& x : v) x = s * normal(rng);
      return ad::Tensor(std::move(shape), std::move(v), true);
    };
    auto fill = [](ad::Shape shape, double value) {
      auto n = ad::numel(shape);
      return ad::Tensor(std::move(shape), std::vector<double>(n, value), true);
    };
    params_.push_back({"tok_emb", randn({V, d}, std0)});
    params_.push_back({"pos_emb", randn({C, d}, std0)});
    for (int l = 0; l < config_.num_layers; ++l) {
      const std::string p = "blocks." + std::to_string(l) + ".";
      params_.push_back({p + "ln1.gain", fill({d}, 1.0)});
      params_.push_back({p + "ln1.bias", fill({d}, 0.0)});
      params_.push_back({p + "attn.qkv.weight", randn({d, 3 * d}, std0)});
      params_.push_back({p + "attn.qkv.bias", fill({3 * d}, 0.0)});
      params_.push_back({p + "attn.proj.weight", randn({d, d}, std_res)});
      params_.push_back({p + "attn.proj.bias", fill({d}, 0.0)});
      params_.push_back({p + "ln2.gain", fill({d}, 1.0)});
      params_.push_back({p + "ln2.bias", fill({d}, 0.0)});
      params_.push_back({p + "mlp.fc.weight", randn({d, 4 * d}, std0)});
      params_.push_back({p + "mlp.fc.bias", fill({4 * d}, 0.0)});
      params_.push_back({p + "mlp.out.weight", randn({4 * d, d}, std_res)});
      params_.push_back({p + "mlp.out.bias", fill({d}, 0.0)});
    }
    params_.push_back({"ln_f.gain", fill({d}, 1.0)});
    params_.push_back({"ln_f.bias", fill({d}, 0.0)});
    params_.push_back({"head.weight", config_.zero_init_head ? fill({d, V}, 0.0) : randn({d, V}, std0)});
    params_.push_back({"head.bias", fill({V}, 0.0)});
  }

  ModelConfig config_;
  ParamList params_;
  bool frozen_ = false;

  friend PolicyModel make_model(ModelConfig, ParamList, bool);
};

// Assembles a model from explicit parameters (checkpoint loading).
inline PolicyModel make_model(ModelConfig config, ParamList params, bool frozen) {
  config.validate();
  PolicyModel reference(config);
  const auto& expected = reference.params();
  if (params.size() != expected.size()) {
    throw std::invalid_argument("make_model: expected " + std::to_string(expected.size()) + " tensors, got " +
                                std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].name != expected[i].name || params[i].tensor.shape() != expected[i].tensor.shape()) {
      throw std::invalid_argument("make_model: tensor " + std::to_string(i) + " is '" + params[i].name + "' " +
                                  ad::to_string(params[i].tensor.shape()) + ", expected '" + expected[i].name + "' " +
                                  ad::to_string(expected[i].tensor.shape()));
    }
  }
  PolicyModel m;
  m.config_ = config;
  m.params_ = std::move(params);
  for (auto& p : m.params_) p.tensor.set_requires_grad(!frozen);
  m.frozen_ = frozen;
  return m;
}

inline void check_tokens(const ModelConfig& cfg, std::span<const int> tokens) {
  for (int t : tokens) {
    if (t < 0 || t >= cfg.vocab_size) {
      throw std::out_of_range("unknown token id " + std::to_string(t) + " for vocabulary of " +
                              std::to_string(cfg.vocab_size));
    }
  }
}

// Residual stream after the last block, before the final norm: [T x d].
inline ad::Tensor trunk(ad::Tape& tape, const Weights& w, const ModelConfig& cfg, std::span<const int> tokens) {
  const std::size_t T = tokens.size();
  if (T == 0) throw std::invalid_argument("forward: empty token sequence");
  if (T > static_cast<std::size_t>(cfg.max_context)) {
    throw ContextOverflow("forward: sequence of " + std::to_string(T) + " tokens exceeds max_context " +
                          std::to_string(cfg.max_context));
  }
  check_tokens(cfg, tokens);
  std::vector<int> pos(T);
  for (std::size_t i = 0; i < T; ++i) pos[i] = static_cast<int>(i);
  auto x = tape.add(tape.embedding(w.tok_emb, tokens), tape.embedding(w.pos_emb, pos));
  for (const auto& b : w.blocks) {
    auto h = tape.layer_norm(x, b.ln1_g, b.ln1_b);
    auto qkv = tape.add_row(tape.matmul(h, b.qkv_w), b.qkv_b);
    auto att = tape.causal_attention(qkv, static_cast<std::size_t>(cfg.num_heads));
    x = tape.add(x, tape.add_row(tape.matmul(att, b.proj_w), b.proj_b));
    auto h2 = tape.layer_norm(x, b.ln2_g, b.ln2_b);
    auto f = tape.gelu(tape.add_row(tape.matmul(h2, b.fc_w), b.fc_b));
    x = tape.add(x, tape.add_row(tape.matmul(f, b.out_w), b.out_b));
  }
  return x;
}

inline ad::Tensor lm_head(ad::Tape& tape, const Weights& w, const ad::Tensor& x) {
  auto hf = tape.layer_norm(x, w.lnf_g, w.lnf_b);
  return tape.add_row(tape.matmul(hf, w.head_w), w.head_b);
}

// Logits for every position of `tokens`, recorded on the tape: [T x V].
inline ad::Tensor forward_logits(ad::Tape& tape, const Weights& w, const ModelConfig& cfg,
                                 std::span<const int> tokens) {
  return lm_head(tape, w, trunk(tape, w, cfg, tokens));
}

// Log-probability rows for each response position: row t is
// log π(· | prompt, response[0..t)), optionally at a sampling temperature.
// Shape [|response| x V].
inline ad::Tensor score_rows(ad::Tape& tape, const Weights& w, const ModelConfig& cfg, std::span<const int> prompt,
                             std::span<const int> response, double temperature = 1.0) {
  if (prompt.empty()) throw std::invalid_argument("score: prompt must be nonempty");
  if (response.empty()) throw std::invalid_argument("score: response must be nonempty");
  if (prompt.size() + response.size() > static_cast<std::size_t>(cfg.max_context)) {
    throw ContextOverflow("score: prompt+response of " + std::to_string(prompt.size() + response.size()) +
                          " tokens exceeds max_context " + std::to_string(cfg.max_context));
  }
  check_tokens(cfg, response);
  Tokens input(prompt.begin(), prompt.end());
  input.insert(input.end(), response.begin(), response.end() - 1);
  auto x = tape.slice_rows(trunk(tape, w, cfg, input), prompt.size() - 1, response.size());
  auto logits = lm_head(tape, w, x);
  if (temperature != 1.0) logits = tape.scale(logits, 1.0 / temperature);
  return tape.log_softmax(logits);
}

// Incremental inference with a key/value cache. Never records gradients.
class Decoder {
 public:
  explicit Decoder(const PolicyModel& model)
      : cfg_(model.config()), w_(model.weights()),
        d_(static_cast<std::size_t>(cfg_.embed_dim)),
        keys_(w_.blocks.size()), values_(w_.blocks.size()) {}

  std::size_t position() const { return pos_; }

  // Feeds one token and returns the next-token logits.
  const std::vector<double>& step(int token) {
    if (pos_ >= static_cast<std::size_t>(cfg_.max_context)) {
      throw ContextOverflow("decoder: position " + std::to_string(pos_) + " exceeds max_context " +
                            std::to_string(cfg_.max_context));
    }
    if (token < 0 || token >= cfg_.vocab_size) {
      throw std::out_of_range("unknown token id " + std::to_string(token) + " for vocabulary of " +
                              std::to_string(cfg_.vocab_size));
    }
    const std::size_t d = d_, H = static_cast<std::size_t>(cfg_.num_heads), hd = d / H;
    x_.assign(d, 0.0);
    for (std::size_t j = 0; j < d; ++j) x_[j] = w_.tok_emb[token * d + j] + w_.pos_emb[pos_ * d + j];
    h_.resize(d);
    xhat_.resize(4 * d);
    for (std::size_t l = 0; l < w_.blocks.size(); ++l) {
      const auto& b = w_.blocks[l];
      ad::kernel::layer_norm_row(x_.data(), b.ln1_g.data().data(), b.ln1_b.data().data(), h_.data(), xhat_.data(), d,
                                 1e-5);
      qkv_.assign(b.qkv_b.data().begin(), b.qkv_b.data().end());
      ad::kernel::matmul_acc(h_.data(), b.qkv_w.data().data(), qkv_.data(), 1, d, 3 * d);
      keys_[l].insert(keys_[l].end(), qkv_.begin() + d, qkv_.begin() + 2 * d);
      values_[l].insert(values_[l].end(), qkv_.begin() + 2 * d, qkv_.end());
      const std::size_t T = pos_ + 1;
      att_.assign(d, 0.0);
      scores_.resize(T);
      const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
      for (std::size_t hh = 0; hh < H; ++hh) {
        const std::size_t o = hh * hd;
        double mx = -1e300;
        for (std::size_t j = 0; j < T; ++j) {
          double s = 0.0;
          for (std::size_t e = 0; e < hd; ++e) s += qkv_[o + e] * keys_[l][j * d + o + e];
          scores_[j] = s * inv_sqrt;
          mx = std::max(mx, scores_[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < T; ++j) {
          scores_[j] = std::exp(scores_[j] - mx);
          z += scores_[j];
        }
        for (std::size_t j = 0; j < T; ++j) {
          const double p = scores_[j] / z;
          for (std::size_t e = 0; e < hd; ++e) att_[o + e] += p * values_[l][j * d + o + e];
        }
      }
      tmp_.assign(b.proj_b.data().begin(), b.proj_b.data().end());
      ad::kernel::matmul_acc(att_.data(), b.proj_w.data().data(), tmp_.data(), 1, d, d);
      for (std::size_t j = 0; j < d; ++j) x_[j] += tmp_[j];
      ad::kernel::layer_norm_row(x_.data(), b.ln2_g.data().data(), b.ln2_b.data().data(), h_.data(), xhat_.data(), d,
                                 1e-5);
      fc_.assign(b.fc_b.data().begin(), b.fc_b.data().end());
      ad::kernel::matmul_acc(h_.data(), b.fc_w.data().data(), fc_.data(), 1, d, 4 * d);
      for (auto& v : fc_) v = ad::kernel::gelu(v);
      tmp_.assign(b.out_b.data().begin(), b.out_b.data().end());
      ad::kernel::matmul_acc(fc_.data(), b.out_w.data().data(), tmp_.data(), 1, 4 * d, d);
      for (std::size_t j = 0; j < d; ++j) x_[j] += tmp_[j];
    }
    ad::kernel::layer_norm_row(x_.data(), w_.lnf_g.data().data(), w_.lnf_b.data().data(), h_.data(), xhat_.data(), d,
                               1e-5);
    logits_.assign(w_.head_b.data().begin(), w_.head_b.data().end());
    ad::kernel::matmul_acc(h_.data(), w_.head_w.data().data(), logits_.data(), 1, d,
                           static_cast<std::size_t>(cfg_.vocab_size));
    ++pos_;
    return logits_;
  }

 private:
  ModelConfig cfg_;
  Weights w_;
  std::size_t d_;
  std::size_t pos_ = 0;
  std::vector<std::vector<double>> keys_, values_;
  std::vector<double> x_, h_, xhat_, qkv_, att_, scores_, tmp_, fc_, logits_;
};

// Row-major [rows x vocab] log-probabilities.
struct LogProbRows {
  std::size_t rows = 0;
  std::size_t vocab = 0;
  std::vector<double> values;

  std::span<const double> row(std::size_t t) const { return {values.data() + t * vocab, vocab}; }
  double at(std::size_t t, int token) const { return values[t * vocab + static_cast<std::size_t>(token)]; }
};

inline void tempered_log_softmax(std::span<const double> logits, double temperature, std::vector<double>& out) {
  out.resize(logits.size());
  if (temperature == 1.0) {
    ad::kernel::log_softmax_row(logits.data(), out.data(), logits.size());
    return;
  }
  std::vector<double> scaled(logits.begin(), logits.end());
  for (auto& v : scaled) v /= temperature;
  ad::kernel::log_softmax_row(scaled.data(), out.data(), scaled.size());
}

// Lowest-id argmax.
inline int argmax(std::span<const double> row) {
  int best = 0;
  for (std::size_t j = 1; j < row.size(); ++j)
    if (row[j] > row[static_cast<std::size_t>(best)]) best = static_cast<int>(j);
  return best;
}

/// Full log-distribution over the vocabulary at every response position,
/// conditioned on the prompt and the preceding response tokens.
inline LogProbRows forward_logprobs(const PolicyModel& model, std::span<const int> prompt, std::span<const int> response,
                                    double temperature = 1.0) {
  const auto& cfg = model.config();
  if (prompt.empty()) throw std::invalid_argument("forward_logprobs: prompt must be nonempty");
  if (prompt.size() + response.size() > static_cast<std::size_t>(cfg.max_context)) {
    throw ContextOverflow("forward_logprobs: prompt+response of " + std::to_string(prompt.size() + response.size()) +
                          " tokens exceeds max_context " + std::to_string(cfg.max_context));
  }
  check_tokens(cfg, prompt);
  check_tokens(cfg, response);
  LogProbRows out;
  out.rows = response.size();
  out.vocab = static_cast<std::size_t>(cfg.vocab_size);
  out.values.resize(out.rows * out.vocab);
  if (response.empty()) return out;
  Decoder dec(model);
  for (std::size_t i = 0; i + 1 < prompt.size(); ++i) dec.step(prompt[i]);
  std::vector<double> row;
  int next = prompt.back();
  for (std::size_t t = 0; t < response.size(); ++t) {
    const auto& logits = dec.step(next);
    tempered_log_softmax(logits, temperature, row);
    std::copy(row.begin(), row.end(), out.values.begin() + static_cast<std::ptrdiff_t>(t * out.vocab));
    next = response[t];
  }
  return out;
}

struct Trajectory {
  Tokens prompt;
  Tokens response;
  std::vector<double> behavior_logprobs;
  bool ended_by_eos = false;
  bool truncated = false;
};

/// Samples a response autoregressively until eos or max_new tokens.
/// temperature == 0 decodes greedily and records untempered log-probabilities.
inline Trajectory rollout(const PolicyModel& model, const Tokens& prompt, double temperature, int max_new, int eos,
                          std::uint64_t seed) {
  if (temperature < 0.0) throw std::invalid_argument("rollout: temperature must be >= 0");
  if (max_new < 1) throw std::invalid_argument("rollout: max_new must be >= 1");
  if (prompt.empty()) throw std::invalid_argument("rollout: prompt must be nonempty");
  const auto& cfg = model.config();
  if (prompt.size() + static_cast<std::size_t>(max_new) > static_cast<std::size_t>(cfg.max_context)) {
    throw ContextOverflow("rollout: prompt of " + std::to_string(prompt.size()) + " plus max_new " +
                          std::to_string(max_new) + " exceeds max_context " + std::to_string(cfg.max_context));
  }
  check_tokens(cfg, prompt);
  Rng rng(seed);
  Trajectory traj;
  traj.prompt = prompt;
  Decoder dec(model);
  for (std::size_t i = 0; i + 1 < prompt.size(); ++i) dec.step(prompt[i]);
  int next = prompt.back();
  std::vector<double> logp, probs;
  for (int n = 0; n < max_new; ++n) {
    const auto& logits = dec.step(next);
    int tok;
    if (temperature == 0.0) {
      tempered_log_softmax(logits, 1.0, logp);
      tok = argmax(logp);
    } else {
      tempered_log_softmax(logits, temperature, logp);
      probs.resize(logp.size());
      for (std::size_t j = 0; j < logp.size(); ++j) probs[j] = std::exp(logp[j]);
      tok = static_cast<int>(sample_categorical(rng, probs));
    }
    traj.response.push_back(tok);
    traj.behavior_logprobs.push_back(logp[static_cast<std::size_t>(tok)]);
    if (tok == eos) {
      traj.ended_by_eos = true;
      return traj;
    }
    next = tok;
  }
  traj.truncated = true;
  return traj;
}

struct GuidanceTargets {
  Tokens targets;
  std::vector<double> teacher_logprobs_on_student_tokens;
};

inline void check_shared_vocab(const PolicyModel& student, const PolicyModel& teacher) {
  if (student.config().vocab_size != teacher.config().vocab_size) {
    throw std::invalid_argument("vocabulary mismatch: student has " + std::to_string(student.config().vocab_size) +
                                " tokens, teacher has " + std::to_string(teacher.config().vocab_size));
  }
}

/// Teacher argmax token at every student-visited prefix, from one teacher pass.
inline GuidanceTargets teacher_targets(const PolicyModel& teacher, const PolicyModel& student, const Trajectory& traj) {
  if (!teacher.frozen()) throw std::logic_error("teacher_targets: teacher model must be frozen");
  check_shared_vocab(student, teacher);
  GuidanceTargets g;
  if (traj.response.empty()) return g;
  auto rows = forward_logprobs(teacher, traj.prompt, traj.response);
  g.targets.reserve(rows.rows);
  for (std::size_t t = 0; t < rows.rows; ++t) {
    g.targets.push_back(argmax(rows.row(t)));
    g.teacher_logprobs_on_student_tokens.push_back(rows.at(t, traj.response[t]));
  }
  return g;
}

struct SequenceLogRatio {
  std::vector<double> per_token;
  double total = 0.0;
};

/// log π_student(y_t|·) − log π_teacher(y_t|·) per position, and the sequence sum.
inline SequenceLogRatio sequence_log_ratio(const PolicyModel& student, const PolicyModel& teacher,
                                           const Trajectory& traj) {
  check_shared_vocab(student, teacher);
  SequenceLogRatio r;
  if (traj.response.empty()) return r;
  auto s = forward_logprobs(student, traj.prompt, traj.response);
  auto t = forward_logprobs(teacher, traj.prompt, traj.response);
  for (std::size_t i = 0; i < traj.response.size(); ++i) {
    const double v = s.at(i, traj.response[i]) - t.at(i, traj.response[i]);
    r.per_token.push_back(v);
    r.total += v;
  }
  return r;
}

}  // namespace opdlab
