#pragma once

// Two-operand addition with a rule-based verifier, plus the supervised
// corpora used to manufacture students and teachers.
//
// Response formats:
//   direct      ">19#"
//   scratchpad  "~c1~c2>125#"   one carry digit per column, least significant first

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "opdlab/model.hpp"
#include "opdlab/optim.hpp"
#include "opdlab/parallel.hpp"
#include "opdlab/rng.hpp"

namespace opdlab::tasks {

struct Vocab {
  static constexpr std::string_view kSymbols = "0123456789+=>~#_";
  static constexpr int kPlus = 10;
  static constexpr int kEquals = 11;
  static constexpr int kAnswer = 12;   // '>'
  static constexpr int kScratch = 13;  // '~'
  static constexpr int kEos = 14;      // '#'
  static constexpr int kPad = 15;      // '_'
  static constexpr int size() { return static_cast<int>(kSymbols.size()); }

  static int id(char c) {
    const auto pos = kSymbols.find(c);
    if (pos == std::string_view::npos) throw std::invalid_argument(std::string("vocab: unknown symbol '") + c + "'");
    return static_cast<int>(pos);
  }
  static char symbol(int id) {
    if (id < 0 || id >= size()) throw std::out_of_range("vocab: unknown token id " + std::to_string(id));
    return kSymbols[static_cast<std::size_t>(id)];
  }
  static Tokens encode(std::string_view text) {
    Tokens out;
    out.reserve(text.size());
    for (char c : text) out.push_back(id(c));
    return out;
  }
  static std::string decode(std::span<const int> tokens) {
    std::string out;
    out.reserve(tokens.size());
    for (int t : tokens) out.push_back(symbol(t));
    return out;
  }
};

static_assert(Vocab::size() <= 32);

enum class TaskKind { Addition };

struct TaskSpec {
  TaskKind kind = TaskKind::Addition;
  int lo = 0;
  int hi = 99;
  int max_prompt_len = 6;
  int max_response_len = 9;
  std::uint64_t seed = 1;

  int width() const { return static_cast<int>(std::to_string(hi).size()); }
  int answer_width() const { return static_cast<int>(std::to_string(2 * hi).size()); }
  int prompt_len() const { return 2 * width() + 2; }
  // Longest response in either format: scratchpad, '>', answer digits, eos.
  int longest_response() const { return 2 * width() + 1 + answer_width() + 1; }

  void validate() const {
    if (lo < 0 || hi < lo) throw std::invalid_argument("TaskSpec: need hi >= lo >= 0");
    if (prompt_len() > max_prompt_len) {
      throw std::invalid_argument("TaskSpec: prompts need " + std::to_string(prompt_len()) +
                                  " tokens but max_prompt_len is " + std::to_string(max_prompt_len));
    }
    if (longest_response() > max_response_len) {
      throw std::invalid_argument("TaskSpec: responses need " + std::to_string(longest_response()) +
                                  " tokens but max_response_len is " + std::to_string(max_response_len));
    }
  }
};

struct PromptInstance {
  int a = 0;
  int b = 0;
  Tokens prompt;
  std::string answer;

  std::string prompt_text() const { return Vocab::decode(prompt); }
};

inline std::string pad(int value, int width) {
  auto s = std::to_string(value);
  if (static_cast<int>(s.size()) < width) s.insert(0, static_cast<std::size_t>(width) - s.size(), '0');
  return s;
}

inline PromptInstance make_instance(const TaskSpec& spec, int a, int b) {
  PromptInstance p;
  p.a = a;
  p.b = b;
  p.prompt = Vocab::encode(pad(a, spec.width()) + "+" + pad(b, spec.width()) + "=");
  p.answer = std::to_string(a + b);
  return p;
}

// Parses a prompt of the form "AA+BB=" back into an instance.
inline PromptInstance parse_prompt(const TaskSpec& spec, std::string_view text) {
  const auto plus = text.find('+');
  if (plus == std::string_view::npos || text.empty() || text.back() != '=' || plus == 0 || plus + 2 > text.size()) {
    throw std::invalid_argument("parse_prompt: malformed prompt '" + std::string(text) + "'");
  }
  auto digits = [&](std::string_view s) {
    if (s.empty() || !std::all_of(s.begin(), s.end(), [](char c) { return c >= '0' && c <= '9'; })) {
      throw std::invalid_argument("parse_prompt: malformed operand in '" + std::string(text) + "'");
    }
    return std::stoi(std::string(s));
  };
  const int a = digits(text.substr(0, plus));
  const int b = digits(text.substr(plus + 1, text.size() - plus - 2));
  if (a < spec.lo || a > spec.hi || b < spec.lo || b > spec.hi) {
    throw std::invalid_argument("parse_prompt: operand out of range in '" + std::string(text) + "'");
  }
  return make_instance(spec, a, b);
}

// Deterministic ~10% of operand pairs reserved for evaluation.
inline bool is_heldout(const TaskSpec& spec, int a, int b) {
  return derive_seed(spec.seed, {static_cast<std::uint64_t>(a), static_cast<std::uint64_t>(b), 0x4e1dULL}) % 10 == 0;
}

enum class Split { All, Train, Heldout };

/// n instances with operands uniform in [lo, hi]; deterministic under spec.seed.
inline std::vector<PromptInstance> gen_dataset(const TaskSpec& spec, std::size_t n, Split split = Split::All) {
  spec.validate();
  if (n < 1) throw std::invalid_argument("gen_dataset: n must be >= 1");
  const auto span = static_cast<std::size_t>(spec.hi - spec.lo + 1);
  Rng rng(derive_seed(spec.seed, {static_cast<std::uint64_t>(split)}));
  std::vector<PromptInstance> out;
  out.reserve(n);
  while (out.size() < n) {
    const int a = spec.lo + static_cast<int>(uniform_index(rng, span));
    const int b = spec.lo + static_cast<int>(uniform_index(rng, span));
    if (split != Split::All && is_heldout(spec, a, b) != (split == Split::Heldout)) continue;
    out.push_back(make_instance(spec, a, b));
  }
  return out;
}

struct VerifierResult {
  double reward = 0.0;
  std::optional<std::string> parsed_answer;
};

/// Parses [scratchpad] '>' digits '#' and compares the digit string (leading
/// zeros stripped) to the ground truth. Malformed or truncated output scores 0.
inline VerifierResult verify_tokens(const PromptInstance& instance, std::span<const int> response) {
  VerifierResult r;
  if (response.empty() || response.back() != Vocab::kEos) return r;
  std::size_t i = 0;
  while (i < response.size() && (response[i] == Vocab::kScratch || response[i] < 10)) ++i;
  if (i >= response.size() || response[i] != Vocab::kAnswer) return r;
  ++i;
  std::string digits;
  while (i < response.size() && response[i] < 10) digits.push_back(static_cast<char>('0' + response[i++]));
  if (digits.empty() || i != response.size() - 1) return r;
  const auto nz = digits.find_first_not_of('0');
  digits = nz == std::string::npos ? "0" : digits.substr(nz);
  r.reward = digits == instance.answer ? 1.0 : 0.0;
  r.parsed_answer = std::move(digits);
  return r;
}

inline VerifierResult verify(const PromptInstance& instance, const Trajectory& traj) {
  return verify_tokens(instance, traj.response);
}

inline VerifierResult verify_text(const PromptInstance& instance, std::string_view response) {
  return verify_tokens(instance, Vocab::encode(response));
}

inline std::string direct_format(const PromptInstance& p) { return ">" + p.answer + "#"; }

// One '~'-prefixed carry digit per column, least significant column first.
inline std::string scratchpad_format(const TaskSpec& spec, const PromptInstance& p) {
  std::string out;
  int a = p.a, b = p.b, carry = 0;
  for (int col = 0; col < spec.width(); ++col) {
    carry = (a % 10 + b % 10 + carry) >= 10 ? 1 : 0;
    out += '~';
    out += static_cast<char>('0' + carry);
    a /= 10;
    b /= 10;
  }
  return out + direct_format(p);
}

struct CorpusPair {
  std::string prompt;
  std::string target;
};

using Corpus = std::vector<CorpusPair>;

struct FamilyCorpora {
  Corpus student_format;
  Corpus in_family;
  Corpus cross_family;
};

/// Every training-split operand pair in three supervised formats.
inline FamilyCorpora make_family_corpora(const TaskSpec& spec) {
  spec.validate();
  FamilyCorpora c;
  for (int a = spec.lo; a <= spec.hi; ++a) {
    for (int b = spec.lo; b <= spec.hi; ++b) {
      if (is_heldout(spec, a, b)) continue;
      const auto p = make_instance(spec, a, b);
      const auto prompt = p.prompt_text();
      c.student_format.push_back({prompt, direct_format(p)});
      c.in_family.push_back({prompt, direct_format(p)});
      c.cross_family.push_back({prompt, scratchpad_format(spec, p)});
    }
  }
  return c;
}

// ---- JSONL ---------------------------------------------------------------

inline void write_lines(const std::filesystem::path& path, const std::vector<nlohmann::json>& rows) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& r : rows) out << r.dump() << '\n';
}

inline std::vector<nlohmann::json> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::vector<nlohmann::json> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      rows.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return rows;
}

inline void save_corpus(const std::filesystem::path& path, const Corpus& corpus) {
  std::vector<nlohmann::json> rows;
  rows.reserve(corpus.size());
  for (const auto& p : corpus) rows.push_back({{"prompt", p.prompt}, {"target", p.target}});
  write_lines(path, rows);
}

inline Corpus load_corpus(const std::filesystem::path& path) {
  Corpus c;
  for (const auto& r : read_lines(path)) c.push_back({r.at("prompt").get<std::string>(), r.at("target").get<std::string>()});
  return c;
}

inline void save_dataset(const std::filesystem::path& path, const std::vector<PromptInstance>& data) {
  std::vector<nlohmann::json> rows;
  rows.reserve(data.size());
  for (const auto& p : data) rows.push_back({{"prompt", p.prompt_text()}, {"answer", p.answer}});
  write_lines(path, rows);
}

inline std::vector<PromptInstance> load_dataset(const std::filesystem::path& path, const TaskSpec& spec) {
  std::vector<PromptInstance> data;
  for (const auto& r : read_lines(path)) {
    auto p = parse_prompt(spec, r.at("prompt").get<std::string>());
    if (p.answer != r.at("answer").get<std::string>()) {
      throw std::runtime_error(path.string() + ": answer for " + p.prompt_text() + " does not match its operands");
    }
    data.push_back(std::move(p));
  }
  return data;
}

// ---- supervised training -------------------------------------------------

// Summed teacher-forcing negative log-likelihood of `target` after `prompt`,
// and the number of target tokens.
inline ad::Tensor teacher_forcing_nll(ad::Tape& tape, const Weights& w, const ModelConfig& cfg,
                                      std::span<const int> prompt, std::span<const int> target) {
  auto rows = score_rows(tape, w, cfg, prompt, target);
  auto picked = tape.gather(rows, target);
  std::vector<double> neg(target.size(), -1.0);
  return tape.weighted_sum(picked, neg);
}

struct PretrainOptions {
  int steps = 0;
  double learning_rate = 1e-3;
  std::size_t batch_size = 32;
  std::size_t shard_size = 8;
  std::uint64_t seed = 0;
};

struct PretrainResult {
  double initial_loss = 0.0;  // mean per-token loss of the first batch
  double final_loss = 0.0;    // mean per-token loss of the last batch
};

/// Per-token mean cross-entropy of the model on a whole corpus.
inline double corpus_loss(const PolicyModel& model, const Corpus& corpus) {
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& p : corpus) {
    const auto prompt = Vocab::encode(p.prompt);
    const auto target = Vocab::encode(p.target);
    auto rows = forward_logprobs(model, prompt, target);
    for (std::size_t t = 0; t < target.size(); ++t) total -= rows.at(t, target[t]);
    count += target.size();
  }
  return total / static_cast<double>(count);
}

/// Teacher-forcing cross-entropy training with Adam; batches sampled with
/// replacement from the corpus.
inline PretrainResult pretrain_supervised(PolicyModel& model, const Corpus& corpus, const PretrainOptions& opt) {
  if (corpus.empty()) throw std::invalid_argument("pretrain_supervised: corpus is empty");
  if (model.frozen()) throw std::logic_error("pretrain_supervised: model is frozen");
  PretrainResult result;
  if (opt.steps <= 0) return result;
  std::vector<std::pair<Tokens, Tokens>> encoded;
  encoded.reserve(corpus.size());
  for (const auto& p : corpus) encoded.emplace_back(Vocab::encode(p.prompt), Vocab::encode(p.target));
  AdamState adam(model.params(), AdamConfig{opt.learning_rate});
  Rng rng(derive_seed(opt.seed, {0x5f7ULL}));
  const std::size_t shards = (opt.batch_size + opt.shard_size - 1) / opt.shard_size;
  for (int step = 0; step < opt.steps; ++step) {
    std::vector<std::size_t> batch(opt.batch_size);
    double tokens = 0.0;
    for (auto& i : batch) {
      i = uniform_index(rng, encoded.size());
      tokens += static_cast<double>(encoded[i].second.size());
    }
    zero_grads(model.params());
    auto losses = sharded_backward(model, shards, [&](std::size_t s, ad::Tape& tape, const Weights& w) {
      std::vector<ad::Tensor> terms;
      for (std::size_t j = s * opt.shard_size; j < std::min(batch.size(), (s + 1) * opt.shard_size); ++j) {
        const auto& [prompt, target] = encoded[batch[j]];
        terms.push_back(tape.scale(teacher_forcing_nll(tape, w, model.config(), prompt, target), 1.0 / tokens));
      }
      return tape.add_scalars(terms);
    });
    double loss = 0.0;
    for (double l : losses) loss += l;
    if (!std::isfinite(loss)) throw std::runtime_error("pretrain_supervised: non-finite loss at step " + std::to_string(step));
    if (step == 0) result.initial_loss = loss;
    result.final_loss = loss;
    adam_step(model.params(), adam);
  }
  return result;
}

/// Fraction of prompts answered correctly under greedy decoding.
inline double greedy_accuracy(const PolicyModel& model, const std::vector<PromptInstance>& data, int max_new) {
  std::vector<double> rewards(data.size(), 0.0);
  parallel_for(data.size(), [&](std::size_t i) {
    auto traj = rollout(model, data[i].prompt, 0.0, max_new, Vocab::kEos, 0);
    rewards[i] = verify(data[i], traj).reward;
  });
  double s = 0.0;
  for (double r : rewards) s += r;
  return s / static_cast<double>(data.size());
}

}  // namespace opdlab::tasks
