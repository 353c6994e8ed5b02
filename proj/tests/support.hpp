#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "opdlab/autodiff.hpp"
#include "opdlab/rng.hpp"

namespace testsupport {

using opdlab::ad::Tape;
using opdlab::ad::Tensor;
using GraphFn = std::function<Tensor(Tape&, const std::vector<Tensor>&)>;

inline double rel_err(double a, double f) { return std::abs(a - f) / std::max({std::abs(a), std::abs(f), 1e-3}); }

inline Tensor randn(opdlab::ad::Shape shape, opdlab::Rng& rng, double scale = 1.0, bool requires_grad = true) {
  std::vector<double> v(opdlab::ad::numel(shape));
  for (auto& x : v) x = scale * opdlab::normal(rng);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

// Max relative error between tape gradients and central differences over every leaf entry.
inline double fd_check(const GraphFn& f, const std::vector<Tensor>& leaves, double h = 1e-5) {
  for (auto leaf : leaves) leaf.zero_grad();
  {
    Tape tape;
    auto loss = f(tape, leaves);
    tape.backward(loss);
  }
  auto value = [&]() {
    Tape tape;
    return f(tape, leaves).item();
  };
  double worst = 0.0;
  for (auto leaf : leaves) {
    auto& d = leaf.data();
    for (std::size_t i = 0; i < d.size(); ++i) {
      const double keep = d[i];
      d[i] = keep + h;
      const double up = value();
      d[i] = keep - h;
      const double down = value();
      d[i] = keep;
      worst = std::max(worst, rel_err(leaf.grad()[i], (up - down) / (2 * h)));
    }
  }
  return worst;
}

struct RandomGraph {
  std::vector<Tensor> leaves;
  GraphFn f;
  std::size_t num_params() const {
    std::size_t n = 0;
    for (const auto& l : leaves) n += l.size();
    return n;
  }
};

// A random composite of the primitive set: embeddings, residual attention /
// MLP / layer-norm / elementwise blocks, a log-softmax head and a weighted gather.
inline RandomGraph random_graph(std::uint64_t seed) {
  opdlab::Rng rng(seed);
  const std::size_t heads = 1 + opdlab::uniform_index(rng, 2);
  const std::size_t d = heads * (2 + opdlab::uniform_index(rng, 2));
  const std::size_t T = 2 + opdlab::uniform_index(rng, 4);
  const std::size_t V = 3 + opdlab::uniform_index(rng, 4);
  std::vector<int> ids(T), targets(T);
  for (auto& i : ids) i = static_cast<int>(opdlab::uniform_index(rng, V));
  for (auto& i : targets) i = static_cast<int>(opdlab::uniform_index(rng, V));
  std::vector<double> weights(T);
  for (auto& w : weights) w = opdlab::normal(rng);

  RandomGraph g;
  auto leaf = [&](opdlab::ad::Shape s, double scale) {
    g.leaves.push_back(randn(std::move(s), rng, scale));
    return g.leaves.size() - 1;
  };
  const auto emb = leaf({V, d}, 0.7);
  const auto pos = leaf({T + 2, d}, 0.3);
  const int nblocks = 2 + static_cast<int>(opdlab::uniform_index(rng, 3));
  struct Block {
    int kind;
    std::vector<std::size_t> p;
  };
  std::vector<Block> blocks;
  for (int b = 0; b < nblocks; ++b) {
    Block blk{static_cast<int>(opdlab::uniform_index(rng, 5)), {}};
    switch (blk.kind) {
      case 0:  // layer norm
        blk.p = {leaf({d}, 0.5), leaf({d}, 0.5)};
        break;
      case 1:  // attention residual
        blk.p = {leaf({d, 3 * d}, 0.5), leaf({3 * d}, 0.2), leaf({d, d}, 0.5)};
        break;
      case 2:  // gelu mlp residual
        blk.p = {leaf({d, d}, 0.5), leaf({d}, 0.2)};
        break;
      case 3:  // elementwise product with a learned mask, scaled
        blk.p = {leaf({T, d}, 0.8)};
        break;
      default:  // smooth max: log(exp(x) + exp(m))
        blk.p = {leaf({T, d}, 0.8)};
        break;
    }
    blocks.push_back(std::move(blk));
  }
  const auto head_w = leaf({d, V}, 0.5);
  const auto head_b = leaf({V}, 0.2);

  g.f = [=](Tape& tape, const std::vector<Tensor>& L) {
    auto x = tape.add(tape.embedding(L[emb], ids), tape.slice_rows(L[pos], 1, T));
    for (const auto& b : blocks) {
      switch (b.kind) {
        case 0: x = tape.layer_norm(x, L[b.p[0]], L[b.p[1]]); break;
        case 1: {
          auto qkv = tape.add_row(tape.matmul(x, L[b.p[0]]), L[b.p[1]]);
          x = tape.add(x, tape.matmul(tape.causal_attention(qkv, heads), L[b.p[2]]));
          break;
        }
        case 2: x = tape.add(x, tape.gelu(tape.add_row(tape.matmul(x, L[b.p[0]]), L[b.p[1]]))); break;
        case 3: x = tape.sub(tape.scale(tape.mul(x, L[b.p[0]]), 0.7), x); break;
        default: x = tape.log(tape.add(tape.exp(x), tape.exp(L[b.p[0]]))); break;
      }
    }
    auto lp = tape.log_softmax(tape.add_row(tape.matmul(x, L[head_w]), L[head_b]));
    auto nll = tape.weighted_sum(tape.gather(lp, targets), weights);
    auto reg = tape.scale(tape.mean(tape.mul(x, x)), 0.1);
    std::vector<Tensor> parts{nll, reg};
    return tape.add_scalars(parts);
  };
  return g;
}

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("opdlab-" + tag + "-" + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& p) const { return path_ / p; }

 private:
  std::filesystem::path path_;
};

}  // namespace testsupport
