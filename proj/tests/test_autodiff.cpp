#include <gtest/gtest.h>

#include <cmath>

#include "opdlab/autodiff.hpp"
#include "support.hpp"

using namespace opdlab;
using opdlab::ad::Tape;
using opdlab::ad::Tensor;
using testsupport::fd_check;
using testsupport::randn;

namespace {

Rng& rng() {
  static Rng r(1234);
  return r;
}

}  // namespace

TEST(Autodiff, ElementwisePrimitivesMatchFiniteDifferences) {
  auto a = randn({3, 4}, rng());
  auto b = randn({3, 4}, rng());
  auto row = randn({4}, rng());
  const std::vector<double> w = {0.3, -1.2, 0.7, 0.1, 2.0, -0.5, 0.9, 0.4, -0.8, 1.1, 0.6, -0.3};
  auto f = [&](Tape& t, const std::vector<Tensor>& L) {
    auto x = t.add(t.mul(L[0], L[1]), t.sub(L[0], t.scale(L[1], 0.5)));
    x = t.add_row(x, L[2]);
    x = t.log(t.add(t.exp(x), t.exp(L[1])));
    return t.weighted_sum(t.gelu(x), w);
  };
  EXPECT_LE(fd_check(f, {a, b, row}), 1e-4);
}

TEST(Autodiff, ReluAwayFromKinkMatchesFiniteDifferences) {
  Tensor x({6}, {-1.3, -0.4, 0.2, 0.9, 1.7, -2.2}, true);
  auto f = [](Tape& t, const std::vector<Tensor>& L) {
    return t.weighted_sum(t.relu(L[0]), std::vector<double>{1, 2, 3, 4, 5, 6});
  };
  EXPECT_LE(fd_check(f, {x}), 1e-4);
}

TEST(Autodiff, MatmulLayerNormSoftmaxGather) {
  auto a = randn({4, 5}, rng());
  auto b = randn({5, 3}, rng());
  auto g = randn({3}, rng());
  auto beta = randn({3}, rng());
  const std::vector<int> ids = {2, 0, 1, 1};
  auto f = [&](Tape& t, const std::vector<Tensor>& L) {
    auto x = t.layer_norm(t.matmul(L[0], L[1]), L[2], L[3]);
    auto picked = t.gather(t.log_softmax(x), ids);
    return t.masked_mean(picked, std::vector<double>{1, 0, 1, 1});
  };
  EXPECT_LE(fd_check(f, {a, b, g, beta}), 1e-4);
}

TEST(Autodiff, EmbeddingSliceAndAttention) {
  auto table = randn({5, 6}, rng());
  auto pos = randn({6, 6}, rng(), 0.3);
  auto wqkv = randn({6, 18}, rng(), 0.5);
  const std::vector<int> ids = {4, 1, 1, 3};
  auto f = [&](Tape& t, const std::vector<Tensor>& L) {
    auto x = t.add(t.embedding(L[0], ids), t.slice_rows(L[1], 2, 4));
    auto att = t.causal_attention(t.matmul(x, L[2]), 2);
    return t.sum(t.mul(att, att));
  };
  EXPECT_LE(fd_check(f, {table, pos, wqkv}), 1e-4);
}

TEST(Autodiff, CausalAttentionIgnoresFuturePositions) {
  Rng r(9);
  auto qkv = randn({4, 12}, r, 1.0, false);
  Tape t1;
  auto full = t1.causal_attention(qkv, 2);
  auto changed = Tensor(qkv.shape(), qkv.data(), false);
  for (std::size_t j = 0; j < 12; ++j) changed.data()[3 * 12 + j] += 5.0;
  Tape t2;
  auto other = t2.causal_attention(changed, 2);
  for (std::size_t i = 0; i < 3 * 4; ++i) EXPECT_EQ(full[i], other[i]);
}

TEST(Autodiff, TwentyRandomCompositeGraphs) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    auto g = testsupport::random_graph(1000 + s);
    ASSERT_LE(g.num_params(), 10000u);
    EXPECT_LE(fd_check(g.f, g.leaves), 1e-4) << "graph seed " << s;
  }
}

TEST(Autodiff, BackwardIsLinearInTheLoss) {
  auto g = testsupport::random_graph(77);
  auto grads_of = [&](double a, double b, const testsupport::GraphFn& f2) {
    for (auto l : g.leaves) l.zero_grad();
    Tape t;
    auto l1 = g.f(t, g.leaves);
    auto l2 = f2(t, g.leaves);
    std::vector<Tensor> parts{t.scale(l1, a), t.scale(l2, b)};
    t.backward(t.add_scalars(parts));
    std::vector<double> out;
    for (const auto& l : g.leaves) out.insert(out.end(), l.grad().begin(), l.grad().end());
    return out;
  };
  testsupport::GraphFn second = [](Tape& t, const std::vector<Tensor>& L) { return t.sum(t.exp(t.scale(L[0], 0.3))); };
  const auto g1 = grads_of(1.0, 0.0, second);
  const auto g2 = grads_of(0.0, 1.0, second);
  const auto mix = grads_of(2.5, -0.75, second);
  for (std::size_t i = 0; i < mix.size(); ++i) EXPECT_NEAR(mix[i], 2.5 * g1[i] - 0.75 * g2[i], 1e-12);
}

TEST(Autodiff, LogSoftmaxRowsNormalize) {
  Rng r(3);
  auto x = randn({7, 16}, r, 5.0, false);
  Tape t;
  auto lp = t.log_softmax(x);
  for (std::size_t i = 0; i < 7; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 16; ++j) s += std::exp(lp[i * 16 + j]);
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Autodiff, ShapeErrorsAreReported) {
  Tape t;
  auto a = Tensor::zeros({2, 3});
  auto b = Tensor::zeros({3, 2});
  EXPECT_THROW(t.add(a, b), ad::ShapeError);
  EXPECT_THROW(t.matmul(a, a), ad::ShapeError);
  EXPECT_THROW(Tensor({2, 2}, {1.0, 2.0}), ad::ShapeError);
}

TEST(Autodiff, BackwardRequiresScalarAndSingleUse) {
  auto x = Tensor({3}, {1, 2, 3}, true);
  Tape t;
  auto y = t.scale(x, 2.0);
  EXPECT_THROW(t.backward(y), ad::ShapeError);
  auto s = t.sum(y);
  t.backward(s);
  EXPECT_EQ(x.grad(), (std::vector<double>{2, 2, 2}));
  EXPECT_THROW(t.backward(s), std::logic_error);
  t.reset();
  auto s2 = t.sum(t.mul(x, x));
  t.backward(s2);
  EXPECT_EQ(x.grad(), (std::vector<double>{4, 6, 8}));
}

TEST(Autodiff, ConstantsReceiveNoGradient) {
  auto x = Tensor({2}, {1, 2}, true);
  auto c = Tensor({2}, {3, 4}, false);
  Tape t;
  t.backward(t.sum(t.mul(x, c)));
  EXPECT_FALSE(c.has_grad());
  EXPECT_EQ(x.grad(), (std::vector<double>{3, 4}));
}
