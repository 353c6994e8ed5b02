#include <gtest/gtest.h>

#include <cmath>

#include "opdlab/rkl_analysis.hpp"

using namespace opdlab;
using namespace opdlab::rkl;

TEST(OutcomeSpace, SizeAndSequences) {
  OutcomeSpace s{5, 3};
  EXPECT_EQ(s.size(), 155u);
  EXPECT_EQ(s.sequence(0), (std::vector<int>{0}));
  EXPECT_EQ(s.sequence(4), (std::vector<int>{4}));
  EXPECT_EQ(s.sequence(5), (std::vector<int>{0, 0}));
  EXPECT_EQ(s.sequence(154), (std::vector<int>{4, 4, 4}));
  EXPECT_THROW(s.sequence(155), std::out_of_range);
}

TEST(CategoricalPolicy, NormalizedWithFullSupport) {
  Rng rng(1);
  auto p = CategoricalPolicy::random(300, rng, 4.0);
  double s = 0.0;
  for (double v : p.probs()) {
    EXPECT_GT(v, 0.0);
    s += v;
  }
  EXPECT_NEAR(s, 1.0, 1e-12);
  EXPECT_THROW(CategoricalPolicy(std::vector<double>(kMaxOutcomes + 1, 0.0)), std::invalid_argument);
}

TEST(ProductPolicy, FactorsAcrossPositions) {
  // length-2 sequences only: second position's logits apply to every prefix
  auto p = product_policy({{0.0, std::log(3.0)}, {std::log(2.0), 0.0}});
  ASSERT_EQ(p.size(), 4u);
  EXPECT_NEAR(p.probs()[0], 0.25 * 2.0 / 3.0, 1e-12);
  EXPECT_NEAR(p.probs()[3], 0.75 / 3.0, 1e-12);
}

TEST(ExactRkl, ClosedFormAndGibbs) {
  auto p = CategoricalPolicy::from_probs({0.9, 0.1});
  auto q = CategoricalPolicy::from_probs({0.5, 0.5});
  const double oracle = 0.9 * std::log(1.8) + 0.1 * std::log(0.2);
  EXPECT_NEAR(exact_rkl(p, q), oracle, 1e-12);
  EXPECT_NEAR(exact_rkl(p, q), 0.368064, 1e-6);
  EXPECT_EQ(exact_rkl(p, p), 0.0);
  Rng rng(2);
  for (int i = 0; i < 1000; ++i) {
    const std::size_t n = 2 + uniform_index(rng, 30);
    auto a = CategoricalPolicy::random(n, rng, 2.0);
    auto b = CategoricalPolicy::random(n, rng, 2.0);
    EXPECT_GE(exact_rkl(a, b), 0.0);
  }
  EXPECT_THROW(exact_rkl(p, CategoricalPolicy::from_probs({0.2, 0.3, 0.5})), std::invalid_argument);
}

TEST(ExactRklGradient, DualMethodsAgree) {
  Rng rng(3);
  for (int i = 0; i < 100; ++i) {
    const std::size_t n = 8 + uniform_index(rng, 57);
    auto s = CategoricalPolicy::random(n, rng, 2.0);
    auto t = CategoricalPolicy::random(n, rng, 2.0);
    auto g = exact_rkl_gradient(s, t);
    EXPECT_LE(g.max_abs_diff, 1e-10);
    // the "+1" term integrates to zero against the score
    auto without = score_gradient_without_baseline(s, t);
    for (std::size_t j = 0; j < n; ++j) EXPECT_NEAR(without[j], g.score_function[j], 1e-10);
  }
}

TEST(ExactRklGradient, VanishesAtEquality) {
  Rng rng(4);
  auto s = CategoricalPolicy::random(20, rng);
  auto g = exact_rkl_gradient(s, s);
  for (double v : g.autodiff) EXPECT_NEAR(v, 0.0, 1e-15);
}

TEST(ExactRklGradient, MatchesFiniteDifferenceOfKl) {
  Rng rng(5);
  auto s = CategoricalPolicy::random(10, rng);
  auto t = CategoricalPolicy::random(10, rng);
  auto g = exact_rkl_gradient(s, t);
  for (std::size_t j = 0; j < 10; ++j) {
    auto up = s.logits(), down = s.logits();
    up[j] += 1e-6;
    down[j] -= 1e-6;
    const double fd = (exact_rkl(CategoricalPolicy(up), t) - exact_rkl(CategoricalPolicy(down), t)) / 2e-6;
    EXPECT_NEAR(g.autodiff[j], fd, 1e-8);
  }
}

TEST(McGradient, WithinThreeStandardErrors) {
  Rng rng(6);
  for (int pair = 0; pair < 3; ++pair) {
    auto s = CategoricalPolicy::random(8, rng, 1.5);
    auto t = CategoricalPolicy::random(8, rng, 1.5);
    auto st = mc_gradient(s, t, 100000, rng);
    ASSERT_EQ(st.sample_count, 100000u);
    const auto exact = exact_rkl_gradient(s, t).autodiff;
    for (std::size_t j = 0; j < 8; ++j) {
      // intrinsic reward is −log ρ, so the estimator targets −∇RKL
      EXPECT_NEAR(st.exact_gradient[j], -exact[j], 1e-12);
      EXPECT_GT(st.mc_standard_error[j], 0.0);
      EXPECT_LE(std::abs(st.mc_gradient_mean[j] - st.exact_gradient[j]), 3.0 * st.mc_standard_error[j]);
      EXPECT_LE(std::abs(st.score_mean[j]), 3.0 * st.score_standard_error[j]);
    }
  }
  auto s = CategoricalPolicy::random(4, rng);
  EXPECT_THROW(mc_gradient(s, s, 99, rng), std::invalid_argument);
}

// Verifier-style 0/1 reward on every sequence of length <= 3 over 5 tokens.
TEST(McGradient, PolicyGradientUnbiasedOnEnumerableSpace) {
  const OutcomeSpace space{5, 3};
  Rng rng(7);
  auto policy = CategoricalPolicy::random(space.size(), rng, 1.0);
  std::vector<double> reward(space.size());
  for (std::size_t y = 0; y < space.size(); ++y) {
    const auto seq = space.sequence(y);
    reward[y] = seq.back() == 4 && seq.size() >= 2 ? 1.0 : 0.0;
  }
  auto st = mc_score_gradient(policy, reward, 100000, rng);
  // exact: d/dθ_j Σ p_y r_y = p_j (r_j − E r)
  double er = 0.0;
  for (std::size_t y = 0; y < space.size(); ++y) er += policy.probs()[y] * reward[y];
  int outside = 0;
  for (std::size_t j = 0; j < space.size(); ++j) {
    EXPECT_NEAR(st.exact_gradient[j], policy.probs()[j] * (reward[j] - er), 1e-15);
    if (std::abs(st.mc_gradient_mean[j] - st.exact_gradient[j]) > 3.0 * st.mc_standard_error[j]) ++outside;
  }
  EXPECT_EQ(outside, 0);
}

TEST(McGradient, VarianceGrowsAsTeacherMassShrinks) {
  Rng rng(8);
  auto base = CategoricalPolicy::random(30, rng);
  auto s = with_outcome_mass(base, 3, 0.4);
  double prev = 0.0;
  for (double eps : {1e-2, 1e-3, 1e-4, 1e-5, 1e-6}) {
    Rng r(9);
    auto st = mc_gradient(s, rejecting_teacher(s, 3, eps), 20000, r);
    EXPECT_GT(st.mc_variance_trace, prev) << eps;
    prev = st.mc_variance_trace;
  }
}

TEST(SecondMoment, SweepIsMonotoneWithStableAsymptoticRatio) {
  Rng rng(10);
  auto s = with_outcome_mass(CategoricalPolicy::random(84, rng), 0, 0.3);
  auto sweep = second_moment_sweep(s, 0, {1e-2, 1e-4, 1e-6, 1e-8}, 0.3);
  ASSERT_EQ(sweep.size(), 4u);
  for (std::size_t i = 1; i < sweep.size(); ++i) EXPECT_GT(sweep[i].second_moment, sweep[i - 1].second_moment);
  for (const auto& p : sweep) {
    const double l = std::log(0.3 / p.epsilon);
    EXPECT_NEAR(p.ratio, p.second_moment / (l * l), 1e-15);
    EXPECT_GT(p.ratio, 0.0);
  }
  EXPECT_LT(std::abs(sweep[3].ratio - sweep[2].ratio) / sweep[2].ratio, 0.2);
}

TEST(SecondMoment, ZeroForSelfTeacherAndErrors) {
  Rng rng(11);
  auto s = CategoricalPolicy::random(12, rng);
  EXPECT_EQ(second_moment(s, s), 0.0);
  auto heavy = with_outcome_mass(s, 2, 0.5);
  EXPECT_THROW(second_moment_sweep(heavy, 2, {0.0}), std::invalid_argument);
  EXPECT_THROW(second_moment_sweep(heavy, 2, {-1e-3}), std::invalid_argument);
  EXPECT_THROW(second_moment_sweep(with_outcome_mass(s, 2, 0.1), 2, {1e-3}), std::invalid_argument);
  EXPECT_THROW(second_moment_sweep(heavy, 99, {1e-3}), std::out_of_range);
}

TEST(SecondMoment, MatchesBruteForceNorm) {
  Rng rng(12);
  auto s = CategoricalPolicy::random(9, rng);
  auto t = CategoricalPolicy::random(9, rng);
  double m = 0.0;
  for (std::size_t y = 0; y < 9; ++y) {
    double norm2 = 0.0;
    for (std::size_t j = 0; j < 9; ++j) {
      const double g = (y == j ? 1.0 : 0.0) - s.probs()[j];
      norm2 += g * g;
    }
    const double lr = s.log_probs()[y] - t.log_probs()[y];
    m += s.probs()[y] * norm2 * lr * lr;
  }
  EXPECT_NEAR(second_moment(s, t), m, 1e-12);
}

TEST(Asymmetry, SelfTeacherIsNeutral) {
  Rng rng(13);
  auto s = CategoricalPolicy::random(16, rng);
  auto r = asymmetry_report(s, s, 10000, rng);
  EXPECT_LT(std::abs(r.max_positive_reward), 1e-10);
  EXPECT_LT(std::abs(r.max_negative_reward), 1e-10);
  EXPECT_THROW(asymmetry_report(s, s, 9999, rng), std::invalid_argument);
}

TEST(Asymmetry, PenaltiesDominateBonuses) {
  Rng rng(14);
  auto s = with_outcome_mass(CategoricalPolicy::random(40, rng), 0, 0.5);
  auto t = rejecting_teacher(s, 0, 1e-6);
  EXPECT_NEAR(t.probs()[0], 1e-6, 1e-18);
  auto r = asymmetry_report(s, t, 100000, rng);
  EXPECT_LT(r.max_negative_reward, -10.0);
  EXPECT_LT(r.max_positive_reward, 1.0);
  EXPECT_GT(r.negative_tail_frequency, r.positive_tail_frequency);
}
