#include <gtest/gtest.h>

#include "oracles.hpp"

using namespace nce;

namespace {

JointPmf3 product_pmf(double pt, double py, double px) {
  std::array<double, 8> p{};
  for (int t = 0; t < 2; ++t)
    for (int y = 0; y < 2; ++y)
      for (int x = 0; x < 2; ++x)
        p[JointPmf3::index(t, y, x)] = (t ? pt : 1 - pt) * (y ? py : 1 - py) * (x ? px : 1 - px);
  return JointPmf3(p);
}

// X = XOR(T, Y) with (T, Y) uniform.
JointPmf3 xor_pmf() {
  std::array<double, 8> p{};
  for (int t = 0; t < 2; ++t)
    for (int y = 0; y < 2; ++y) p[JointPmf3::index(t, y, t ^ y)] = 0.25;
  return JointPmf3(p);
}

std::array<double, 8> random_raw(Rng& rng) {
  std::exponential_distribution<double> expo(1.0);
  std::array<double, 8> raw{};
  for (double& v : raw) v = expo(rng);
  return raw;
}

JointPmf3 random_pmf(Rng& rng) {
  auto raw = random_raw(rng);
  const double s = std::accumulate(raw.begin(), raw.end(), 0.0);
  for (double& v : raw) v /= s;
  return JointPmf3(raw);
}

// Balanced pmf whose two conditional biases share a sign.
JointPmf3 hypothesis_pmf(Rng& rng) {
  for (;;) {
    const JointPmf3 p = balance_x(random_raw(rng));
    if (collider_bias(p, 0) * collider_bias(p, 1) > 0.0) return p;
  }
}

EnvData overlap_env(bool randomized, Index n, std::uint64_t seed) {
  LinearSuiteFlags flags;
  if (randomized) flags.w_xt = VectorXd::Zero(flags.d_conf);
  return gen_linear_suite(LinearGraph::Noise, {1.0, 2.0}, n, flags, seed).env(1);
}

}  // namespace

TEST(JointPmf, Validation) {
  EXPECT_THROW(JointPmf3({0.5, 0.5, 0.5, 0, 0, 0, 0, 0}), Error);
  EXPECT_THROW(JointPmf3({1.5, -0.5, 0, 0, 0, 0, 0, 0}), Error);
  EXPECT_NO_THROW(JointPmf3({1, 0, 0, 0, 0, 0, 0, 0}));
  EXPECT_THROW(Coarsening(1.1), Error);
  EXPECT_THROW(Coarsening(-0.1), Error);
}

TEST(ColliderBias, IndependentPmfHasNone) {
  const auto p = product_pmf(0.3, 0.6, 0.45);
  for (int c = 0; c < 2; ++c) EXPECT_NEAR(collider_bias(p, c), 0.0, 1e-15);
  EXPECT_NEAR(aggregate_bias(p), 0.0, 1e-15);
}

TEST(ColliderBias, XorByEnumeration) {
  const auto p = xor_pmf();
  EXPECT_NEAR(covariance_ty(p), 0.0, 1e-15);
  EXPECT_NEAR(collider_bias(p, 1), -0.25, 1e-15);
  EXPECT_NEAR(collider_bias(p, 0), 0.25, 1e-15);
  // The two conditional biases cancel under P(X=1) = 1/2.
  EXPECT_NEAR(aggregate_bias(p), 0.0, 1e-15);
}

TEST(ColliderBias, ZeroMassCondition) {
  const auto p = product_pmf(0.5, 0.5, 1.0);
  try {
    collider_bias(p, 0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ZeroMassCondition);
  }
  EXPECT_THROW(aggregate_bias(p), Error);
  EXPECT_THROW(coarsened_bias(p, Coarsening(1.0)), Error);
}

TEST(ColliderBias, LawOfTotalCovariance) {
  Rng rng(11);
  for (int k = 0; k < 1000; ++k) EXPECT_LE(std::abs(total_covariance_residual(random_pmf(rng))), 1e-12);
}

TEST(AggregateBias, OppositeSignsCanCancel) {
  // Grid search over balanced pmfs for one whose conditional biases have
  // opposite signs and nearly cancel.
  Rng rng(5);
  double best = 1.0;
  for (int k = 0; k < 20000 && best > 1e-4; ++k) {
    const JointPmf3 p = balance_x(random_raw(rng));
    if (collider_bias(p, 0) * collider_bias(p, 1) < 0.0 && std::abs(collider_bias(p, 0)) > 0.01)
      best = std::min(best, aggregate_bias(p));
  }
  EXPECT_LE(best, 1e-4);
}

TEST(CoarsenedBias, IdentityCoarseningIsExact) {
  Rng rng(2);
  for (int k = 0; k < 100; ++k) {
    const auto p = random_pmf(rng);
    EXPECT_NEAR(coarsened_bias(p, Coarsening(1.0)), aggregate_bias(p), 1e-15);
  }
}

TEST(CoarsenedBias, CompleteNoiseRemovesIt) {
  Rng rng(3);
  for (int k = 0; k < 100; ++k) EXPECT_LE(coarsened_bias(random_pmf(rng), Coarsening(0.5)), 1e-12);
}

TEST(CoarsenedBias, QuarterFactorAtThreeQuarters) {
  Rng rng(4);
  for (int k = 0; k < 200; ++k) {
    const auto p = hypothesis_pmf(rng);
    EXPECT_NEAR(p.p_x(1), 0.5, 1e-12);
    EXPECT_NEAR(coarsened_bias(p, Coarsening(0.75)), 0.25 * aggregate_bias(p), 1e-12);
  }
}

TEST(CoarsenedBias, LipschitzInAlpha) {
  Rng rng(6);
  for (int k = 0; k < 50; ++k) {
    const auto p = random_pmf(rng);
    double worst = 0.0;
    for (int i = 0; i < 100; ++i) {
      const double a = i / 100.0, b = (i + 1) / 100.0;
      worst = std::max(worst, std::abs(coarsened_bias(p, Coarsening(b)) - coarsened_bias(p, Coarsening(a))) / 0.01);
    }
    // |cov| <= 1/4 on binary variables, so the induced bias changes by at
    // most a few units per unit alpha.
    EXPECT_LE(worst, 4.0);
  }
}

TEST(BalanceX, KeepsConditionalsAndHalvesX) {
  Rng rng(8);
  for (int k = 0; k < 100; ++k) {
    const auto raw = random_raw(rng);
    const double s = std::accumulate(raw.begin(), raw.end(), 0.0);
    std::array<double, 8> norm = raw;
    for (double& v : norm) v /= s;
    const JointPmf3 orig(norm), bal = balance_x(raw);
    EXPECT_NEAR(bal.p_x(1), 0.5, 1e-12);
    for (int c = 0; c < 2; ++c) EXPECT_NEAR(conditional_covariance_ty(bal, c), conditional_covariance_ty(orig, c), 1e-12);
  }
}

TEST(ColliderTheorem, ThousandTrialsWithoutViolation) {
  const auto rep = verify_collider_theorem(1000, 17);
  EXPECT_EQ(rep.trials, 1000);
  EXPECT_EQ(rep.tested, 1000);
  EXPECT_EQ(rep.inequality_violations, 0);
  EXPECT_EQ(rep.identity_violations, 0);
  EXPECT_LE(rep.max_identity_error, 1e-10);
  EXPECT_TRUE(rep.passed());
  EXPECT_THROW(verify_collider_theorem(0, 1), Error);
}

TEST(ColliderTheorem, EqualityAtAlphaOne) {
  Rng rng(9);
  const auto tr = check_collider_trial(hypothesis_pmf(rng), Coarsening(1.0));
  ASSERT_TRUE(tr.hypotheses_hold);
  EXPECT_TRUE(tr.inequality_holds);
  EXPECT_NEAR(tr.bias_phi, tr.bias_x, 1e-15);
}

TEST(ColliderTheorem, UnbalancedPmfIsExcluded) {
  std::array<double, 8> p{};
  p[JointPmf3::index(1, 1, 1)] = 0.4;
  p[JointPmf3::index(0, 0, 1)] = 0.3;
  p[JointPmf3::index(1, 0, 0)] = 0.2;
  p[JointPmf3::index(0, 1, 0)] = 0.1;
  const auto tr = check_collider_trial(JointPmf3(p), Coarsening(0.8));
  EXPECT_FALSE(tr.hypotheses_hold);
  EXPECT_GT(verify_collider_theorem(200, 3).excluded, 0);
}

TEST(Overlap, ConstantScoreIsOneBin) {
  const auto env = overlap_env(false, 5000, 1);
  const auto rep = overlap_check(env, VectorXd::Constant(env.n(), 3.0), 20);
  ASSERT_EQ(rep.bins.size(), 1u);
  EXPECT_EQ(rep.bins[0].count, env.n());
  EXPECT_NEAR(rep.bins[0].treated_rate, static_cast<double>(env.n_treated()) / env.n(), 1e-15);
  EXPECT_TRUE(rep.passed());
}

TEST(Overlap, TruePropensityScore) {
  const auto env = overlap_env(false, 100000, 2);
  const VectorXd& prop = env.truth()->propensity;
  const auto rep = overlap_check(env, prop, 20);
  EXPECT_EQ(rep.bins.size(), 20u);
  EXPECT_TRUE(rep.passed());
  EXPECT_GT(rep.epsilon, 0.0);
  EXPECT_LT(rep.epsilon, 0.5);
  // Bin rates follow the bin-mean propensity.
  std::vector<Index> order(static_cast<std::size_t>(env.n()));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return prop(a) < prop(b); });
  Index start = 0;
  for (const auto& b : rep.bins) {
    double m = 0.0;
    for (Index k = start; k < start + b.count; ++k) m += prop(order[static_cast<std::size_t>(k)]);
    m /= static_cast<double>(b.count);
    EXPECT_NEAR(b.treated_rate, m, 4.0 * std::sqrt(0.25 / static_cast<double>(b.count)));
    start += b.count;
  }
}

TEST(Overlap, RandomizedTreatmentBinsNearHalf) {
  const auto env = overlap_env(true, 100000, 3);
  EXPECT_NEAR(env.truth()->propensity.minCoeff(), 0.5, 1e-12);
  Rng rng(4);
  const auto rep = overlap_check(env, normal_vector(rng, env.n()), 20);
  EXPECT_NEAR(rep.epsilon, 0.5, 1e-12);
  for (const auto& b : rep.bins) {
    const double delta = 3.0 * std::sqrt(0.25 / static_cast<double>(b.count));
    EXPECT_NEAR(b.lower, 0.5 - delta, 1e-12);
    EXPECT_NEAR(b.upper, 0.5 + delta, 1e-12);
  }
  EXPECT_TRUE(rep.passed());
}

TEST(Overlap, FittedRepresentation) {
  for (bool randomized : {true, false}) {
    OverlapSpec spec;
    spec.randomized = randomized;
    spec.n_per_env = 20000;
    spec.seed = 7;
    EXPECT_TRUE(run_overlap_verification(spec).passed());
  }
}

TEST(Overlap, RequiresPropensity) {
  const auto env = oracle::random_env(10, 2, LossKind::Squared, 1);
  try {
    overlap_check(env, VectorXd::Zero(10));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NoGroundTruth);
  }
  EXPECT_THROW(overlap_check(overlap_env(true, 50, 1), VectorXd::Zero(3)), Error);
}

TEST(Overlap, RepresentationScoreIsArmDifference) {
  const Ols2Params m(VectorXd::Zero(2), 1.0, (VectorXd(2) << 1, 0).finished(), 3.0);
  const MatrixXd x = (MatrixXd(2, 2) << 1, 5, -1, 5).finished();
  const VectorXd s = representation_score(m, x, LossKind::Squared);
  EXPECT_DOUBLE_EQ(s(0), 3.0);
  EXPECT_DOUBLE_EQ(s(1), 1.0);
}
