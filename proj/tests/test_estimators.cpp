#include <gtest/gtest.h>

#include "oracles.hpp"

using namespace nce;

namespace {

EnvData small_env(const VectorXd& t, const VectorXd& ite) {
  const Index n = t.size();
  MatrixXd x(n, 2);
  for (Index i = 0; i < n; ++i) x.row(i) << static_cast<double>(i), 1.0 - static_cast<double>(i);
  GroundTruth g;
  g.ite = ite;
  return EnvData("s", x, t, VectorXd::Zero(n), g);
}

Ols2Params constant_effect(Index d, double effect) {
  const VectorXd w = VectorXd::LinSpaced(d, -1, 1);
  return Ols2Params(w, 0.5, w, 0.5 + effect);
}

}  // namespace

TEST(Satt, ConstantEffectModel) {
  const auto env = gen_linear_suite(LinearGraph::Noise, {1, 2}, 500, {}, 1).env(0);
  EXPECT_NEAR(satt_hat(constant_effect(10, 5.0), env, LossKind::Squared), 5.0, 1e-12);
  EXPECT_NEAR(satt_hat(constant_effect(10, 0.0), env, LossKind::Squared), 0.0, 1e-12);
}

TEST(Satt, SharedSlopesGiveInterceptDifference) {
  for (std::uint64_t s = 0; s < 5; ++s) {
    const auto env = oracle::random_env(50, 3, LossKind::Squared, s);
    Rng rng(s);
    const VectorXd w = normal_vector(rng, 3);
    EXPECT_NEAR(satt_hat(Ols2Params(w, -1.0, w, 1.7), env, LossKind::Squared), 2.7, 1e-12);
  }
}

TEST(Satt, OracleArmsGiveTheTrueSatt) {
  const auto data = gen_linear_suite(LinearGraph::Collider, {0.2, 2, 5}, 1000, {}, 3);
  for (const auto& e : data.envs()) EXPECT_NEAR(satt_from_arms(oracle_arms(e), e), true_satt(e), 1e-10);
}

TEST(Satt, NeedsTreatedUnits) {
  const auto env = small_env(VectorXd::Zero(3), VectorXd::Ones(3));
  try {
    satt_hat(Ols2Params(2), env, LossKind::Squared);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NoTreatedUnits);
  }
  EXPECT_THROW(true_satt(env), Error);
}

TEST(Satt, InvariantToRowOrderAndControlCovariates) {
  const auto env = oracle::random_env(40, 3, LossKind::Squared, 4);
  Ols2Params m(3);
  m.theta() = VectorXd::LinSpaced(m.size(), -1, 2);
  const double base = satt_hat(m, env, LossKind::Squared);
  std::vector<Index> rev(40);
  for (Index i = 0; i < 40; ++i) rev[static_cast<std::size_t>(i)] = 39 - i;
  EXPECT_NEAR(satt_hat(m, env.select_rows(rev), LossKind::Squared), base, 1e-12);
  MatrixXd x = env.x();
  for (Index i = 0; i < 40; ++i)
    if (env.t()(i) == 0.0) x.row(i).setConstant(100.0);
  EXPECT_EQ(satt_hat(m, env.with_covariates(x), LossKind::Squared), base);
}

TEST(Satt, ProbabilityScaleUnderCrossEntropy) {
  const auto env = oracle::random_env(20, 2, LossKind::BinaryCrossEntropy, 1);
  Ols2Params m(VectorXd::Zero(2), 0.0, VectorXd::Zero(2), std::log(3.0));
  EXPECT_NEAR(satt_hat(m, env, LossKind::BinaryCrossEntropy), 0.75 - 0.5, 1e-12);
}

TEST(TrueSatt, Examples) {
  EXPECT_EQ(true_satt(small_env(VectorXd::Ones(3), VectorXd::Constant(3, 5.0))), 5.0);
  EXPECT_EQ(true_satt(small_env((VectorXd(3) << 1, 0, 1).finished(), (VectorXd(3) << 1, 2, 3).finished())), 2.0);
  const EnvData bare("b", MatrixXd::Zero(2, 1), VectorXd::Ones(2), VectorXd::Zero(2));
  try {
    true_satt(bare);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NoGroundTruth);
  }
}

TEST(TrueSatt, LargeHomoskedasticSample) {
  LinearDgpConfig cfg;
  cfg.n = 1'000'000;
  cfg.e = 2.0;
  const auto w = LinearWeights::draw(5, 5);
  cfg.w_xt = w.w_xt;
  cfg.w_xy = w.w_xy;
  cfg.seed = 5;
  EXPECT_NEAR(true_satt(gen_linear_env(cfg)), 5.0, 0.01);
}

TEST(Cate, MatchesBothArms) {
  const auto m = constant_effect(4, 5.0);
  const TarnetParams net(4, oracle::small_net(), 2);
  Rng rng(3);
  for (int k = 0; k < 100; ++k) {
    const VectorXd x = normal_vector(rng, 4);
    EXPECT_NEAR(cate_hat(m, x, LossKind::Squared), 5.0, 1e-12);
    const auto [q0, q1] = both_arms(net, x, LossKind::Squared);
    EXPECT_NEAR(cate_hat(net, x, LossKind::Squared), q1 - q0, 1e-12);
  }
  EXPECT_THROW(cate_hat(m, VectorXd::Zero(3), LossKind::Squared), Error);
}

TEST(Cate, OracleArmsMatchNonlinearTruth) {
  const auto data = gen_nonlinear_suite({0.2, 1, 5}, 400, 10, AdjustmentSet::XAZ, 2);
  for (const auto& e : data.envs()) {
    const auto arms = oracle_arms(e);
    EXPECT_LE(((arms.o1 - arms.o0) - e.truth()->ite).cwiseAbs().maxCoeff(), 1e-9);
  }
}

TEST(Pehe, Examples) {
  const auto data = gen_linear_suite(LinearGraph::Descendant, {0.2, 2}, 300, {}, 2);
  const auto& e = data.env(1);
  const auto arms = oracle_arms(e);
  EXPECT_EQ(pehe_from_arms(arms, e), 0.0);
  ArmPredictions shifted{arms.o0, (arms.o1.array() + 1.0).matrix()};
  EXPECT_NEAR(pehe_from_arms(shifted, e), 1.0, 1e-12);
  const auto two = small_env((VectorXd(2) << 1, 0).finished(), VectorXd::Zero(2));
  const ArmPredictions err{VectorXd::Zero(2), (VectorXd(2) << 1, 3).finished()};
  EXPECT_DOUBLE_EQ(pehe_from_arms(err, two), 5.0);
}

TEST(Pehe, ZeroOnlyWhenEveryRowMatches) {
  const auto two = small_env((VectorXd(2) << 1, 0).finished(), (VectorXd(2) << 2, 2).finished());
  const ArmPredictions exact{VectorXd::Zero(2), VectorXd::Constant(2, 2.0)};
  EXPECT_EQ(pehe_from_arms(exact, two), 0.0);
  ArmPredictions off = exact;
  off.o1(1) += 1e-6;
  EXPECT_GT(pehe_from_arms(off, two), 0.0);
}

TEST(WeightError, Examples) {
  Ols2Params m(10);
  const std::vector<Index> x2{5, 6, 7, 8, 9};
  m.w(0).head(5).setConstant(3.0);
  EXPECT_EQ(noncausal_weight_error(m, x2), 0.0);
  m.w(0)(5) = 1.0;
  EXPECT_DOUBLE_EQ(noncausal_weight_error(m, x2), 0.1);
  try {
    noncausal_weight_error(m, {10});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::IndexOutOfRange);
  }
}

TEST(WeightError, IrmBelowErmOnTheColliderFixture) {
  LinearSuiteFlags flags;
  flags.heteroskedastic = true;
  const auto data = gen_linear_suite(LinearGraph::Collider, {0.2, 2, 5}, 1000, flags, 7);
  TrainConfig erm;
  erm.objective = Objective::ERM;
  const auto ref = fit_ols2_erm(data, erm);
  const auto irm = train(ref, data, TrainConfig{});
  const std::vector<Index> x2{5, 6, 7, 8, 9};
  EXPECT_LT(noncausal_weight_error(irm.params, x2), noncausal_weight_error(ref, x2));
}

TEST(Evaluate, OracleReportIsExact) {
  const auto data = gen_linear_suite(LinearGraph::Noise, {0.2, 2, 5}, 1000, {}, 9);
  std::vector<ArmPredictions> arms;
  for (const auto& e : data.envs()) arms.push_back(oracle_arms(e));
  const auto r = evaluate_arms(arms, data);
  ASSERT_EQ(r.envs.size(), 3u);
  for (const auto& e : r.envs) {
    EXPECT_LE(*e.mae, 1e-10);
    EXPECT_EQ(*e.pehe, 0.0);
  }
  EXPECT_EQ(*r.pooled_pehe, 0.0);
}

TEST(Evaluate, MeanMaeIsTheMeanOfEnvironmentMaes) {
  const auto data = gen_linear_suite(LinearGraph::Collider, {0.2, 2, 5}, 300, {}, 9);
  const auto r = evaluate(constant_effect(10, 4.0), data, LossKind::Squared);
  double s = 0.0;
  for (const auto& e : r.envs) {
    EXPECT_DOUBLE_EQ(*e.mae, std::abs(e.satt_hat - *e.satt_true));
    s += *e.mae;
  }
  EXPECT_DOUBLE_EQ(*r.mean_mae, s / 3.0);
}

TEST(Evaluate, NoTruthMeansNoMetrics) {
  const MultiEnvDataset data({oracle::random_env(10, 2, LossKind::Squared, 1, "a"),
                              oracle::random_env(10, 2, LossKind::Squared, 2, "b")});
  const auto r = evaluate(constant_effect(2, 1.0), data, LossKind::Squared);
  EXPECT_FALSE(r.mean_mae.has_value());
  EXPECT_FALSE(r.envs[0].satt_true.has_value());
  EXPECT_NEAR(r.envs[1].satt_hat, 1.0, 1e-12);
}
