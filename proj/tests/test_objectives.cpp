#include <gtest/gtest.h>

#include "oracles.hpp"

using namespace nce;
using oracle::random_env;

namespace {

constexpr LossKind kLosses[] = {LossKind::Squared, LossKind::BinaryCrossEntropy};

TrainConfig erm_cfg() {
  TrainConfig cfg;
  cfg.objective = Objective::ERM;
  return cfg;
}

// Y = X1 + T + N(0,1) in both environments; X2 = Y + N(0, s^2) with the
// noise scale s differing between environments.
MultiEnvDataset spurious_fixture(std::uint64_t seed) {
  std::vector<EnvData> envs;
  for (double e : {0.1, 1.0}) {
    Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(e * 10)}));
    const Index n = 5000;
    const VectorXd x1 = normal_vector(rng, n);
    VectorXd t(n);
    for (Index i = 0; i < n; ++i) t(i) = i % 2;
    const VectorXd y = x1 + t + normal_vector(rng, n);
    const VectorXd x2 = y + normal_vector(rng, n, e);
    MatrixXd x(n, 2);
    x << x1, x2;
    envs.emplace_back(env_label(e), x, t, y);
  }
  return MultiEnvDataset(std::move(envs));
}

}  // namespace

TEST(Penalty, PerfectPredictorIsZero) {
  MatrixXd x(3, 1);
  x << 1, 2, 3;
  const EnvData env("a", x, VectorXd::Zero(3), x.col(0));
  EXPECT_EQ(irm_penalty(Ols2Params(VectorXd::Ones(1), 0, VectorXd::Ones(1), 0), env, LossKind::Squared), 0.0);
}

TEST(Penalty, HandExample) {
  MatrixXd x(2, 1);
  x << 1, 2;
  const EnvData env("a", x, VectorXd::Zero(2), VectorXd::Zero(2));
  EXPECT_DOUBLE_EQ(irm_penalty(Ols2Params(VectorXd::Ones(1), 0, VectorXd::Ones(1), 0), env, LossKind::Squared), 25.0);
}

TEST(Penalty, MatchesFiniteDifferenceInTheScalarMultiplier) {
  for (auto loss : kLosses) {
    for (std::uint64_t k = 0; k < 20; ++k) {
      Ols2Params m(4);
      Rng rng(derive_seed(99, {k}));
      m.theta() = normal_vector(rng, m.size(), 0.7);
      const auto env = random_env(25, 4, loss, k);
      const double closed = irm_penalty(m, env, loss);
      EXPECT_GE(closed, 0.0);
      EXPECT_LE(oracle::rel_error(closed, oracle::penalty_by_fd(m, env, loss)), 1e-5) << to_string(loss) << k;
    }
    const auto net = oracle::jitter_biases(TarnetParams(4, oracle::small_net(), 3), 1);
    const auto env = random_env(25, 4, loss, 77);
    EXPECT_LE(oracle::rel_error(irm_penalty(net, env, loss), oracle::penalty_by_fd(net, env, loss)), 1e-5);
  }
}

TEST(Penalty, CrossEntropyClosedForm) {
  const auto env = random_env(30, 3, LossKind::BinaryCrossEntropy, 5);
  Ols2Params m(3);
  m.theta() = VectorXd::LinSpaced(m.size(), -0.5, 0.5);
  const VectorXd o = m.raw(env.x(), env.t()).outcome;
  double s = 0.0;
  for (Index i = 0; i < env.n(); ++i) s += o(i) * (sigmoid(o(i)) - env.y()(i));
  s /= env.n();
  EXPECT_NEAR(irm_penalty(m, env, LossKind::BinaryCrossEntropy), s * s, 1e-15);
}

TEST(IrmObjective, ZeroLambdaIsTheSumOfRisks) {
  const auto data = MultiEnvDataset({random_env(40, 3, LossKind::Squared, 1, "a"),
                                     random_env(40, 3, LossKind::Squared, 2, "b")});
  Ols2Params m(3);
  m.theta().setConstant(0.3);
  TrainConfig cfg;
  cfg.lambda = 0;
  cfg.l2 = 0;
  TrainConfig erm = erm_cfg();
  erm.l2 = 0;
  erm.env_weighted_erm = true;
  EXPECT_NEAR(irmv1_objective(m, data, cfg).value, 2.0 * erm_objective(m, data, erm).value, 1e-12);
  EXPECT_NEAR(irmv1_objective(m, data, cfg).value,
              risk(m, data.env(0), LossKind::Squared) + risk(m, data.env(1), LossKind::Squared), 1e-12);
}

TEST(IrmObjective, DuplicatedEnvironmentHasEqualPenalties) {
  const auto env = random_env(40, 3, LossKind::Squared, 1, "a");
  const MultiEnvDataset data({env, EnvData("b", env.x(), env.t(), env.y())});
  const auto ov = irmv1_objective(TarnetParams(3, oracle::small_net(), 2), data, TrainConfig{});
  EXPECT_EQ(ov.env_penalty[0], ov.env_penalty[1]);
  EXPECT_GT(ov.env_penalty[0], 0.0);
}

TEST(IrmObjective, ValueDecomposes) {
  const auto data = MultiEnvDataset({random_env(40, 3, LossKind::Squared, 1, "a"),
                                     random_env(60, 3, LossKind::Squared, 2, "b")});
  Ols2Params m(3);
  m.theta().setConstant(0.2);
  m.b(0) = 4.0;
  TrainConfig cfg;
  double expect = 0.0;
  for (const auto& e : data.envs()) expect += risk(m, e, cfg.loss) + cfg.lambda * irm_penalty(m, e, cfg.loss);
  expect += cfg.l2 * (m.w(0).squaredNorm() + m.w(1).squaredNorm());
  EXPECT_NEAR(irmv1_objective(m, data, cfg).value, expect, 1e-12);
}

template <class M>
void expect_objective_gradient(const M& model, const MultiEnvDataset& data, const TrainConfig& cfg,
                               std::vector<std::pair<Index, Index>> blocks) {
  const auto ov = detail::evaluate_objective(model, data.envs(), cfg);
  const auto coords = oracle::probe_coordinates(model.size(), 80, blocks, 10, 5);
  const auto r = oracle::fd_check<M>(
      model, ov.gradient, [&](const M& m) { return detail::evaluate_objective(m, data.envs(), cfg).value; }, coords,
      data.envs());
  EXPECT_GE(r.checked, 50);
  EXPECT_LE(r.worst, 1e-4) << to_string(cfg.objective) << ' ' << to_string(cfg.loss);
}

TEST(IrmObjective, GradientMatchesFiniteDifferences) {
  for (auto loss : kLosses) {
    const auto data = MultiEnvDataset({random_env(12, 5, loss, 1, "a"), random_env(16, 5, loss, 2, "b")});
    TrainConfig cfg;
    cfg.loss = loss;
    cfg.lambda = 100;
    const auto net = oracle::jitter_biases(TarnetParams(5, {}, 4), 3);
    expect_objective_gradient(net, data, cfg, {net.head_range(0), net.head_range(1)});
    const auto dn = oracle::jitter_biases(DragonnetParams(5, {}, 6), 7);
    expect_objective_gradient(dn, data, cfg, {dn.head_range(0), dn.head_range(1)});
    Ols2Params ols(5);
    ols.theta() = VectorXd::LinSpaced(ols.size(), -1, 1);
    expect_objective_gradient(ols, data, cfg, {});
    cfg.objective = Objective::ERM;
    expect_objective_gradient(net, data, cfg, {net.head_range(0), net.head_range(1)});
  }
}

TEST(IrmObjective, RejectsErmConfig) {
  const auto data = MultiEnvDataset({random_env(4, 1, LossKind::Squared, 1, "a"),
                                     random_env(4, 1, LossKind::Squared, 2, "b")});
  EXPECT_THROW(irmv1_objective(Ols2Params(1), data, erm_cfg()), Error);
  EXPECT_THROW(erm_objective(Ols2Params(1), data, TrainConfig{}), Error);
}

TEST(ErmObjective, RowWeighting) {
  const auto a = random_env(100, 2, LossKind::Squared, 1, "a");
  const auto b = random_env(300, 2, LossKind::Squared, 2, "b");
  Ols2Params m(2);
  m.theta().setConstant(0.1);
  auto cfg = erm_cfg();
  cfg.l2 = 0;
  const double ra = risk(m, a, cfg.loss), rb = risk(m, b, cfg.loss);
  EXPECT_NEAR(erm_objective(m, MultiEnvDataset({a, b}), cfg).value, (100 * ra + 300 * rb) / 400, 1e-12);
  const auto b_small = random_env(100, 2, LossKind::Squared, 2, "b");
  EXPECT_NEAR(erm_objective(m, MultiEnvDataset({a, b_small}), cfg).value,
              0.5 * (ra + risk(m, b_small, cfg.loss)), 1e-12);
  cfg.env_weighted_erm = true;
  EXPECT_NEAR(erm_objective(m, MultiEnvDataset({a, b}), cfg).value, 0.5 * (ra + rb), 1e-12);
  EXPECT_GT(std::abs((100 * ra + 300 * rb) / 400 - 0.5 * (ra + rb)), 1e-3);
}

TEST(ErmObjective, PerfectPredictorIsZero) {
  MatrixXd x(4, 1);
  x << 1, 2, 3, 4;
  const EnvData a("a", x, VectorXd::Zero(4), x.col(0)), b("b", x, VectorXd::Ones(4), x.col(0));
  auto cfg = erm_cfg();
  cfg.l2 = 0;
  EXPECT_EQ(erm_objective(Ols2Params(VectorXd::Ones(1), 0, VectorXd::Ones(1), 0), MultiEnvDataset({a, b}), cfg).value,
            0.0);
}

TEST(ClosedFormErm, IsAStationaryPointOfTheObjective) {
  const auto data = MultiEnvDataset({random_env(100, 4, LossKind::Squared, 1, "a"),
                                     random_env(300, 4, LossKind::Squared, 2, "b")});
  for (bool weighted : {false, true}) {
    auto cfg = erm_cfg();
    cfg.env_weighted_erm = weighted;
    const auto fit = fit_ols2_erm(data, cfg);
    EXPECT_LE(erm_objective(fit, data, cfg).gradient.cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(ClosedFormErm, EmptyArmIsReported) {
  MatrixXd x(3, 1);
  x << 1, 2, 3;
  const EnvData a("a", x, VectorXd::Zero(3), x.col(0)), b("b", x, VectorXd::Zero(3), x.col(0));
  try {
    fit_ols2_erm(MultiEnvDataset({a, b}), erm_cfg());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NoTreatedUnits);
  }
}

TEST(Train, RecoversNoiselessWeights) {
  std::vector<EnvData> envs;
  const VectorXd w0 = (VectorXd(3) << 0.5, -0.3, 0.8).finished();
  const VectorXd w1 = (VectorXd(3) << 0.2, 0.4, -0.6).finished();
  for (std::uint64_t k = 0; k < 2; ++k) {
    Rng rng(k + 10);
    const MatrixXd x = normal_matrix(rng, 200, 3);
    VectorXd t(200), y(200);
    for (Index i = 0; i < 200; ++i) {
      t(i) = i % 2;
      y(i) = t(i) == 1 ? x.row(i).dot(w1) + 1.0 : x.row(i).dot(w0) - 0.5;
    }
    envs.emplace_back("e" + std::to_string(k), x, t, y);
  }
  auto cfg = erm_cfg();
  cfg.l2 = 0;
  cfg.epochs = 2000;
  cfg.learning_rate = 1e-2;
  const auto rep = train(Ols2Params(3), MultiEnvDataset(envs), cfg);
  EXPECT_LE((rep.params.w(0) - w0).cwiseAbs().maxCoeff(), 1e-3);
  EXPECT_LE((rep.params.w(1) - w1).cwiseAbs().maxCoeff(), 1e-3);
  EXPECT_NEAR(rep.params.b(1), 1.0, 1e-3);
  EXPECT_NEAR(rep.params.b(0), -0.5, 1e-3);
  EXPECT_EQ(rep.objective.size(), 2000u);
  EXPECT_LE(rep.objective.back(), rep.objective.front());
}

TEST(Train, LargePenaltyShrinksTheSpuriousWeight) {
  const auto data = spurious_fixture(3);
  auto erm = erm_cfg();
  erm.l2 = 0;
  const auto ref = fit_ols2_erm(data, erm);
  TrainConfig cfg;
  cfg.lambda = 1e4;
  cfg.epochs = 3000;
  cfg.learning_rate = 1e-2;
  const auto rep = train(ref, data, cfg);
  for (int arm = 0; arm < 2; ++arm) {
    EXPECT_LT(std::abs(rep.params.w(arm)(1)), 0.1 * std::abs(ref.w(arm)(1))) << "arm " << arm;
  }
}

TEST(Train, EpochContract) {
  const auto data = MultiEnvDataset({random_env(20, 2, LossKind::Squared, 1, "a"),
                                     random_env(20, 2, LossKind::Squared, 2, "b")});
  auto cfg = erm_cfg();
  cfg.epochs = 0;
  EXPECT_THROW(train(Ols2Params(2), data, cfg), Error);
  cfg.epochs = 1;
  Ols2Params init(2);
  const auto rep = train(init, data, cfg);
  ASSERT_EQ(rep.objective.size(), 1u);
  ASSERT_EQ(rep.env_risk.size(), 1u);
  const VectorXd step = rep.params.theta() - init.theta();
  EXPECT_GT(step.cwiseAbs().minCoeff(), 0.0);
  EXPECT_LE(step.cwiseAbs().maxCoeff(), cfg.learning_rate * (1 + 1e-6));
}

TEST(Train, DeterministicAndDecreasing) {
  const auto data = MultiEnvDataset({random_env(30, 3, LossKind::BinaryCrossEntropy, 1, "a"),
                                     random_env(30, 3, LossKind::BinaryCrossEntropy, 2, "b")});
  TrainConfig cfg;
  cfg.loss = LossKind::BinaryCrossEntropy;
  cfg.lambda = 100;
  cfg.epochs = 60;
  cfg.batch = 8;
  cfg.seed = 4;
  const TarnetParams init(3, oracle::small_net(), 1);
  const auto a = train(init, data, cfg), b = train(init, data, cfg);
  EXPECT_EQ(a.params.theta(), b.params.theta());
  EXPECT_EQ(a.objective, b.objective);
  EXPECT_EQ(a.env_penalty, b.env_penalty);
  cfg.batch = 0;
  const auto full = train(init, data, cfg);
  EXPECT_LE(full.objective.back(), full.objective.front());
}

TEST(Train, DivergenceIsDetected) {
  const auto data = MultiEnvDataset({random_env(20, 2, LossKind::Squared, 1, "a"),
                                     random_env(20, 2, LossKind::Squared, 2, "b")});
  auto cfg = erm_cfg();
  cfg.learning_rate = 1e200;
  cfg.epochs = 5;
  try {
    train(Ols2Params(2), data, cfg);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::DivergenceDetected);
  }
}
