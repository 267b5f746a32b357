#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "nce/dataset.hpp"
#include "nce/error.hpp"
#include "nce/models.hpp"

namespace nce {

/// Arm predictions per row on the prediction scale; o0 = Q(0, x_i), o1 = Q(1, x_i).
using ArmPredictions = ArmOutputs;

/// The generator's own arm means, for environments that carry them.
inline ArmPredictions oracle_arms(const EnvData& env) {
  require(env.truth().has_value(), ErrorCode::NoGroundTruth, "environment '" + env.id() + "'");
  require(env.truth()->has_arm_means(), ErrorCode::NoGroundTruth,
          "environment '" + env.id() + "' has no stored arm means");
  return {env.truth()->mu0, env.truth()->mu1};
}

/// Mean of q1 - q0 over treated rows.
///
/// With mediators among the covariates this is the natural direct effect on the
/// treated rather than the ATT; the computation is the same.
inline double satt_from_arms(const ArmPredictions& arms, const EnvData& env) {
  require(arms.o0.size() == env.n() && arms.o1.size() == env.n(), ErrorCode::DimensionMismatch,
          "arm predictions do not match the environment");
  double s = 0.0;
  Index treated = 0;
  for (Index i = 0; i < env.n(); ++i) {
    if (env.t()(i) != 1.0) continue;
    s += arms.o1(i) - arms.o0(i);
    ++treated;
  }
  require(treated > 0, ErrorCode::NoTreatedUnits, "environment '" + env.id() + "'");
  return s / static_cast<double>(treated);
}

template <OutcomeModel M>
double satt_hat(const M& model, const EnvData& env, LossKind loss) {
  require(env.n_treated() > 0, ErrorCode::NoTreatedUnits, "environment '" + env.id() + "'");
  return satt_from_arms(predict_arms(model, env.x(), loss), env);
}

inline double true_satt(const EnvData& env) {
  require(env.truth().has_value(), ErrorCode::NoGroundTruth, "environment '" + env.id() + "'");
  const VectorXd& ite = env.truth()->ite;
  double s = 0.0;
  Index treated = 0;
  for (Index i = 0; i < env.n(); ++i) {
    if (env.t()(i) != 1.0) continue;
    s += ite(i);
    ++treated;
  }
  require(treated > 0, ErrorCode::NoTreatedUnits, "environment '" + env.id() + "'");
  return s / static_cast<double>(treated);
}

template <OutcomeModel M>
double cate_hat(const M& model, const VectorXd& x, LossKind loss) {
  const auto [q0, q1] = both_arms(model, x, loss);
  return q1 - q0;
}

/// Mean squared CATE error over all rows (no square root).
inline double pehe_from_arms(const ArmPredictions& arms, const EnvData& env) {
  require(env.truth().has_value(), ErrorCode::NoGroundTruth, "environment '" + env.id() + "'");
  require(arms.o0.size() == env.n(), ErrorCode::DimensionMismatch, "arm predictions do not match the environment");
  return ((arms.o1 - arms.o0) - env.truth()->ite).squaredNorm() / static_cast<double>(env.n());
}

template <OutcomeModel M>
double pehe(const M& model, const EnvData& env, LossKind loss) {
  require(env.truth().has_value(), ErrorCode::NoGroundTruth, "environment '" + env.id() + "'");
  return pehe_from_arms(predict_arms(model, env.x(), loss), env);
}

/// Mean over both arms of the mean squared weight on `cols` (where the true weight is 0).
inline double noncausal_weight_error(const Ols2Params& params, const std::vector<Index>& cols) {
  require(!cols.empty(), ErrorCode::InvalidArgument, "no columns given");
  double s = 0.0;
  for (int arm = 0; arm < 2; ++arm) {
    double a = 0.0;
    for (Index c : cols) {
      require(c >= 0 && c < params.dim(), ErrorCode::IndexOutOfRange, "column " + std::to_string(c));
      a += params.w(arm)(c) * params.w(arm)(c);
    }
    s += a / static_cast<double>(cols.size());
  }
  return s / 2.0;
}

struct EnvEstimate {
  std::string env_id;
  double satt_hat = 0.0;
  std::optional<double> satt_true;
  std::optional<double> mae;
  std::optional<double> pehe;
};

struct EstimateReport {
  std::vector<EnvEstimate> envs;
  std::optional<double> mean_mae;
  std::optional<double> pooled_pehe;  // over all rows of all environments
  std::optional<double> weight_error;
};

/// Assembles an EstimateReport from per-environment arm predictions.
inline EstimateReport evaluate_arms(const std::vector<ArmPredictions>& arms, const MultiEnvDataset& data) {
  require(arms.size() == data.size(), ErrorCode::DimensionMismatch, "one prediction set per environment");
  EstimateReport r;
  double mae_sum = 0.0, sq_sum = 0.0;
  Index rows = 0;
  bool truth = true;
  for (std::size_t k = 0; k < data.size(); ++k) {
    const EnvData& env = data.env(k);
    EnvEstimate est;
    est.env_id = env.id();
    est.satt_hat = satt_from_arms(arms[k], env);
    if (env.truth()) {
      est.satt_true = true_satt(env);
      est.mae = std::abs(est.satt_hat - *est.satt_true);
      est.pehe = pehe_from_arms(arms[k], env);
      mae_sum += *est.mae;
      sq_sum += *est.pehe * static_cast<double>(env.n());
      rows += env.n();
    } else {
      truth = false;
    }
    r.envs.push_back(std::move(est));
  }
  if (truth) {
    r.mean_mae = mae_sum / static_cast<double>(data.size());
    r.pooled_pehe = sq_sum / static_cast<double>(rows);
  }
  return r;
}

template <OutcomeModel M>
EstimateReport evaluate(const M& model, const MultiEnvDataset& data, LossKind loss) {
  std::vector<ArmPredictions> arms;
  for (const auto& e : data.envs()) arms.push_back(predict_arms(model, e.x(), loss));
  return evaluate_arms(arms, data);
}

}  // namespace nce
