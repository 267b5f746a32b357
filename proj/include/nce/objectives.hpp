#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "nce/dataset.hpp"
#include "nce/error.hpp"
#include "nce/models.hpp"
#include "nce/random.hpp"

namespace nce {

enum class Objective { ERM, IRMv1 };

constexpr const char* to_string(Objective o) { return o == Objective::ERM ? "erm" : "irmv1"; }

struct TrainConfig {
  Objective objective = Objective::IRMv1;
  double lambda = 10.0;
  LossKind loss = LossKind::Squared;
  double learning_rate = 1e-3;
  double l2 = 1e-4;
  int epochs = 3000;
  Index batch = 0;  // rows per environment per step; 0 = full batch
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double alpha_t = 1.0;           // treatment-head weight, models with a treatment head only
  bool env_weighted_erm = false;  // ERM pools rows by default

  void validate() const {
    require(learning_rate > 0, ErrorCode::InvalidArgument, "learning_rate must be > 0");
    require(epochs >= 1, ErrorCode::InvalidArgument, "epochs must be >= 1");
    require(lambda >= 0, ErrorCode::InvalidArgument, "lambda must be >= 0");
    require(l2 >= 0, ErrorCode::InvalidArgument, "l2 must be >= 0");
    require(alpha_t >= 0, ErrorCode::InvalidArgument, "alpha_t must be >= 0");
    require(batch >= 0, ErrorCode::InvalidArgument, "batch must be >= 0");
  }
};

struct ObjectiveValue {
  double value = 0.0;
  VectorXd gradient;
  std::vector<double> env_risk;
  std::vector<double> env_penalty;  // zeros under ERM
};

/// Squared derivative of the environment risk with respect to a scalar w
/// multiplying the raw output, at w = 1.
template <OutcomeModel M>
double irm_penalty(const M& model, const EnvData& env, LossKind loss) {
  detail::check_dim(model.dim(), env.d());
  detail::check_loss_target(env, loss);
  const auto out = model.raw(env.x(), env.t());
  double s = 0.0;
  for (Index i = 0; i < env.n(); ++i) s += out.outcome(i) * loss::evaluate(loss, env.y()(i), out.outcome(i)).d1;
  const double dw = s / static_cast<double>(env.n());
  return dw * dw;
}

namespace detail {

struct EnvTerm {
  double risk = 0.0;
  double penalty = 0.0;
  double value = 0.0;
};

// One environment's contribution: risk_weight * (risk + alpha_t * treatment
// risk) + lambda * penalty, with its gradient accumulated into `grad`.
template <OutcomeModel M>
EnvTerm env_term(const M& model, const EnvData& env, LossKind loss, double risk_weight, double lambda,
                 double alpha_t, VectorXd& grad) {
  EnvTerm term;
  const Index n = env.n();
  const double inv_n = 1.0 / static_cast<double>(n);
  term.value = model.value_and_grad(
      env.x(), env.t(),
      [&](const RawOutputs& out, Cotangents& c) {
        c.outcome.resize(n);
        double r = 0.0, dw = 0.0;
        for (Index i = 0; i < n; ++i) {
          const auto l = loss::evaluate(loss, env.y()(i), out.outcome(i));
          r += l.value;
          dw += out.outcome(i) * l.d1;
          c.outcome(i) = risk_weight * l.d1 * inv_n;
        }
        r *= inv_n;
        dw *= inv_n;
        term.risk = r;
        term.penalty = dw * dw;
        if (lambda > 0.0) {
          const double scale = lambda * 2.0 * dw * inv_n;
          for (Index i = 0; i < n; ++i) {
            const auto l = loss::evaluate(loss, env.y()(i), out.outcome(i));
            c.outcome(i) += scale * (l.d1 + out.outcome(i) * l.d2);
          }
        }
        double value = risk_weight * r + lambda * term.penalty;
        if constexpr (M::kHasTreatmentHead) {
          if (alpha_t > 0.0) {
            c.treatment.resize(n);
            double rt = 0.0;
            for (Index i = 0; i < n; ++i) {
              const auto lt = loss::evaluate(LossKind::BinaryCrossEntropy, env.t()(i), out.treatment(i));
              rt += lt.value;
              c.treatment(i) = risk_weight * alpha_t * lt.d1 * inv_n;
            }
            value += risk_weight * alpha_t * rt * inv_n;
          }
        }
        return value;
      },
      grad);
  return term;
}

template <OutcomeModel M>
ObjectiveValue evaluate_objective(const M& model, const std::vector<EnvData>& envs, const TrainConfig& cfg) {
  ObjectiveValue out;
  out.gradient = VectorXd::Zero(model.size());
  Index total = 0;
  for (const auto& e : envs) {
    check_dim(model.dim(), e.d());
    check_loss_target(e, cfg.loss);
    total += e.n();
  }
  const bool irm = cfg.objective == Objective::IRMv1;
  for (const auto& e : envs) {
    double w = 1.0;
    if (!irm)
      w = cfg.env_weighted_erm ? 1.0 / static_cast<double>(envs.size())
                               : static_cast<double>(e.n()) / static_cast<double>(total);
    const auto term = env_term(model, e, cfg.loss, w, irm ? cfg.lambda : 0.0, cfg.alpha_t, out.gradient);
    out.value += term.value;
    out.env_risk.push_back(term.risk);
    out.env_penalty.push_back(irm ? term.penalty : 0.0);
  }
  if (cfg.l2 > 0.0) {
    const VectorXd masked = model.theta().cwiseProduct(model.l2_mask());
    out.value += cfg.l2 * masked.squaredNorm();
    out.gradient += 2.0 * cfg.l2 * masked;
  }
  return out;
}

}  // namespace detail

/// Sum over environments of risk + lambda * penalty, plus the l2 term on
/// non-intercept parameters.
template <OutcomeModel M>
ObjectiveValue irmv1_objective(const M& model, const MultiEnvDataset& data, const TrainConfig& cfg) {
  require(cfg.objective == Objective::IRMv1, ErrorCode::InvalidArgument, "config objective is not IRMv1");
  return detail::evaluate_objective(model, data.envs(), cfg);
}

/// Pooled mean loss over every row (or the mean of environment risks when
/// `env_weighted_erm` is set), plus the l2 term.
template <OutcomeModel M>
ObjectiveValue erm_objective(const M& model, const MultiEnvDataset& data, const TrainConfig& cfg) {
  require(cfg.objective == Objective::ERM, ErrorCode::InvalidArgument, "config objective is not ERM");
  return detail::evaluate_objective(model, data.envs(), cfg);
}

/// Exact minimizer of the squared-loss ERM objective for OLS-2: one weighted
/// ridge solve per arm, intercepts unpenalized.
inline Ols2Params fit_ols2_erm(const MultiEnvDataset& data, const TrainConfig& cfg) {
  require(cfg.objective == Objective::ERM, ErrorCode::InvalidArgument, "config objective is not ERM");
  require(cfg.loss == LossKind::Squared, ErrorCode::InvalidArgument, "closed-form fit needs squared loss");
  const Index d = data.d();
  const auto total = static_cast<double>(data.total_rows());
  std::array<MatrixXd, 2> gram{MatrixXd::Zero(d + 1, d + 1), MatrixXd::Zero(d + 1, d + 1)};
  std::array<VectorXd, 2> rhs{VectorXd::Zero(d + 1), VectorXd::Zero(d + 1)};
  std::array<Index, 2> rows{0, 0};
  for (const auto& e : data.envs()) {
    const double w = cfg.env_weighted_erm ? 1.0 / (static_cast<double>(data.size()) * static_cast<double>(e.n()))
                                          : 1.0 / total;
    MatrixXd z(e.n(), d + 1);
    z << e.x(), VectorXd::Ones(e.n());
    for (int arm = 0; arm < 2; ++arm) {
      std::vector<Index> idx;
      for (Index i = 0; i < e.n(); ++i)
        if ((e.t()(i) == 1.0) == (arm == 1)) idx.push_back(i);
      if (idx.empty()) continue;
      const MatrixXd za = z(idx, Eigen::all);
      gram[arm] += w * za.transpose() * za;
      rhs[arm] += w * za.transpose() * e.y()(idx);
      rows[arm] += static_cast<Index>(idx.size());
    }
  }
  Ols2Params out(d);
  for (int arm = 0; arm < 2; ++arm) {
    require(rows[arm] > 0, arm == 1 ? ErrorCode::NoTreatedUnits : ErrorCode::SingularDesign,
            "arm " + std::to_string(arm) + " has no rows");
    gram[arm].diagonal().head(d).array() += cfg.l2;
    const Eigen::ColPivHouseholderQR<MatrixXd> qr(gram[arm]);
    require(qr.rank() == d + 1, ErrorCode::SingularDesign, "arm " + std::to_string(arm) + " design is rank deficient");
    const VectorXd sol = qr.solve(rhs[arm]);
    out.w(arm) = sol.head(d);
    out.b(arm) = sol(d);
  }
  return out;
}

template <OutcomeModel M>
struct TrainReport {
  std::vector<double> objective;
  std::vector<std::vector<double>> env_risk;
  std::vector<std::vector<double>> env_penalty;
  M params;
};

/// Adam on the configured objective. Per-epoch entries are the objective at
/// the parameters the epoch started from (averaged over steps for minibatches).
template <OutcomeModel M>
TrainReport<M> train(M model, const MultiEnvDataset& data, const TrainConfig& cfg) {
  cfg.validate();
  const Index p = model.size();
  VectorXd m = VectorXd::Zero(p), v = VectorXd::Zero(p);
  double b1t = 1.0, b2t = 1.0;
  TrainReport<M> report{{}, {}, {}, model};
  report.objective.reserve(static_cast<std::size_t>(cfg.epochs));

  auto step = [&](const ObjectiveValue& ov) {
    if (!std::isfinite(ov.value) || !ov.gradient.allFinite())
      throw Error(ErrorCode::DivergenceDetected, "objective became non-finite");
    b1t *= cfg.beta1;
    b2t *= cfg.beta2;
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * ov.gradient;
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * ov.gradient.cwiseAbs2();
    const double lr = cfg.learning_rate * std::sqrt(1.0 - b2t) / (1.0 - b1t);
    model.theta().array() -= lr * m.array() / (v.array().sqrt() + cfg.adam_eps * std::sqrt(1.0 - b2t));
  };

  Index max_n = 0;
  for (const auto& e : data.envs()) max_n = std::max(max_n, e.n());
  const bool full = cfg.batch == 0 || cfg.batch >= max_n;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (full) {
      const auto ov = detail::evaluate_objective(model, data.envs(), cfg);
      report.objective.push_back(ov.value);
      report.env_risk.push_back(ov.env_risk);
      report.env_penalty.push_back(ov.env_penalty);
      step(ov);
      continue;
    }
    std::vector<std::vector<Index>> perms;
    for (std::size_t k = 0; k < data.size(); ++k) {
      std::vector<Index> perm(static_cast<std::size_t>(data.env(k).n()));
      std::iota(perm.begin(), perm.end(), Index{0});
      Rng rng(derive_seed(cfg.seed, {static_cast<std::uint64_t>(epoch), k}));
      std::shuffle(perm.begin(), perm.end(), rng);
      perms.push_back(std::move(perm));
    }
    const Index steps = (max_n + cfg.batch - 1) / cfg.batch;
    double obj = 0.0;
    std::vector<double> risks(data.size(), 0.0), pens(data.size(), 0.0);
    std::vector<int> hits(data.size(), 0);
    for (Index s = 0; s < steps; ++s) {
      std::vector<EnvData> batch;
      std::vector<std::size_t> which;
      for (std::size_t k = 0; k < data.size(); ++k) {
        const auto& perm = perms[k];
        const auto lo = static_cast<std::size_t>(s * cfg.batch);
        if (lo >= perm.size()) continue;
        const auto hi = std::min(perm.size(), lo + static_cast<std::size_t>(cfg.batch));
        batch.push_back(data.env(k).select_rows(std::vector<Index>(perm.begin() + lo, perm.begin() + hi)));
        which.push_back(k);
      }
      const auto ov = detail::evaluate_objective(model, batch, cfg);
      obj += ov.value;
      for (std::size_t j = 0; j < which.size(); ++j) {
        risks[which[j]] += ov.env_risk[j];
        pens[which[j]] += ov.env_penalty[j];
        ++hits[which[j]];
      }
      step(ov);
    }
    for (std::size_t k = 0; k < data.size(); ++k) {
      risks[k] /= std::max(1, hits[k]);
      pens[k] /= std::max(1, hits[k]);
    }
    report.objective.push_back(obj / static_cast<double>(steps));
    report.env_risk.push_back(std::move(risks));
    report.env_penalty.push_back(std::move(pens));
  }
  report.params = std::move(model);
  return report;
}

}  // namespace nce
