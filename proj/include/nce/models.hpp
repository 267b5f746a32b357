#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "nce/dataset.hpp"
#include "nce/dgp.hpp"
#include "nce/error.hpp"
#include "nce/random.hpp"

namespace nce {

enum class LossKind { Squared, BinaryCrossEntropy };

constexpr const char* to_string(LossKind k) {
  return k == LossKind::Squared ? "squared" : "bce";
}

namespace loss {

inline constexpr double kProbabilityFloor = 1e-7;

/// Loss value and its first two derivatives with respect to the raw model
/// output `o` (a logit under cross-entropy).
struct Pointwise {
  double value;
  double d1;
  double d2;
};

inline Pointwise evaluate(LossKind kind, double y, double o) {
  if (kind == LossKind::Squared) {
    const double r = o - y;
    return {r * r, 2.0 * r, 2.0};
  }
  const double p = sigmoid(o);
  if (p < kProbabilityFloor || p > 1.0 - kProbabilityFloor) {
    // The clamp is flat, so are its derivatives.
    const double pc = std::clamp(p, kProbabilityFloor, 1.0 - kProbabilityFloor);
    return {-y * std::log(pc) - (1.0 - y) * std::log1p(-pc), 0.0, 0.0};
  }
  return {-y * std::log(p) - (1.0 - y) * std::log1p(-p), p - y, p * (1.0 - p)};
}

/// Raw output to prediction scale.
inline double link(LossKind kind, double o) { return kind == LossKind::Squared ? o : sigmoid(o); }

}  // namespace loss

/// Per-row raw outputs for the observed arm, plus treatment logits for models
/// with a treatment head (empty otherwise).
struct RawOutputs {
  VectorXd outcome;
  VectorXd treatment;
};

/// d(objective)/d(raw output) per row; an empty `treatment` contributes nothing.
struct Cotangents {
  VectorXd outcome;
  VectorXd treatment;
};

struct ArmOutputs {
  VectorXd o0;
  VectorXd o1;
};

// ----------------------------------------------------------------------------
// OLS-2: one affine regressor per arm.

class Ols2Params {
 public:
  static constexpr bool kHasTreatmentHead = false;

  explicit Ols2Params(Index d) : d_(d), theta_(VectorXd::Zero(2 * (d + 1))) {
    require(d >= 1, ErrorCode::InvalidArgument, "covariate dimension must be >= 1");
  }
  Ols2Params(const VectorXd& w0, double b0, const VectorXd& w1, double b1) : Ols2Params(w0.size()) {
    require(w1.size() == d_, ErrorCode::DimensionMismatch, "arm weight lengths differ");
    w(0) = w0;
    b(0) = b0;
    w(1) = w1;
    b(1) = b1;
  }

  Index dim() const { return d_; }
  Index size() const { return theta_.size(); }
  const VectorXd& theta() const { return theta_; }
  VectorXd& theta() { return theta_; }

  Eigen::VectorBlock<VectorXd> w(int arm) { return theta_.segment(arm * (d_ + 1), d_); }
  Eigen::VectorBlock<const VectorXd> w(int arm) const { return theta_.segment(arm * (d_ + 1), d_); }
  double& b(int arm) { return theta_(arm * (d_ + 1) + d_); }
  double b(int arm) const { return theta_(arm * (d_ + 1) + d_); }

  VectorXd l2_mask() const {
    VectorXd m = VectorXd::Ones(size());
    m(d_) = 0.0;
    m(2 * d_ + 1) = 0.0;
    return m;
  }

  ArmOutputs raw_arms(const MatrixXd& x) const {
    return {((x * w(0)).array() + b(0)).matrix(), ((x * w(1)).array() + b(1)).matrix()};
  }

  RawOutputs raw(const MatrixXd& x, const VectorXd& t) const {
    auto arms = raw_arms(x);
    return {(t.array() == 1.0).select(arms.o1, arms.o0), VectorXd()};
  }

  /// Runs the forward pass, asks `cot` for (value, cotangents) given the raw
  /// outputs, and accumulates the parameter gradient into `grad`.
  template <class F>
  double value_and_grad(const MatrixXd& x, const VectorXd& t, F&& cot, VectorXd& grad) const {
    const RawOutputs out = raw(x, t);
    Cotangents c;
    const double value = cot(out, c);
    const VectorXd g1 = c.outcome.cwiseProduct(t);
    const VectorXd g0 = c.outcome - g1;
    grad.segment(0, d_) += x.transpose() * g0;
    grad(d_) += g0.sum();
    grad.segment(d_ + 1, d_) += x.transpose() * g1;
    grad(2 * d_ + 1) += g1.sum();
    return value;
  }

 private:
  Index d_;
  VectorXd theta_;
};

// ----------------------------------------------------------------------------
// Two-headed networks (TARNet-style, optionally with a Dragonnet treatment head).

struct NetShape {
  Index shared_width = 250;
  Index shared_layers = 4;
  Index head_width = 100;
  Index head_layers = 3;  // dense layers per head, the last one maps to a scalar
};

namespace detail {

struct DenseLayer {
  Index in, out, w_off, b_off;
  bool relu;
};

inline Eigen::Map<const MatrixXd> weights(const VectorXd& theta, const DenseLayer& l) {
  return {theta.data() + l.w_off, l.out, l.in};
}
inline Eigen::Map<const VectorXd> bias(const VectorXd& theta, const DenseLayer& l) {
  return {theta.data() + l.b_off, l.out};
}

// Samples are columns. tape[0] is the input, tape[k+1] the output of layer k.
inline MatrixXd forward_chain(const std::vector<DenseLayer>& layers, const VectorXd& theta, MatrixXd input,
                              std::vector<MatrixXd>* tape) {
  if (tape) tape->clear();
  MatrixXd a = std::move(input);
  for (const auto& l : layers) {
    MatrixXd z = weights(theta, l) * a;
    z.colwise() += bias(theta, l);
    if (l.relu) z = z.cwiseMax(0.0);
    if (tape) tape->push_back(std::move(a));
    a = std::move(z);
  }
  if (tape) tape->push_back(a);
  return a;
}

// Returns d/d(input) given d/d(output).
inline MatrixXd backward_chain(const std::vector<DenseLayer>& layers, const VectorXd& theta,
                               const std::vector<MatrixXd>& tape, MatrixXd d_out, VectorXd& grad) {
  for (std::size_t k = layers.size(); k-- > 0;) {
    const auto& l = layers[k];
    if (l.relu) d_out = (tape[k + 1].array() > 0.0).select(d_out, 0.0);
    Eigen::Map<MatrixXd>(grad.data() + l.w_off, l.out, l.in).noalias() += d_out * tape[k].transpose();
    Eigen::Map<VectorXd>(grad.data() + l.b_off, l.out) += d_out.rowwise().sum();
    d_out = weights(theta, l).transpose() * d_out;
  }
  return d_out;
}

inline std::vector<Index> rows_with(const VectorXd& t, double arm) {
  std::vector<Index> idx;
  for (Index i = 0; i < t.size(); ++i)
    if (t(i) == arm) idx.push_back(i);
  return idx;
}

}  // namespace detail

template <bool WithTreatmentHead>
class TwoHeadNet {
 public:
  static constexpr bool kHasTreatmentHead = WithTreatmentHead;

  TwoHeadNet(Index d, NetShape shape = {}, std::uint64_t seed = 0) : d_(d), shape_(shape) {
    require(d >= 1, ErrorCode::InvalidArgument, "covariate dimension must be >= 1");
    require(shape.shared_layers >= 1 && shape.head_layers >= 1 && shape.shared_width >= 1 && shape.head_width >= 1,
            ErrorCode::InvalidArgument, "network shape entries must be >= 1");
    Index off = 0;
    auto add = [&](std::vector<detail::DenseLayer>& v, Index in, Index out, bool relu) {
      v.push_back({in, out, off, off + in * out, relu});
      off += in * out + out;
    };
    Index in = d;
    for (Index k = 0; k < shape.shared_layers; ++k) {
      add(shared_, in, shape.shared_width, true);
      in = shape.shared_width;
    }
    for (auto& head : heads_) {
      Index hin = shape.shared_width;
      for (Index k = 0; k + 1 < shape.head_layers; ++k) {
        add(head, hin, shape.head_width, true);
        hin = shape.head_width;
      }
      add(head, hin, 1, false);
    }
    if constexpr (WithTreatmentHead) add(t_head_, shape.shared_width, 1, false);
    theta_ = VectorXd::Zero(off);

    Rng rng(seed);
    for_each_layer([&](const detail::DenseLayer& l) {
      const auto w = normal_matrix(rng, l.out, l.in, std::sqrt(2.0 / static_cast<double>(l.in)));
      Eigen::Map<MatrixXd>(theta_.data() + l.w_off, l.out, l.in) = w;
    });
  }

  Index dim() const { return d_; }
  Index size() const { return theta_.size(); }
  const NetShape& shape() const { return shape_; }
  const VectorXd& theta() const { return theta_; }
  VectorXd& theta() { return theta_; }

  const std::vector<detail::DenseLayer>& shared_layers() const { return shared_; }
  const std::vector<detail::DenseLayer>& head_layers(int arm) const { return heads_[arm]; }
  const std::vector<detail::DenseLayer>& treatment_layers() const { return t_head_; }

  /// Index range [begin, end) of one outcome head's parameters in theta.
  std::pair<Index, Index> head_range(int arm) const {
    return {heads_[arm].front().w_off, heads_[arm].back().b_off + 1};
  }

  VectorXd l2_mask() const {
    VectorXd m = VectorXd::Ones(size());
    for_each_layer([&](const detail::DenseLayer& l) { m.segment(l.b_off, l.out).setZero(); });
    return m;
  }

  /// Shared representation, one column per sample.
  MatrixXd representation(const MatrixXd& x) const {
    return detail::forward_chain(shared_, theta_, x.transpose(), nullptr);
  }

  ArmOutputs raw_arms(const MatrixXd& x) const {
    const MatrixXd r = representation(x);
    return {detail::forward_chain(heads_[0], theta_, r, nullptr).row(0).transpose(),
            detail::forward_chain(heads_[1], theta_, r, nullptr).row(0).transpose()};
  }

  RawOutputs raw(const MatrixXd& x, const VectorXd& t) const {
    const MatrixXd r = representation(x);
    RawOutputs out;
    out.outcome.resize(x.rows());
    for (int arm = 0; arm < 2; ++arm) {
      const auto idx = detail::rows_with(t, arm);
      if (idx.empty()) continue;
      const MatrixXd o = detail::forward_chain(heads_[arm], theta_, r(Eigen::all, idx), nullptr);
      for (std::size_t k = 0; k < idx.size(); ++k) out.outcome(idx[k]) = o(0, static_cast<Index>(k));
    }
    if constexpr (WithTreatmentHead)
      out.treatment = detail::forward_chain(t_head_, theta_, r, nullptr).row(0).transpose();
    return out;
  }

  template <class F>
  double value_and_grad(const MatrixXd& x, const VectorXd& t, F&& cot, VectorXd& grad) const {
    std::vector<MatrixXd> shared_tape;
    const MatrixXd r = detail::forward_chain(shared_, theta_, x.transpose(), &shared_tape);
    std::array<std::vector<Index>, 2> idx{detail::rows_with(t, 0), detail::rows_with(t, 1)};
    std::array<std::vector<MatrixXd>, 2> head_tape;
    RawOutputs out;
    out.outcome.resize(x.rows());
    for (int arm = 0; arm < 2; ++arm) {
      if (idx[arm].empty()) continue;
      const MatrixXd o = detail::forward_chain(heads_[arm], theta_, r(Eigen::all, idx[arm]), &head_tape[arm]);
      for (std::size_t k = 0; k < idx[arm].size(); ++k) out.outcome(idx[arm][k]) = o(0, static_cast<Index>(k));
    }
    std::vector<MatrixXd> t_tape;
    if constexpr (WithTreatmentHead)
      out.treatment = detail::forward_chain(t_head_, theta_, r, &t_tape).row(0).transpose();

    Cotangents c;
    const double value = cot(out, c);

    MatrixXd d_r = MatrixXd::Zero(r.rows(), r.cols());
    for (int arm = 0; arm < 2; ++arm) {
      if (idx[arm].empty()) continue;
      MatrixXd d_o(1, static_cast<Index>(idx[arm].size()));
      for (std::size_t k = 0; k < idx[arm].size(); ++k) d_o(0, static_cast<Index>(k)) = c.outcome(idx[arm][k]);
      const MatrixXd d_sub = detail::backward_chain(heads_[arm], theta_, head_tape[arm], std::move(d_o), grad);
      for (std::size_t k = 0; k < idx[arm].size(); ++k) d_r.col(idx[arm][k]) += d_sub.col(static_cast<Index>(k));
    }
    if constexpr (WithTreatmentHead) {
      if (c.treatment.size() > 0) d_r += detail::backward_chain(t_head_, theta_, t_tape, c.treatment.transpose(), grad);
    }
    detail::backward_chain(shared_, theta_, shared_tape, std::move(d_r), grad);
    return value;
  }

  /// The outcome-only sub-model (same parameters minus the treatment head).
  TwoHeadNet<false> outcome_model() const
    requires WithTreatmentHead
  {
    TwoHeadNet<false> sub(d_, shape_, 0);
    sub.theta() = theta_.head(sub.size());
    return sub;
  }

 private:
  template <class F>
  void for_each_layer(F&& f) const {
    for (const auto& l : shared_) f(l);
    for (const auto& head : heads_)
      for (const auto& l : head) f(l);
    for (const auto& l : t_head_) f(l);
  }

  Index d_;
  NetShape shape_;
  std::vector<detail::DenseLayer> shared_;
  std::array<std::vector<detail::DenseLayer>, 2> heads_;
  std::vector<detail::DenseLayer> t_head_;
  VectorXd theta_;
};

using TarnetParams = TwoHeadNet<false>;
using DragonnetParams = TwoHeadNet<true>;

template <class M>
concept OutcomeModel = requires(const M& m, M& mut, const MatrixXd& x, const VectorXd& t) {
  { m.dim() } -> std::convertible_to<Index>;
  { m.size() } -> std::convertible_to<Index>;
  { m.theta() } -> std::convertible_to<const VectorXd&>;
  { mut.theta() } -> std::same_as<VectorXd&>;
  { m.l2_mask() } -> std::convertible_to<VectorXd>;
  { m.raw(x, t) } -> std::same_as<RawOutputs>;
  { m.raw_arms(x) } -> std::same_as<ArmOutputs>;
  { M::kHasTreatmentHead } -> std::convertible_to<bool>;
};

// ----------------------------------------------------------------------------
// Free-function surface

namespace detail {

inline void check_dim(Index expected, Index got) {
  require(expected == got, ErrorCode::DimensionMismatch,
          "expected " + std::to_string(expected) + " covariates, got " + std::to_string(got));
}

inline void check_loss_target(const EnvData& env, LossKind loss) {
  if (loss != LossKind::BinaryCrossEntropy) return;
  for (Index i = 0; i < env.n(); ++i)
    require(env.y()(i) == 0.0 || env.y()(i) == 1.0, ErrorCode::BinaryYRequired,
            "environment '" + env.id() + "' row " + std::to_string(i) + " outcome is not 0/1");
}

}  // namespace detail

/// Prediction for arm `t` at covariates `x` (probability scale under cross-entropy).
template <OutcomeModel M>
double forward(const M& model, int t, const VectorXd& x, LossKind loss) {
  detail::check_dim(model.dim(), x.size());
  const auto arms = model.raw_arms(x.transpose());
  return loss::link(loss, t == 1 ? arms.o1(0) : arms.o0(0));
}

template <OutcomeModel M>
std::pair<double, double> both_arms(const M& model, const VectorXd& x, LossKind loss) {
  detail::check_dim(model.dim(), x.size());
  const auto arms = model.raw_arms(x.transpose());
  return {loss::link(loss, arms.o0(0)), loss::link(loss, arms.o1(0))};
}

/// Both arms for every row of `x`, on the prediction scale.
template <OutcomeModel M>
ArmOutputs predict_arms(const M& model, const MatrixXd& x, LossKind loss) {
  detail::check_dim(model.dim(), x.cols());
  auto arms = model.raw_arms(x);
  if (loss == LossKind::BinaryCrossEntropy) {
    arms.o0 = arms.o0.unaryExpr([](double o) { return sigmoid(o); });
    arms.o1 = arms.o1.unaryExpr([](double o) { return sigmoid(o); });
  }
  return arms;
}

template <OutcomeModel M>
double risk(const M& model, const EnvData& env, LossKind loss) {
  detail::check_dim(model.dim(), env.d());
  detail::check_loss_target(env, loss);
  const auto out = model.raw(env.x(), env.t());
  double s = 0.0;
  for (Index i = 0; i < env.n(); ++i) s += loss::evaluate(loss, env.y()(i), out.outcome(i)).value;
  return s / static_cast<double>(env.n());
}

template <OutcomeModel M>
VectorXd grad_risk(const M& model, const EnvData& env, LossKind loss) {
  detail::check_dim(model.dim(), env.d());
  detail::check_loss_target(env, loss);
  VectorXd grad = VectorXd::Zero(model.size());
  const double inv_n = 1.0 / static_cast<double>(env.n());
  model.value_and_grad(
      env.x(), env.t(),
      [&](const RawOutputs& out, Cotangents& c) {
        c.outcome.resize(env.n());
        double s = 0.0;
        for (Index i = 0; i < env.n(); ++i) {
          const auto l = loss::evaluate(loss, env.y()(i), out.outcome(i));
          s += l.value;
          c.outcome(i) = l.d1 * inv_n;
        }
        return s * inv_n;
      },
      grad);
  return grad;
}

/// Mean cross-entropy of the treatment head against the observed treatment.
inline double treatment_risk(const DragonnetParams& model, const EnvData& env) {
  detail::check_dim(model.dim(), env.d());
  const auto out = model.raw(env.x(), env.t());
  double s = 0.0;
  for (Index i = 0; i < env.n(); ++i)
    s += loss::evaluate(LossKind::BinaryCrossEntropy, env.t()(i), out.treatment(i)).value;
  return s / static_cast<double>(env.n());
}

inline double dragonnet_risk(const DragonnetParams& model, const EnvData& env, LossKind loss, double alpha_t) {
  require(alpha_t >= 0.0, ErrorCode::InvalidArgument, "alpha_t must be >= 0");
  return risk(model, env, loss) + alpha_t * treatment_risk(model, env);
}

inline VectorXd grad_dragonnet_risk(const DragonnetParams& model, const EnvData& env, LossKind loss,
                                    double alpha_t) {
  require(alpha_t >= 0.0, ErrorCode::InvalidArgument, "alpha_t must be >= 0");
  detail::check_dim(model.dim(), env.d());
  detail::check_loss_target(env, loss);
  VectorXd grad = VectorXd::Zero(model.size());
  const double inv_n = 1.0 / static_cast<double>(env.n());
  model.value_and_grad(
      env.x(), env.t(),
      [&](const RawOutputs& out, Cotangents& c) {
        c.outcome.resize(env.n());
        c.treatment.resize(env.n());
        double s = 0.0;
        for (Index i = 0; i < env.n(); ++i) {
          const auto l = loss::evaluate(loss, env.y()(i), out.outcome(i));
          const auto lt = loss::evaluate(LossKind::BinaryCrossEntropy, env.t()(i), out.treatment(i));
          s += l.value + alpha_t * lt.value;
          c.outcome(i) = l.d1 * inv_n;
          c.treatment(i) = alpha_t * lt.d1 * inv_n;
        }
        return s * inv_n;
      },
      grad);
  return grad;
}

}  // namespace nce
