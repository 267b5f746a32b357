#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "nce/dataset.hpp"
#include "nce/error.hpp"
#include "nce/models.hpp"
#include "nce/random.hpp"

namespace nce {

/// Joint pmf over binary (T, Y, X); entry index is 4*t + 2*y + x.
class JointPmf3 {
 public:
  explicit JointPmf3(const std::array<double, 8>& p) : p_(p) {
    double s = 0.0;
    for (double v : p_) {
      require(v >= 0.0 && std::isfinite(v), ErrorCode::InvalidArgument, "pmf entries must be >= 0");
      s += v;
    }
    require(std::abs(s - 1.0) <= 1e-12, ErrorCode::InvalidArgument, "pmf entries must sum to 1");
  }

  static constexpr std::size_t index(int t, int y, int x) { return static_cast<std::size_t>(4 * t + 2 * y + x); }
  double operator()(int t, int y, int x) const { return p_[index(t, y, x)]; }
  const std::array<double, 8>& values() const { return p_; }

  double p_x(int c) const {
    double s = 0.0;
    for (int t = 0; t < 2; ++t)
      for (int y = 0; y < 2; ++y) s += (*this)(t, y, c);
    return s;
  }

 private:
  std::array<double, 8> p_;
};

struct Coarsening {
  double alpha = 1.0;  // P(Phi = X); Phi = 1 - X otherwise, independently of (T, Y)

  explicit Coarsening(double a) : alpha(a) {
    require(a >= 0.0 && a <= 1.0, ErrorCode::InvalidArgument, "alpha must lie in [0,1]");
  }
};

namespace detail {

// cov(T, Y) of the (unnormalised) 2x2 table q[t][y].
inline double table_cov(const std::array<std::array<double, 2>, 2>& q) {
  const double mass = q[0][0] + q[0][1] + q[1][0] + q[1][1];
  const double et = (q[1][0] + q[1][1]) / mass;
  const double ey = (q[0][1] + q[1][1]) / mass;
  return q[1][1] / mass - et * ey;
}

inline std::array<std::array<double, 2>, 2> slice(const JointPmf3& p, int c) {
  return {{{p(0, 0, c), p(0, 1, c)}, {p(1, 0, c), p(1, 1, c)}}};
}

inline std::array<std::array<double, 2>, 2> marginal_ty(const JointPmf3& p) {
  auto a = slice(p, 0), b = slice(p, 1);
  for (int t = 0; t < 2; ++t)
    for (int y = 0; y < 2; ++y) a[t][y] += b[t][y];
  return a;
}

}  // namespace detail

inline double covariance_ty(const JointPmf3& pmf) { return detail::table_cov(detail::marginal_ty(pmf)); }

inline double conditional_covariance_ty(const JointPmf3& pmf, int c) {
  require(pmf.p_x(c) > 0.0, ErrorCode::ZeroMassCondition, "P(X=" + std::to_string(c) + ") = 0");
  return detail::table_cov(detail::slice(pmf, c));
}

/// cov(T,Y | X=c) - cov(T,Y).
inline double collider_bias(const JointPmf3& pmf, int c) {
  return conditional_covariance_ty(pmf, c) - covariance_ty(pmf);
}

/// |P(X=1) * bias(X=1) + P(X=0) * bias(X=0)|.
inline double aggregate_bias(const JointPmf3& pmf) {
  return std::abs(pmf.p_x(1) * collider_bias(pmf, 1) + pmf.p_x(0) * collider_bias(pmf, 0));
}

/// Joint over (T, Y, Phi) where Phi copies X with probability alpha and flips it otherwise.
inline JointPmf3 coarsen(const JointPmf3& pmf, const Coarsening& c) {
  std::array<double, 8> q{};
  for (int t = 0; t < 2; ++t)
    for (int y = 0; y < 2; ++y) {
      q[JointPmf3::index(t, y, 1)] = c.alpha * pmf(t, y, 1) + (1.0 - c.alpha) * pmf(t, y, 0);
      q[JointPmf3::index(t, y, 0)] = c.alpha * pmf(t, y, 0) + (1.0 - c.alpha) * pmf(t, y, 1);
    }
  // re-normalise away rounding so the checked constructor accepts it
  const double s = std::accumulate(q.begin(), q.end(), 0.0);
  for (double& v : q) v /= s;
  return JointPmf3(q);
}

inline double coarsened_bias(const JointPmf3& pmf, const Coarsening& c) { return aggregate_bias(coarsen(pmf, c)); }

/// cov(T,Y) - [sum_c P(X=c) cov(T,Y|X=c) + cov(E[T|X], E[Y|X])]; zero up to rounding.
inline double total_covariance_residual(const JointPmf3& pmf) {
  double within = 0.0, et = 0.0, ey = 0.0, etey = 0.0;
  for (int c = 0; c < 2; ++c) {
    const double px = pmf.p_x(c);
    if (px <= 0.0) continue;
    const auto s = detail::slice(pmf, c);
    const double mt = (s[1][0] + s[1][1]) / px, my = (s[0][1] + s[1][1]) / px;
    within += px * detail::table_cov(s);
    et += px * mt;
    ey += px * my;
    etey += px * mt * my;
  }
  return covariance_ty(pmf) - (within + (etey - et * ey));
}

/// Rescales a strictly positive pmf so that P(X=1) = 0.5 while keeping the
/// conditional law of (T, Y) given X.
inline JointPmf3 balance_x(const std::array<double, 8>& raw) {
  std::array<double, 8> q = raw;
  double px[2] = {0.0, 0.0};
  for (std::size_t i = 0; i < 8; ++i) px[i % 2] += raw[i];
  require(px[0] > 0 && px[1] > 0, ErrorCode::ZeroMassCondition, "cannot balance a pmf with P(X=c) = 0");
  for (std::size_t i = 0; i < 8; ++i) q[i] = 0.5 * raw[i] / px[i % 2];
  const double s = std::accumulate(q.begin(), q.end(), 0.0);
  for (double& v : q) v /= s;
  return JointPmf3(q);
}

struct ColliderTrial {
  bool hypotheses_hold = false;  // P(X=1) = 0.5 and same-sign conditional biases
  bool inequality_holds = true;
  double identity_error = 0.0;  // |bias(Phi) - (2 alpha - 1)^2 bias(X)|
  double bias_x = 0.0;
  double bias_phi = 0.0;
};

inline ColliderTrial check_collider_trial(const JointPmf3& pmf, const Coarsening& c) {
  ColliderTrial tr;
  tr.bias_x = aggregate_bias(pmf);
  tr.bias_phi = coarsened_bias(pmf, c);
  const double d1 = collider_bias(pmf, 1), d0 = collider_bias(pmf, 0);
  tr.hypotheses_hold = std::abs(pmf.p_x(1) - 0.5) <= 1e-12 && d1 * d0 >= 0.0;
  if (!tr.hypotheses_hold) return tr;
  const double f = 2.0 * c.alpha - 1.0;
  tr.inequality_holds = tr.bias_phi <= tr.bias_x + 1e-12;
  tr.identity_error = std::abs(tr.bias_phi - f * f * tr.bias_x);
  return tr;
}

struct ColliderTheoremReport {
  int trials = 0;
  int tested = 0;
  int excluded = 0;  // sampled pmfs failing the same-sign hypothesis; resampled
  int inequality_violations = 0;
  int identity_violations = 0;
  double max_identity_error = 0.0;
  bool passed() const { return inequality_violations == 0 && identity_violations == 0 && tested == trials; }
};

/// Samples `trials` pmfs meeting the coarsening hypotheses (Dirichlet(1) draw,
/// balanced to P(X=1)=0.5, resampled until the conditional biases share a
/// sign) with alpha ~ U[0.5, 1], and checks the inequality and the
/// (2 alpha - 1)^2 identity on each.
inline ColliderTheoremReport verify_collider_theorem(int trials, std::uint64_t seed) {
  require(trials >= 1, ErrorCode::InvalidArgument, "trials must be >= 1");
  ColliderTheoremReport rep;
  rep.trials = trials;
  Rng rng(seed);
  std::exponential_distribution<double> expo(1.0);
  std::uniform_real_distribution<double> ua(0.5, 1.0);
  while (rep.tested < trials) {
    std::array<double, 8> raw{};
    for (double& v : raw) v = expo(rng);
    const JointPmf3 pmf = balance_x(raw);
    const Coarsening c(ua(rng));
    const auto tr = check_collider_trial(pmf, c);
    if (!tr.hypotheses_hold) {
      ++rep.excluded;
      continue;
    }
    ++rep.tested;
    if (!tr.inequality_holds) ++rep.inequality_violations;
    if (tr.identity_error > 1e-10) ++rep.identity_violations;
    rep.max_identity_error = std::max(rep.max_identity_error, tr.identity_error);
  }
  return rep;
}

// ----------------------------------------------------------------------------
// Overlap

struct OverlapBin {
  Index count = 0;
  double treated_rate = 0.0;
  double lower = 0.0;
  double upper = 1.0;
  bool ok = true;
};

struct OverlapReport {
  double epsilon = 0.0;
  std::vector<OverlapBin> bins;
  bool passed() const {
    return std::all_of(bins.begin(), bins.end(), [](const OverlapBin& b) { return b.ok; });
  }
};

/// Scalar score used for binning a fitted model's representation.
template <OutcomeModel M>
VectorXd representation_score(const M& model, const MatrixXd& x, LossKind loss) {
  const auto arms = predict_arms(model, x, loss);
  return arms.o1 - arms.o0;
}

/// Equal-count bins over `score` (ties never split across bins); every bin's
/// treated rate must lie in [eps - delta, 1 - eps + delta] where eps is the
/// smallest true overlap margin and delta = 3 sqrt(eps (1 - eps) / count).
inline OverlapReport overlap_check(const EnvData& env, const VectorXd& score, Index bins = 20) {
  require(bins >= 1, ErrorCode::InvalidArgument, "bins must be >= 1");
  require(score.size() == env.n(), ErrorCode::DimensionMismatch, "one score per row is required");
  require(env.truth() && env.truth()->has_propensity(), ErrorCode::NoGroundTruth,
          "environment '" + env.id() + "' has no stored propensity");
  const VectorXd& prop = env.truth()->propensity;
  OverlapReport rep;
  rep.epsilon = prop.cwiseMin((1.0 - prop.array()).matrix()).minCoeff();

  const Index n = env.n();
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return score(a) < score(b); });

  Index start = 0;
  for (Index b = 0; b < bins && start < n; ++b) {
    Index end = (b + 1 == bins) ? n : std::max(start + 1, (n * (b + 1)) / bins);
    while (end < n && score(order[static_cast<std::size_t>(end)]) == score(order[static_cast<std::size_t>(end - 1)]))
      ++end;
    OverlapBin bin;
    bin.count = end - start;
    double treated = 0.0;
    for (Index k = start; k < end; ++k) treated += env.t()(order[static_cast<std::size_t>(k)]);
    bin.treated_rate = treated / static_cast<double>(bin.count);
    const double delta = 3.0 * std::sqrt(rep.epsilon * (1.0 - rep.epsilon) / static_cast<double>(bin.count));
    bin.lower = rep.epsilon - delta;
    bin.upper = 1.0 - rep.epsilon + delta;
    bin.ok = bin.treated_rate >= bin.lower && bin.treated_rate <= bin.upper;
    rep.bins.push_back(bin);
    start = end;
  }
  return rep;
}

}  // namespace nce
