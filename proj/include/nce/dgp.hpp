#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include "nce/dataset.hpp"
#include "nce/error.hpp"
#include "nce/random.hpp"

namespace nce {

inline double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

namespace detail {

// Probabilists' Gauss-Hermite rule (weight exp(-x^2/2)/sqrt(2 pi)) via Golub-Welsch.
struct HermiteRule {
  VectorXd nodes, weights;
  explicit HermiteRule(int n) {
    MatrixXd jac = MatrixXd::Zero(n, n);
    for (int k = 1; k < n; ++k) jac(k - 1, k) = jac(k, k - 1) = std::sqrt(static_cast<double>(k));
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(jac);
    nodes = es.eigenvalues();
    weights = es.eigenvectors().row(0).transpose().array().square();
  }
};

inline const HermiteRule& hermite64() {
  static const HermiteRule rule(64);
  return rule;
}

}  // namespace detail

/// P(T=1 | a) when T ~ Bern(sigmoid(a + N(0,1))).
inline double logistic_normal_mean(double a) {
  const auto& r = detail::hermite64();
  double s = 0.0;
  for (Index k = 0; k < r.nodes.size(); ++k) s += r.weights(k) * sigmoid(a + r.nodes(k));
  return s;
}

inline std::string env_label(double e) {
  std::ostringstream os;
  os << "e=" << e;
  return os.str();
}

// ----------------------------------------------------------------------------
// Linear three-graph family

enum class LinearGraph { Noise, Descendant, Collider };

constexpr const char* to_string(LinearGraph g) {
  switch (g) {
    case LinearGraph::Noise: return "noise";
    case LinearGraph::Descendant: return "descendant";
    case LinearGraph::Collider: return "collider";
  }
  return "unknown";
}

struct LinearDgpConfig {
  LinearGraph graph = LinearGraph::Noise;
  double e = 1.0;
  Index n = 1000;
  Index d_conf = 5;
  Index d_x2 = 5;
  bool heteroskedastic = false;
  VectorXd w_xt;  // length d_conf
  VectorXd w_xy;  // length d_conf
  std::uint64_t seed = 0;

  void validate() const {
    require(e > 0 && std::isfinite(e), ErrorCode::InvalidArgument, "environment scale must be > 0");
    require(n >= 1 && d_conf >= 1 && d_x2 >= 1, ErrorCode::InvalidArgument, "n, d_conf, d_x2 must be >= 1");
    require(w_xt.size() == d_conf && w_xy.size() == d_conf, ErrorCode::DimensionMismatch,
            "w_xt and w_xy must have length d_conf");
  }
};

/// Structural weights shared by all environments of a suite.
struct LinearWeights {
  VectorXd w_xt, w_xy;

  static LinearWeights draw(std::uint64_t seed, Index d_conf) {
    Rng rng(derive_seed(seed, {0x77}));
    LinearWeights w;
    w.w_xt = uniform_vector(rng, d_conf, 0.5, 1.5);
    w.w_xy = uniform_vector(rng, d_conf, 0.5, 1.5);
    return w;
  }
};

inline EnvData gen_linear_env(const LinearDgpConfig& cfg) {
  cfg.validate();
  const Index n = cfg.n, dc = cfg.d_conf, d2 = cfg.d_x2;
  const double e = cfg.e;
  Rng rng(cfg.seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);

  const MatrixXd x1 = normal_matrix(rng, n, dc, e);
  const VectorXd lin_t = x1 * cfg.w_xt;
  const VectorXd t_noise = normal_vector(rng, n);
  VectorXd t(n), propensity(n);
  for (Index i = 0; i < n; ++i) {
    t(i) = unif(rng) < sigmoid(lin_t(i) + t_noise(i)) ? 1.0 : 0.0;
    propensity(i) = logistic_normal_mean(lin_t(i));
  }
  const VectorXd tau = VectorXd::Constant(n, 5.0) + normal_vector(rng, n, cfg.heteroskedastic ? e : 1.0);
  const VectorXd y_noise = normal_vector(rng, n, e);
  const VectorXd mu0 = x1 * cfg.w_xy + y_noise;
  const VectorXd mu1 = mu0 + tau;
  VectorXd y(n);
  for (Index i = 0; i < n; ++i) y(i) = t(i) == 1.0 ? mu1(i) : mu0(i);

  MatrixXd x2 = normal_matrix(rng, n, d2);
  CovariateRole x2_role = CovariateRole::Noise;
  if (cfg.graph == LinearGraph::Descendant) {
    x2.colwise() += e * y;
    x2_role = CovariateRole::Descendant;
  } else if (cfg.graph == LinearGraph::Collider) {
    x2.colwise() += e * y + t;
    x2_role = CovariateRole::Collider;
  }

  MatrixXd x(n, dc + d2);
  x << x1, x2;
  GroundTruth truth;
  truth.mu0 = mu0;
  truth.mu1 = mu1;
  truth.ite = mu1 - mu0;
  truth.propensity = propensity;
  truth.roles.assign(static_cast<std::size_t>(dc), CovariateRole::Confounder);
  truth.roles.insert(truth.roles.end(), static_cast<std::size_t>(d2), x2_role);
  truth.mechanism["w_xt"] = cfg.w_xt;
  truth.mechanism["w_xy"] = cfg.w_xy;
  truth.mechanism["tau_draw"] = tau;
  return EnvData(env_label(e), std::move(x), std::move(t), std::move(y), std::move(truth));
}

struct LinearSuiteFlags {
  bool heteroskedastic = false;
  Index d_conf = 5;
  Index d_x2 = 5;
  /// Overrides the seeded weights when set (e.g. zero w_xt for randomized treatment).
  std::optional<VectorXd> w_xt;
  std::optional<VectorXd> w_xy;
};

inline std::vector<std::string> linear_covariate_names(Index d_conf, Index d_x2) {
  std::vector<std::string> names;
  for (Index j = 0; j < d_conf; ++j) names.push_back("x1_" + std::to_string(j));
  for (Index j = 0; j < d_x2; ++j) names.push_back("x2_" + std::to_string(j));
  return names;
}

inline MultiEnvDataset gen_linear_suite(LinearGraph graph, const std::vector<double>& environments, Index n_per_env,
                                        const LinearSuiteFlags& flags, std::uint64_t seed) {
  require(environments.size() >= 2, ErrorCode::FewerThanTwoEnvironments,
          "a suite needs at least two environment scales");
  auto w = LinearWeights::draw(seed, flags.d_conf);
  if (flags.w_xt) w.w_xt = *flags.w_xt;
  if (flags.w_xy) w.w_xy = *flags.w_xy;
  std::vector<EnvData> envs;
  for (std::size_t k = 0; k < environments.size(); ++k) {
    LinearDgpConfig cfg;
    cfg.graph = graph;
    cfg.e = environments[k];
    cfg.n = n_per_env;
    cfg.d_conf = flags.d_conf;
    cfg.d_x2 = flags.d_x2;
    cfg.heteroskedastic = flags.heteroskedastic;
    cfg.w_xt = w.w_xt;
    cfg.w_xy = w.w_xy;
    cfg.seed = derive_seed(seed, {0x11, k});
    envs.push_back(gen_linear_env(cfg));
  }
  return MultiEnvDataset(std::move(envs), linear_covariate_names(flags.d_conf, flags.d_x2));
}

// ----------------------------------------------------------------------------
// Nonlinear DGP with a collider Z

enum class AdjustmentSet { XA, XAZ };

inline constexpr Index kNonlinearDimX = 30;
inline constexpr Index kNonlinearDimXt = 12;  // X_t = X[0..12), X_y = X[12..30)
inline constexpr Index kInteractionFeatures = 12;
inline constexpr Index kOutcomeInteractionFeatures = 18;

/// Shared structural weights. Each entry is Uniform(-1,1)/sqrt(fan_in).
struct NonlinearWeights {
  MatrixXd w_ax;    // d_a x 30
  VectorXd w_xt;    // 12, linear treatment term
  VectorXd w_xt2;   // 12, interaction treatment term
  VectorXd w_xy;    // 12, X_t term of the outcome
  VectorXd w_xy2;   // 18, interaction outcome term

  static NonlinearWeights draw(std::uint64_t seed, Index d_a) {
    Rng rng(derive_seed(seed, {0x99}));
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    NonlinearWeights w;
    w.w_ax.resize(d_a, kNonlinearDimX);
    for (Index i = 0; i < d_a; ++i)
      for (Index j = 0; j < kNonlinearDimX; ++j) w.w_ax(i, j) = u(rng) / std::sqrt(static_cast<double>(d_a));
    auto vec = [&](Index len) {
      VectorXd v(len);
      for (Index i = 0; i < len; ++i) v(i) = u(rng) / std::sqrt(static_cast<double>(len));
      return v;
    };
    w.w_xt = vec(kNonlinearDimXt);
    w.w_xt2 = vec(kInteractionFeatures);
    w.w_xy = vec(kNonlinearDimXt);
    w.w_xy2 = vec(kOutcomeInteractionFeatures);
    return w;
  }
};

struct NonlinearDgpConfig {
  double e = 1.0;
  Index n = 900;
  Index d_a = 10;
  AdjustmentSet adjustment = AdjustmentSet::XAZ;
  std::uint64_t seed = 0;
  std::optional<NonlinearWeights> weights;  // drawn from `seed` when absent

  void validate() const {
    require(e > 0 && std::isfinite(e), ErrorCode::InvalidArgument, "environment scale must be > 0");
    require(n >= 1 && d_a >= 1, ErrorCode::InvalidArgument, "n and d_a must be >= 1");
    if (weights) {
      require(weights->w_ax.rows() == d_a && weights->w_ax.cols() == kNonlinearDimX, ErrorCode::DimensionMismatch,
              "w_ax must be d_a x 30");
      require(weights->w_xt.size() == kNonlinearDimXt && weights->w_xt2.size() == kInteractionFeatures &&
                  weights->w_xy.size() == kNonlinearDimXt && weights->w_xy2.size() == kOutcomeInteractionFeatures,
              ErrorCode::DimensionMismatch, "nonlinear weight lengths");
    }
  }
};

namespace detail {

// Column k of `m` times columns [lo, hi) of `m`, written into out starting at column `at`.
inline Index put_products(const MatrixXd& m, Index k, Index lo, Index hi, double scale, MatrixXd& out, Index at) {
  for (Index j = lo; j < hi; ++j) out.col(at++) = m.col(k).cwiseProduct(m.col(j)) * scale;
  return at;
}

inline double mean_square(const MatrixXd& m) { return m.array().square().mean(); }

}  // namespace detail

/// Treatment interaction features: X0*X1, X1*X2, X1*X3, then X2*X3..X2*X11
/// divided by the sample mean square of X_t (only that last block is scaled).
inline MatrixXd treatment_interactions(const MatrixXd& xt) {
  MatrixXd h(xt.rows(), kInteractionFeatures);
  Index at = detail::put_products(xt, 0, 1, 2, 1.0, h, 0);
  at = detail::put_products(xt, 1, 2, 4, 1.0, h, at);
  detail::put_products(xt, 2, 3, xt.cols(), 1.0 / detail::mean_square(xt), h, at);
  return h;
}

/// Outcome interaction features: Y0*Y4, Y1*Y3, then Y1*Y2..Y1*Y17 divided by
/// the sample mean square of X_y.
inline MatrixXd outcome_interactions(const MatrixXd& xy) {
  MatrixXd m(xy.rows(), kOutcomeInteractionFeatures);
  Index at = detail::put_products(xy, 0, 4, 5, 1.0, m, 0);
  at = detail::put_products(xy, 1, 3, 4, 1.0, m, at);
  detail::put_products(xy, 1, 2, xy.cols(), 1.0 / detail::mean_square(xy), m, at);
  return m;
}

inline std::vector<std::string> nonlinear_covariate_names(Index d_a, AdjustmentSet adj) {
  std::vector<std::string> names;
  for (Index j = 0; j < kNonlinearDimX; ++j) names.push_back("x" + std::to_string(j));
  for (Index j = 0; j < d_a; ++j) names.push_back("a" + std::to_string(j));
  if (adj == AdjustmentSet::XAZ) names.push_back("z");
  return names;
}

inline EnvData gen_nonlinear_env(const NonlinearDgpConfig& cfg) {
  cfg.validate();
  const Index n = cfg.n;
  const NonlinearWeights w = cfg.weights ? *cfg.weights : NonlinearWeights::draw(cfg.seed, cfg.d_a);
  Rng rng(cfg.seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);

  const MatrixXd a = normal_matrix(rng, n, cfg.d_a, cfg.e);
  const MatrixXd x = a * w.w_ax;
  const MatrixXd xt = x.leftCols(kNonlinearDimXt);
  const MatrixXd xy = x.rightCols(kNonlinearDimX - kNonlinearDimXt);

  const VectorXd f = xt * w.w_xt + treatment_interactions(xt) * w.w_xt2;
  VectorXd p_t(n), t(n);
  for (Index i = 0; i < n; ++i) {
    p_t(i) = sigmoid(f(i));
    t(i) = unif(rng) < p_t(i) ? 1.0 : 0.0;
  }
  const VectorXd g_base = xt * w.w_xy + 2.0 * p_t + outcome_interactions(xy) * w.w_xy2;
  VectorXd mu0(n), mu1(n), y(n);
  for (Index i = 0; i < n; ++i) {
    mu0(i) = sigmoid(g_base(i));
    mu1(i) = sigmoid(g_base(i) + 1.25);
    const double p_y = t(i) == 1.0 ? mu1(i) : mu0(i);
    y(i) = unif(rng) < p_y ? 1.0 : 0.0;
  }
  const VectorXd z = y + t + normal_vector(rng, n);

  const bool with_z = cfg.adjustment == AdjustmentSet::XAZ;
  MatrixXd cov(n, kNonlinearDimX + cfg.d_a + (with_z ? 1 : 0));
  cov.leftCols(kNonlinearDimX) = x;
  cov.middleCols(kNonlinearDimX, cfg.d_a) = a;
  if (with_z) cov.rightCols(1) = z;

  GroundTruth truth;
  truth.mu0 = mu0;
  truth.mu1 = mu1;
  truth.ite = mu1 - mu0;
  // p_t can round to exactly 0 or 1 for extreme draws; keep the stored
  // propensity inside the open interval the type requires.
  truth.propensity = p_t.cwiseMax(1e-300).cwiseMin(1.0 - 1e-16);
  truth.roles.assign(static_cast<std::size_t>(kNonlinearDimXt), CovariateRole::Confounder);
  truth.roles.insert(truth.roles.end(), static_cast<std::size_t>(kNonlinearDimX - kNonlinearDimXt),
                     CovariateRole::ParentOfYOnly);
  truth.roles.insert(truth.roles.end(), static_cast<std::size_t>(cfg.d_a), CovariateRole::Confounder);
  if (with_z) truth.roles.push_back(CovariateRole::Collider);
  truth.mechanism["w_xy"] = w.w_xy;
  truth.mechanism["w_xy2"] = w.w_xy2;
  truth.mechanism["w_xt"] = w.w_xt;
  truth.mechanism["w_xt2"] = w.w_xt2;
  return EnvData(env_label(cfg.e), std::move(cov), std::move(t), std::move(y), std::move(truth));
}

inline MultiEnvDataset gen_nonlinear_suite(const std::vector<double>& environments, Index n_per_env, Index d_a,
                                           AdjustmentSet adj, std::uint64_t seed) {
  require(environments.size() >= 2, ErrorCode::FewerThanTwoEnvironments,
          "a suite needs at least two environment scales");
  const auto w = NonlinearWeights::draw(seed, d_a);
  std::vector<EnvData> envs;
  for (std::size_t k = 0; k < environments.size(); ++k) {
    NonlinearDgpConfig cfg;
    cfg.e = environments[k];
    cfg.n = n_per_env;
    cfg.d_a = d_a;
    cfg.adjustment = adj;
    cfg.weights = w;
    cfg.seed = derive_seed(seed, {0x22, k});
    envs.push_back(gen_nonlinear_env(cfg));
  }
  return MultiEnvDataset(std::move(envs), nonlinear_covariate_names(d_a, adj));
}

// ----------------------------------------------------------------------------
// Environment mixtures

struct MixtureSpec {
  std::array<double, 3> p{1.0 / 3, 1.0 / 3, 1.0 / 3};

  MixtureSpec() = default;
  MixtureSpec(double p1, double p2, double p3) : p{p1, p2, p3} { validate(); }

  void validate() const {
    for (double v : p) require(v >= 0.0, ErrorCode::InvalidArgument, "mixture proportions must be >= 0");
    require(std::abs(p[0] + p[1] + p[2] - 1.0) <= 1e-12, ErrorCode::InvalidArgument,
            "mixture proportions must sum to 1");
  }
};

/// (1/3) * sum over unordered pairs |p_i - p_j|; ranges over [0, 2/3].
inline double diversity(const MixtureSpec& spec) {
  spec.validate();
  const auto& p = spec.p;
  return (std::abs(p[0] - p[1]) + std::abs(p[0] - p[2]) + std::abs(p[1] - p[2])) / 3.0;
}

/// The fourteen mixtures used by the diversity experiment.
inline std::vector<MixtureSpec> standard_mixtures() {
  return {{0, 0, 1},       {0, 0.1, 0.9},   {0, 0.2, 0.8},   {0, 0.3, 0.7},   {0, 0.4, 0.6},
          {0, 0.5, 0.5},   {0.1, 0.1, 0.8}, {0.1, 0.2, 0.7}, {0.1, 0.3, 0.6}, {0.1, 0.4, 0.5},
          {0.2, 0.2, 0.6}, {0.2, 0.3, 0.5}, {0.2, 0.4, 0.4}, {0.3, 0.3, 0.4}};
}

/// Row counts that new environments 0..2 take from a source of `n` rows, where
/// new environment k takes fraction p[(source + k) % 3]. Nearest-integer
/// rounding; the residual goes to the largest fraction.
inline std::array<Index, 3> mixture_counts(const MixtureSpec& spec, std::size_t source, Index n) {
  std::array<double, 3> f{};
  std::array<Index, 3> c{};
  std::size_t largest = 0;
  for (std::size_t k = 0; k < 3; ++k) {
    f[k] = spec.p[(source + k) % 3];
    c[k] = static_cast<Index>(std::llround(f[k] * static_cast<double>(n)));
    if (f[k] > f[largest]) largest = k;
  }
  c[largest] += n - (c[0] + c[1] + c[2]);
  return c;
}

inline MultiEnvDataset mix_environments(const MultiEnvDataset& sources, const MixtureSpec& spec, std::uint64_t seed) {
  spec.validate();
  require(sources.size() == 3, ErrorCode::NotThreeEnvironments,
          "mixing needs exactly 3 source environments, got " + std::to_string(sources.size()));
  std::array<std::vector<std::pair<std::size_t, Index>>, 3> picks;  // (source, row) per new env
  for (std::size_t s = 0; s < 3; ++s) {
    const Index n = sources.env(s).n();
    std::vector<Index> perm(static_cast<std::size_t>(n));
    std::iota(perm.begin(), perm.end(), Index{0});
    Rng rng(derive_seed(seed, {0x33, s}));
    std::shuffle(perm.begin(), perm.end(), rng);
    const auto counts = mixture_counts(spec, s, n);
    std::size_t pos = 0;
    for (std::size_t k = 0; k < 3; ++k)
      for (Index c = 0; c < counts[k]; ++c) picks[k].emplace_back(s, perm[pos++]);
  }

  std::vector<EnvData> out;
  for (std::size_t k = 0; k < 3; ++k) {
    const auto& rows = picks[k];
    const Index m = static_cast<Index>(rows.size());
    require(m >= 1, ErrorCode::InvalidArgument, "a mixed environment would be empty");
    MatrixXd x(m, sources.d());
    VectorXd t(m), y(m);
    const bool truth = sources.has_truth();
    GroundTruth gt;
    if (truth) {
      gt.roles = sources.env(0).truth()->roles;
      gt.mechanism = sources.env(0).truth()->mechanism;
      gt.ite.resize(m);
      gt.propensity.resize(m);
      gt.mu0.resize(m);
      gt.mu1.resize(m);
    }
    bool props = truth, arms = truth;
    for (const auto& [s, r] : rows) {
      const auto& tr = sources.env(s).truth();
      props = props && tr->has_propensity();
      arms = arms && tr->has_arm_means();
    }
    for (Index i = 0; i < m; ++i) {
      const auto& [s, r] = rows[static_cast<std::size_t>(i)];
      const EnvData& src = sources.env(s);
      x.row(i) = src.x().row(r);
      t(i) = src.t()(r);
      y(i) = src.y()(r);
      if (truth) {
        gt.ite(i) = src.truth()->ite(r);
        if (props) gt.propensity(i) = src.truth()->propensity(r);
        if (arms) {
          gt.mu0(i) = src.truth()->mu0(r);
          gt.mu1(i) = src.truth()->mu1(r);
        }
      }
    }
    if (!props) gt.propensity.resize(0);
    if (!arms) {
      gt.mu0.resize(0);
      gt.mu1.resize(0);
    }
    out.emplace_back("mix" + std::to_string(k + 1), std::move(x), std::move(t), std::move(y),
                     truth ? std::optional<GroundTruth>(std::move(gt)) : std::nullopt);
  }
  return MultiEnvDataset(std::move(out), sources.covariate_names());
}

// ----------------------------------------------------------------------------
// Collider augmentation

/// Appends `copies` columns X_co = T + Y + N(0, scale_e^2), independent noise per
/// column, one scale per environment.
inline MultiEnvDataset augment_with_colliders(const MultiEnvDataset& data, Index copies,
                                              const std::vector<double>& scales, std::uint64_t seed) {
  require(copies >= 1, ErrorCode::InvalidArgument, "copies must be >= 1");
  require(scales.size() == data.size(), ErrorCode::ScaleCountMismatch,
          std::to_string(scales.size()) + " scales for " + std::to_string(data.size()) + " environments");
  std::vector<EnvData> envs;
  for (std::size_t k = 0; k < data.size(); ++k) {
    const EnvData& e = data.env(k);
    require(scales[k] > 0, ErrorCode::InvalidArgument, "collider noise scale must be > 0");
    Rng rng(derive_seed(seed, {0x44, k}));
    MatrixXd noise = normal_matrix(rng, e.n(), copies, scales[k]);
    noise.colwise() += e.t() + e.y();
    MatrixXd x(e.n(), e.d() + copies);
    x << e.x(), noise;
    std::optional<std::vector<CovariateRole>> roles;
    if (e.truth() && !e.truth()->roles.empty()) {
      roles = e.truth()->roles;
      roles->insert(roles->end(), static_cast<std::size_t>(copies), CovariateRole::Collider);
    }
    envs.push_back(e.with_covariates(std::move(x), roles));
  }
  auto names = data.covariate_names();
  for (Index j = 0; j < copies; ++j) names.push_back("co" + std::to_string(j));
  return MultiEnvDataset(std::move(envs), std::move(names));
}

}  // namespace nce
