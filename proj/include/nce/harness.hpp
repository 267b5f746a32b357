#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include <Eigen/Dense>

#include "nce/dataset.hpp"
#include "nce/dgp.hpp"
#include "nce/error.hpp"
#include "nce/estimators.hpp"
#include "nce/icp.hpp"
#include "nce/models.hpp"
#include "nce/objectives.hpp"
#include "nce/random.hpp"
#include "nce/theory.hpp"

namespace nce {

enum class Experiment { Linear1, Diversity3, CsvCollider };
enum class Method { AdjustAll, NICE, ICP, NoAdjust };
enum class ModelKind { Ols2, Tarnet, Dragonnet };
enum class NiceInit { Erm, Fresh };

constexpr const char* to_string(Experiment e) {
  switch (e) {
    case Experiment::Linear1: return "linear";
    case Experiment::Diversity3: return "diversity";
    case Experiment::CsvCollider: return "csv";
  }
  return "?";
}

constexpr const char* to_string(Method m) {
  switch (m) {
    case Method::AdjustAll: return "AdjustAll";
    case Method::NICE: return "NICE";
    case Method::ICP: return "ICP";
    case Method::NoAdjust: return "NoAdjust";
  }
  return "?";
}

constexpr const char* to_string(ModelKind m) {
  switch (m) {
    case ModelKind::Ols2: return "ols2";
    case ModelKind::Tarnet: return "tarnet";
    case ModelKind::Dragonnet: return "dragonnet";
  }
  return "?";
}

struct LinearVariant {
  bool scrambled = false;
  bool heteroskedastic = true;

  std::string name() const {
    return std::string(scrambled ? "scrambled" : "unscrambled") + (heteroskedastic ? "-hetero" : "-homo");
  }
};

inline std::vector<LinearVariant> all_linear_variants() {
  return {{false, false}, {false, true}, {true, false}, {true, true}};
}

struct ExperimentSpec {
  Experiment experiment = Experiment::Linear1;
  std::vector<Method> methods{Method::AdjustAll, Method::NICE, Method::ICP, Method::NoAdjust};
  int replicates = 10;
  std::uint64_t base_seed = 0;
  ModelKind model = ModelKind::Ols2;
  TrainConfig train;  // objective is set per method
  NiceInit nice_init = NiceInit::Erm;
  /// Solve OLS-2 squared-loss ERM exactly instead of running the optimizer.
  bool closed_form_erm = true;
  /// Environment excluded from training (rows for it are still reported).
  std::optional<std::size_t> holdout_env;
  IcpConfig icp;

  // Linear1
  std::vector<LinearVariant> variants{{false, true}};
  std::vector<LinearGraph> graphs{LinearGraph::Noise, LinearGraph::Descendant, LinearGraph::Collider};
  std::vector<double> environments{0.2, 2.0, 5.0};
  Index n_per_env = 1000;
  Index d_conf = 5;
  Index d_x2 = 5;

  // Diversity3
  std::vector<MixtureSpec> mixtures = standard_mixtures();
  std::vector<double> source_envs{0.2, 1.0, 5.0};
  Index n_source = 900;
  Index d_a = 10;

  // CsvCollider
  std::string data_path;
  CsvColumns columns;
  std::string sort_column;  // split pooled rows into `sort_parts` environments by this covariate
  int sort_parts = 3;
  Index collider_copies = 20;
  std::vector<double> collider_scales{0.01, 0.2, 1.0};
  std::optional<LossKind> loss;  // inferred from the outcome when empty

  /// Defaults for one experiment: 10 replicates and lambda 10 for the linear
  /// study, 5 replicates and lambda 100 for the diversity study, 10 bootstrap
  /// draws and lambda 100 for the CSV study.
  static ExperimentSpec defaults(Experiment e) {
    ExperimentSpec s;
    s.experiment = e;
    if (e == Experiment::Diversity3) {
      s.replicates = 5;
      s.methods = {Method::AdjustAll, Method::NICE};
      s.train.lambda = 100.0;
      s.train.loss = LossKind::BinaryCrossEntropy;
    } else if (e == Experiment::CsvCollider) {
      s.replicates = 10;
      s.methods = {Method::AdjustAll, Method::NICE};
      s.train.lambda = 100.0;
    }
    return s;
  }

  void validate() const {
    require(replicates >= 1, ErrorCode::InvalidArgument, "replicates must be >= 1");
    require(!methods.empty(), ErrorCode::InvalidArgument, "no methods selected");
    train.validate();
    icp.validate();
    if (experiment == Experiment::Linear1) {
      require(!variants.empty() && !graphs.empty(), ErrorCode::InvalidArgument, "no variants or graphs selected");
      require(environments.size() >= 2, ErrorCode::FewerThanTwoEnvironments, "linear study needs >= 2 environments");
      require(n_per_env >= 1 && d_conf >= 1 && d_x2 >= 1, ErrorCode::InvalidArgument, "bad linear suite sizes");
    }
    if (experiment == Experiment::Diversity3) {
      require(!mixtures.empty(), ErrorCode::InvalidArgument, "no mixtures selected");
      require(source_envs.size() == 3, ErrorCode::NotThreeEnvironments, "mixing needs exactly 3 sources");
      for (const auto& m : mixtures) m.validate();
    }
    if (experiment == Experiment::CsvCollider) {
      require(!data_path.empty(), ErrorCode::InvalidArgument, "csv study needs a data path");
      require(collider_copies >= 1, ErrorCode::InvalidArgument, "collider_copies must be >= 1");
    }
  }
};

struct ResultRow {
  std::string experiment;
  std::string variant;
  std::string graph;
  std::string method;
  std::string env;
  int replicate = 0;
  double satt_hat = 0.0;
  std::optional<double> satt_true;
  std::optional<double> mae;
  std::optional<double> pehe;
  std::optional<double> weight_error;
  std::optional<double> diversity;
};

struct ResultTable {
  std::vector<ResultRow> rows;
};

namespace detail {

inline std::uint64_t tag(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) h = (h ^ c) * 1099511628211ull;
  return h;
}

template <class M>
M make_model(Index d, const ExperimentSpec& spec, std::uint64_t seed) {
  if constexpr (std::same_as<M, Ols2Params>) {
    (void)spec;
    (void)seed;
    return Ols2Params(d);
  } else {
    return M(d, NetShape{}, seed);
  }
}

inline MultiEnvDataset training_part(const MultiEnvDataset& data, const ExperimentSpec& spec) {
  if (!spec.holdout_env) return data;
  require(*spec.holdout_env < data.size(), ErrorCode::IndexOutOfRange, "holdout environment index");
  std::vector<EnvData> envs;
  for (std::size_t k = 0; k < data.size(); ++k)
    if (k != *spec.holdout_env) envs.push_back(data.env(k));
  return MultiEnvDataset(std::move(envs), data.covariate_names());
}

struct Fit {
  std::vector<ArmPredictions> arms;
  std::optional<Ols2Params> ols;
};

template <class M>
Fit finish(const M& model, const MultiEnvDataset& data, LossKind loss) {
  Fit f;
  for (const auto& e : data.envs()) f.arms.push_back(predict_arms(model, e.x(), loss));
  if constexpr (std::same_as<M, Ols2Params>) f.ols = model;
  return f;
}

template <class M>
M fit_erm(const MultiEnvDataset& train_data, const ExperimentSpec& spec, LossKind loss, std::uint64_t seed) {
  TrainConfig cfg = spec.train;
  cfg.objective = Objective::ERM;
  cfg.loss = loss;
  cfg.seed = derive_seed(seed, {1});
  if constexpr (std::same_as<M, Ols2Params>) {
    if (spec.closed_form_erm && loss == LossKind::Squared) return fit_ols2_erm(train_data, cfg);
  }
  return train(make_model<M>(train_data.d(), spec, derive_seed(seed, {2})), train_data, cfg).params;
}

template <class M>
M fit_nice(const MultiEnvDataset& train_data, const ExperimentSpec& spec, LossKind loss, std::uint64_t seed) {
  TrainConfig cfg = spec.train;
  cfg.objective = Objective::IRMv1;
  cfg.loss = loss;
  cfg.seed = derive_seed(seed, {3});
  M start = spec.nice_init == NiceInit::Erm ? fit_erm<M>(train_data, spec, loss, seed)
                                            : make_model<M>(train_data.d(), spec, derive_seed(seed, {2}));
  return train(std::move(start), train_data, cfg).params;
}

template <class M>
Fit run_model_method(Method method, const MultiEnvDataset& data, const ExperimentSpec& spec, LossKind loss,
                     std::uint64_t seed) {
  const MultiEnvDataset train_data = training_part(data, spec);
  if (method == Method::NICE) return finish(fit_nice<M>(train_data, spec, loss, seed), data, loss);
  return finish(fit_erm<M>(train_data, spec, loss, seed), data, loss);
}

inline Fit run_method(Method method, const MultiEnvDataset& data, const ExperimentSpec& spec, LossKind loss,
                      std::uint64_t seed) {
  switch (spec.model) {
    case ModelKind::Ols2: return run_model_method<Ols2Params>(method, data, spec, loss, seed);
    case ModelKind::Tarnet: return run_model_method<TarnetParams>(method, data, spec, loss, seed);
    case ModelKind::Dragonnet: return run_model_method<DragonnetParams>(method, data, spec, loss, seed);
  }
  throw Error(ErrorCode::InvalidArgument, "unknown model kind");
}

/// Constant per-environment arms whose difference is the raw treated/control
/// outcome mean difference.
inline Fit no_adjust(const MultiEnvDataset& data) {
  Fit f;
  for (const auto& e : data.envs()) {
    double s1 = 0.0, s0 = 0.0;
    const Index n1 = e.n_treated(), n0 = e.n() - n1;
    require(n1 > 0, ErrorCode::NoTreatedUnits, "environment '" + e.id() + "'");
    require(n0 > 0, ErrorCode::InvalidArgument, "environment '" + e.id() + "' has no control rows");
    for (Index i = 0; i < e.n(); ++i) (e.t()(i) == 1.0 ? s1 : s0) += e.y()(i);
    f.arms.push_back({VectorXd::Constant(e.n(), s0 / static_cast<double>(n0)),
                      VectorXd::Constant(e.n(), s1 / static_cast<double>(n1))});
  }
  return f;
}

/// ICP selection, then the ERM fit on the selected columns. An empty selection
/// yields identical arms (effect exactly 0) and an all-zero OLS-2 weight vector.
inline Fit icp_fit(const MultiEnvDataset& data, const ExperimentSpec& spec, LossKind loss, std::uint64_t seed) {
  const IcpResult sel = icp_select(training_part(data, spec), spec.icp);
  if (sel.selection.empty()) {
    Fit f;
    for (const auto& e : data.envs()) {
      const double m = e.y().mean();
      f.arms.push_back({VectorXd::Constant(e.n(), m), VectorXd::Constant(e.n(), m)});
    }
    if (spec.model == ModelKind::Ols2) f.ols = Ols2Params(data.d());
    return f;
  }
  Fit f = run_method(Method::AdjustAll, data.select_columns(sel.selection), spec, loss, seed);
  if (f.ols) {
    Ols2Params full(data.d());
    for (int arm = 0; arm < 2; ++arm) {
      for (std::size_t k = 0; k < sel.selection.size(); ++k)
        full.w(arm)(sel.selection[k]) = f.ols->w(arm)(static_cast<Index>(k));
      full.b(arm) = f.ols->b(arm);
    }
    f.ols = full;
  }
  return f;
}

inline Fit fit_any(Method method, const MultiEnvDataset& data, const ExperimentSpec& spec, LossKind loss,
                   std::uint64_t seed) {
  if (method == Method::NoAdjust) return no_adjust(data);
  if (method == Method::ICP) return icp_fit(data, spec, loss, seed);
  return run_method(method, data, spec, loss, seed);
}

inline void append_rows(ResultTable& table, const ExperimentSpec& spec, const std::string& variant,
                        const std::string& graph, Method method, int replicate, const MultiEnvDataset& data,
                        const Fit& fit, std::optional<double> weight_error, std::optional<double> div) {
  const EstimateReport rep = evaluate_arms(fit.arms, data);
  for (const auto& est : rep.envs) {
    ResultRow r;
    r.experiment = to_string(spec.experiment);
    r.variant = variant;
    r.graph = graph;
    r.method = to_string(method);
    r.env = est.env_id;
    r.replicate = replicate;
    r.satt_hat = est.satt_hat;
    r.satt_true = est.satt_true;
    r.mae = est.mae;
    r.pehe = est.pehe;
    r.weight_error = weight_error;
    r.diversity = div;
    table.rows.push_back(std::move(r));
  }
}

inline LossKind infer_loss(const MultiEnvDataset& data) {
  for (const auto& e : data.envs())
    for (Index i = 0; i < e.n(); ++i)
      if (e.y()(i) != 0.0 && e.y()(i) != 1.0) return LossKind::Squared;
  return LossKind::BinaryCrossEntropy;
}

}  // namespace detail

/// Replicate r of any experiment uses base_seed + r; every (graph, variant,
/// mixture, method) stage derives its own stream from that.
inline std::uint64_t replicate_seed(const ExperimentSpec& spec, int r) {
  return spec.base_seed + static_cast<std::uint64_t>(r);
}

inline ResultTable run_linear_experiment(const ExperimentSpec& spec) {
  require(spec.experiment == Experiment::Linear1, ErrorCode::InvalidArgument, "spec is not a linear experiment");
  spec.validate();
  ResultTable table;
  std::vector<Index> x2_cols(static_cast<std::size_t>(spec.d_x2));
  std::iota(x2_cols.begin(), x2_cols.end(), spec.d_conf);
  const Index d = spec.d_conf + spec.d_x2;

  for (const auto& variant : spec.variants) {
    for (LinearGraph graph : spec.graphs) {
      for (int r = 0; r < spec.replicates; ++r) {
        const std::uint64_t rs = replicate_seed(spec, r);
        const auto g = static_cast<std::uint64_t>(graph);
        LinearSuiteFlags flags;
        flags.heteroskedastic = variant.heteroskedastic;
        flags.d_conf = spec.d_conf;
        flags.d_x2 = spec.d_x2;
        const std::uint64_t data_seed = derive_seed(rs, {0xD0, g, variant.heteroskedastic ? 1u : 0u});
        MultiEnvDataset data = gen_linear_suite(graph, spec.environments, spec.n_per_env, flags, data_seed);
        MatrixXd s = MatrixXd::Identity(d, d);
        if (variant.scrambled) {
          s = random_orthogonal(d, derive_seed(rs, {0xD5, g}));
          data = scramble(data, s);
        }
        for (Method m : spec.methods) {
          const std::uint64_t ms =
              derive_seed(rs, {0xE0, g, detail::tag(variant.name()), static_cast<std::uint64_t>(m)});
          const detail::Fit fit = detail::fit_any(m, data, spec, LossKind::Squared, ms);
          std::optional<double> werr;
          if (fit.ols) {
            // Weights in the original coordinates are S w.
            Ols2Params orig(d);
            for (int arm = 0; arm < 2; ++arm) {
              orig.w(arm) = s * fit.ols->w(arm);
              orig.b(arm) = fit.ols->b(arm);
            }
            werr = noncausal_weight_error(orig, x2_cols);
          }
          detail::append_rows(table, spec, variant.name(), to_string(graph), m, r, data, fit, werr, std::nullopt);
        }
      }
    }
  }
  return table;
}

inline std::string mixture_label(const MixtureSpec& m) {
  std::string s;
  for (std::size_t k = 0; k < 3; ++k) {
    if (k) s += '/';
    s += detail::format_double(m.p[k]);
  }
  return s;
}

/// NICE sees X, A and the collider Z; AdjustAll sees only the valid set X, A.
inline ResultTable run_diversity_experiment(const ExperimentSpec& spec) {
  require(spec.experiment == Experiment::Diversity3, ErrorCode::InvalidArgument,
          "spec is not a diversity experiment");
  spec.validate();
  ResultTable table;
  const Index valid_d = kNonlinearDimX + spec.d_a;
  std::vector<Index> valid(static_cast<std::size_t>(valid_d));
  std::iota(valid.begin(), valid.end(), Index{0});
  for (int r = 0; r < spec.replicates; ++r) {
    const std::uint64_t rs = replicate_seed(spec, r);
    const MultiEnvDataset sources =
        gen_nonlinear_suite(spec.source_envs, spec.n_source, spec.d_a, AdjustmentSet::XAZ, derive_seed(rs, {0xD1}));
    for (std::size_t k = 0; k < spec.mixtures.size(); ++k) {
      const MixtureSpec& mix = spec.mixtures[k];
      const MultiEnvDataset mixed = mix_environments(sources, mix, derive_seed(rs, {0xD2, k}));
      const LossKind loss = spec.train.loss;
      for (Method m : spec.methods) {
        const std::uint64_t ms = derive_seed(rs, {0xE1, k, static_cast<std::uint64_t>(m)});
        const MultiEnvDataset& data = mixed;
        const bool restrict = m != Method::NICE;
        const MultiEnvDataset used = restrict ? data.select_columns(valid) : data;
        const detail::Fit fit = detail::fit_any(m, used, spec, loss, ms);
        detail::append_rows(table, spec, mixture_label(mix), "nonlinear", m, r, used, fit, std::nullopt,
                            diversity(mix));
      }
    }
  }
  return table;
}

/// Loads the CSV (splitting by `sort_column` when set), then for each
/// bootstrap draw runs the methods on the plain data and on the data with
/// collider copies appended.
inline ResultTable run_csv_collider_experiment(const ExperimentSpec& spec) {
  require(spec.experiment == Experiment::CsvCollider, ErrorCode::InvalidArgument, "spec is not a csv experiment");
  spec.validate();
  MultiEnvDataset base = [&] {
    if (spec.sort_column.empty()) return load_multi_env_csv(spec.data_path, spec.columns);
    CsvColumns cols = spec.columns;
    const CsvTable table = read_csv_table(spec.data_path, cols);
    const auto it = std::find(table.covariate_names.begin(), table.covariate_names.end(), spec.sort_column);
    require(it != table.covariate_names.end(), ErrorCode::MissingColumn, spec.sort_column);
    return split_by_sorted_covariate(table.pooled, static_cast<Index>(it - table.covariate_names.begin()),
                                     spec.sort_parts, table.covariate_names);
  }();
  const LossKind loss = spec.loss.value_or(detail::infer_loss(base));
  ResultTable table;
  for (int r = 0; r < spec.replicates; ++r) {
    const std::uint64_t rs = replicate_seed(spec, r);
    std::vector<EnvData> envs;
    for (std::size_t k = 0; k < base.size(); ++k) {
      const EnvData& e = base.env(k);
      Rng rng(derive_seed(rs, {0xB0, k}));
      std::uniform_int_distribution<Index> pick(0, e.n() - 1);
      std::vector<Index> rows(static_cast<std::size_t>(e.n()));
      for (Index& i : rows) i = pick(rng);
      envs.push_back(e.select_rows(rows));
    }
    const MultiEnvDataset plain(std::move(envs), base.covariate_names());
    const MultiEnvDataset augmented =
        augment_with_colliders(plain, spec.collider_copies, spec.collider_scales, derive_seed(rs, {0xC0}));
    for (int aug = 0; aug < 2; ++aug) {
      const MultiEnvDataset& data = aug ? augmented : plain;
      const std::string variant = aug ? "collider" : "plain";
      for (Method m : spec.methods) {
        const std::uint64_t ms = derive_seed(rs, {0xE2, static_cast<std::uint64_t>(aug), static_cast<std::uint64_t>(m)});
        const detail::Fit fit = detail::fit_any(m, data, spec, loss, ms);
        detail::append_rows(table, spec, variant, "csv", m, r, data, fit, std::nullopt, std::nullopt);
      }
    }
  }
  return table;
}

inline ResultTable run_experiment(const ExperimentSpec& spec) {
  switch (spec.experiment) {
    case Experiment::Linear1: return run_linear_experiment(spec);
    case Experiment::Diversity3: return run_diversity_experiment(spec);
    case Experiment::CsvCollider: return run_csv_collider_experiment(spec);
  }
  throw Error(ErrorCode::InvalidArgument, "unknown experiment");
}

/// Writes a three-environment stand-in for the CSV study: the nonlinear
/// generator without Z, with an `ite` column.
inline void write_standin_csv(const std::string& path, std::uint64_t seed, Index n_per_env = 900, Index d_a = 10) {
  const auto data = gen_nonlinear_suite({0.2, 1.0, 5.0}, n_per_env, d_a, AdjustmentSet::XA, seed);
  CsvColumns cols;
  cols.ite = "ite";
  write_multi_env_csv(data, path, cols, true);
}

// ----------------------------------------------------------------------------
// Overlap verification

struct OverlapSpec {
  bool randomized = false;  // zero treatment weights
  std::vector<double> environments{1.0, 2.0};
  Index n_per_env = 100000;
  Index bins = 20;
  std::uint64_t seed = 0;
};

struct OverlapVerification {
  std::vector<std::string> env_ids;
  std::vector<OverlapReport> reports;
  bool passed() const {
    return std::all_of(reports.begin(), reports.end(), [](const OverlapReport& r) { return r.passed(); });
  }
};

/// Fits OLS-2 by ERM on a noise-graph linear suite and bins every environment
/// by the fitted q1 - q0.
inline OverlapVerification run_overlap_verification(const OverlapSpec& spec) {
  LinearSuiteFlags flags;
  if (spec.randomized) flags.w_xt = VectorXd::Zero(flags.d_conf);
  const auto data = gen_linear_suite(LinearGraph::Noise, spec.environments, spec.n_per_env, flags, spec.seed);
  TrainConfig cfg;
  cfg.objective = Objective::ERM;
  const Ols2Params model = fit_ols2_erm(data, cfg);
  OverlapVerification out;
  for (const auto& e : data.envs()) {
    out.env_ids.push_back(e.id());
    out.reports.push_back(overlap_check(e, representation_score(model, e.x(), LossKind::Squared), spec.bins));
  }
  return out;
}

// ----------------------------------------------------------------------------
// Summaries

struct Stat {
  int n = 0;
  double mean = 0.0;
  std::optional<double> sd;  // sample SD, absent for n = 1
  std::optional<double> se;  // sd / sqrt(n)
};

inline Stat make_stat(const std::vector<double>& v) {
  Stat s;
  s.n = static_cast<int>(v.size());
  if (v.empty()) return s;
  s.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  if (v.size() >= 2) {
    double ss = 0.0;
    for (double x : v) ss += (x - s.mean) * (x - s.mean);
    s.sd = std::sqrt(ss / static_cast<double>(v.size() - 1));
    s.se = *s.sd / std::sqrt(static_cast<double>(v.size()));
  }
  return s;
}

/// Per (variant, graph, method): statistics over replicates of the
/// environment-averaged MAE, PEHE and weight error.
struct SummaryCell {
  std::string variant;
  std::string graph;
  std::string method;
  std::optional<double> diversity;
  std::optional<Stat> mae;
  std::optional<Stat> pehe;
  std::optional<Stat> weight_error;
  Stat satt_hat;
};

inline std::vector<SummaryCell> summarize(const ResultTable& table) {
  using Key = std::tuple<std::string, std::string, std::string>;
  struct Acc {
    std::map<int, std::vector<const ResultRow*>> reps;
  };
  std::vector<Key> order;
  std::map<Key, Acc> groups;
  for (const auto& row : table.rows) {
    Key k{row.variant, row.graph, row.method};
    auto [it, inserted] = groups.try_emplace(k);
    if (inserted) order.push_back(k);
    it->second.reps[row.replicate].push_back(&row);
  }
  std::vector<SummaryCell> out;
  for (const auto& k : order) {
    const Acc& acc = groups.at(k);
    SummaryCell c;
    std::tie(c.variant, c.graph, c.method) = k;
    std::vector<double> mae, pehe, werr, satt;
    bool has_mae = true, has_pehe = true, has_werr = true;
    for (const auto& [rep, rows] : acc.reps) {
      double m = 0.0, p = 0.0, s = 0.0;
      for (const ResultRow* row : rows) {
        has_mae = has_mae && row->mae.has_value();
        has_pehe = has_pehe && row->pehe.has_value();
        has_werr = has_werr && row->weight_error.has_value();
        if (row->mae) m += *row->mae;
        if (row->pehe) p += *row->pehe;
        s += row->satt_hat;
        if (row->diversity) c.diversity = row->diversity;
      }
      const auto n = static_cast<double>(rows.size());
      mae.push_back(m / n);
      pehe.push_back(p / n);
      satt.push_back(s / n);
      if (rows.front()->weight_error) werr.push_back(*rows.front()->weight_error);
    }
    if (has_mae) c.mae = make_stat(mae);
    if (has_pehe) c.pehe = make_stat(pehe);
    if (has_werr) c.weight_error = make_stat(werr);
    c.satt_hat = make_stat(satt);
    out.push_back(std::move(c));
  }
  return out;
}

/// Spearman rank correlation with average ranks for ties.
inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  require(a.size() == b.size() && a.size() >= 2, ErrorCode::DimensionMismatch, "need two equal-length samples");
  auto ranks = [](const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t i, std::size_t j) { return v[i] < v[j]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
      std::size_t j = i;
      while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
      const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
      for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
      i = j + 1;
    }
    return r;
  };
  const auto ra = ranks(a), rb = ranks(b);
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / static_cast<double>(ra.size());
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / static_cast<double>(rb.size());
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

// ----------------------------------------------------------------------------
// Files

namespace detail {

inline std::string cell(const std::optional<double>& v) { return v ? format_double(*v) : std::string(); }

inline std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream out(p);
  require(out.good(), ErrorCode::IoError, "cannot write " + p.string());
  return out;
}

}  // namespace detail

inline const char* kResultsHeader =
    "experiment,variant,graph,method,env,replicate,satt_hat,satt_true,mae,pehe,weight_error,diversity";

inline void write_results_csv(const ResultTable& table, const std::filesystem::path& path) {
  auto out = detail::open_out(path);
  out << kResultsHeader << '\n';
  for (const auto& r : table.rows) {
    out << r.experiment << ',' << r.variant << ',' << r.graph << ',' << r.method << ',' << r.env << ','
        << r.replicate << ',' << detail::format_double(r.satt_hat) << ',' << detail::cell(r.satt_true) << ','
        << detail::cell(r.mae) << ',' << detail::cell(r.pehe) << ',' << detail::cell(r.weight_error) << ','
        << detail::cell(r.diversity) << '\n';
  }
  require(out.good(), ErrorCode::IoError, "write failed for " + path.string());
}

}  // namespace nce
