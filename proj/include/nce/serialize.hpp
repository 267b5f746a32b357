#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nce/estimators.hpp"
#include "nce/harness.hpp"
#include "nce/icp.hpp"
#include "nce/models.hpp"
#include "nce/objectives.hpp"
#include "nce/theory.hpp"

namespace nce {

using Json = nlohmann::ordered_json;

namespace detail {

inline Json opt(const std::optional<double>& v) { return v ? Json(*v) : Json(nullptr); }

inline Json vec_json(const VectorXd& v) { return Json(std::vector<double>(v.data(), v.data() + v.size())); }

inline Json dense_json(const VectorXd& theta, const DenseLayer& l) {
  const auto w = weights(theta, l);
  std::vector<double> row_major;
  row_major.reserve(static_cast<std::size_t>(l.out * l.in));
  for (Index r = 0; r < l.out; ++r)
    for (Index c = 0; c < l.in; ++c) row_major.push_back(w(r, c));
  return Json{{"shape", {l.out, l.in}},
              {"weight", row_major},
              {"bias", vec_json(bias(theta, l))},
              {"activation", l.relu ? "relu" : "linear"}};
}

inline Json stat_json(const std::optional<Stat>& s) {
  if (!s) return nullptr;
  return Json{{"n", s->n}, {"mean", s->mean}, {"sd", opt(s->sd)}, {"se", opt(s->se)}};
}

}  // namespace detail

inline Json to_json(const Ols2Params& p) {
  return Json{{"model", "ols2"},
              {"d", p.dim()},
              {"w0", detail::vec_json(p.w(0))},
              {"b0", p.b(0)},
              {"w1", detail::vec_json(p.w(1))},
              {"b1", p.b(1)}};
}

template <bool T>
Json to_json(const TwoHeadNet<T>& p) {
  auto layers = [&](const std::vector<detail::DenseLayer>& ls) {
    Json a = Json::array();
    for (const auto& l : ls) a.push_back(detail::dense_json(p.theta(), l));
    return a;
  };
  Json j{{"model", T ? "dragonnet" : "tarnet"},
         {"d", p.dim()},
         {"shared", layers(p.shared_layers())},
         {"head0", layers(p.head_layers(0))},
         {"head1", layers(p.head_layers(1))}};
  if constexpr (T) j["t_head"] = layers(p.treatment_layers());
  return j;
}

inline Ols2Params ols2_from_json(const Json& j) {
  const auto w0 = j.at("w0").get<std::vector<double>>();
  const auto w1 = j.at("w1").get<std::vector<double>>();
  return Ols2Params(Eigen::Map<const VectorXd>(w0.data(), static_cast<Index>(w0.size())), j.at("b0").get<double>(),
                    Eigen::Map<const VectorXd>(w1.data(), static_cast<Index>(w1.size())), j.at("b1").get<double>());
}

template <class M>
Json to_json(const TrainReport<M>& r) {
  return Json{{"objective", r.objective}, {"env_risk", r.env_risk}, {"env_penalty", r.env_penalty},
              {"params", to_json(r.params)}};
}

inline Json to_json(const EstimateReport& r) {
  Json envs = Json::array();
  for (const auto& e : r.envs)
    envs.push_back({{"env", e.env_id},
                    {"satt_hat", e.satt_hat},
                    {"satt_true", detail::opt(e.satt_true)},
                    {"mae", detail::opt(e.mae)},
                    {"pehe", detail::opt(e.pehe)}});
  return Json{{"envs", envs},
              {"mean_mae", detail::opt(r.mean_mae)},
              {"pooled_pehe", detail::opt(r.pooled_pehe)},
              {"weight_error", detail::opt(r.weight_error)}};
}

inline Json to_json(const IcpResult& r) {
  Json tested = Json::array();
  for (const auto& t : r.tested) tested.push_back({{"subset", t.subset}, {"p_value", t.p_value}, {"skipped", t.skipped}});
  return Json{{"tested", tested}, {"accepted", r.accepted}, {"selection", r.selection}};
}

inline Json to_json(const ColliderTheoremReport& r) {
  return Json{{"trials", r.trials},
              {"tested", r.tested},
              {"excluded", r.excluded},
              {"inequality_violations", r.inequality_violations},
              {"identity_violations", r.identity_violations},
              {"max_identity_error", r.max_identity_error},
              {"passed", r.passed()}};
}

inline Json to_json(const OverlapReport& r) {
  Json bins = Json::array();
  for (const auto& b : r.bins)
    bins.push_back(
        {{"count", b.count}, {"treated_rate", b.treated_rate}, {"lower", b.lower}, {"upper", b.upper}, {"ok", b.ok}});
  return Json{{"epsilon", r.epsilon}, {"bins", bins}, {"passed", r.passed()}};
}

// ----------------------------------------------------------------------------
// Experiment configuration

inline Experiment parse_experiment(const std::string& s) {
  if (s == "linear") return Experiment::Linear1;
  if (s == "diversity") return Experiment::Diversity3;
  if (s == "csv") return Experiment::CsvCollider;
  throw Error(ErrorCode::InvalidArgument, "unknown experiment '" + s + "'");
}

inline Method parse_method(const std::string& s) {
  for (Method m : {Method::AdjustAll, Method::NICE, Method::ICP, Method::NoAdjust})
    if (s == to_string(m)) return m;
  throw Error(ErrorCode::InvalidArgument, "unknown method '" + s + "'");
}

inline ModelKind parse_model(const std::string& s) {
  for (ModelKind m : {ModelKind::Ols2, ModelKind::Tarnet, ModelKind::Dragonnet})
    if (s == to_string(m)) return m;
  throw Error(ErrorCode::InvalidArgument, "unknown model '" + s + "'");
}

inline LossKind parse_loss(const std::string& s) {
  if (s == "squared") return LossKind::Squared;
  if (s == "bce") return LossKind::BinaryCrossEntropy;
  throw Error(ErrorCode::InvalidArgument, "unknown loss '" + s + "'");
}

inline LinearGraph parse_graph(const std::string& s) {
  for (LinearGraph g : {LinearGraph::Noise, LinearGraph::Descendant, LinearGraph::Collider})
    if (s == to_string(g)) return g;
  throw Error(ErrorCode::InvalidArgument, "unknown graph '" + s + "'");
}

/// Starts from `ExperimentSpec::defaults` for the named experiment and
/// overrides any keys present. Unknown keys are rejected.
inline ExperimentSpec spec_from_json(const Json& j, std::optional<Experiment> experiment = std::nullopt) {
  require(j.is_object(), ErrorCode::InvalidArgument, "config must be a JSON object");
  Experiment e = experiment.value_or(Experiment::Linear1);
  if (j.contains("experiment")) {
    const Experiment named = parse_experiment(j.at("experiment").get<std::string>());
    require(!experiment || named == *experiment, ErrorCode::InvalidArgument,
            "config experiment does not match the requested one");
    e = named;
  }
  ExperimentSpec s = ExperimentSpec::defaults(e);
  for (const auto& [key, v] : j.items()) {
    if (key == "experiment") continue;
    else if (key == "methods") {
      s.methods.clear();
      for (const auto& m : v) s.methods.push_back(parse_method(m.get<std::string>()));
    } else if (key == "replicates") s.replicates = v.get<int>();
    else if (key == "base_seed") s.base_seed = v.get<std::uint64_t>();
    else if (key == "model") s.model = parse_model(v.get<std::string>());
    else if (key == "nice_init") {
      const auto x = v.get<std::string>();
      require(x == "erm" || x == "fresh", ErrorCode::InvalidArgument, "nice_init must be erm or fresh");
      s.nice_init = x == "erm" ? NiceInit::Erm : NiceInit::Fresh;
    } else if (key == "closed_form_erm") s.closed_form_erm = v.get<bool>();
    else if (key == "holdout_env") s.holdout_env = v.get<std::size_t>();
    else if (key == "variants") {
      s.variants.clear();
      for (const auto& x : v)
        s.variants.push_back({x.at("scrambled").get<bool>(), x.at("heteroskedastic").get<bool>()});
    } else if (key == "graphs") {
      s.graphs.clear();
      for (const auto& g : v) s.graphs.push_back(parse_graph(g.get<std::string>()));
    } else if (key == "environments") s.environments = v.get<std::vector<double>>();
    else if (key == "n_per_env") s.n_per_env = v.get<Index>();
    else if (key == "d_conf") s.d_conf = v.get<Index>();
    else if (key == "d_x2") s.d_x2 = v.get<Index>();
    else if (key == "mixtures") {
      s.mixtures.clear();
      for (const auto& m : v) {
        const auto p = m.get<std::vector<double>>();
        require(p.size() == 3, ErrorCode::InvalidArgument, "a mixture has three proportions");
        s.mixtures.emplace_back(p[0], p[1], p[2]);
      }
    } else if (key == "source_envs") s.source_envs = v.get<std::vector<double>>();
    else if (key == "n_source") s.n_source = v.get<Index>();
    else if (key == "d_a") s.d_a = v.get<Index>();
    else if (key == "data_path") s.data_path = v.get<std::string>();
    else if (key == "columns") {
      if (v.contains("treatment")) s.columns.treatment = v.at("treatment").get<std::string>();
      if (v.contains("outcome")) s.columns.outcome = v.at("outcome").get<std::string>();
      if (v.contains("env")) s.columns.env = v.at("env").get<std::string>();
      if (v.contains("ite")) s.columns.ite = v.at("ite").get<std::string>();
    } else if (key == "sort_column") s.sort_column = v.get<std::string>();
    else if (key == "sort_parts") s.sort_parts = v.get<int>();
    else if (key == "collider_copies") s.collider_copies = v.get<Index>();
    else if (key == "collider_scales") s.collider_scales = v.get<std::vector<double>>();
    else if (key == "loss") s.loss = parse_loss(v.get<std::string>());
    else if (key == "icp") {
      if (v.contains("alpha")) s.icp.alpha = v.at("alpha").get<double>();
      if (v.contains("max_subset_size")) s.icp.max_subset_size = v.at("max_subset_size").get<Index>();
      if (v.contains("budget")) s.icp.budget = v.at("budget").get<std::uint64_t>();
    } else if (key == "train") {
      for (const auto& [tk, tv] : v.items()) {
        if (tk == "lambda") s.train.lambda = tv.get<double>();
        else if (tk == "loss") s.train.loss = parse_loss(tv.get<std::string>());
        else if (tk == "learning_rate") s.train.learning_rate = tv.get<double>();
        else if (tk == "l2") s.train.l2 = tv.get<double>();
        else if (tk == "epochs") s.train.epochs = tv.get<int>();
        else if (tk == "batch") s.train.batch = tv.get<Index>();
        else if (tk == "adam_betas") {
          s.train.beta1 = tv.at(0).get<double>();
          s.train.beta2 = tv.at(1).get<double>();
        } else if (tk == "adam_eps") s.train.adam_eps = tv.get<double>();
        else if (tk == "alpha_t") s.train.alpha_t = tv.get<double>();
        else if (tk == "env_weighted_erm") s.train.env_weighted_erm = tv.get<bool>();
        else throw Error(ErrorCode::InvalidArgument, "unknown train key '" + tk + "'");
      }
    } else {
      throw Error(ErrorCode::InvalidArgument, "unknown config key '" + key + "'");
    }
  }
  return s;
}

inline Json to_json(const ExperimentSpec& s) {
  Json methods = Json::array();
  for (Method m : s.methods) methods.push_back(to_string(m));
  Json j{{"experiment", to_string(s.experiment)},
         {"methods", methods},
         {"replicates", s.replicates},
         {"base_seed", s.base_seed},
         {"model", to_string(s.model)},
         {"nice_init", s.nice_init == NiceInit::Erm ? "erm" : "fresh"},
         {"closed_form_erm", s.closed_form_erm},
         {"train",
          {{"lambda", s.train.lambda},
           {"loss", to_string(s.train.loss)},
           {"learning_rate", s.train.learning_rate},
           {"l2", s.train.l2},
           {"epochs", s.train.epochs},
           {"batch", s.train.batch},
           {"adam_betas", {s.train.beta1, s.train.beta2}},
           {"adam_eps", s.train.adam_eps},
           {"alpha_t", s.train.alpha_t},
           {"env_weighted_erm", s.train.env_weighted_erm}}}};
  if (s.holdout_env) j["holdout_env"] = *s.holdout_env;
  if (s.experiment == Experiment::Linear1) {
    Json variants = Json::array(), graphs = Json::array();
    for (const auto& v : s.variants) variants.push_back({{"scrambled", v.scrambled}, {"heteroskedastic", v.heteroskedastic}});
    for (LinearGraph g : s.graphs) graphs.push_back(to_string(g));
    j["variants"] = variants;
    j["graphs"] = graphs;
    j["environments"] = s.environments;
    j["n_per_env"] = s.n_per_env;
    j["d_conf"] = s.d_conf;
    j["d_x2"] = s.d_x2;
    j["icp"] = {{"alpha", s.icp.alpha}, {"budget", s.icp.budget}};
    if (s.icp.max_subset_size) j["icp"]["max_subset_size"] = *s.icp.max_subset_size;
  } else if (s.experiment == Experiment::Diversity3) {
    Json mixes = Json::array();
    for (const auto& m : s.mixtures) mixes.push_back({m.p[0], m.p[1], m.p[2]});
    j["mixtures"] = mixes;
    j["source_envs"] = s.source_envs;
    j["n_source"] = s.n_source;
    j["d_a"] = s.d_a;
  } else {
    j["data_path"] = s.data_path;
    j["columns"] = {{"treatment", s.columns.treatment},
                    {"outcome", s.columns.outcome},
                    {"env", s.columns.env},
                    {"ite", s.columns.ite}};
    j["sort_column"] = s.sort_column;
    j["sort_parts"] = s.sort_parts;
    j["collider_copies"] = s.collider_copies;
    j["collider_scales"] = s.collider_scales;
    if (s.loss) j["loss"] = to_string(*s.loss);
  }
  return j;
}

inline OverlapSpec overlap_spec_from_json(const Json& j) {
  require(j.is_object(), ErrorCode::InvalidArgument, "config must be a JSON object");
  OverlapSpec s;
  for (const auto& [key, v] : j.items()) {
    if (key == "fixture") {
      const auto f = v.get<std::string>();
      require(f == "randomized" || f == "confounded", ErrorCode::InvalidArgument,
              "fixture must be randomized or confounded");
      s.randomized = f == "randomized";
    } else if (key == "environments") s.environments = v.get<std::vector<double>>();
    else if (key == "n_per_env") s.n_per_env = v.get<Index>();
    else if (key == "bins") s.bins = v.get<Index>();
    else if (key == "seed") s.seed = v.get<std::uint64_t>();
    else throw Error(ErrorCode::InvalidArgument, "unknown config key '" + key + "'");
  }
  return s;
}

inline Json to_json(const OverlapVerification& v) {
  Json envs = Json::array();
  for (std::size_t k = 0; k < v.reports.size(); ++k) {
    Json e = to_json(v.reports[k]);
    e["env"] = v.env_ids[k];
    envs.push_back(std::move(e));
  }
  return Json{{"envs", envs}, {"passed", v.passed()}};
}

// ----------------------------------------------------------------------------
// Output files

inline Json summary_json(const std::vector<SummaryCell>& cells) {
  Json out = Json::array();
  for (const auto& c : cells)
    out.push_back({{"variant", c.variant},
                   {"graph", c.graph},
                   {"method", c.method},
                   {"diversity", detail::opt(c.diversity)},
                   {"mae", detail::stat_json(c.mae)},
                   {"pehe", detail::stat_json(c.pehe)},
                   {"weight_error", detail::stat_json(c.weight_error)},
                   {"satt_hat", detail::stat_json(c.satt_hat)}});
  return out;
}

/// results.csv, summary.json and the plotdata_*.csv files for `experiment`.
inline void emit(const ResultTable& table, const std::filesystem::path& dir, Experiment experiment) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  require(!ec, ErrorCode::IoError, "cannot create " + dir.string() + ": " + ec.message());
  write_results_csv(table, dir / "results.csv");

  const auto cells = summarize(table);
  {
    auto out = detail::open_out(dir / "summary.json");
    out << Json{{"experiment", to_string(experiment)}, {"cells", summary_json(cells)}}.dump(2) << '\n';
  }
  auto stat_cols = [](const std::optional<Stat>& s, bool sd) {
    if (!s) return std::string(",");
    return detail::format_double(s->mean) + ',' + detail::cell(sd ? s->sd : s->se);
  };
  if (experiment == Experiment::Linear1) {
    auto mae = detail::open_out(dir / "plotdata_mae.csv");
    auto werr = detail::open_out(dir / "plotdata_weight_error.csv");
    mae << "variant,graph,method,mean_mae,se_mae\n";
    werr << "variant,graph,method,mean_weight_error,se_weight_error\n";
    for (const auto& c : cells) {
      mae << c.variant << ',' << c.graph << ',' << c.method << ',' << stat_cols(c.mae, false) << '\n';
      if (c.weight_error)
        werr << c.variant << ',' << c.graph << ',' << c.method << ',' << stat_cols(c.weight_error, false) << '\n';
    }
  } else if (experiment == Experiment::Diversity3) {
    auto out = detail::open_out(dir / "plotdata_diversity.csv");
    out << "mixture,diversity,method,mean_mae,se_mae\n";
    for (const auto& c : cells)
      out << c.variant << ',' << detail::cell(c.diversity) << ',' << c.method << ',' << stat_cols(c.mae, false) << '\n';
  } else {
    auto out = detail::open_out(dir / "plotdata_csv.csv");
    out << "variant,method,mean_mae,sd_mae,mean_satt_hat,sd_satt_hat\n";
    for (const auto& c : cells)
      out << c.variant << ',' << c.method << ',' << stat_cols(c.mae, true) << ','
          << stat_cols(std::optional<Stat>(c.satt_hat), true) << '\n';
  }
}

}  // namespace nce
