#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/QR>

#include "nce/error.hpp"
#include "nce/random.hpp"

namespace nce {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

enum class CovariateRole {
  Confounder,
  ParentOfYOnly,
  AncestorOfTOnly,
  Collider,
  Descendant,
  Mediator,
  Noise,
  Mixed,  // after a linear mixing of columns; per-column roles are no longer meaningful
};

constexpr const char* to_string(CovariateRole r) {
  switch (r) {
    case CovariateRole::Confounder: return "confounder";
    case CovariateRole::ParentOfYOnly: return "parent_of_y";
    case CovariateRole::AncestorOfTOnly: return "ancestor_of_t";
    case CovariateRole::Collider: return "collider";
    case CovariateRole::Descendant: return "descendant";
    case CovariateRole::Mediator: return "mediator";
    case CovariateRole::Noise: return "noise";
    case CovariateRole::Mixed: return "mixed";
  }
  return "unknown";
}

/// Hidden quantities known only for simulated data.
///
/// `mu0`/`mu1` are the unit-level arm means on the prediction scale (potential
/// outcomes with the realised noise for continuous outcomes, outcome
/// probabilities for binary ones); `ite == mu1 - mu0` whenever they are set.
/// `propensity` may be empty when unknown. `mechanism` holds the structural
/// coefficients of the generator, keyed by name.
struct GroundTruth {
  VectorXd ite;
  VectorXd propensity;
  std::vector<CovariateRole> roles;
  VectorXd mu0;
  VectorXd mu1;
  std::map<std::string, VectorXd> mechanism;

  bool has_arm_means() const { return mu0.size() > 0 && mu1.size() > 0; }
  bool has_propensity() const { return propensity.size() > 0; }
};

/// One environment's sample. Validated on construction and immutable after.
class EnvData {
 public:
  EnvData(std::string id, MatrixXd x, VectorXd t, VectorXd y, std::optional<GroundTruth> truth = std::nullopt)
      : id_(std::move(id)), x_(std::move(x)), t_(std::move(t)), y_(std::move(y)), truth_(std::move(truth)) {
    const Index n = x_.rows();
    require(n >= 1, ErrorCode::InvalidArgument, "environment '" + id_ + "' has no rows");
    require(t_.size() == n && y_.size() == n, ErrorCode::DimensionMismatch,
            "environment '" + id_ + "': x, t and y row counts differ");
    for (Index i = 0; i < n; ++i)
      require(t_(i) == 0.0 || t_(i) == 1.0, ErrorCode::BinaryViolation,
              "environment '" + id_ + "': treatment at row " + std::to_string(i) + " is not 0/1");
    if (truth_) {
      require(truth_->ite.size() == n, ErrorCode::DimensionMismatch, "ground-truth ite length differs from n");
      if (truth_->has_propensity()) {
        require(truth_->propensity.size() == n, ErrorCode::DimensionMismatch, "propensity length differs from n");
        for (Index i = 0; i < n; ++i)
          require(truth_->propensity(i) > 0.0 && truth_->propensity(i) < 1.0, ErrorCode::InvalidArgument,
                  "propensity outside (0,1) at row " + std::to_string(i));
      }
      if (truth_->has_arm_means())
        require(truth_->mu0.size() == n && truth_->mu1.size() == n, ErrorCode::DimensionMismatch,
                "arm means length differs from n");
      require(truth_->roles.empty() || static_cast<Index>(truth_->roles.size()) == x_.cols(),
              ErrorCode::DimensionMismatch, "one covariate role per column is required");
    }
  }

  const std::string& id() const { return id_; }
  const MatrixXd& x() const { return x_; }
  const VectorXd& t() const { return t_; }
  const VectorXd& y() const { return y_; }
  const std::optional<GroundTruth>& truth() const { return truth_; }
  Index n() const { return x_.rows(); }
  Index d() const { return x_.cols(); }
  Index n_treated() const { return static_cast<Index>(t_.sum()); }

  EnvData with_covariates(MatrixXd x, std::optional<std::vector<CovariateRole>> roles = std::nullopt) const {
    auto truth = truth_;
    if (truth) {
      if (roles) truth->roles = *roles;
      else if (x.cols() != x_.cols()) truth->roles.clear();
    }
    return EnvData(id_, std::move(x), t_, y_, std::move(truth));
  }

  /// Rows in the given order (duplicates allowed, for bootstrap resampling).
  EnvData select_rows(const std::vector<Index>& rows, std::string new_id = {}) const {
    const Index m = static_cast<Index>(rows.size());
    MatrixXd x(m, d());
    VectorXd t(m), y(m);
    for (Index k = 0; k < m; ++k) {
      x.row(k) = x_.row(rows[k]);
      t(k) = t_(rows[k]);
      y(k) = y_(rows[k]);
    }
    std::optional<GroundTruth> truth;
    if (truth_) {
      truth = GroundTruth{};
      truth->roles = truth_->roles;
      truth->mechanism = truth_->mechanism;
      auto pick = [&](const VectorXd& v) {
        if (v.size() == 0) return VectorXd();
        VectorXd out(m);
        for (Index k = 0; k < m; ++k) out(k) = v(rows[k]);
        return out;
      };
      truth->ite = pick(truth_->ite);
      truth->propensity = pick(truth_->propensity);
      truth->mu0 = pick(truth_->mu0);
      truth->mu1 = pick(truth_->mu1);
    }
    return EnvData(new_id.empty() ? id_ : std::move(new_id), std::move(x), std::move(t), std::move(y),
                   std::move(truth));
  }

 private:
  std::string id_;
  MatrixXd x_;
  VectorXd t_;
  VectorXd y_;
  std::optional<GroundTruth> truth_;
};

/// Ordered collection of environments sharing one covariate schema.
class MultiEnvDataset {
 public:
  MultiEnvDataset(std::vector<EnvData> envs, std::vector<std::string> covariate_names = {})
      : envs_(std::move(envs)), names_(std::move(covariate_names)) {
    require(envs_.size() >= 2, ErrorCode::FewerThanTwoEnvironments,
            "got " + std::to_string(envs_.size()) + " environment(s)");
    d_ = envs_.front().d();
    for (const auto& e : envs_)
      require(e.d() == d_, ErrorCode::DimensionMismatch, "environment '" + e.id() + "' has a different dimension");
    if (names_.empty()) {
      for (Index j = 0; j < d_; ++j) names_.push_back("x" + std::to_string(j));
    }
    require(static_cast<Index>(names_.size()) == d_, ErrorCode::DimensionMismatch, "covariate name count != d");
  }

  const std::vector<EnvData>& envs() const { return envs_; }
  const EnvData& env(std::size_t k) const { return envs_.at(k); }
  std::size_t size() const { return envs_.size(); }
  Index d() const { return d_; }
  const std::vector<std::string>& covariate_names() const { return names_; }
  Index total_rows() const {
    Index n = 0;
    for (const auto& e : envs_) n += e.n();
    return n;
  }
  bool has_truth() const {
    return std::all_of(envs_.begin(), envs_.end(), [](const EnvData& e) { return e.truth().has_value(); });
  }

  /// Keep only the listed covariate columns, in the listed order.
  MultiEnvDataset select_columns(const std::vector<Index>& cols) const {
    std::vector<EnvData> out;
    std::vector<std::string> names;
    for (Index c : cols) {
      require(c >= 0 && c < d_, ErrorCode::IndexOutOfRange, "column " + std::to_string(c));
      names.push_back(names_[c]);
    }
    for (const auto& e : envs_) {
      MatrixXd x(e.n(), static_cast<Index>(cols.size()));
      for (std::size_t k = 0; k < cols.size(); ++k) x.col(static_cast<Index>(k)) = e.x().col(cols[k]);
      std::optional<std::vector<CovariateRole>> roles;
      if (e.truth() && !e.truth()->roles.empty()) {
        roles.emplace();
        for (Index c : cols) roles->push_back(e.truth()->roles[c]);
      }
      out.push_back(e.with_covariates(std::move(x), roles));
    }
    return MultiEnvDataset(std::move(out), std::move(names));
  }

 private:
  std::vector<EnvData> envs_;
  std::vector<std::string> names_;
  Index d_ = 0;
};

// ----------------------------------------------------------------------------
// CSV

struct CsvColumns {
  std::string treatment = "t";
  std::string outcome = "y";
  std::string env = "env";
  /// Optional column carrying per-unit true effects; when present the loaded
  /// environments get a GroundTruth with `ite` set.
  std::string ite;
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) {
    if (!cell.empty() && cell.back() == '\r') cell.pop_back();
    cells.push_back(cell);
  }
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

inline std::optional<double> parse_double(std::string_view s) {
  while (!s.empty() && s.front() == ' ') s.remove_prefix(1);
  while (!s.empty() && s.back() == ' ') s.remove_suffix(1);
  if (s.empty()) return std::nullopt;
  if (s.front() == '+') s.remove_prefix(1);
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

inline std::string format_double(double v) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

}  // namespace detail

/// Rows of a header-first, comma-separated file as one pooled environment,
/// with the per-row environment label (empty when `cols.env` is empty).
struct CsvTable {
  std::vector<std::string> covariate_names;
  EnvData pooled;
  std::vector<std::string> env_labels;
};

/// All columns other than treatment, outcome, env and ite must be numeric and
/// become covariates in header order.
inline CsvTable read_csv_table(const std::string& path, const CsvColumns& cols) {
  std::ifstream in(path);
  require(in.good(), ErrorCode::IoError, "cannot open " + path);
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), ErrorCode::IoError, path + " is empty");
  const auto header = detail::split_csv_line(line);

  auto find = [&](const std::string& name) -> Index {
    auto it = std::find(header.begin(), header.end(), name);
    return it == header.end() ? -1 : static_cast<Index>(it - header.begin());
  };
  const Index t_col = find(cols.treatment), y_col = find(cols.outcome);
  require(t_col >= 0, ErrorCode::MissingColumn, cols.treatment);
  require(y_col >= 0, ErrorCode::MissingColumn, cols.outcome);
  Index e_col = -1, ite_col = -1;
  if (!cols.env.empty()) {
    e_col = find(cols.env);
    require(e_col >= 0, ErrorCode::MissingColumn, cols.env);
  }
  if (!cols.ite.empty()) {
    ite_col = find(cols.ite);
    require(ite_col >= 0, ErrorCode::MissingColumn, cols.ite);
  }

  std::vector<Index> cov_cols;
  std::vector<std::string> names;
  for (Index j = 0; j < static_cast<Index>(header.size()); ++j) {
    if (j == t_col || j == y_col || j == e_col || j == ite_col) continue;
    cov_cols.push_back(j);
    names.push_back(header[j]);
  }

  std::vector<double> xs, t, y, ite;
  std::vector<std::string> labels;
  Index row = 0;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    ++row;
    const auto cells = detail::split_csv_line(line);
    require(cells.size() == header.size(), ErrorCode::DimensionMismatch,
            "row " + std::to_string(row) + " has " + std::to_string(cells.size()) + " cells");
    auto num = [&](Index j) {
      auto v = detail::parse_double(cells[j]);
      if (!v) throw Error(ErrorCode::NonNumericCell, "row " + std::to_string(row) + ", column '" + header[j] + "'");
      return *v;
    };
    for (Index j : cov_cols) xs.push_back(num(j));
    t.push_back(num(t_col));
    y.push_back(num(y_col));
    if (ite_col >= 0) ite.push_back(num(ite_col));
    if (e_col >= 0) labels.push_back(cells[e_col]);
  }
  require(row >= 1, ErrorCode::IoError, path + " has no data rows");
  const Index n = row, d = static_cast<Index>(cov_cols.size());
  MatrixXd x = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(xs.data(), n, d);
  std::optional<GroundTruth> truth;
  if (ite_col >= 0) {
    truth = GroundTruth{};
    truth->ite = Eigen::Map<const VectorXd>(ite.data(), n);
  }
  EnvData pooled("all", std::move(x), Eigen::Map<const VectorXd>(t.data(), n), Eigen::Map<const VectorXd>(y.data(), n),
                 std::move(truth));
  return {std::move(names), std::move(pooled), std::move(labels)};
}

/// One environment per distinct value of `cols.env`, in first-appearance order.
inline MultiEnvDataset load_multi_env_csv(const std::string& path, const CsvColumns& cols) {
  require(!cols.env.empty(), ErrorCode::InvalidArgument, "an environment column name is required");
  const CsvTable table = read_csv_table(path, cols);
  std::vector<std::string> order;
  std::map<std::string, std::vector<Index>> groups;
  for (std::size_t i = 0; i < table.env_labels.size(); ++i) {
    auto [it, inserted] = groups.try_emplace(table.env_labels[i]);
    if (inserted) order.push_back(table.env_labels[i]);
    it->second.push_back(static_cast<Index>(i));
  }
  require(order.size() >= 2, ErrorCode::FewerThanTwoEnvironments,
          path + " has " + std::to_string(order.size()) + " distinct environment value(s)");
  std::vector<EnvData> envs;
  for (const auto& key : order) envs.push_back(table.pooled.select_rows(groups.at(key), key));
  return MultiEnvDataset(std::move(envs), table.covariate_names);
}

/// Sorts the rows of `pooled` by covariate `col` (stable) and cuts them into
/// `parts` environments of equal size, the last absorbing any remainder.
inline MultiEnvDataset split_by_sorted_covariate(const EnvData& pooled, Index col, int parts,
                                                 std::vector<std::string> covariate_names = {}) {
  require(col >= 0 && col < pooled.d(), ErrorCode::IndexOutOfRange, "column " + std::to_string(col));
  require(parts >= 2, ErrorCode::FewerThanTwoEnvironments, "need at least two parts");
  require(pooled.n() >= parts, ErrorCode::InvalidArgument, "fewer rows than parts");
  std::vector<Index> order(static_cast<std::size_t>(pooled.n()));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return pooled.x()(a, col) < pooled.x()(b, col); });
  const Index size = pooled.n() / parts;
  std::vector<EnvData> envs;
  for (int k = 0; k < parts; ++k) {
    const auto lo = order.begin() + k * size;
    const auto hi = k + 1 == parts ? order.end() : lo + size;
    envs.push_back(pooled.select_rows(std::vector<Index>(lo, hi), "part" + std::to_string(k + 1)));
  }
  return MultiEnvDataset(std::move(envs), std::move(covariate_names));
}

/// Writes the dataset in the format `load_multi_env_csv` reads. The ite column
/// is emitted when every environment carries ground truth and `with_ite` is set.
inline void write_multi_env_csv(const MultiEnvDataset& data, const std::string& path, const CsvColumns& cols = {},
                                bool with_ite = true) {
  std::ofstream out(path);
  require(out.good(), ErrorCode::IoError, "cannot write " + path);
  const bool ite = with_ite && data.has_truth();
  const std::string ite_name = cols.ite.empty() ? "ite" : cols.ite;
  for (const auto& name : data.covariate_names()) out << name << ',';
  out << cols.treatment << ',' << cols.outcome << ',' << cols.env;
  if (ite) out << ',' << ite_name;
  out << '\n';
  for (const auto& e : data.envs()) {
    for (Index i = 0; i < e.n(); ++i) {
      for (Index j = 0; j < e.d(); ++j) out << detail::format_double(e.x()(i, j)) << ',';
      out << detail::format_double(e.t()(i)) << ',' << detail::format_double(e.y()(i)) << ',' << e.id();
      if (ite) out << ',' << detail::format_double(e.truth()->ite(i));
      out << '\n';
    }
  }
  require(out.good(), ErrorCode::IoError, "write failed for " + path);
}

// ----------------------------------------------------------------------------
// Scrambling

inline double orthogonality_error(const MatrixXd& s) {
  return (s.transpose() * s - MatrixXd::Identity(s.cols(), s.cols())).cwiseAbs().maxCoeff();
}

/// Haar-distributed orthogonal matrix: QR of a standard normal draw with the
/// sign of R's diagonal folded into Q.
inline MatrixXd random_orthogonal(Index d, std::uint64_t seed) {
  require(d >= 1, ErrorCode::InvalidArgument, "dimension must be >= 1");
  Rng rng(seed);
  const MatrixXd g = normal_matrix(rng, d, d);
  Eigen::HouseholderQR<MatrixXd> qr(g);
  MatrixXd q = qr.householderQ() * MatrixXd::Identity(d, d);
  const MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (Index j = 0; j < d; ++j)
    if (r(j, j) < 0) q.col(j) = -q.col(j);
  return q;
}

/// Replaces every environment's covariates by x * s (one shared s).
inline MultiEnvDataset scramble(const MultiEnvDataset& data, const MatrixXd& s) {
  require(s.rows() == s.cols() && s.rows() == data.d(), ErrorCode::DimensionMismatch,
          "scrambling matrix must be " + std::to_string(data.d()) + "x" + std::to_string(data.d()));
  require(orthogonality_error(s) <= 1e-8, ErrorCode::NotOrthogonal, "max |S'S - I| exceeds 1e-8");
  const bool identity = s == MatrixXd::Identity(s.rows(), s.cols());
  std::vector<EnvData> envs;
  std::vector<std::string> names;
  for (const auto& e : data.envs()) {
    if (identity) {
      envs.push_back(e);
      continue;
    }
    std::vector<CovariateRole> mixed(static_cast<std::size_t>(data.d()), CovariateRole::Mixed);
    envs.push_back(e.with_covariates(e.x() * s, mixed));
  }
  if (identity) return MultiEnvDataset(std::move(envs), data.covariate_names());
  for (Index j = 0; j < data.d(); ++j) names.push_back("s" + std::to_string(j));
  return MultiEnvDataset(std::move(envs), std::move(names));
}

}  // namespace nce
