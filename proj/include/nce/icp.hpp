#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/QR>
#include <boost/math/distributions/fisher_f.hpp>
#include <boost/math/distributions/normal.hpp>

#include "nce/dataset.hpp"
#include "nce/error.hpp"

namespace nce {

using Subset = std::vector<Index>;

enum class InvarianceTest { ResidualMeanVar };

struct IcpConfig {
  double alpha = 0.05;
  std::optional<Index> max_subset_size;  // unlimited when empty
  std::uint64_t budget = std::uint64_t{1} << 20;
  InvarianceTest test = InvarianceTest::ResidualMeanVar;

  void validate() const {
    require(alpha > 0.0 && alpha < 1.0, ErrorCode::InvalidArgument, "alpha must lie in (0,1)");
    require(!max_subset_size || *max_subset_size >= 0, ErrorCode::InvalidArgument, "max_subset_size must be >= 0");
  }
};

struct SubsetTest {
  Subset subset;
  double p_value = 0.0;
  bool skipped = false;  // singular design
};

struct IcpResult {
  std::vector<SubsetTest> tested;
  std::vector<Subset> accepted;
  Subset selection;  // intersection of accepted sets; empty when none accepted
};

namespace detail {

struct Moments {
  double mean = 0.0, var = 0.0;
  Index n = 0;
};

inline Moments moments(const std::vector<double>& v) {
  Moments m;
  m.n = static_cast<Index>(v.size());
  for (double x : v) m.mean += x;
  m.mean /= static_cast<double>(m.n);
  for (double x : v) m.var += (x - m.mean) * (x - m.mean);
  m.var /= static_cast<double>(std::max<Index>(m.n - 1, 1));
  return m;
}

inline double two_sided_mean_p(const Moments& a, const Moments& b) {
  const double se2 = a.var / static_cast<double>(a.n) + b.var / static_cast<double>(b.n);
  const double diff = a.mean - b.mean;
  if (se2 <= 0.0) return diff == 0.0 ? 1.0 : 0.0;
  const double z = std::abs(diff) / std::sqrt(se2);
  return 2.0 * boost::math::cdf(boost::math::complement(boost::math::normal_distribution<double>(), z));
}

inline double two_sided_var_p(const Moments& a, const Moments& b) {
  if (a.n < 2 || b.n < 2) return 1.0;
  if (a.var <= 0.0 || b.var <= 0.0) return a.var == b.var ? 1.0 : 0.0;
  const boost::math::fisher_f_distribution<double> f(static_cast<double>(a.n - 1), static_cast<double>(b.n - 1));
  const double ratio = a.var / b.var;
  const double lower = boost::math::cdf(f, ratio);
  const double upper = boost::math::cdf(boost::math::complement(f, ratio));
  return std::min(1.0, 2.0 * std::min(lower, upper));
}

}  // namespace detail

/// Pooled least squares of y on (1, t, x[subset]); each environment's residuals
/// are compared against the residuals of all other environments (mean: z-test,
/// variance: F-test). Returns the Bonferroni-combined p-value over the 2E tests.
inline double invariance_test(const MultiEnvDataset& data, const Subset& subset) {
  for (Index c : subset)
    require(c >= 0 && c < data.d(), ErrorCode::IndexOutOfRange, "column " + std::to_string(c));
  const Index n = data.total_rows();
  const Index p = 2 + static_cast<Index>(subset.size());
  MatrixXd design(n, p);
  VectorXd y(n);
  std::vector<std::size_t> env_of(static_cast<std::size_t>(n));
  Index row = 0;
  for (std::size_t k = 0; k < data.size(); ++k) {
    const EnvData& e = data.env(k);
    for (Index i = 0; i < e.n(); ++i, ++row) {
      design(row, 0) = 1.0;
      design(row, 1) = e.t()(i);
      for (std::size_t j = 0; j < subset.size(); ++j) design(row, 2 + static_cast<Index>(j)) = e.x()(i, subset[j]);
      y(row) = e.y()(i);
      env_of[static_cast<std::size_t>(row)] = k;
    }
  }
  Eigen::ColPivHouseholderQR<MatrixXd> qr(design);
  require(qr.rank() == p, ErrorCode::SingularDesign, "pooled design is rank-deficient");
  const VectorXd resid = y - design * qr.solve(y);

  double min_p = 1.0;
  for (std::size_t k = 0; k < data.size(); ++k) {
    std::vector<double> in, out;
    for (Index i = 0; i < n; ++i) (env_of[static_cast<std::size_t>(i)] == k ? in : out).push_back(resid(i));
    const auto a = detail::moments(in), b = detail::moments(out);
    min_p = std::min({min_p, detail::two_sided_mean_p(a, b), detail::two_sided_var_p(a, b)});
  }
  return std::min(1.0, 2.0 * static_cast<double>(data.size()) * min_p);
}

namespace detail {

inline std::uint64_t binomial(Index n, Index k) {
  if (k < 0 || k > n) return 0;
  long double r = 1;
  for (Index i = 1; i <= k; ++i) r = r * static_cast<long double>(n - k + i) / static_cast<long double>(i);
  return static_cast<std::uint64_t>(std::llround(r));
}

}  // namespace detail

inline Subset intersect_all(const std::vector<Subset>& sets) {
  if (sets.empty()) return {};
  Subset acc = sets.front();
  for (const auto& s : sets) {
    Subset next;
    std::set_intersection(acc.begin(), acc.end(), s.begin(), s.end(), std::back_inserter(next));
    acc = std::move(next);
  }
  return acc;
}

/// Tests every subset up to the size cap, smallest first and lexicographic
/// within a size.
inline IcpResult icp_select(const MultiEnvDataset& data, const IcpConfig& cfg = {}) {
  cfg.validate();
  const Index d = data.d();
  const Index cap = std::min(d, cfg.max_subset_size.value_or(d));
  long double count = 0;
  for (Index k = 0; k <= cap; ++k) count += static_cast<long double>(detail::binomial(d, k));
  require(count <= static_cast<long double>(cfg.budget), ErrorCode::TooManySubsets,
          "would test " + std::to_string(static_cast<double>(count)) + " subsets");

  IcpResult result;
  for (Index k = 0; k <= cap; ++k) {
    Subset s(static_cast<std::size_t>(k));
    for (Index j = 0; j < k; ++j) s[static_cast<std::size_t>(j)] = j;
    while (true) {
      SubsetTest st{s, 0.0, false};
      try {
        st.p_value = invariance_test(data, s);
      } catch (const Error& err) {
        if (err.code() != ErrorCode::SingularDesign) throw;
        st.skipped = true;
      }
      if (!st.skipped && st.p_value >= cfg.alpha) result.accepted.push_back(s);
      result.tested.push_back(std::move(st));
      // next combination
      Index j = k - 1;
      while (j >= 0 && s[static_cast<std::size_t>(j)] == d - k + j) --j;
      if (j < 0) break;
      ++s[static_cast<std::size_t>(j)];
      for (Index q = j + 1; q < k; ++q) s[static_cast<std::size_t>(q)] = s[static_cast<std::size_t>(q - 1)] + 1;
    }
  }
  result.selection = intersect_all(result.accepted);
  return result;
}

}  // namespace nce
