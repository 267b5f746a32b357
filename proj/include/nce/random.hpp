#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

#include <Eigen/Dense>

namespace nce {

using Rng = std::mt19937_64;

namespace detail {
constexpr std::uint64_t splitmix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}
}  // namespace detail

/// Counter-based seed derivation: the same (base, tags...) always yields the
/// same child seed, and distinct tag paths yield unrelated streams.
inline std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> tags) {
  std::uint64_t s = detail::splitmix64(base);
  for (std::uint64_t tag : tags) s = detail::splitmix64(s ^ detail::splitmix64(tag + 0x632be59bd9b4e019ULL));
  return s;
}

inline Eigen::MatrixXd normal_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols, double sd = 1.0) {
  std::normal_distribution<double> dist(0.0, sd);
  Eigen::MatrixXd m(rows, cols);
  // row-major draw order so that the stream layout matches "one row per unit"
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = dist(rng);
  return m;
}

inline Eigen::VectorXd normal_vector(Rng& rng, Eigen::Index n, double sd = 1.0) {
  std::normal_distribution<double> dist(0.0, sd);
  Eigen::VectorXd v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = dist(rng);
  return v;
}

inline Eigen::VectorXd uniform_vector(Rng& rng, Eigen::Index n, double lo, double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Eigen::VectorXd v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = dist(rng);
  return v;
}

}  // namespace nce
