#pragma once

// Shared numerical utilities: moments, sample quantiles, least squares and
// the adjusted R^2 used to score factor recovery.

#include <algorithm>
#include <cmath>
#include <vector>

#include <Eigen/Dense>

#include "qff/common.hpp"

namespace qff {

inline double mean(const Eigen::VectorXd& v) {
  require(v.size() > 0, "mean: empty vector");
  return v.mean();
}

inline double sample_variance(const Eigen::VectorXd& v) {
  require(v.size() > 1, "sample_variance: need at least 2 values");
  const double m = v.mean();
  return (v.array() - m).square().sum() / static_cast<double>(v.size() - 1);
}

inline double sample_sd(const Eigen::VectorXd& v) { return std::sqrt(sample_variance(v)); }

/// Linear-interpolation sample quantile (the common "type 7" definition).
inline double sample_quantile(std::vector<double> v, double p) {
  require(!v.empty(), "sample_quantile: empty sample");
  require(p >= 0.0 && p <= 1.0, "sample_quantile: p must be in [0,1]");
  std::sort(v.begin(), v.end());
  const double h = p * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = std::min(lo + 1, v.size() - 1);
  const double frac = h - static_cast<double>(lo);
  return v[lo] + frac * (v[hi] - v[lo]);
}

inline double sample_quantile(const Eigen::VectorXd& v, double p) {
  return sample_quantile(std::vector<double>(v.data(), v.data() + v.size()), p);
}

inline double interquartile_range(const Eigen::VectorXd& v) {
  std::vector<double> s(v.data(), v.data() + v.size());
  return sample_quantile(s, 0.75) - sample_quantile(s, 0.25);
}

/// Least squares with an optional ridge guard. Throws NumericError when the
/// design is rank deficient and no ridge is requested.
inline Eigen::VectorXd solve_least_squares(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                                           double ridge = 0.0) {
  require(X.rows() == y.size(), "solve_least_squares: dimension mismatch");
  if (ridge > 0.0) {
    Eigen::MatrixXd G = X.transpose() * X;
    G.diagonal().array() += ridge;
    return G.ldlt().solve(X.transpose() * y);
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(X);
  require_numeric(qr.rank() == X.cols(), "solve_least_squares: collinear design");
  return qr.solve(y);
}

/// Adjusted R^2 of regressing `response` on `design` plus an intercept:
/// 1 - (RSS/(T-k-1)) / (TSS/(T-1)).
inline double adjusted_r_squared(const Eigen::VectorXd& response, const Eigen::MatrixXd& design) {
  const Eigen::Index T = response.size();
  const Eigen::Index k = design.cols();
  require(design.rows() == T, "adjusted_r_squared: dimension mismatch");
  require(T > k + 1, "adjusted_r_squared: need T > k + 1");

  const double ymean = response.mean();
  const double tss = (response.array() - ymean).square().sum();
  require_numeric(tss > 1e-300, "adjusted_r_squared: zero-variance response");

  Eigen::MatrixXd X(T, k + 1);
  X.col(0).setOnes();
  X.rightCols(k) = design;
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(X);
  require_numeric(qr.rank() == k + 1, "adjusted_r_squared: rank-deficient design");
  const Eigen::VectorXd beta = qr.solve(response);
  const double rss = (response - X * beta).squaredNorm();

  const double dof_res = static_cast<double>(T - k - 1);
  const double dof_tot = static_cast<double>(T - 1);
  return 1.0 - (rss / dof_res) / (tss / dof_tot);
}

}  // namespace qff
