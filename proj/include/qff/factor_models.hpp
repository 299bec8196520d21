#pragma once

// Mean-factor extraction by principal components, quantile-factor
// extraction by alternating check-loss minimization, and the information
// criteria for choosing factor counts.
//
// Normalization convention: factors satisfy F'F/T = I_r and columns are
// ordered by decreasing explanatory contribution. The common component
// loadings * factors' is what identifies a fit; individual columns are
// only determined up to rotation, so downstream consumers (regressions,
// R^2 scores) always use the full factor block.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "qff/common.hpp"
#include "qff/loss.hpp"
#include "qff/panel.hpp"
#include "qff/quantile_regression.hpp"

namespace qff {

struct FactorDecomposition {
  Eigen::MatrixXd factors;      // T x r
  Eigen::MatrixXd loadings;     // n x r
  std::optional<double> level;  // quantile level; empty = mean factors
  double objective = 0.0;       // attained V (mean) or M (check loss) value
  int iterations = 0;
  bool converged = true;
  std::vector<double> objective_trace;  // exact objective after each sweep

  Eigen::Index rank() const { return factors.cols(); }

  /// loadings * factors', the reproducible part of a fit.
  Eigen::MatrixXd common_component() const { return loadings * factors.transpose(); }
};

namespace detail {

// Rescales (F, Lambda) so that F'F/T = I on the non-degenerate block and
// orders columns by decreasing loading norm. The common component is
// unchanged; collapsed directions are zeroed.
inline void normalize_decomposition(Eigen::MatrixXd& factors, Eigen::MatrixXd& loadings) {
  const double T = static_cast<double>(factors.rows());
  const Eigen::Index r = factors.cols();
  Eigen::MatrixXd M = factors.transpose() * factors / T;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(M);
  require_numeric(es.info() == Eigen::Success, "factor normalization failed");
  const Eigen::VectorXd ev = es.eigenvalues();
  const double tiny = 1e-14 * std::max(ev.cwiseAbs().maxCoeff(), 1e-300);
  Eigen::VectorXd inv_sqrt(r), sqrt_ev(r);
  for (Eigen::Index j = 0; j < r; ++j) {
    if (ev[j] > tiny) {
      inv_sqrt[j] = 1.0 / std::sqrt(ev[j]);
      sqrt_ev[j] = std::sqrt(ev[j]);
    } else {
      inv_sqrt[j] = 0.0;
      sqrt_ev[j] = 0.0;
    }
  }
  const Eigen::MatrixXd A = es.eigenvectors() * inv_sqrt.asDiagonal() * es.eigenvectors().transpose();
  const Eigen::MatrixXd B = es.eigenvectors() * sqrt_ev.asDiagonal() * es.eigenvectors().transpose();
  factors = factors * A;
  loadings = loadings * B;

  std::vector<Eigen::Index> order(static_cast<std::size_t>(r));
  std::iota(order.begin(), order.end(), 0);
  Eigen::VectorXd norms = loadings.colwise().norm();
  std::stable_sort(order.begin(), order.end(),
                   [&](Eigen::Index a, Eigen::Index b) { return norms[a] > norms[b]; });
  Eigen::MatrixXd fs(factors.rows(), r), ls(loadings.rows(), r);
  for (Eigen::Index j = 0; j < r; ++j) {
    fs.col(j) = factors.col(order[static_cast<std::size_t>(j)]);
    ls.col(j) = loadings.col(order[static_cast<std::size_t>(j)]);
  }
  factors.swap(fs);
  loadings.swap(ls);
}

}  // namespace detail

/// Principal-components factor estimation. The loadings are sqrt(n) times
/// the top-r eigenvectors of X X' and the factors are X' Lambda / n; the
/// result is then rescaled to the F'F/T = I normalization (the common
/// component is unaffected). The panel is used as given, so pass a
/// row-centered panel for the usual mean-factor model.
inline FactorDecomposition fit_pca_factors(const Panel& panel, int r) {
  require_data(panel.complete(), "fit_pca_factors: panel has missing entries");
  require(panel.values.allFinite(), "fit_pca_factors: non-finite entries");
  const Eigen::Index n = panel.n(), T = panel.T();
  require(r >= 1 && r <= std::min(n, T), "fit_pca_factors: r out of range");

  const Eigen::MatrixXd& X = panel.values;
  Eigen::MatrixXd S = X * X.transpose();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(S);
  require_numeric(es.info() == Eigen::Success, "fit_pca_factors: eigendecomposition failed");

  // Eigenvalues come back ascending; take the top r in descending order.
  Eigen::MatrixXd loadings(n, r);
  for (int j = 0; j < r; ++j) loadings.col(j) = es.eigenvectors().col(n - 1 - j);
  loadings *= std::sqrt(static_cast<double>(n));
  Eigen::MatrixXd factors = X.transpose() * loadings / static_cast<double>(n);

  detail::normalize_decomposition(factors, loadings);

  FactorDecomposition out;
  out.objective = (X - loadings * factors.transpose()).squaredNorm() / static_cast<double>(n * T);
  out.factors = std::move(factors);
  out.loadings = std::move(loadings);
  out.level = std::nullopt;
  out.iterations = 1;
  out.converged = true;
  return out;
}

struct QfmOptions {
  int max_sweeps = 100;
  double tol = 1e-6;        // relative objective change across sweeps
  double inner_tol = 1e-6;  // row/column quantile regression tolerance
  double final_tol = 1e-8;  // tolerance of the finishing sweep
  double warm_gamma = 0.0625;  // smoothing start for warm-started inner fits
  std::optional<Eigen::MatrixXd> factor_init{};   // T x r warm start
  std::optional<Eigen::MatrixXd> loading_init{};  // n x r warm start
};

namespace detail {

// Exact mean check loss of the current decomposition.
inline double qfm_objective(const Eigen::MatrixXd& X, const Eigen::MatrixXd& loadings,
                            const Eigen::MatrixXd& factors, double tau) {
  const Eigen::MatrixXd R = X - loadings * factors.transpose();
  double s = 0.0;
  for (Eigen::Index t = 0; t < R.cols(); ++t) {
    for (Eigen::Index i = 0; i < R.rows(); ++i) {
      const double u = R(i, t);
      s += u * (tau - (u < 0.0 ? 1.0 : 0.0));
    }
  }
  return s / static_cast<double>(R.size());
}

// One alternating half-step: refit every row of `coef` (k x r) by quantile
// regression of the corresponding slice of X on `design`. Each row update is
// kept only if it does not increase that row's exact check loss, so the
// overall objective never increases.
inline void qfm_half_step(const Eigen::MatrixXd& design, const Eigen::MatrixXd& X_slices,
                          Eigen::MatrixXd& coef, double tau, double inner_tol, double warm_gamma,
                          bool warm) {
  QrOptions opts;
  opts.tol = inner_tol;
  opts.max_iter = 300;
  opts.polish = false;  // the per-row descent guard provides the correctness
  if (warm) opts.gamma_start = warm_gamma;
  for (Eigen::Index i = 0; i < coef.rows(); ++i) {
    const Eigen::VectorXd y = X_slices.row(i).transpose();
    const Eigen::VectorXd old = coef.row(i).transpose();
    opts.warm_start = old;
    Eigen::VectorXd candidate;
    try {
      candidate = fit_quantile_regression(design, y, tau, opts).coefficients;
    } catch (const QrNonConvergence& e) {
      candidate = e.best_fit.coefficients;
    }
    const double loss_old = mean_check_loss(y - design * old, tau);
    const double loss_new = mean_check_loss(y - design * candidate, tau);
    if (loss_new <= loss_old) coef.row(i) = candidate.transpose();
  }
}

}  // namespace detail

/// Quantile factor estimation at level tau by alternating quantile
/// regressions: given F fit each row's loading, given Lambda fit each
/// column's factor. Initialized from the PCA factors of the row-centered
/// panel; the panel itself is NOT centered so the loadings can absorb
/// location shifts. Returns the best iterate flagged unconverged when the
/// sweep budget runs out.
inline FactorDecomposition fit_quantile_factors(const Panel& panel, double tau, int r,
                                                const QfmOptions& opts = {}) {
  require_level(tau, "fit_quantile_factors");
  require_data(panel.complete(), "fit_quantile_factors: panel has missing entries");
  const Eigen::Index n = panel.n(), T = panel.T();
  require(r >= 1 && r <= std::min(n, T), "fit_quantile_factors: r out of range");

  const Eigen::MatrixXd& X = panel.values;

  Eigen::MatrixXd factors;
  if (opts.factor_init.has_value()) {
    require(opts.factor_init->rows() == T && opts.factor_init->cols() == r,
            "fit_quantile_factors: factor_init has wrong shape");
    factors = *opts.factor_init;
  } else {
    factors = fit_pca_factors(center_rows(panel).first, r).factors;
  }
  Eigen::MatrixXd loadings;
  if (opts.loading_init.has_value()) {
    require(opts.loading_init->rows() == n && opts.loading_init->cols() == r,
            "fit_quantile_factors: loading_init has wrong shape");
    loadings = *opts.loading_init;
  } else {
    loadings = Eigen::MatrixXd::Zero(n, r);
  }

  double obj = detail::qfm_objective(X, loadings, factors, tau);
  std::vector<double> trace = {obj};
  int sweeps = 0;
  bool converged = false;
  for (; sweeps < opts.max_sweeps; ++sweeps) {
    const bool warm = sweeps > 0 || opts.loading_init.has_value();
    // Loadings given factors: row i of X regressed on the factor block.
    detail::qfm_half_step(factors, X, loadings, tau, opts.inner_tol, opts.warm_gamma, warm);
    // Factors given loadings: column t of X regressed on the loading block.
    Eigen::MatrixXd Xt = X.transpose();
    detail::qfm_half_step(loadings, Xt, factors, tau, opts.inner_tol, opts.warm_gamma, warm);

    const double obj_new = detail::qfm_objective(X, loadings, factors, tau);
    trace.push_back(obj_new);
    const double drop = obj - obj_new;
    obj = std::min(obj, obj_new);
    if (drop <= opts.tol * std::max(1.0, std::abs(obj)) && sweeps > 0) {
      converged = true;
      ++sweeps;
      break;
    }
  }

  // Finishing sweep at full tolerance.
  detail::qfm_half_step(factors, X, loadings, tau, opts.final_tol, opts.warm_gamma, true);
  {
    Eigen::MatrixXd Xt = X.transpose();
    detail::qfm_half_step(loadings, Xt, factors, tau, opts.final_tol, opts.warm_gamma, true);
  }
  trace.push_back(detail::qfm_objective(X, loadings, factors, tau));

  detail::normalize_decomposition(factors, loadings);

  FactorDecomposition out;
  out.objective = detail::qfm_objective(X, loadings, factors, tau);
  out.factors = std::move(factors);
  out.loadings = std::move(loadings);
  out.level = tau;
  out.iterations = sweeps;
  out.converged = converged;
  out.objective_trace = std::move(trace);
  return out;
}

// ---------------------------------------------------------------------------
// Information criteria for the factor count

/// Penalty g(n,T) = ((n+T)/(nT)) * ln(nT/(n+T)).
inline double ic_penalty(Eigen::Index n, Eigen::Index T) {
  const double nd = static_cast<double>(n), Td = static_cast<double>(T);
  return (nd + Td) / (nd * Td) * std::log(nd * Td / (nd + Td));
}

struct IcCurve {
  std::vector<int> r_values;
  std::vector<double> ic_values;
  int chosen_r = 0;  // argmin; ties toward smaller r
};

namespace detail {

inline IcCurve ic_from_losses(const std::vector<double>& losses, Eigen::Index n, Eigen::Index T) {
  IcCurve curve;
  const double pen = ic_penalty(n, T);
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < losses.size(); ++i) {
    const int r = static_cast<int>(i) + 1;
    const double ic = std::log(std::max(losses[i], 1e-300)) + r * pen;
    curve.r_values.push_back(r);
    curve.ic_values.push_back(ic);
    if (ic < best) {
      best = ic;
      curve.chosen_r = r;
    }
  }
  return curve;
}

}  // namespace detail

/// Bai-Ng style criterion over mean-factor fits: IC(r) = ln(V_r) + r g(n,T)
/// with V_r the mean squared residual at rank r. Pass a centered panel.
inline IcCurve select_r_bai_ng(const Panel& panel, int r_max) {
  require_data(panel.complete(), "select_r_bai_ng: panel has missing entries");
  const Eigen::Index n = panel.n(), T = panel.T();
  require(r_max >= 1 && r_max <= std::min(n, T) / 2, "select_r_bai_ng: r_max out of range");

  // V_r follows from one eigendecomposition: the rank-r residual equals the
  // total sum of squares minus the top-r eigenvalues of XX'.
  const Eigen::MatrixXd& X = panel.values;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(X * X.transpose());
  require_numeric(es.info() == Eigen::Success, "select_r_bai_ng: eigendecomposition failed");
  const double total = X.squaredNorm();
  const double denom = static_cast<double>(n * T);
  std::vector<double> losses;
  double captured = 0.0;
  for (int r = 1; r <= r_max; ++r) {
    captured += std::max(es.eigenvalues()[n - r], 0.0);
    losses.push_back(std::max(total - captured, 0.0) / denom);
  }
  return detail::ic_from_losses(losses, n, T);
}

/// Same criterion with the attained quantile-factor check loss in place of
/// the squared-error loss.
inline IcCurve select_r_quantile(const Panel& panel, double tau, int r_max,
                                 const QfmOptions& opts = {}) {
  require_level(tau, "select_r_quantile");
  require_data(panel.complete(), "select_r_quantile: panel has missing entries");
  const Eigen::Index n = panel.n(), T = panel.T();
  require(r_max >= 1 && r_max <= std::min(n, T) / 2, "select_r_quantile: r_max out of range");
  std::vector<double> losses;
  for (int r = 1; r <= r_max; ++r) {
    losses.push_back(fit_quantile_factors(panel, tau, r, opts).objective);
  }
  return detail::ic_from_losses(losses, n, T);
}

}  // namespace qff
