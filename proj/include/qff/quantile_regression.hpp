#pragma once

// Linear quantile regression by check-loss minimization, plus the
// group-LASSO penalized variant used for stacked quantile-factor designs.
//
// The unpenalized solver runs iteratively reweighted least squares on a
// progressively sharpened smoothed check loss (the smoothing radius is
// halved each round), finishing with a polish step that snaps to the best
// interpolating basic solution when that lowers the exact check loss.
// Every accepted step is a descent step on the current smoothed objective.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "qff/common.hpp"
#include "qff/loss.hpp"
#include "qff/stats.hpp"

namespace qff {

struct QrOptions {
  double tol = 1e-8;        // relative objective change that ends a smoothing round
  int max_iter = 500;       // budget of reweighted solves across all rounds
  double gamma_start = 1.0; // first smoothing radius
  double gamma_end = 1e-4;  // final smoothing radius
  bool polish = true;       // snap to an interpolating basic solution when it helps
  std::optional<Eigen::VectorXd> warm_start{};
};

struct QrFit {
  Eigen::VectorXd coefficients;
  double level = 0.5;
  double objective = 0.0;  // attained mean check loss
  int iterations = 0;
  bool converged = false;
};

/// Thrown when the iteration budget runs out; carries the best iterate.
class QrNonConvergence : public NumericError {
 public:
  QrNonConvergence(const std::string& what, QrFit best)
      : NumericError(what), best_fit(std::move(best)) {}
  QrFit best_fit;
};

namespace detail {

inline void check_qr_inputs(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, double tau) {
  require_level(tau, "fit_quantile_regression");
  require(X.rows() == y.size(), "fit_quantile_regression: dimension mismatch");
  require(X.rows() >= X.cols(), "fit_quantile_regression: need at least as many rows as columns");
  require(X.allFinite() && y.allFinite(), "fit_quantile_regression: non-finite input");
  for (Eigen::Index j = 0; j < X.cols(); ++j) {
    require_numeric(X.col(j).cwiseAbs().maxCoeff() > 0.0,
                    "fit_quantile_regression: degenerate design (zero column)");
  }
}

// One weighted least-squares target for the current residuals. Weights are
// psi(r)/r with the curvature capped at 1/gamma inside the smoothing band.
inline Eigen::VectorXd irls_target(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                                   const Eigen::VectorXd& r, double tau, double gamma) {
  const Eigen::Index T = X.rows(), k = X.cols();
  Eigen::VectorXd w(T);
  for (Eigen::Index i = 0; i < T; ++i) {
    const double u = r[i];
    const double asym = u > 0.0 ? tau : (u < 0.0 ? 1.0 - tau : 0.5);
    w[i] = asym / std::max(std::abs(u), gamma);
  }
  Eigen::MatrixXd G = X.transpose() * (w.asDiagonal() * X);
  G.diagonal().array() += 1e-12 * (G.trace() / static_cast<double>(k) + 1e-300);
  return G.ldlt().solve(X.transpose() * (w.asDiagonal() * y));
}

// Damped Newton direction of the smoothed objective: the Hessian only sees
// points inside the smoothing band, so once the active band stabilizes a
// full step lands on the stage optimum. Returns false when the direction is
// unusable (e.g. no points in band).
inline bool newton_direction(const Eigen::MatrixXd& X, const Eigen::VectorXd& r, double tau,
                             double gamma, Eigen::VectorXd& direction) {
  const Eigen::Index T = X.rows(), k = X.cols();
  Eigen::MatrixXd H = Eigen::MatrixXd::Zero(k, k);
  Eigen::VectorXd g = Eigen::VectorXd::Zero(k);
  int in_band = 0;
  for (Eigen::Index i = 0; i < T; ++i) {
    const double u = r[i];
    const double asym = u > 0.0 ? tau : (u < 0.0 ? 1.0 - tau : 0.5);
    const double psi = asym * std::clamp(u / gamma, -1.0, 1.0);
    g.noalias() -= psi * X.row(i).transpose();
    if (std::abs(u) <= gamma) {
      H.noalias() += (asym / gamma) * (X.row(i).transpose() * X.row(i));
      ++in_band;
    }
  }
  if (in_band == 0) return false;
  g /= static_cast<double>(T);
  H /= static_cast<double>(T);
  H.diagonal().array() += 1e-10 * (H.trace() / static_cast<double>(k) + 1e-300);
  direction = H.ldlt().solve(-g);
  return direction.allFinite();
}

}  // namespace detail

inline QrFit fit_quantile_regression(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, double tau,
                                     const QrOptions& opts = {}) {
  detail::check_qr_inputs(X, y, tau);
  const Eigen::Index k = X.cols();

  Eigen::VectorXd beta;
  if (opts.warm_start.has_value()) {
    require(opts.warm_start->size() == k, "fit_quantile_regression: warm start size mismatch");
    beta = *opts.warm_start;
  } else {
    beta = solve_least_squares(X, y, 1e-10 * X.squaredNorm() / static_cast<double>(k));
  }

  const double gamma_end = std::max(opts.gamma_end, 1e-12);
  std::vector<double> schedule;
  for (double g = std::max(opts.gamma_start, gamma_end);; g *= 0.5) {
    schedule.push_back(std::max(g, gamma_end));
    if (g <= gamma_end) break;
  }

  Eigen::VectorXd r = y - X * beta;
  int iterations = 0;
  bool converged = true;
  for (std::size_t stage = 0; stage < schedule.size(); ++stage) {
    const double gamma = schedule[stage];
    const bool final_stage = stage + 1 == schedule.size();
    // Intermediate rounds only warm-start the next sharpening, so they run
    // at moderate precision and a small iteration cap; the final round gets
    // the full tolerance and the remaining budget.
    const double stage_tol = final_stage ? opts.tol : std::max(opts.tol, 1e-6);
    const int stage_cap = final_stage ? opts.max_iter : std::min(opts.max_iter, 30);
    double obj = mean_huber_check_loss(r, tau, gamma);
    bool stage_done = false;

    // Backtracking descent toward a candidate point; returns the objective
    // drop (0 when no improving step exists).
    auto descend_toward = [&](const Eigen::VectorXd& candidate) {
      double step = 1.0;
      Eigen::VectorXd beta_try, r_try;
      for (int ls = 0; ls < 40; ++ls) {
        beta_try = beta + step * (candidate - beta);
        r_try = y - X * beta_try;
        const double obj_try = mean_huber_check_loss(r_try, tau, gamma);
        if (obj_try <= obj) {
          const double drop = obj - obj_try;
          beta.swap(beta_try);
          r.swap(r_try);
          obj = obj_try;
          return drop;
        }
        step *= 0.5;
      }
      return 0.0;
    };

    for (int stage_iters = 0; stage_iters < stage_cap; ++stage_iters) {
      if (iterations >= opts.max_iter) break;
      ++iterations;
      const double threshold = stage_tol * std::max(1.0, std::abs(obj));
      double drop = descend_toward(detail::irls_target(X, y, r, tau, gamma));
      if (final_stage) {
        // Reweighted steps can crawl near the optimum; a Newton step on the
        // in-band Hessian has quadratic local convergence and finishes the
        // stage in a few iterations.
        Eigen::VectorXd direction;
        if (detail::newton_direction(X, r, tau, gamma, direction)) {
          drop += descend_toward(beta + direction);
        }
      }
      if (drop <= threshold) {
        stage_done = true;
        break;
      }
    }
    if (final_stage && !stage_done) converged = false;
  }

  double exact = mean_check_loss(r, tau);

  // Exchange polish: an optimum of the underlying linear program interpolates
  // k observations, and a vertex with no improving single-point exchange is
  // globally optimal. Descending over exchanges from the smallest-residual
  // basis both sharpens the solution and certifies optimality, which covers
  // the rare instances where the smoothed stages crawl.
  bool vertex_optimal = false;
  if (opts.polish && k <= X.rows()) {
    std::vector<Eigen::Index> basis(static_cast<std::size_t>(X.rows()));
    std::iota(basis.begin(), basis.end(), 0);
    std::nth_element(basis.begin(), basis.begin() + k - 1, basis.end(),
                     [&](Eigen::Index a, Eigen::Index b) { return std::abs(r[a]) < std::abs(r[b]); });
    basis.resize(static_cast<std::size_t>(k));

    Eigen::MatrixXd Xb(k, k);
    Eigen::VectorXd yb(k);
    auto solve_basis = [&](const std::vector<Eigen::Index>& rows, Eigen::VectorXd& out) {
      for (Eigen::Index j = 0; j < k; ++j) {
        Xb.row(j) = X.row(rows[static_cast<std::size_t>(j)]);
        yb[j] = y[rows[static_cast<std::size_t>(j)]];
      }
      Eigen::FullPivLU<Eigen::MatrixXd> lu(Xb);
      if (!lu.isInvertible()) return false;
      out = lu.solve(yb);
      return out.allFinite();
    };

    Eigen::VectorXd beta_b;
    if (solve_basis(basis, beta_b)) {
      double exact_b = mean_check_loss(y - X * beta_b, tau);
      const int max_rounds = 4 * static_cast<int>(X.rows());
      for (int round = 0; round < max_rounds; ++round) {
        bool improved = false;
        for (Eigen::Index slot = 0; slot < k && !improved; ++slot) {
          for (Eigen::Index cand = 0; cand < X.rows() && !improved; ++cand) {
            if (std::find(basis.begin(), basis.end(), cand) != basis.end()) continue;
            std::vector<Eigen::Index> trial = basis;
            trial[static_cast<std::size_t>(slot)] = cand;
            Eigen::VectorXd beta_t;
            if (!solve_basis(trial, beta_t)) continue;
            const double exact_t = mean_check_loss(y - X * beta_t, tau);
            if (exact_t < exact_b - 1e-15 * std::max(1.0, exact_b)) {
              basis = std::move(trial);
              beta_b = std::move(beta_t);
              exact_b = exact_t;
              improved = true;
            }
          }
        }
        if (!improved) {
          vertex_optimal = true;
          break;
        }
      }
      if (exact_b <= exact) {
        beta = beta_b;
        exact = exact_b;
      } else {
        vertex_optimal = false;
      }
    }
  }

  QrFit fit;
  fit.coefficients = std::move(beta);
  fit.level = tau;
  fit.objective = exact;
  fit.iterations = iterations;
  fit.converged = converged || vertex_optimal;
  if (!fit.converged) {
    throw QrNonConvergence("fit_quantile_regression: iteration budget exhausted", fit);
  }
  return fit;
}

// ---------------------------------------------------------------------------
// Group LASSO

/// Partition of the coefficient indices into groups, with a penalization
/// flag per group. Penalty weight of group l is d_l (its size).
struct GroupSpec {
  std::vector<std::vector<int>> groups;
  std::vector<bool> penalized;

  std::size_t n_groups() const { return groups.size(); }
  std::size_t group_size(std::size_t g) const { return groups[g].size(); }

  void validate(Eigen::Index k) const {
    require(groups.size() == penalized.size(), "GroupSpec: flag count does not match group count");
    std::vector<int> seen(static_cast<std::size_t>(k), 0);
    for (const auto& g : groups) {
      require(!g.empty(), "GroupSpec: empty group");
      for (int j : g) {
        require(j >= 0 && j < k, "GroupSpec: index out of range");
        ++seen[static_cast<std::size_t>(j)];
      }
    }
    for (int c : seen) require(c == 1, "GroupSpec: groups must partition the coefficient indices");
  }
};

struct GroupLassoOptions {
  double tol = 1e-10;   // relative change of the penalized objective
  int max_iter = 20000;
};

struct GroupLassoFit {
  Eigen::VectorXd coefficients;
  std::vector<int> active_groups;  // groups with Euclidean norm > 1e-8
  double lambda = 0.0;
  double level = 0.5;
  double objective = 0.0;  // attained penalized smoothed objective
  int iterations = 0;
  bool converged = false;
};

/// Default smoothing radius tied to the response scale.
inline double default_huber_gamma(const Eigen::VectorXd& response) {
  return std::max(0.25 * interquartile_range(response) / 1.349, 1e-4);
}

namespace detail {

inline double group_penalty(const Eigen::VectorXd& beta, const GroupSpec& spec, double lambda) {
  double pen = 0.0;
  for (std::size_t g = 0; g < spec.n_groups(); ++g) {
    if (!spec.penalized[g]) continue;
    double ss = 0.0;
    for (int j : spec.groups[g]) ss += beta[j] * beta[j];
    pen += static_cast<double>(spec.group_size(g)) * std::sqrt(ss);
  }
  return lambda * pen;
}

inline Eigen::VectorXd smoothed_loss_grad(const Eigen::MatrixXd& X, const Eigen::VectorXd& r,
                                          double tau, double gamma) {
  Eigen::VectorXd psi(r.size());
  for (Eigen::Index i = 0; i < r.size(); ++i) psi[i] = huber_check_grad(r[i], tau, gamma);
  return -(X.transpose() * psi) / static_cast<double>(X.rows());
}

// Block soft-threshold: v -> v * max(0, 1 - thresh/||v||) per penalized group.
inline void apply_group_prox(Eigen::VectorXd& beta, const GroupSpec& spec, double step_lambda) {
  for (std::size_t g = 0; g < spec.n_groups(); ++g) {
    if (!spec.penalized[g]) continue;
    double ss = 0.0;
    for (int j : spec.groups[g]) ss += beta[j] * beta[j];
    const double norm = std::sqrt(ss);
    const double thresh = step_lambda * static_cast<double>(spec.group_size(g));
    if (norm <= thresh) {
      for (int j : spec.groups[g]) beta[j] = 0.0;
    } else {
      const double scale = 1.0 - thresh / norm;
      for (int j : spec.groups[g]) beta[j] *= scale;
    }
  }
}

}  // namespace detail

/// Minimizes mean smoothed check loss + lambda * sum_l d_l ||beta^(l)||_2 by
/// accelerated proximal gradient with backtracking (monotone FISTA: a
/// momentum step that would raise the objective is replaced by a plain
/// proximal step, so the attained penalized objective is nonincreasing
/// across iterations). Zeroed groups are exactly zero.
inline GroupLassoFit fit_group_lasso_qr(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, double tau,
                                        const GroupSpec& spec, double lambda, double gamma,
                                        const GroupLassoOptions& opts = {}) {
  detail::check_qr_inputs(X, y, tau);
  spec.validate(X.cols());
  require(lambda >= 0.0, "fit_group_lasso_qr: lambda must be nonnegative");
  require(gamma > 0.0, "fit_group_lasso_qr: gamma must be positive");
  const double T = static_cast<double>(X.rows());

  Eigen::VectorXd beta = Eigen::VectorXd::Zero(X.cols());
  double obj = mean_huber_check_loss(y, tau, gamma) + detail::group_penalty(beta, spec, lambda);

  // Proximal step from `at` with backtracking on the majorization; returns
  // the candidate and its penalized objective.
  double step = gamma * T / std::max(X.squaredNorm() * std::max(tau, 1.0 - tau), 1e-300);
  auto prox_step = [&](const Eigen::VectorXd& at, Eigen::VectorXd& out) {
    const double loss_at = mean_huber_check_loss(y - X * at, tau, gamma);
    const Eigen::VectorXd grad = detail::smoothed_loss_grad(X, y - X * at, tau, gamma);
    double loss_out = 0.0;
    for (int bt = 0; bt < 60; ++bt) {
      out = at - step * grad;
      detail::apply_group_prox(out, spec, step * lambda);
      const Eigen::VectorXd diff = out - at;
      loss_out = mean_huber_check_loss(y - X * out, tau, gamma);
      const double quad = loss_at + grad.dot(diff) + diff.squaredNorm() / (2.0 * step);
      if (loss_out <= quad + 1e-15) break;
      step *= 0.5;
    }
    return loss_out + detail::group_penalty(out, spec, lambda);
  };

  Eigen::VectorXd momentum = beta;
  double t_prev = 1.0;
  int iterations = 0;
  int small_drops = 0;
  bool converged = false;
  for (; iterations < opts.max_iter; ++iterations) {
    Eigen::VectorXd candidate;
    double obj_new = prox_step(momentum, candidate);
    if (obj_new > obj) {
      // Momentum overshot: restart from the current iterate.
      obj_new = prox_step(beta, candidate);
      t_prev = 1.0;
    }
    const double drop = obj - obj_new;
    if (drop < 0.0) {
      converged = true;  // stationary at machine precision
      ++iterations;
      break;
    }
    const double t_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t_prev * t_prev));
    momentum = candidate + ((t_prev - 1.0) / t_next) * (candidate - beta);
    t_prev = t_next;
    beta.swap(candidate);
    obj = obj_new;
    // Momentum makes single-step progress ripple, so stop only after the
    // objective change stays small for a few consecutive steps.
    if (drop <= opts.tol * std::max(1.0, std::abs(obj))) {
      if (++small_drops >= 3) {
        converged = true;
        ++iterations;
        break;
      }
    } else {
      small_drops = 0;
    }
    step *= 1.25;  // recover from conservative backtracks
  }

  GroupLassoFit fit;
  fit.coefficients = beta;
  fit.lambda = lambda;
  fit.level = tau;
  fit.objective = obj;
  fit.iterations = iterations;
  fit.converged = converged;
  for (std::size_t g = 0; g < spec.n_groups(); ++g) {
    double ss = 0.0;
    for (int j : spec.groups[g]) ss += beta[j] * beta[j];
    if (std::sqrt(ss) > 1e-8) fit.active_groups.push_back(static_cast<int>(g));
  }
  if (!converged) {
    throw QrNonConvergence("fit_group_lasso_qr: iteration budget exhausted", QrFit{beta, tau, obj, iterations, false});
  }
  return fit;
}

/// Smallest lambda that zeroes every penalized group: computed from the
/// smoothed-loss gradient at the null model (unpenalized coordinates fit,
/// penalized coordinates zero).
inline double group_lasso_lambda_max(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, double tau,
                                     const GroupSpec& spec, double gamma) {
  spec.validate(X.cols());
  std::vector<int> free_idx;
  for (std::size_t g = 0; g < spec.n_groups(); ++g) {
    if (!spec.penalized[g]) {
      for (int j : spec.groups[g]) free_idx.push_back(j);
    }
  }
  Eigen::VectorXd beta = Eigen::VectorXd::Zero(X.cols());
  if (!free_idx.empty()) {
    Eigen::MatrixXd Xf(X.rows(), static_cast<Eigen::Index>(free_idx.size()));
    for (std::size_t j = 0; j < free_idx.size(); ++j) Xf.col(static_cast<Eigen::Index>(j)) = X.col(free_idx[j]);
    QrOptions o;
    o.gamma_start = std::max(gamma, 1e-4);
    o.gamma_end = gamma;
    o.polish = false;
    const QrFit fit = fit_quantile_regression(Xf, y, tau, o);
    for (std::size_t j = 0; j < free_idx.size(); ++j) beta[free_idx[j]] = fit.coefficients[static_cast<Eigen::Index>(j)];
  }
  const Eigen::VectorXd grad = detail::smoothed_loss_grad(X, y - X * beta, tau, gamma);
  double lmax = 0.0;
  for (std::size_t g = 0; g < spec.n_groups(); ++g) {
    if (!spec.penalized[g]) continue;
    double ss = 0.0;
    for (int j : spec.groups[g]) ss += grad[j] * grad[j];
    lmax = std::max(lmax, std::sqrt(ss) / static_cast<double>(spec.group_size(g)));
  }
  return lmax;
}

/// 20 logarithmically spaced penalties spanning [1e-4, 1e1] * lambda_max.
inline std::vector<double> default_lambda_grid(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                                               double tau, const GroupSpec& spec, double gamma,
                                               int size = 20) {
  require(size >= 2, "default_lambda_grid: need at least two points");
  const double lmax = std::max(group_lasso_lambda_max(X, y, tau, spec, gamma), 1e-300);
  const double lo = std::log(1e-4 * lmax), hi = std::log(1e1 * lmax);
  std::vector<double> grid(static_cast<std::size_t>(size));
  for (int i = 0; i < size; ++i) {
    grid[static_cast<std::size_t>(i)] = std::exp(lo + (hi - lo) * static_cast<double>(i) / (size - 1));
  }
  return grid;
}

/// Chronological holdout selection: fit on the earliest (1 - holdout) rows,
/// score mean check loss on the tail, pick the minimizer; ties go to the
/// larger (sparser) lambda.
inline double select_lambda(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, double tau,
                            const GroupSpec& spec, const std::vector<double>& lambda_grid,
                            double holdout_fraction, double gamma,
                            const GroupLassoOptions& opts = {}) {
  require(!lambda_grid.empty(), "select_lambda: empty grid");
  require(holdout_fraction > 0.0 && holdout_fraction <= 0.5,
          "select_lambda: holdout fraction must be in (0, 0.5]");
  const Eigen::Index T = X.rows();
  const Eigen::Index n_hold = std::max<Eigen::Index>(1, static_cast<Eigen::Index>(std::floor(holdout_fraction * static_cast<double>(T))));
  const Eigen::Index n_train = T - n_hold;
  require(n_train >= X.cols(), "select_lambda: training split smaller than coefficient count");

  const Eigen::MatrixXd Xtr = X.topRows(n_train);
  const Eigen::VectorXd ytr = y.head(n_train);
  const Eigen::MatrixXd Xho = X.bottomRows(n_hold);
  const Eigen::VectorXd yho = y.tail(n_hold);

  std::vector<double> sorted = lambda_grid;
  std::sort(sorted.begin(), sorted.end());

  bool any_ok = false;
  double best_lambda = 0.0;
  double best_loss = std::numeric_limits<double>::infinity();
  for (double lambda : sorted) {
    try {
      const GroupLassoFit fit = fit_group_lasso_qr(Xtr, ytr, tau, spec, lambda, gamma, opts);
      const double loss = mean_check_loss(yho - Xho * fit.coefficients, tau);
      if (!any_ok || loss <= best_loss) {
        best_loss = loss;
        best_lambda = lambda;
        any_ok = true;
      }
    } catch (const NumericError&) {
      continue;
    }
  }
  require_numeric(any_ok, "select_lambda: every grid point failed");
  return best_lambda;
}

}  // namespace qff
