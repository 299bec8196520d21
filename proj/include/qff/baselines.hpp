#pragma once

// Comparison forecasters: the latest-observation carry-forward, AR with
// AIC order selection, ARIMA with KPSS-chosen differencing, and the
// nearest-stations regression.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include <Eigen/Dense>

#include "qff/common.hpp"
#include "qff/panel.hpp"
#include "qff/stats.hpp"

namespace qff {

/// Carry-forward forecast: the latest observation, for any horizon.
inline double forecast_naive(const SeriesWindow& y, int h) {
  require(h >= 1, "forecast_naive: horizon must be >= 1");
  require_data(y.values.size() > 0, "forecast_naive: empty series");
  return y.values[y.values.size() - 1];
}

struct ArModel {
  int order = 0;
  double intercept = 0.0;
  Eigen::VectorXd coefficients;  // phi_1..phi_p
  double noise_variance = 0.0;
  double aic = 0.0;
};

/// Conditional least squares AR(p) fit for p = 1..p_max on a common
/// effective sample (conditioning on p_max initial values), order chosen by
/// AIC = T_eff ln(RSS/T_eff) + 2(p+1).
inline ArModel fit_ar_aic(const SeriesWindow& y, int p_max = 6) {
  require(p_max >= 1, "fit_ar_aic: p_max must be >= 1");
  const Eigen::Index T = y.values.size();
  require(T > p_max + 2, "fit_ar_aic: series too short");
  const double sd = sample_sd(y.values);
  require_numeric(sd > 1e-12 * (1.0 + std::abs(y.values.mean())), "fit_ar_aic: near-constant series");

  const Eigen::Index T_eff = T - p_max;
  ArModel best;
  double best_aic = std::numeric_limits<double>::infinity();
  bool any = false;
  for (int p = 1; p <= p_max; ++p) {
    Eigen::MatrixXd X(T_eff, p + 1);
    Eigen::VectorXd target(T_eff);
    for (Eigen::Index t = 0; t < T_eff; ++t) {
      const Eigen::Index row = p_max + t;
      X(t, 0) = 1.0;
      for (int j = 1; j <= p; ++j) X(t, j) = y.values[row - j];
      target[t] = y.values[row];
    }
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(X);
    if (qr.rank() < p + 1) continue;
    const Eigen::VectorXd beta = qr.solve(target);
    const double rss = (target - X * beta).squaredNorm();
    const double aic = static_cast<double>(T_eff) * std::log(std::max(rss, 1e-300) / static_cast<double>(T_eff)) +
                       2.0 * (p + 1);
    if (aic < best_aic) {
      best_aic = aic;
      best.order = p;
      best.intercept = beta[0];
      best.coefficients = beta.tail(p);
      best.noise_variance = rss / std::max<double>(1.0, static_cast<double>(T_eff - p - 1));
      best.aic = aic;
      any = true;
    }
  }
  require_numeric(any, "fit_ar_aic: all candidate orders failed");
  return best;
}

/// Recursive h-step forecast: each one-step forecast feeds the next.
inline double forecast_ar(const ArModel& model, const SeriesWindow& y, int h) {
  require(h >= 1, "forecast_ar: horizon must be >= 1");
  const Eigen::Index T = y.values.size();
  require(T >= model.order, "forecast_ar: insufficient history");
  std::vector<double> buf(y.values.data(), y.values.data() + T);
  for (int step = 0; step < h; ++step) {
    double next = model.intercept;
    for (int j = 1; j <= model.order; ++j) next += model.coefficients[j - 1] * buf[buf.size() - j];
    buf.push_back(next);
  }
  return buf.back();
}

// ---------------------------------------------------------------------------
// KPSS stationarity test

/// Level-stationarity KPSS statistic with Bartlett-kernel long-run variance
/// at lag floor(4 (T/100)^{1/4}). Exactly constant series return 0.
inline double kpss_statistic(const SeriesWindow& y) {
  const Eigen::Index T = y.values.size();
  require(T >= 2, "kpss_statistic: series too short");
  const Eigen::VectorXd e = y.values.array() - y.values.mean();

  double s2_short = e.squaredNorm();
  if (s2_short <= 1e-300 * static_cast<double>(T)) return 0.0;

  double cumulative = 0.0, num = 0.0;
  for (Eigen::Index t = 0; t < T; ++t) {
    cumulative += e[t];
    num += cumulative * cumulative;
  }
  num /= static_cast<double>(T) * static_cast<double>(T);

  const int lag = static_cast<int>(std::floor(4.0 * std::pow(static_cast<double>(T) / 100.0, 0.25)));
  double lrv = s2_short;
  for (int s = 1; s <= lag; ++s) {
    double acov = 0.0;
    for (Eigen::Index t = s; t < T; ++t) acov += e[t] * e[t - s];
    lrv += 2.0 * (1.0 - static_cast<double>(s) / (lag + 1.0)) * acov;
  }
  lrv /= static_cast<double>(T);
  if (lrv <= 0.0) return 0.0;
  return num / lrv;
}

/// Differencing order from the KPSS test at the 5% critical value 0.463.
inline int kpss_select_d(const SeriesWindow& y) {
  require(y.values.size() >= 20, "kpss_select_d: need at least 20 observations");
  return kpss_statistic(y) > 0.463 ? 1 : 0;
}

// ---------------------------------------------------------------------------
// ARIMA by conditional sum of squares

struct ArimaModel {
  int p = 0, d = 0, q = 0;
  double intercept = 0.0;
  Eigen::VectorXd ar_coefficients;
  Eigen::VectorXd ma_coefficients;
  double noise_variance = 0.0;
  double aic = 0.0;
  int css_start = 1;  // residual recursion conditioning used at fit time
};

namespace detail {

// Residual recursion conditioning on `start` initial values; earlier
// residuals are taken as zero.
inline double arma_css(const Eigen::VectorXd& z, double c, const Eigen::VectorXd& phi,
                       const Eigen::VectorXd& theta, Eigen::Index start) {
  const Eigen::Index T = z.size();
  const Eigen::Index q = theta.size();
  std::vector<double> eps(static_cast<std::size_t>(T), 0.0);
  double rss = 0.0;
  for (Eigen::Index t = start; t < T; ++t) {
    double pred = c;
    for (Eigen::Index j = 0; j < phi.size(); ++j) pred += phi[j] * z[t - 1 - j];
    for (Eigen::Index j = 0; j < q; ++j) {
      if (t - 1 - j >= 0) pred += theta[j] * eps[static_cast<std::size_t>(t - 1 - j)];
    }
    const double e = z[t] - pred;
    eps[static_cast<std::size_t>(t)] = e;
    rss += e * e;
  }
  return rss;
}

// Nelder-Mead over a small parameter vector; good enough for CSS surfaces.
inline Eigen::VectorXd nelder_mead(const std::function<double(const Eigen::VectorXd&)>& f,
                                   const Eigen::VectorXd& x0, int max_eval) {
  const int n = static_cast<int>(x0.size());
  std::vector<Eigen::VectorXd> xs(static_cast<std::size_t>(n + 1), x0);
  std::vector<double> fs(static_cast<std::size_t>(n + 1));
  for (int i = 0; i < n; ++i) xs[static_cast<std::size_t>(i + 1)][i] += std::max(0.1, 0.1 * std::abs(x0[i]));
  for (std::size_t i = 0; i < xs.size(); ++i) fs[i] = f(xs[i]);
  int evals = n + 1;

  auto order = [&]() {
    for (std::size_t i = 1; i < xs.size(); ++i) {
      auto xi = xs[i];
      auto fi = fs[i];
      std::size_t j = i;
      while (j > 0 && fs[j - 1] > fi) {
        xs[j] = xs[j - 1];
        fs[j] = fs[j - 1];
        --j;
      }
      xs[j] = xi;
      fs[j] = fi;
    }
  };
  order();

  while (evals < max_eval) {
    if (std::abs(fs.back() - fs.front()) <= 1e-10 * (1.0 + std::abs(fs.front()))) break;
    Eigen::VectorXd centroid = Eigen::VectorXd::Zero(n);
    for (int i = 0; i < n; ++i) centroid += xs[static_cast<std::size_t>(i)];
    centroid /= static_cast<double>(n);

    const Eigen::VectorXd xr = centroid + (centroid - xs.back());
    const double fr = f(xr);
    ++evals;
    if (fr < fs.front()) {
      const Eigen::VectorXd xe = centroid + 2.0 * (centroid - xs.back());
      const double fe = f(xe);
      ++evals;
      xs.back() = fe < fr ? xe : xr;
      fs.back() = std::min(fe, fr);
    } else if (fr < fs[static_cast<std::size_t>(n - 1)]) {
      xs.back() = xr;
      fs.back() = fr;
    } else {
      const Eigen::VectorXd xc = centroid + 0.5 * (xs.back() - centroid);
      const double fc = f(xc);
      ++evals;
      if (fc < fs.back()) {
        xs.back() = xc;
        fs.back() = fc;
      } else {
        for (std::size_t i = 1; i < xs.size(); ++i) {
          xs[i] = xs.front() + 0.5 * (xs[i] - xs.front());
          fs[i] = f(xs[i]);
          ++evals;
        }
      }
    }
    order();
  }
  return xs.front();
}

inline Eigen::VectorXd difference(const Eigen::VectorXd& y) {
  Eigen::VectorXd z(y.size() - 1);
  for (Eigen::Index t = 1; t < y.size(); ++t) z[t - 1] = y[t] - y[t - 1];
  return z;
}

// Eigenvalues of the companion matrix of a lag recursion
// x_t = c_1 x_{t-1} + ... + c_m x_{t-m}; all inside the unit circle means
// the AR part is stationary / the MA part (with flipped signs) invertible.
inline Eigen::VectorXcd recursion_eigenvalues(const Eigen::VectorXd& coefs) {
  const Eigen::Index m = coefs.size();
  if (m == 0) return Eigen::VectorXcd(0);
  Eigen::MatrixXd companion = Eigen::MatrixXd::Zero(m, m);
  companion.row(0) = coefs.transpose();
  for (Eigen::Index j = 1; j < m; ++j) companion(j, j - 1) = 1.0;
  return companion.eigenvalues();
}

// Valid ARMA parameter region: stationary AR, invertible MA, and no nearly
// common AR/MA roots (redundant parameterizations let the conditional sum of
// squares reward spurious structure).
inline bool arma_region_ok(const Eigen::VectorXd& phi, const Eigen::VectorXd& theta) {
  const Eigen::VectorXcd ar_roots = recursion_eigenvalues(phi);
  const Eigen::VectorXcd ma_roots = recursion_eigenvalues(-theta);
  if (ar_roots.size() > 0 && ar_roots.cwiseAbs().maxCoeff() >= 0.9999) return false;
  if (ma_roots.size() > 0 && ma_roots.cwiseAbs().maxCoeff() >= 0.9999) return false;
  for (Eigen::Index a = 0; a < ar_roots.size(); ++a) {
    for (Eigen::Index b = 0; b < ma_roots.size(); ++b) {
      if (std::abs(ar_roots[a] - ma_roots[b]) < 0.05) return false;
    }
  }
  return true;
}

}  // namespace detail

/// ARIMA(p,d,q) fit: d from the KPSS test, then a conditional-sum-of-squares
/// search over (p,q) up to the given bounds with AIC selection. Pure AR
/// candidates are solved in closed form; mixed models by derivative-free
/// minimization started from the AR solution.
inline ArimaModel fit_arima(const SeriesWindow& y, int p_max = 6, int q_max = 6) {
  require(p_max >= 0 && q_max >= 0, "fit_arima: negative order bound");
  const int d = kpss_select_d(y);
  Eigen::VectorXd z = d == 1 ? detail::difference(y.values) : y.values;
  const Eigen::Index Tz = z.size();
  const Eigen::Index start = std::max(p_max, 1);
  require(Tz > start + std::max(q_max, 2) + 2, "fit_arima: series too short after differencing");
  const Eigen::Index T_eff = Tz - start;

  ArimaModel best;
  double best_aic = std::numeric_limits<double>::infinity();
  bool any = false;
  for (int p = 0; p <= p_max; ++p) {
    // Closed-form conditional least squares for the pure AR part.
    Eigen::MatrixXd X(T_eff, p + 1);
    Eigen::VectorXd target(T_eff);
    for (Eigen::Index t = 0; t < T_eff; ++t) {
      const Eigen::Index row = start + t;
      X(t, 0) = 1.0;
      for (int j = 1; j <= p; ++j) X(t, j) = z[row - j];
      target[t] = z[row];
    }
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(X);
    if (qr.rank() < p + 1) continue;
    const Eigen::VectorXd ar_beta = qr.solve(target);

    for (int q = 0; q <= q_max; ++q) {
      double rss;
      double c;
      Eigen::VectorXd phi(p), theta(q);
      if (q == 0) {
        c = ar_beta[0];
        phi = ar_beta.tail(p);
        rss = (target - X * ar_beta).squaredNorm();
      } else {
        // Search the stationary/invertible region only: unconstrained CSS
        // can drive the conditional sum of squares down with noninvertible
        // moving-average roots.
        auto objective = [&](const Eigen::VectorXd& x) {
          if (!detail::arma_region_ok(x.segment(1, p), x.tail(q))) return 1e300;
          return detail::arma_css(z, x[0], x.segment(1, p), x.tail(q), start);
        };
        Eigen::VectorXd x0(1 + p + q);
        x0.setZero();
        x0[0] = ar_beta[0];
        for (int j = 0; j < p; ++j) x0[1 + j] = ar_beta[1 + j];
        for (int guard = 0; guard < 64 && objective(x0) >= 1e300; ++guard) {
          x0.segment(1, p) *= 0.9;  // pull an explosive AR start inside
        }
        if (objective(x0) >= 1e300) continue;
        const Eigen::VectorXd sol = detail::nelder_mead(objective, x0, 500 * (1 + p + q));
        c = sol[0];
        phi = sol.segment(1, p);
        theta = sol.tail(q);
        rss = objective(sol);
      }
      if (!std::isfinite(rss)) continue;
      const double aic = static_cast<double>(T_eff) *
                             std::log(std::max(rss, 1e-300) / static_cast<double>(T_eff)) +
                         2.0 * (p + q + 1);
      if (aic < best_aic) {
        best_aic = aic;
        best.p = p;
        best.d = d;
        best.q = q;
        best.intercept = c;
        best.ar_coefficients = phi;
        best.ma_coefficients = theta;
        best.noise_variance = rss / std::max<double>(1.0, static_cast<double>(T_eff - p - q - 1));
        best.aic = aic;
        best.css_start = static_cast<int>(start);
        any = true;
      }
    }
  }
  require_numeric(any, "fit_arima: every candidate fit failed");
  return best;
}

/// Recursive multi-step ARIMA forecast; future innovations are zero and the
/// differencing is inverted at the end.
inline double forecast_arima(const ArimaModel& model, const SeriesWindow& y, int h) {
  require(h >= 1, "forecast_arima: horizon must be >= 1");
  Eigen::VectorXd z = model.d == 1 ? detail::difference(y.values) : y.values;
  const Eigen::Index Tz = z.size();
  require(Tz > model.p, "forecast_arima: insufficient history");

  // Reconstruct in-sample residuals with the estimation conditioning.
  std::vector<double> eps(static_cast<std::size_t>(Tz), 0.0);
  const Eigen::Index start = std::min<Eigen::Index>(std::max(model.css_start, model.p), Tz - 1);
  for (Eigen::Index t = start; t < Tz; ++t) {
    double pred = model.intercept;
    for (int j = 0; j < model.p; ++j) pred += model.ar_coefficients[j] * z[t - 1 - j];
    for (int j = 0; j < model.q; ++j) {
      if (t - 1 - j >= 0) pred += model.ma_coefficients[j] * eps[static_cast<std::size_t>(t - 1 - j)];
    }
    eps[static_cast<std::size_t>(t)] = z[t] - pred;
  }

  std::vector<double> zbuf(z.data(), z.data() + Tz);
  std::vector<double> ebuf = eps;
  for (int step = 0; step < h; ++step) {
    double next = model.intercept;
    for (int j = 0; j < model.p; ++j) next += model.ar_coefficients[j] * zbuf[zbuf.size() - 1 - j];
    for (int j = 0; j < model.q; ++j) {
      const auto idx = static_cast<long long>(ebuf.size()) - 1 - j;
      if (idx >= 0) next += model.ma_coefficients[j] * ebuf[static_cast<std::size_t>(idx)];
    }
    zbuf.push_back(next);
    ebuf.push_back(0.0);  // future innovations
  }

  if (model.d == 0) return zbuf.back();
  double level = y.values[y.values.size() - 1];
  for (std::size_t i = static_cast<std::size_t>(Tz); i < zbuf.size(); ++i) level += zbuf[i];
  return level;
}

// ---------------------------------------------------------------------------
// Nearest-stations regression

struct NearStationsModel {
  double intercept = 0.0;
  Eigen::VectorXd beta_neighbors;
  double beta_y = 0.0;
  int horizon = 1;
  bool used_ridge = false;  // set when collinearity forced the ridge fallback
};

/// Least squares of y_{t+h} on the neighbor values and y_t (with intercept).
/// Collinear designs fall back to a tiny ridge and are flagged.
inline NearStationsModel fit_near_stations(const SeriesWindow& target,
                                           const Eigen::MatrixXd& neighbors, int h) {
  require(h >= 1, "fit_near_stations: horizon must be >= 1");
  const Eigen::Index T = target.values.size();
  require(neighbors.rows() == 0 || neighbors.cols() == T,
          "fit_near_stations: neighbor series must align with the target");
  const Eigen::Index r = neighbors.rows();
  const Eigen::Index rows = T - h;
  require(rows >= r + 2, "fit_near_stations: insufficient observations");

  Eigen::MatrixXd X(rows, r + 2);
  Eigen::VectorXd resp(rows);
  for (Eigen::Index t = 0; t < rows; ++t) {
    X(t, 0) = 1.0;
    for (Eigen::Index j = 0; j < r; ++j) X(t, 1 + j) = neighbors(j, t);
    X(t, r + 1) = target.values[t];
    resp[t] = target.values[t + h];
  }

  NearStationsModel model;
  model.horizon = h;
  Eigen::VectorXd beta;
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(X);
  if (qr.rank() == X.cols()) {
    beta = qr.solve(resp);
  } else {
    beta = solve_least_squares(X, resp, 1e-8);
    model.used_ridge = true;
  }
  model.intercept = beta[0];
  model.beta_neighbors = beta.segment(1, r);
  model.beta_y = beta[r + 1];
  return model;
}

inline double forecast_near_stations(const NearStationsModel& model,
                                     const Eigen::VectorXd& neighbors_now, double y_now) {
  require(neighbors_now.size() == model.beta_neighbors.size(),
          "forecast_near_stations: dimension mismatch");
  return model.intercept + model.beta_neighbors.dot(neighbors_now) + model.beta_y * y_now;
}

}  // namespace qff
