#pragma once

// Forecasters for a scalar target driven by a high-dimensional panel:
//  - the diffusion-index forecaster (PCA factors + least squares),
//  - the combined quantile forecaster (per-level quantile factors and
//    quantile regressions, merged by Markov or interval weights),
//  - its group-LASSO extension over stacked quantile-factor blocks.

#include <algorithm>
#include <cmath>
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "qff/common.hpp"
#include "qff/factor_models.hpp"
#include "qff/loss.hpp"
#include "qff/panel.hpp"
#include "qff/quantile_regression.hpp"
#include "qff/stats.hpp"

namespace qff {

// ---------------------------------------------------------------------------
// Diffusion-index forecaster

struct SwForecastModel {
  Eigen::VectorXd beta_f;
  double beta_y = 0.0;
  double intercept = 0.0;
  int factor_count = 0;
  int horizon = 1;
  FactorDecomposition decomposition;  // factors of the centered panel, all t
};

/// Extracts r PCA factors from the row-centered panel and regresses
/// y_{t+h} on (f_t, y_t) with an intercept over t = 1..T-h.
inline SwForecastModel fit_sw2002(const Panel& panel, const SeriesWindow& target, int h, int r) {
  require(h >= 1, "fit_sw2002: horizon must be >= 1");
  require_data(target.values.size() == panel.T(), "fit_sw2002: target must align with panel columns");
  const Eigen::Index T = panel.T();
  require(T - h >= r + 3, "fit_sw2002: insufficient observations");

  SwForecastModel model;
  model.decomposition = fit_pca_factors(center_rows(panel).first, r);
  model.factor_count = r;
  model.horizon = h;

  const Eigen::Index rows = T - h;
  Eigen::MatrixXd X(rows, r + 2);
  Eigen::VectorXd resp(rows);
  for (Eigen::Index t = 0; t < rows; ++t) {
    X(t, 0) = 1.0;
    X.row(t).segment(1, r) = model.decomposition.factors.row(t);
    X(t, r + 1) = target.values[t];
    resp[t] = target.values[t + h];
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(X);
  require_numeric(qr.rank() == X.cols(), "fit_sw2002: collinear design");
  const Eigen::VectorXd beta = qr.solve(resp);
  model.intercept = beta[0];
  model.beta_f = beta.segment(1, r);
  model.beta_y = beta[r + 1];
  return model;
}

inline double forecast_sw2002(const SwForecastModel& model, const Eigen::VectorXd& f_T, double y_T) {
  require(f_T.size() == model.beta_f.size(), "forecast_sw2002: factor dimension mismatch");
  return model.intercept + model.beta_f.dot(f_T) + model.beta_y * y_T;
}

/// Forecast from the last panel column and target observation.
inline double forecast_sw2002_latest(const SwForecastModel& model, const SeriesWindow& target) {
  const Eigen::Index T = model.decomposition.factors.rows();
  return forecast_sw2002(model, model.decomposition.factors.row(T - 1).transpose(),
                         target.values[target.values.size() - 1]);
}

// ---------------------------------------------------------------------------
// States and transitions

/// How observations map to quantile-interval states. For the 5-level grid
/// the cuts are the fitted 0.1, 0.3, 0.7 and 0.9 quantiles (the median is
/// not a cut point), giving one state per level. For other odd sizes the
/// middle level is likewise skipped; for even sizes every fitted quantile is
/// a cut and the extra top state shares the top level's forecast.
struct StateMap {
  std::vector<int> cut_levels;       // indices into the sorted fitted quantiles
  std::vector<int> state_to_level;   // weight routing, one entry per state
  std::vector<double> state_prior;   // no-information occupancy probabilities

  int n_states() const { return static_cast<int>(state_to_level.size()); }

  void validate(std::size_t m) const {
    require(state_to_level.size() == cut_levels.size() + 1, "StateMap: need one more state than cuts");
    for (int lvl : state_to_level) require(lvl >= 0 && lvl < static_cast<int>(m), "StateMap: level out of range");
    require(state_prior.size() == state_to_level.size(), "StateMap: prior size mismatch");
    double s = 0.0;
    for (double p : state_prior) {
      require(p >= 0.0, "StateMap: negative prior");
      s += p;
    }
    require(std::abs(s - 1.0) <= 1e-10, "StateMap: prior must sum to one");
  }

  static StateMap for_grid(const QuantileGrid& grid) {
    const int m = static_cast<int>(grid.size());
    StateMap map;
    if (m == 1) {
      map.state_to_level = {0};
      map.state_prior = {1.0};
      return map;
    }
    if (m % 2 == 1) {
      for (int j = 0; j < m; ++j) {
        if (j != m / 2) map.cut_levels.push_back(j);
      }
      for (int s = 0; s < m; ++s) map.state_to_level.push_back(s);
    } else {
      for (int j = 0; j < m; ++j) map.cut_levels.push_back(j);
      for (int s = 0; s < m; ++s) map.state_to_level.push_back(s);
      map.state_to_level.push_back(m - 1);
    }
    // Occupancy probability of each state under the grid: the level mass
    // between its bounding cut points.
    const auto& lv = grid.levels;
    for (std::size_t s = 0; s < map.state_to_level.size(); ++s) {
      const double lo = s == 0 ? 0.0 : lv[static_cast<std::size_t>(map.cut_levels[s - 1])];
      const double hi = s == map.cut_levels.size() ? 1.0 : lv[static_cast<std::size_t>(map.cut_levels[s])];
      map.state_prior.push_back(hi - lo);
    }
    map.validate(static_cast<std::size_t>(m));
    return map;
  }
};

/// State of an observation given the fitted per-level quantiles. The
/// quantiles are monotonically rearranged first, so crossing estimates
/// cannot produce an invalid state; boundary values go to the lower state.
inline int assign_state(double y, Eigen::VectorXd fitted_quantiles, const StateMap& map) {
  const Eigen::Index need = map.cut_levels.empty() ? 1 : map.cut_levels.back() + 1;
  require(fitted_quantiles.size() >= need, "assign_state: too few fitted quantiles for the state map");
  std::sort(fitted_quantiles.data(), fitted_quantiles.data() + fitted_quantiles.size());
  int state = 0;
  for (int cut : map.cut_levels) {
    if (y > fitted_quantiles[cut]) {
      ++state;
    } else {
      break;
    }
  }
  return state;
}

/// Empirical h-step transition matrix P_ij = #{S_t=i, S_{t+h}=j} / #{S_t=i}.
/// Rows for states never visited fall back to `fallback_row` (uniform when
/// none is supplied).
inline Eigen::MatrixXd estimate_transition(const std::vector<int>& states, int h, int n_states,
                                           const Eigen::VectorXd& fallback_row = Eigen::VectorXd()) {
  require(h >= 1, "estimate_transition: horizon must be >= 1");
  require(n_states >= 1, "estimate_transition: need at least one state");
  require(static_cast<int>(states.size()) > h, "estimate_transition: sequence too short");
  Eigen::MatrixXd counts = Eigen::MatrixXd::Zero(n_states, n_states);
  for (std::size_t t = 0; t + static_cast<std::size_t>(h) < states.size(); ++t) {
    const int i = states[t], j = states[t + static_cast<std::size_t>(h)];
    require(i >= 0 && i < n_states && j >= 0 && j < n_states, "estimate_transition: state out of range");
    counts(i, j) += 1.0;
  }
  Eigen::VectorXd fb = fallback_row;
  if (fb.size() == 0) fb = Eigen::VectorXd::Constant(n_states, 1.0 / n_states);
  require(fb.size() == n_states, "estimate_transition: fallback row size mismatch");
  Eigen::MatrixXd P(n_states, n_states);
  for (int i = 0; i < n_states; ++i) {
    const double total = counts.row(i).sum();
    if (total > 0.0) {
      P.row(i) = counts.row(i) / total;
    } else {
      P.row(i) = fb.transpose();
    }
  }
  return P;
}

/// Transition matrix from several state histories with pooled counts; the
/// pairing never crosses history boundaries.
inline Eigen::MatrixXd estimate_transition_pooled(const std::vector<std::vector<int>>& histories,
                                                  int h, int n_states,
                                                  const Eigen::VectorXd& fallback_row = Eigen::VectorXd()) {
  require(h >= 1, "estimate_transition_pooled: horizon must be >= 1");
  Eigen::MatrixXd counts = Eigen::MatrixXd::Zero(n_states, n_states);
  bool any = false;
  for (const auto& states : histories) {
    if (static_cast<int>(states.size()) <= h) continue;
    any = true;
    for (std::size_t t = 0; t + static_cast<std::size_t>(h) < states.size(); ++t) {
      counts(states[t], states[t + static_cast<std::size_t>(h)]) += 1.0;
    }
  }
  require(any, "estimate_transition_pooled: no usable history");
  Eigen::VectorXd fb = fallback_row;
  if (fb.size() == 0) fb = Eigen::VectorXd::Constant(n_states, 1.0 / n_states);
  Eigen::MatrixXd P(n_states, n_states);
  for (int i = 0; i < n_states; ++i) {
    const double total = counts.row(i).sum();
    P.row(i) = total > 0.0 ? Eigen::RowVectorXd(counts.row(i) / total) : Eigen::RowVectorXd(fb.transpose());
  }
  return P;
}

// ---------------------------------------------------------------------------
// Combined quantile forecaster

struct PerLevelModel {
  double tau = 0.5;
  double intercept = 0.0;
  Eigen::VectorXd beta_f;  // over this level's factors, or the stacked blocks
  double beta_y = 0.0;
};

struct QuantileForecastModel {
  QuantileGrid grid;
  std::vector<PerLevelModel> per_level;
  std::vector<FactorDecomposition> level_factors;  // one decomposition per level
  bool stacked_design = false;                     // extended variant flag
  int horizon = 1;
  StateMap state_map;
  Eigen::MatrixXd transition;
  std::vector<int> state_history;  // states over the training window
  int current_state = 0;           // state of the last observation
};

enum class WeightMode { markov, interval };

struct CombinedForecast {
  double point = 0.0;
  Eigen::VectorXd quantile_forecasts;  // monotonically rearranged
  Eigen::VectorXd weights;             // per level, on the simplex
  int current_state = 0;
};

struct QuantileForecastOptions {
  bool include_intercept = true;
  QfmOptions qfm{};
  QrOptions qr{};
  // Precomputed per-level factor decompositions. They do not depend on the
  // horizon, so callers fitting several horizons (or both the base and the
  // extended variant) compute them once and pass them in.
  std::optional<std::vector<FactorDecomposition>> decompositions{};
  // Extended variant: penalty grid (empty = data-driven default grid),
  // holdout fraction for the chronological selection, and whether the lag
  // term y_t is penalized (it normally acts as a mandatory control).
  std::vector<double> lambda_grid{};
  double holdout_fraction = 0.2;
  bool penalize_lag = false;
  std::optional<double> fixed_lambda{};
};

namespace detail {

// Design row for level l at time t: the level's factors (or all stacked
// blocks) followed by y_t.
inline Eigen::VectorXd level_predictors(const QuantileForecastModel& model, std::size_t level,
                                        Eigen::Index t, double y_t) {
  const auto& decs = model.level_factors;
  Eigen::Index width = 0;
  if (model.stacked_design) {
    for (const auto& d : decs) width += d.rank();
  } else {
    width = decs[level].rank();
  }
  Eigen::VectorXd x(width + 1);
  Eigen::Index at = 0;
  if (model.stacked_design) {
    for (const auto& d : decs) {
      x.segment(at, d.rank()) = d.factors.row(t);
      at += d.rank();
    }
  } else {
    x.segment(at, decs[level].rank()) = decs[level].factors.row(t);
    at += decs[level].rank();
  }
  x[at] = y_t;
  return x;
}

inline double level_value(const QuantileForecastModel& model, std::size_t level,
                          const Eigen::VectorXd& predictors) {
  const auto& pl = model.per_level[level];
  return pl.intercept + pl.beta_f.dot(predictors.head(predictors.size() - 1)) +
         pl.beta_y * predictors[predictors.size() - 1];
}

// Fitted per-level quantiles of y_t given the information at t-h, then the
// state sequence over t = h..T-1 and the transition matrix.
inline void finish_state_machinery(QuantileForecastModel& model, const SeriesWindow& target) {
  const Eigen::Index T = target.values.size();
  const int h = model.horizon;
  const std::size_t m = model.grid.size();
  model.state_history.clear();
  for (Eigen::Index t = h; t < T; ++t) {
    Eigen::VectorXd q(m);
    for (std::size_t l = 0; l < m; ++l) {
      const Eigen::VectorXd x = level_predictors(model, l, t - h, target.values[t - h]);
      q[static_cast<Eigen::Index>(l)] = level_value(model, l, x);
    }
    model.state_history.push_back(assign_state(target.values[t], q, model.state_map));
  }
  Eigen::VectorXd prior = Eigen::Map<const Eigen::VectorXd>(model.state_map.state_prior.data(),
                                                            static_cast<Eigen::Index>(model.state_map.state_prior.size()));
  model.transition = estimate_transition(model.state_history, h, model.state_map.n_states(), prior);
  model.current_state = model.state_history.back();
}

}  // namespace detail

/// Fits the combined quantile forecaster: per level, quantile factors at
/// that level and a quantile regression of y_{t+h} on (f_{t,tau}, y_t);
/// then the state history and the empirical h-step transition matrix.
inline QuantileForecastModel fit_quantile_forecaster(const Panel& panel, const SeriesWindow& target,
                                                     int h, const QuantileGrid& grid,
                                                     const std::vector<int>& r_per_level,
                                                     const QuantileForecastOptions& opts = {}) {
  require(h >= 1, "fit_quantile_forecaster: horizon must be >= 1");
  require_data(target.values.size() == panel.T(), "fit_quantile_forecaster: target must align with panel");
  grid.validate();
  const std::size_t m = grid.size();
  require(r_per_level.size() == m, "fit_quantile_forecaster: need one factor count per level");
  const Eigen::Index T = panel.T();

  QuantileForecastModel model;
  model.grid = grid;
  model.horizon = h;
  model.state_map = StateMap::for_grid(grid);
  model.stacked_design = false;

  if (opts.decompositions.has_value()) {
    require(opts.decompositions->size() == m,
            "fit_quantile_forecaster: need one precomputed decomposition per level");
  }
  const Eigen::Index rows = T - h;
  for (std::size_t l = 0; l < m; ++l) {
    const double tau = grid.levels[l];
    const int r = r_per_level[l];
    require(rows >= r + 3, "fit_quantile_forecaster: insufficient observations for level fit");
    FactorDecomposition dec = opts.decompositions.has_value()
                                  ? (*opts.decompositions)[l]
                                  : fit_quantile_factors(panel, tau, r, opts.qfm);
    require(dec.rank() == r, "fit_quantile_forecaster: decomposition rank mismatch");
    Eigen::MatrixXd X(rows, r + (opts.include_intercept ? 2 : 1));
    Eigen::VectorXd resp(rows);
    for (Eigen::Index t = 0; t < rows; ++t) {
      Eigen::Index at = 0;
      if (opts.include_intercept) X(t, at++) = 1.0;
      X.row(t).segment(at, r) = dec.factors.row(t);
      X(t, at + r) = target.values[t];
      resp[t] = target.values[t + h];
    }
    const QrFit fit = fit_quantile_regression(X, resp, tau, opts.qr);

    PerLevelModel pl;
    pl.tau = tau;
    Eigen::Index at = 0;
    pl.intercept = opts.include_intercept ? fit.coefficients[at++] : 0.0;
    pl.beta_f = fit.coefficients.segment(at, r);
    pl.beta_y = fit.coefficients[at + r];
    model.per_level.push_back(std::move(pl));
    model.level_factors.push_back(std::move(dec));
  }

  detail::finish_state_machinery(model, target);
  return model;
}

/// Per-level quantile forecasts from the end of the training window:
/// Q_hat(tau_l) = intercept + beta_f' f_{T,tau_l} + beta_y y_T.
inline Eigen::VectorXd quantile_forecasts_latest(const QuantileForecastModel& model,
                                                 const SeriesWindow& target) {
  const Eigen::Index T = target.values.size();
  const double y_T = target.values[T - 1];
  Eigen::VectorXd out(static_cast<Eigen::Index>(model.per_level.size()));
  for (std::size_t l = 0; l < model.per_level.size(); ++l) {
    const Eigen::VectorXd x = detail::level_predictors(model, l, T - 1, y_T);
    out[static_cast<Eigen::Index>(l)] = detail::level_value(model, l, x);
  }
  return out;
}

/// Weighted combination of the per-level quantile forecasts. Markov mode
/// takes the transition row of the current state (mapped onto levels per the
/// state map); interval mode uses the grid-spacing weights. The forecasts
/// are monotonically rearranged before the dot product.
inline CombinedForecast combine(const QuantileForecastModel& model,
                                const Eigen::VectorXd& quantile_forecasts, int current_state,
                                WeightMode mode) {
  const std::size_t m = model.grid.size();
  require(quantile_forecasts.size() == static_cast<Eigen::Index>(m),
          "combine: forecast count does not match the grid");
  require(current_state >= 0 && current_state < model.state_map.n_states(), "combine: unknown state");

  Eigen::VectorXd state_weights;
  if (mode == WeightMode::markov) {
    require(model.transition.rows() == model.state_map.n_states(), "combine: missing transition matrix");
    state_weights = model.transition.row(current_state).transpose();
  } else {
    state_weights = Eigen::Map<const Eigen::VectorXd>(model.state_map.state_prior.data(),
                                                      static_cast<Eigen::Index>(model.state_map.state_prior.size()));
  }

  Eigen::VectorXd level_weights = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(m));
  for (int s = 0; s < model.state_map.n_states(); ++s) {
    level_weights[model.state_map.state_to_level[static_cast<std::size_t>(s)]] += state_weights[s];
  }
  const double total = level_weights.sum();
  require(level_weights.minCoeff() >= 0.0 && std::abs(total - 1.0) <= 0.02,
          "combine: weights do not resolve to the probability simplex");

  CombinedForecast out;
  out.quantile_forecasts = quantile_forecasts;
  std::sort(out.quantile_forecasts.data(), out.quantile_forecasts.data() + out.quantile_forecasts.size());
  out.weights = level_weights;
  out.current_state = current_state;
  out.point = level_weights.dot(out.quantile_forecasts);
  return out;
}

/// Base-method point forecast from the end of the training window.
inline CombinedForecast forecast_combined_latest(const QuantileForecastModel& model,
                                                 const SeriesWindow& target, WeightMode mode) {
  return combine(model, quantile_forecasts_latest(model, target), model.current_state, mode);
}

/// The extended forecaster: per level, the design stacks the quantile
/// factors of every level plus y_t, and a group-LASSO quantile regression
/// (factor blocks penalized, y_t and intercept not) selects the active
/// blocks. Forecasting then proceeds exactly as the base method.
inline QuantileForecastModel fit_extended_forecaster(const Panel& panel, const SeriesWindow& target,
                                                     int h, const QuantileGrid& grid,
                                                     const std::vector<int>& r_per_level,
                                                     const QuantileForecastOptions& opts = {}) {
  require(h >= 1, "fit_extended_forecaster: horizon must be >= 1");
  require_data(target.values.size() == panel.T(), "fit_extended_forecaster: target must align with panel");
  grid.validate();
  const std::size_t m = grid.size();
  require(r_per_level.size() == m, "fit_extended_forecaster: need one factor count per level");
  const Eigen::Index T = panel.T();
  const Eigen::Index rows = T - h;

  QuantileForecastModel model;
  model.grid = grid;
  model.horizon = h;
  model.state_map = StateMap::for_grid(grid);
  model.stacked_design = true;

  if (opts.decompositions.has_value()) {
    require(opts.decompositions->size() == m,
            "fit_extended_forecaster: need one precomputed decomposition per level");
  }
  Eigen::Index stacked = 0;
  for (std::size_t l = 0; l < m; ++l) {
    model.level_factors.push_back(opts.decompositions.has_value()
                                      ? (*opts.decompositions)[l]
                                      : fit_quantile_factors(panel, grid.levels[l], r_per_level[l], opts.qfm));
    require(model.level_factors.back().rank() == r_per_level[l],
            "fit_extended_forecaster: decomposition rank mismatch");
    stacked += model.level_factors.back().rank();
  }
  require(rows >= stacked + 3, "fit_extended_forecaster: insufficient observations");

  // Shared design: intercept, the m factor blocks, then y_t.
  Eigen::MatrixXd X(rows, 1 + stacked + 1);
  for (Eigen::Index t = 0; t < rows; ++t) {
    X(t, 0) = 1.0;
    Eigen::Index at = 1;
    for (const auto& dec : model.level_factors) {
      X.row(t).segment(at, dec.rank()) = dec.factors.row(t);
      at += dec.rank();
    }
    X(t, at) = target.values[t];
  }
  Eigen::VectorXd resp(rows);
  for (Eigen::Index t = 0; t < rows; ++t) resp[t] = target.values[t + h];

  GroupSpec spec;
  spec.groups.push_back({0});
  spec.penalized.push_back(false);
  Eigen::Index at = 1;
  for (const auto& dec : model.level_factors) {
    std::vector<int> g;
    for (Eigen::Index j = 0; j < dec.rank(); ++j) g.push_back(static_cast<int>(at + j));
    spec.groups.push_back(std::move(g));
    spec.penalized.push_back(true);
    at += dec.rank();
  }
  spec.groups.push_back({static_cast<int>(at)});
  spec.penalized.push_back(opts.penalize_lag);

  const double gamma = default_huber_gamma(resp);
  for (std::size_t l = 0; l < m; ++l) {
    const double tau = grid.levels[l];
    double lambda;
    if (opts.fixed_lambda.has_value()) {
      lambda = *opts.fixed_lambda;
    } else {
      const std::vector<double> lambda_grid =
          opts.lambda_grid.empty() ? default_lambda_grid(X, resp, tau, spec, gamma) : opts.lambda_grid;
      lambda = lambda_grid.size() == 1
                   ? lambda_grid.front()
                   : select_lambda(X, resp, tau, spec, lambda_grid, opts.holdout_fraction, gamma);
    }
    const GroupLassoFit fit = fit_group_lasso_qr(X, resp, tau, spec, lambda, gamma);

    PerLevelModel pl;
    pl.tau = tau;
    pl.intercept = fit.coefficients[0];
    pl.beta_f = fit.coefficients.segment(1, stacked);
    pl.beta_y = fit.coefficients[1 + stacked];
    model.per_level.push_back(std::move(pl));
  }

  detail::finish_state_machinery(model, target);
  return model;
}

}  // namespace qff
