#pragma once

// Data-generating process and the two Monte Carlo experiments: factor
// recovery scored by adjusted R^2, and one-step-ahead forecast MAE across
// methods. Replications run on independent RNG streams and aggregate in
// index order, so reports are identical for any thread count.

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "qff/baselines.hpp"
#include "qff/common.hpp"
#include "qff/csv.hpp"
#include "qff/factor_models.hpp"
#include "qff/forecasting.hpp"
#include "qff/panel.hpp"
#include "qff/parallel.hpp"
#include "qff/rng.hpp"
#include "qff/stats.hpp"

namespace qff {

enum class ErrorDist { normal, student_t2, gamma15, mixed_half_t_half_gamma };

inline std::string to_string(ErrorDist d) {
  switch (d) {
    case ErrorDist::normal: return "normal";
    case ErrorDist::student_t2: return "t2";
    case ErrorDist::gamma15: return "gamma";
    case ErrorDist::mixed_half_t_half_gamma: return "mixed";
  }
  throw Error("unknown error distribution");
}

inline ErrorDist error_dist_from_string(const std::string& s) {
  if (s == "normal" || s == "n01") return ErrorDist::normal;
  if (s == "t2" || s == "student_t2" || s == "t") return ErrorDist::student_t2;
  if (s == "gamma" || s == "gamma15") return ErrorDist::gamma15;
  if (s == "mixed") return ErrorDist::mixed_half_t_half_gamma;
  throw DataError("unknown error distribution: " + s);
}

enum class Method { naive, ar, arima, near, sw2002, proposed, extended };

inline std::string to_string(Method m) {
  switch (m) {
    case Method::naive: return "naive";
    case Method::ar: return "ar";
    case Method::arima: return "arima";
    case Method::near: return "near";
    case Method::sw2002: return "sw2002";
    case Method::proposed: return "proposed";
    case Method::extended: return "extended";
  }
  throw Error("unknown method");
}

inline Method method_from_string(const std::string& s) {
  if (s == "naive") return Method::naive;
  if (s == "ar") return Method::ar;
  if (s == "arima") return Method::arima;
  if (s == "near") return Method::near;
  if (s == "sw2002" || s == "sw") return Method::sw2002;
  if (s == "proposed") return Method::proposed;
  if (s == "extended") return Method::extended;
  throw DataError("unknown method: " + s);
}

struct SimulationConfig {
  int n = 100;
  int T = 100;
  ErrorDist error_dist = ErrorDist::normal;
  ErrorDist target_error_dist = ErrorDist::normal;
  int replications = 500;
  std::uint64_t seed = 1;
  std::vector<Method> methods = {Method::naive, Method::ar, Method::arima, Method::sw2002, Method::proposed};
  QuantileGrid grid = QuantileGrid::standard();
  int horizon = 1;
  double error_scale = 1.0;  // 0 exposes the noiseless limit for tests
  int threads = 1;
  int r_mean = 3;                        // mean-factor count (truth in the DGP)
  std::vector<int> r_per_level = {};     // empty = r_mean at every level
  double max_drop_fraction = 0.05;

  void validate() const {
    require(n >= 1 && T >= 8, "SimulationConfig: panel too small");
    require(replications >= 1, "SimulationConfig: need at least one replication");
    require(horizon >= 1, "SimulationConfig: horizon must be >= 1");
    require(error_scale >= 0.0, "SimulationConfig: negative error scale");
    grid.validate();
  }

  std::vector<int> level_ranks() const {
    if (!r_per_level.empty()) {
      require(r_per_level.size() == grid.size(), "SimulationConfig: r_per_level size mismatch");
      return r_per_level;
    }
    return std::vector<int>(grid.size(), r_mean);
  }
};

struct TrueFactors {
  Eigen::VectorXd f1, f2, f3;  // over the panel window
  Eigen::MatrixXd loadings;    // n x 3
};

struct GeneratedData {
  Panel panel;           // n x T
  TrueFactors factors;   // truth over the panel columns
  SeriesWindow target;   // length T + horizon
};

namespace detail {

inline double draw_error(RngStream& rng, ErrorDist dist) {
  switch (dist) {
    case ErrorDist::normal: return rng.normal();
    case ErrorDist::student_t2: return rng.student_t2();
    case ErrorDist::gamma15: return rng.exponential(5.0);  // Gamma(shape 1, scale 5)
    case ErrorDist::mixed_half_t_half_gamma:
      throw Error("mixed distribution requires a per-row assignment");
  }
  throw Error("unknown error distribution");
}

}  // namespace detail

/// Draws one replication of the DGP: three AR(1) factors with coefficients
/// 0.8 / 0.5 / 0.2 and stationary initial values, standard normal loadings,
/// panel x_it = loadings * factors + u_it, and the target
/// y_t = f1 + f2 + f3 + e_t extended `horizon` steps past the panel. The
/// mixed setting draws t(2) errors for a random half of the rows and
/// Gamma(1,5) for the rest.
inline GeneratedData generate_panel(const SimulationConfig& config, RngStream& rng) {
  config.validate();
  const int n = config.n;
  const int T = config.T;
  const int total = T + config.horizon;

  static constexpr double ar_coef[3] = {0.8, 0.5, 0.2};
  Eigen::MatrixXd f(total, 3);
  for (int k = 0; k < 3; ++k) {
    const double stationary_sd = std::sqrt(1.0 / (1.0 - ar_coef[k] * ar_coef[k]));
    f(0, k) = stationary_sd * rng.normal();
    for (int t = 1; t < total; ++t) f(t, k) = ar_coef[k] * f(t - 1, k) + rng.normal();
  }

  Eigen::MatrixXd loadings(n, 3);
  for (int i = 0; i < n; ++i) {
    for (int k = 0; k < 3; ++k) loadings(i, k) = rng.normal();
  }

  std::vector<ErrorDist> row_dist(static_cast<std::size_t>(n), config.error_dist);
  if (config.error_dist == ErrorDist::mixed_half_t_half_gamma) {
    std::vector<int> order(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    rng.shuffle(order);
    for (int i = 0; i < n; ++i) {
      row_dist[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] =
          i < n / 2 ? ErrorDist::student_t2 : ErrorDist::gamma15;
    }
  }

  Eigen::MatrixXd values(n, T);
  for (int i = 0; i < n; ++i) {
    for (int t = 0; t < T; ++t) {
      values(i, t) = loadings.row(i).dot(f.row(t).head(3)) +
                     config.error_scale * detail::draw_error(rng, row_dist[static_cast<std::size_t>(i)]);
    }
  }

  require(config.target_error_dist != ErrorDist::mixed_half_t_half_gamma,
          "generate_panel: target errors cannot be mixed");
  Eigen::VectorXd y(total);
  for (int t = 0; t < total; ++t) {
    y[t] = f(t, 0) + f(t, 1) + f(t, 2) +
           config.error_scale * detail::draw_error(rng, config.target_error_dist);
  }

  GeneratedData out;
  out.panel = Panel::from_matrix(std::move(values));
  out.factors.f1 = f.col(0).head(T);
  out.factors.f2 = f.col(1).head(T);
  out.factors.f3 = f.col(2).head(T);
  out.factors.loadings = std::move(loadings);
  out.target = SeriesWindow::from_vector(std::move(y));
  return out;
}

// ---------------------------------------------------------------------------
// Reports

struct ReportRow {
  int n = 0;
  int T = 0;
  std::string dist;
  std::string key;        // method or factor-estimator pair
  std::string statistic;  // "adj_r2", "mae", "max_abs_error", ...
  double value = 0.0;
  double stderr_value = 0.0;
};

struct ExperimentReport {
  std::vector<ReportRow> rows;
  int replications = 0;
  int dropped = 0;
  std::vector<std::string> drop_log;

  void write_csv(std::ostream& os) const {
    os << "n,T,dist,method_or_factor,statistic,value,stderr\n";
    for (const auto& r : rows) {
      os << r.n << ',' << r.T << ',' << r.dist << ',' << r.key << ',' << r.statistic << ','
         << format_double(r.value) << ',' << format_double(r.stderr_value) << '\n';
    }
  }

  std::string to_csv() const {
    std::ostringstream os;
    write_csv(os);
    return os.str();
  }

  /// Table shaped like the paper's: one row per key, one column per cell.
  std::string format_table(const std::string& statistic) const {
    std::vector<std::string> cells, keys;
    for (const auto& r : rows) {
      if (r.statistic != statistic) continue;
      const std::string cell = "(" + std::to_string(r.n) + "," + std::to_string(r.T) + ") " + r.dist;
      if (std::find(cells.begin(), cells.end(), cell) == cells.end()) cells.push_back(cell);
      if (std::find(keys.begin(), keys.end(), r.key) == keys.end()) keys.push_back(r.key);
    }
    std::ostringstream os;
    os << statistic << " (stderr in parentheses)\n";
    os << "key";
    for (const auto& c : cells) os << '\t' << c;
    os << '\n';
    for (const auto& k : keys) {
      os << k;
      for (const auto& c : cells) {
        bool found = false;
        for (const auto& r : rows) {
          const std::string cell = "(" + std::to_string(r.n) + "," + std::to_string(r.T) + ") " + r.dist;
          if (r.statistic == statistic && r.key == k && cell == c) {
            char buf[64];
            std::snprintf(buf, sizeof(buf), "\t%.3f (%.3f)", r.value, r.stderr_value);
            os << buf;
            found = true;
            break;
          }
        }
        if (!found) os << "\t-";
      }
      os << '\n';
    }
    return os.str();
  }
};

namespace detail {

inline double stderr_of(const std::vector<double>& xs) {
  if (xs.size() < 2) return 0.0;
  const Eigen::Map<const Eigen::VectorXd> v(xs.data(), static_cast<Eigen::Index>(xs.size()));
  return sample_sd(v) / std::sqrt(static_cast<double>(xs.size()));
}

inline double mean_of(const std::vector<double>& xs) {
  double s = 0.0;
  for (double x : xs) s += x;
  return xs.empty() ? 0.0 : s / static_cast<double>(xs.size());
}

inline std::uint64_t replication_stream(std::size_t cell, int rep) {
  return (static_cast<std::uint64_t>(cell) << 32) | static_cast<std::uint64_t>(rep);
}

}  // namespace detail

/// Factor-recovery experiment: per replication, fit PCA factors (rank
/// r_mean) on the centered panel and quantile factors (rank r_per_tau per
/// level) on the raw panel, then score each true factor by the adjusted R^2
/// of regressing it on each estimated block.
inline ExperimentReport run_r2_experiment(const std::vector<SimulationConfig>& configs,
                                          int r_mean = 3, int r_per_tau = 3) {
  ExperimentReport report;
  for (std::size_t cell = 0; cell < configs.size(); ++cell) {
    const SimulationConfig& cfg = configs[cell];
    cfg.validate();
    const std::size_t m = cfg.grid.size();
    const int reps = cfg.replications;
    report.replications = reps;

    // Per replication: adjusted R^2 of (f1,f2,f3) on PCA then on QFM.
    std::vector<std::array<double, 6>> scores(static_cast<std::size_t>(reps));
    parallel_for(static_cast<std::size_t>(reps), cfg.threads, [&](std::size_t rep) {
      RngStream rng(cfg.seed, detail::replication_stream(cell, static_cast<int>(rep)));
      const GeneratedData data = generate_panel(cfg, rng);

      const FactorDecomposition pca = fit_pca_factors(center_rows(data.panel).first, r_mean);
      Eigen::MatrixXd stacked(data.panel.T(), static_cast<Eigen::Index>(m) * r_per_tau);
      for (std::size_t l = 0; l < m; ++l) {
        const FactorDecomposition qfm = fit_quantile_factors(data.panel, cfg.grid.levels[l], r_per_tau);
        stacked.middleCols(static_cast<Eigen::Index>(l) * r_per_tau, r_per_tau) = qfm.factors;
      }
      const Eigen::VectorXd* truth[3] = {&data.factors.f1, &data.factors.f2, &data.factors.f3};
      for (int k = 0; k < 3; ++k) {
        scores[rep][static_cast<std::size_t>(k)] = adjusted_r_squared(*truth[k], pca.factors);
        scores[rep][static_cast<std::size_t>(3 + k)] = adjusted_r_squared(*truth[k], stacked);
      }
    });

    const char* factor_names[3] = {"f1", "f2", "f3"};
    for (int k = 0; k < 3; ++k) {
      for (int est = 0; est < 2; ++est) {
        std::vector<double> vals;
        vals.reserve(static_cast<std::size_t>(reps));
        for (int rep = 0; rep < reps; ++rep) {
          vals.push_back(scores[static_cast<std::size_t>(rep)][static_cast<std::size_t>(est * 3 + k)]);
        }
        ReportRow row;
        row.n = cfg.n;
        row.T = cfg.T;
        row.dist = to_string(cfg.error_dist);
        row.key = std::string(factor_names[k]) + (est == 0 ? "_pca" : "_qfm");
        row.statistic = "adj_r2";
        row.value = detail::mean_of(vals);
        row.stderr_value = detail::stderr_of(vals);
        report.rows.push_back(row);
      }
    }
  }
  return report;
}

/// One-step-ahead forecast comparison. Every method consumes the same
/// generated data within a replication; a method failure drops the whole
/// replication for all methods (logged), and more than `max_drop_fraction`
/// drops fails the run.
inline ExperimentReport run_mae_experiment(const std::vector<SimulationConfig>& configs) {
  ExperimentReport report;
  for (std::size_t cell = 0; cell < configs.size(); ++cell) {
    const SimulationConfig& cfg = configs[cell];
    cfg.validate();
    const int reps = cfg.replications;
    report.replications = reps;
    const std::vector<int> ranks = cfg.level_ranks();
    const int h = cfg.horizon;

    const std::size_t n_methods = cfg.methods.size();
    std::vector<std::vector<double>> abs_errors(static_cast<std::size_t>(reps));
    std::vector<std::string> failures(static_cast<std::size_t>(reps));

    parallel_for(static_cast<std::size_t>(reps), cfg.threads, [&](std::size_t rep) {
      RngStream rng(cfg.seed, detail::replication_stream(cell, static_cast<int>(rep)));
      const GeneratedData data = generate_panel(cfg, rng);
      const Eigen::Index T = data.panel.T();
      SeriesWindow train;
      train.values = data.target.values.head(T);
      train.time_index.assign(data.target.time_index.begin(), data.target.time_index.begin() + T);
      const double truth = data.target.values[T + h - 1];

      std::vector<double> errs;
      errs.reserve(n_methods);
      try {
        for (Method method : cfg.methods) {
          double forecast = 0.0;
          switch (method) {
            case Method::near:
              throw Error("run_mae_experiment: near-stations needs station metadata");
            case Method::naive:
              forecast = forecast_naive(train, h);
              break;
            case Method::ar:
              forecast = forecast_ar(fit_ar_aic(train), train, h);
              break;
            case Method::arima: {
              const ArimaModel model = fit_arima(train);
              forecast = forecast_arima(model, train, h);
              break;
            }
            case Method::sw2002:
              forecast = forecast_sw2002_latest(fit_sw2002(data.panel, train, h, cfg.r_mean), train);
              break;
            case Method::proposed: {
              const QuantileForecastModel model =
                  fit_quantile_forecaster(data.panel, train, h, cfg.grid, ranks);
              forecast = forecast_combined_latest(model, train, WeightMode::interval).point;
              break;
            }
            case Method::extended: {
              const QuantileForecastModel model =
                  fit_extended_forecaster(data.panel, train, h, cfg.grid, ranks);
              forecast = forecast_combined_latest(model, train, WeightMode::interval).point;
              break;
            }
          }
          require_numeric(std::isfinite(forecast), to_string(method) + ": non-finite forecast");
          errs.push_back(std::abs(forecast - truth));
        }
        abs_errors[rep] = std::move(errs);
      } catch (const std::exception& e) {
        failures[rep] = e.what();
      }
    });

    int dropped = 0;
    for (int rep = 0; rep < reps; ++rep) {
      if (!failures[static_cast<std::size_t>(rep)].empty()) {
        ++dropped;
        report.drop_log.push_back("(" + std::to_string(cfg.n) + "," + std::to_string(cfg.T) + ") " +
                                  to_string(cfg.error_dist) + " rep " + std::to_string(rep) + ": " +
                                  failures[static_cast<std::size_t>(rep)]);
      }
    }
    report.dropped += dropped;
    require_numeric(static_cast<double>(dropped) <= cfg.max_drop_fraction * reps,
                    "run_mae_experiment: too many dropped replications");

    for (std::size_t mi = 0; mi < n_methods; ++mi) {
      std::vector<double> vals;
      vals.reserve(static_cast<std::size_t>(reps));
      for (int rep = 0; rep < reps; ++rep) {
        if (failures[static_cast<std::size_t>(rep)].empty()) {
          vals.push_back(abs_errors[static_cast<std::size_t>(rep)][mi]);
        }
      }
      ReportRow row;
      row.n = cfg.n;
      row.T = cfg.T;
      row.dist = to_string(cfg.error_dist);
      row.key = to_string(cfg.methods[mi]);
      row.statistic = "mae";
      row.value = detail::mean_of(vals);
      row.stderr_value = detail::stderr_of(vals);
      report.rows.push_back(row);

      ReportRow worst = row;
      worst.statistic = "max_abs_error";
      worst.value = vals.empty() ? 0.0 : *std::max_element(vals.begin(), vals.end());
      worst.stderr_value = 0.0;
      report.rows.push_back(worst);
    }
  }
  return report;
}

/// The mixed-error extension experiment: panel errors t(2) on a random half
/// of the rows and Gamma(1,5) on the rest, target errors Gamma(1,5), with
/// the extended method in the comparison set.
inline ExperimentReport run_extension_experiment(std::vector<SimulationConfig> configs) {
  for (auto& cfg : configs) {
    cfg.error_dist = ErrorDist::mixed_half_t_half_gamma;
    cfg.target_error_dist = ErrorDist::gamma15;
    if (std::find(cfg.methods.begin(), cfg.methods.end(), Method::extended) == cfg.methods.end()) {
      cfg.methods.push_back(Method::extended);
    }
  }
  return run_mae_experiment(configs);
}

}  // namespace qff
