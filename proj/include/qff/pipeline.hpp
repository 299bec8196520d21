#pragma once

// Real-panel workflow: CSV ingestion, EM imputation of missing entries,
// per-period factor-count selection, rolling-origin multi-horizon
// forecasting with Markov weights pooled over nearest stations, and MAE
// report generation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "qff/baselines.hpp"
#include "qff/common.hpp"
#include "qff/config.hpp"
#include "qff/csv.hpp"
#include "qff/factor_models.hpp"
#include "qff/forecasting.hpp"
#include "qff/panel.hpp"
#include "qff/parallel.hpp"
#include "qff/simulation.hpp"

namespace qff {

// ---------------------------------------------------------------------------
// Station metadata and distances

struct StationMeta {
  std::string entity_id;
  double latitude = 0.0;
  double longitude = 0.0;
};

inline void validate_station_meta(const std::vector<StationMeta>& meta) {
  std::set<std::string> seen;
  for (const auto& s : meta) {
    require_data(std::abs(s.latitude) <= 90.0 && std::abs(s.longitude) <= 180.0,
                 "station " + s.entity_id + ": coordinates out of range");
    require_data(seen.insert(s.entity_id).second, "duplicate station id: " + s.entity_id);
  }
}

/// Great-circle distance on a spherical Earth (radius 6371 km).
inline double haversine_km(double lat1, double lon1, double lat2, double lon2) {
  constexpr double radius = 6371.0;
  constexpr double deg = 3.14159265358979323846 / 180.0;
  const double dlat = (lat2 - lat1) * deg;
  const double dlon = (lon2 - lon1) * deg;
  const double a = std::sin(dlat / 2) * std::sin(dlat / 2) +
                   std::cos(lat1 * deg) * std::cos(lat2 * deg) * std::sin(dlon / 2) * std::sin(dlon / 2);
  return 2.0 * radius * std::asin(std::min(1.0, std::sqrt(a)));
}

/// The k nearest stations to `entity_id` by great-circle distance, self
/// first (distance zero); ties broken by entity id.
inline std::vector<std::string> nearest_stations(const std::vector<StationMeta>& meta,
                                                 const std::string& entity_id, int k) {
  require(k >= 1, "nearest_stations: k must be >= 1");
  require(static_cast<std::size_t>(k) <= meta.size(), "nearest_stations: k exceeds station count");
  const StationMeta* self = nullptr;
  for (const auto& s : meta) {
    if (s.entity_id == entity_id) self = &s;
  }
  require_data(self != nullptr, "nearest_stations: unknown entity " + entity_id);

  std::vector<std::pair<double, std::string>> by_distance;
  by_distance.reserve(meta.size());
  for (const auto& s : meta) {
    const double d = s.entity_id == entity_id
                         ? 0.0
                         : haversine_km(self->latitude, self->longitude, s.latitude, s.longitude);
    by_distance.emplace_back(d, s.entity_id);
  }
  std::sort(by_distance.begin(), by_distance.end());
  std::vector<std::string> out;
  out.reserve(static_cast<std::size_t>(k));
  out.push_back(entity_id);
  for (const auto& [d, id] : by_distance) {
    if (static_cast<int>(out.size()) >= k) break;
    if (id != entity_id) out.push_back(id);
  }
  return out;
}

inline std::vector<StationMeta> load_station_meta(const std::string& path) {
  std::vector<std::size_t> lines;
  const auto rows = read_csv(path, &lines);
  require_data(!rows.empty(), "station metadata file is empty: " + path);
  require_data(rows[0].size() == 3 && rows[0][0] == "entity_id" && rows[0][1] == "lat" && rows[0][2] == "lon",
               "station metadata header must be 'entity_id,lat,lon'");
  std::vector<StationMeta> meta;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const std::string ctx = "at line " + std::to_string(lines[i]);
    require_data(rows[i].size() == 3, "station metadata row has wrong field count " + ctx);
    meta.push_back({rows[i][0], parse_double(rows[i][1], ctx), parse_double(rows[i][2], ctx)});
  }
  validate_station_meta(meta);
  return meta;
}

// ---------------------------------------------------------------------------
// Panel loading

enum class PanelFormat { long_form, wide_form };

struct LoadedPanel {
  Panel panel;
  std::vector<std::string> dropped_entities;  // missing rate above threshold
};

/// Loads a panel CSV. Long form: header entity_id,time,value with absent
/// pairs meaning missing. Wide form: first column time, one column per
/// entity, empty cells meaning missing. Entities whose missing rate exceeds
/// `drop_threshold` are dropped and recorded.
inline LoadedPanel load_panel(const std::string& path, PanelFormat format,
                              double drop_threshold = 0.20) {
  std::vector<std::size_t> lines;
  const auto rows = read_csv(path, &lines);
  require_data(rows.size() >= 2, "panel file has no data rows: " + path);

  std::vector<std::string> entities;
  std::vector<std::int64_t> ticks;
  std::map<std::pair<std::size_t, std::int64_t>, double> cells;  // (entity idx, tick) -> value

  if (format == PanelFormat::long_form) {
    require_data(rows[0].size() == 3 && rows[0][0] == "entity_id" && rows[0][1] == "time" && rows[0][2] == "value",
                 "long-form header must be 'entity_id,time,value'");
    std::map<std::string, std::size_t> entity_index;
    std::set<std::int64_t> tick_set;
    for (std::size_t i = 1; i < rows.size(); ++i) {
      const std::string ctx = "at line " + std::to_string(lines[i]);
      require_data(rows[i].size() == 3, "long-form row has wrong field count " + ctx);
      const auto [it, inserted] = entity_index.try_emplace(rows[i][0], entities.size());
      if (inserted) entities.push_back(rows[i][0]);
      const std::int64_t tick = parse_int(rows[i][1], ctx);
      const double value = parse_double(rows[i][2], ctx);
      require_data(std::isfinite(value), "non-finite value " + ctx);
      tick_set.insert(tick);
      const bool fresh = cells.emplace(std::make_pair(it->second, tick), value).second;
      require_data(fresh, "duplicate (entity,time) pair " + ctx);
    }
    ticks.assign(tick_set.begin(), tick_set.end());
  } else {
    require_data(rows[0].size() >= 2 && rows[0][0] == "time",
                 "wide-form header must start with 'time'");
    entities.assign(rows[0].begin() + 1, rows[0].end());
    std::set<std::string> unique_ids(entities.begin(), entities.end());
    require_data(unique_ids.size() == entities.size(), "duplicate entity column in wide-form header");
    std::set<std::int64_t> tick_set;
    for (std::size_t i = 1; i < rows.size(); ++i) {
      const std::string ctx = "at line " + std::to_string(lines[i]);
      require_data(rows[i].size() == entities.size() + 1, "wide-form row has wrong field count " + ctx);
      const std::int64_t tick = parse_int(rows[i][0], ctx);
      require_data(tick_set.insert(tick).second, "duplicate time tick " + ctx);
      for (std::size_t j = 0; j < entities.size(); ++j) {
        const std::string& field = rows[i][j + 1];
        if (field.empty()) continue;
        const double value = parse_double(field, ctx);
        require_data(std::isfinite(value), "non-finite value " + ctx);
        cells.emplace(std::make_pair(j, tick), value);
      }
    }
    ticks.assign(tick_set.begin(), tick_set.end());
  }

  const std::size_t n = entities.size(), T = ticks.size();
  require_data(n > 0 && T > 0, "panel file has no observations: " + path);
  std::map<std::int64_t, std::size_t> tick_col;
  for (std::size_t t = 0; t < T; ++t) tick_col[ticks[t]] = t;

  Eigen::MatrixXd values = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(T));
  BoolMask mask = BoolMask::Constant(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(T), false);
  for (const auto& [key, value] : cells) {
    const auto i = static_cast<Eigen::Index>(key.first);
    const auto t = static_cast<Eigen::Index>(tick_col.at(key.second));
    values(i, t) = value;
    mask(i, t) = true;
  }

  // Drop entities with missing rate strictly above the threshold.
  LoadedPanel out;
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < n; ++i) {
    const double observed = static_cast<double>(mask.row(static_cast<Eigen::Index>(i)).count());
    const double missing_rate = 1.0 - observed / static_cast<double>(T);
    if (missing_rate > drop_threshold) {
      out.dropped_entities.push_back(entities[i]);
    } else {
      keep.push_back(i);
    }
  }
  require_data(!keep.empty(), "every entity exceeds the missing-rate threshold");

  Panel panel;
  panel.values.resize(static_cast<Eigen::Index>(keep.size()), static_cast<Eigen::Index>(T));
  panel.mask.resize(static_cast<Eigen::Index>(keep.size()), static_cast<Eigen::Index>(T));
  for (std::size_t i = 0; i < keep.size(); ++i) {
    panel.values.row(static_cast<Eigen::Index>(i)) = values.row(static_cast<Eigen::Index>(keep[i]));
    panel.mask.row(static_cast<Eigen::Index>(i)) = mask.row(static_cast<Eigen::Index>(keep[i]));
    panel.entity_ids.push_back(entities[keep[i]]);
  }
  panel.time_index = ticks;
  panel.validate();
  out.panel = std::move(panel);
  return out;
}

inline void write_panel_csv(const Panel& panel, const std::string& path, PanelFormat format) {
  std::ofstream os(path);
  require_data(os.good(), "cannot open output file: " + path);
  if (format == PanelFormat::wide_form) {
    os << "time";
    for (const auto& id : panel.entity_ids) os << ',' << id;
    os << '\n';
    for (Eigen::Index t = 0; t < panel.T(); ++t) {
      os << panel.time_index[static_cast<std::size_t>(t)];
      for (Eigen::Index i = 0; i < panel.n(); ++i) {
        os << ',';
        if (panel.mask(i, t)) os << format_double(panel.values(i, t));
      }
      os << '\n';
    }
  } else {
    os << "entity_id,time,value\n";
    for (Eigen::Index i = 0; i < panel.n(); ++i) {
      for (Eigen::Index t = 0; t < panel.T(); ++t) {
        if (!panel.mask(i, t)) continue;
        os << panel.entity_ids[static_cast<std::size_t>(i)] << ','
           << panel.time_index[static_cast<std::size_t>(t)] << ',' << format_double(panel.values(i, t))
           << '\n';
      }
    }
  }
}

// ---------------------------------------------------------------------------
// EM imputation

struct ImputeOptions {
  double tol = 1e-6;
  int max_iter = 500;
  const std::vector<StationMeta>* meta = nullptr;  // enables the spatial init
};

struct ImputationResult {
  Panel completed;
  int iterations = 0;
  double final_change = 0.0;
  int rank_used = 0;
};

namespace detail {

// Initial fill: mean of observed values in a (+-3 ticks) x (5 nearest
// stations) neighborhood; without metadata the own row's window is used.
// Falls back to the row mean, then the global mean.
inline void initialize_missing(const Panel& panel, Eigen::MatrixXd& work,
                               const std::vector<StationMeta>* meta) {
  const Eigen::Index n = panel.n(), T = panel.T();
  double global_sum = 0.0;
  std::int64_t global_count = 0;
  Eigen::VectorXd row_sum = Eigen::VectorXd::Zero(n);
  Eigen::VectorXd row_count = Eigen::VectorXd::Zero(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index t = 0; t < T; ++t) {
      if (panel.mask(i, t)) {
        row_sum[i] += panel.values(i, t);
        row_count[i] += 1.0;
        global_sum += panel.values(i, t);
        ++global_count;
      }
    }
  }
  const double global_mean = global_count > 0 ? global_sum / static_cast<double>(global_count) : 0.0;

  std::vector<std::vector<Eigen::Index>> hood(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    auto& rows = hood[static_cast<std::size_t>(i)];
    if (meta != nullptr) {
      const int k = std::min<int>(5, static_cast<int>(panel.n()));
      const auto ids = nearest_stations(*meta, panel.entity_ids[static_cast<std::size_t>(i)], k);
      for (const auto& id : ids) {
        for (Eigen::Index j = 0; j < n; ++j) {
          if (panel.entity_ids[static_cast<std::size_t>(j)] == id) rows.push_back(j);
        }
      }
    } else {
      rows.push_back(i);
    }
  }

  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index t = 0; t < T; ++t) {
      if (panel.mask(i, t)) continue;
      double s = 0.0;
      int c = 0;
      for (Eigen::Index j : hood[static_cast<std::size_t>(i)]) {
        for (Eigen::Index dt = -3; dt <= 3; ++dt) {
          const Eigen::Index u = t + dt;
          if (u >= 0 && u < T && panel.mask(j, u)) {
            s += panel.values(j, u);
            ++c;
          }
        }
      }
      if (c > 0) {
        work(i, t) = s / c;
      } else if (row_count[i] > 0) {
        work(i, t) = row_sum[i] / row_count[i];
      } else {
        work(i, t) = global_mean;
      }
    }
  }
}

// Best rank-r approximation via the principal-components step: project onto
// the span of the top-r eigenvectors of X X'.
inline Eigen::MatrixXd rank_r_common_component(const Eigen::MatrixXd& X, int r) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(X * X.transpose());
  require_numeric(es.info() == Eigen::Success, "impute_em: eigendecomposition failed");
  const Eigen::Index n = X.rows();
  Eigen::MatrixXd E(n, r);
  for (int j = 0; j < r; ++j) E.col(j) = es.eigenvectors().col(n - 1 - j);
  // Lambda = sqrt(n) E, F = X' Lambda / n, common = Lambda F' = E E' X.
  return E * (E.transpose() * X);
}

}  // namespace detail

/// EM-style imputation at fixed rank: fill the missing entries, take the
/// principal-components reconstruction, and replace only the missing
/// entries with it, iterating until the imputed values settle. Observed
/// entries are never modified.
inline ImputationResult impute_em(const Panel& panel, int r, const ImputeOptions& opts = {}) {
  panel.validate();
  const Eigen::Index n = panel.n(), T = panel.T();
  require(r >= 1 && r <= std::min(n, T), "impute_em: rank out of range");
  for (Eigen::Index i = 0; i < n; ++i) {
    require_data(panel.mask.row(i).any(), "impute_em: fully-missing row " +
                                              panel.entity_ids[static_cast<std::size_t>(i)]);
  }
  for (Eigen::Index t = 0; t < T; ++t) {
    require_data(panel.mask.col(t).any(), "impute_em: fully-missing column at tick " +
                                              std::to_string(panel.time_index[static_cast<std::size_t>(t)]));
  }

  ImputationResult out;
  out.rank_used = r;
  Eigen::MatrixXd work = panel.values;
  detail::initialize_missing(panel, work, opts.meta);

  double change = 0.0;
  int iter = 0;
  for (iter = 1; iter <= opts.max_iter; ++iter) {
    const Eigen::MatrixXd fitted = detail::rank_r_common_component(work, r);
    change = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index t = 0; t < T; ++t) {
        if (!panel.mask(i, t)) {
          change = std::max(change, std::abs(fitted(i, t) - work(i, t)));
          work(i, t) = fitted(i, t);
        }
      }
    }
    if (change < opts.tol) break;
  }

  out.iterations = std::min(iter, opts.max_iter);
  out.final_change = change;
  out.completed = panel;
  out.completed.values = std::move(work);
  out.completed.mask.setConstant(true);
  return out;
}

// ---------------------------------------------------------------------------
// Rolling-origin evaluation

struct EvaluationPlan {
  std::vector<std::pair<std::int64_t, std::int64_t>> test_periods;  // inclusive tick ranges
  std::vector<int> horizons = {1, 2, 3, 4, 5, 6};
  int window_length = 500;
  std::vector<std::string> target_entities;  // empty = all

  void validate() const {
    require_data(!test_periods.empty(), "EvaluationPlan: no test periods");
    for (const auto& [a, b] : test_periods) {
      require_data(a <= b, "EvaluationPlan: period start after end");
    }
    require_data(!horizons.empty(), "EvaluationPlan: no horizons");
    for (int h : horizons) require_data(h >= 1, "EvaluationPlan: horizons must be >= 1");
    require_data(window_length >= 16, "EvaluationPlan: window too short");
  }
};

struct PipelineConfig {
  QuantileGrid grid = QuantileGrid::standard();
  int qfm_r_max = 20;                 // candidate bound for the quantile IC
  int pca_r_max = 20;                 // candidate bound for the mean-factor IC
  std::optional<int> fixed_qfm_r{};   // skip selection (tests / speed)
  std::optional<int> fixed_sw_r{};
  int near_k = 10;                    // pooled stations, including self
  WeightMode weight_mode = WeightMode::markov;
  int ar_p_max = 6;
  int arima_q_max = 6;
  double max_failure_fraction = 0.01;
  int threads = 1;
  QfmOptions qfm{};
  QrOptions qr{};
  // Strict mode: accept a masked panel and impute each training window from
  // its own columns only, instead of treating whole-panel imputation as
  // preprocessing. Forecasts whose realized value is missing are skipped.
  bool strict_imputation = false;
  int strict_impute_rank = 3;
  ImputeOptions strict_impute{};
};

struct ForecastRecord {
  std::string entity_id;
  int period = 0;  // 1-based
  int horizon = 1;
  Method method = Method::naive;
  std::int64_t origin_tick = 0;
  double forecast = 0.0;
  double realized = 0.0;
};

struct AggregateRow {
  int period = 0;
  int horizon = 1;
  Method method = Method::naive;
  double mae = 0.0;
  std::int64_t n_forecasts = 0;
};

struct StationRow {
  std::string entity_id;
  int period = 0;
  int horizon = 1;
  Method method = Method::naive;
  double mae = 0.0;
  std::int64_t n_forecasts = 0;
  int band = 0;  // 1..5 by the 0.2/0.4/0.6/0.8 quantiles of station MAEs
};

struct ForecastReport {
  std::vector<ForecastRecord> records;
  std::vector<AggregateRow> aggregates;
  std::vector<StationRow> stations;
  std::vector<std::string> failure_log;
  std::map<std::string, std::vector<int>> selected_qfm_r;  // "period p" -> per-level r
  std::map<std::string, int> selected_sw_r;                // "period p" -> r
};

/// Per-period factor counts, selected on trailing windows that end at or
/// before the period's first forecast origin so that no evaluation origin
/// ever depends on later data.
struct PeriodSelections {
  std::vector<std::vector<int>> qfm_r;  // per period, per level
  std::vector<int> sw_r;                // per period
};

namespace detail {

inline Eigen::Index tick_to_column(const Panel& panel, std::int64_t tick, const char* what) {
  const auto it = std::lower_bound(panel.time_index.begin(), panel.time_index.end(), tick);
  require_data(it != panel.time_index.end() && *it == tick,
               std::string(what) + ": tick " + std::to_string(tick) + " not in the panel");
  return static_cast<Eigen::Index>(it - panel.time_index.begin());
}

// Training-window slice; in strict mode the window is imputed from its own
// columns before any fitting.
inline Panel window_slice(const Panel& panel, Eigen::Index first_col, Eigen::Index W,
                          const PipelineConfig& config) {
  Panel slice;
  slice.values = panel.values.middleCols(first_col, W);
  slice.mask = panel.mask.middleCols(first_col, W);
  slice.entity_ids = panel.entity_ids;
  slice.time_index.assign(panel.time_index.begin() + first_col,
                          panel.time_index.begin() + first_col + W);
  if (!slice.mask.all()) {
    require_data(config.strict_imputation, "window contains missing entries; impute the panel first");
    slice = impute_em(slice, config.strict_impute_rank, config.strict_impute).completed;
  }
  return slice;
}

}  // namespace detail

/// Factor-count selection for every period: averages the criterion choices
/// over `n_probe` trailing windows ending at the period's first forecast
/// origin, using the complete panel as an approximation for every
/// leave-one-out predictor set.
inline PeriodSelections select_period_ranks(const Panel& panel, const EvaluationPlan& plan,
                                            const PipelineConfig& config, int n_probe = 5) {
  plan.validate();
  const int max_h = *std::max_element(plan.horizons.begin(), plan.horizons.end());
  PeriodSelections out;
  for (const auto& [start_tick, end_tick] : plan.test_periods) {
    const Eigen::Index start_col = detail::tick_to_column(panel, start_tick, "select_period_ranks");
    const Eigen::Index end_col = detail::tick_to_column(panel, end_tick, "select_period_ranks");
    const Eigen::Index first_origin = start_col - max_h;
    const Eigen::Index W = plan.window_length;
    require_data(first_origin - W + 1 >= 0, "select_period_ranks: window leaves the panel");
    const Eigen::Index stride = std::max<Eigen::Index>(1, (end_col - start_col + 1) / n_probe);

    std::vector<Eigen::Index> probes;
    for (int j = 0; j < n_probe; ++j) {
      const Eigen::Index origin = first_origin - static_cast<Eigen::Index>(j) * stride;
      if (origin - W + 1 < 0) break;
      probes.push_back(origin);
    }
    require_data(!probes.empty(), "select_period_ranks: no usable probe window");

    std::vector<int> qfm_r;
    if (config.fixed_qfm_r.has_value()) {
      qfm_r.assign(config.grid.size(), *config.fixed_qfm_r);
    } else {
      for (double tau : config.grid.levels) {
        double acc = 0.0;
        for (const Eigen::Index origin : probes) {
          const Panel window = detail::window_slice(panel, origin - W + 1, W, config);
          acc += select_r_quantile(window, tau, config.qfm_r_max, config.qfm).chosen_r;
        }
        qfm_r.push_back(static_cast<int>(std::lround(acc / static_cast<double>(probes.size()))));
      }
    }
    out.qfm_r.push_back(qfm_r);

    if (config.fixed_sw_r.has_value()) {
      out.sw_r.push_back(*config.fixed_sw_r);
    } else {
      double acc = 0.0;
      for (const Eigen::Index origin : probes) {
        const Panel window = detail::window_slice(panel, origin - W + 1, W, config);
        acc += select_r_bai_ng(center_rows(window).first, config.pca_r_max).chosen_r;
      }
      out.sw_r.push_back(static_cast<int>(std::lround(acc / static_cast<double>(probes.size()))));
    }
  }
  return out;
}

/// Everything produced for one entity at one forecast origin.
struct EntityOriginResult {
  std::map<Method, std::map<int, double>> forecasts;  // method -> horizon -> value
  std::map<int, std::vector<int>> state_history;      // horizon -> states over the window
  std::map<int, int> current_state;                   // horizon -> state at the origin
  std::map<int, Eigen::VectorXd> level_forecasts;     // horizon -> per-level quantile forecasts
  std::map<int, int> ext_current_state;               // extended-variant counterparts
  std::map<int, Eigen::VectorXd> ext_level_forecasts;
  bool failed = false;
  std::string error;
};

/// Per-(entity, level) quantile-factor warm starts carried across origins.
/// Each cached factor block came from the previous origin's fit, i.e. from
/// data strictly before the current origin.
struct QfmWarmCache {
  std::map<std::pair<std::string, int>, Eigen::MatrixXd> factors;
};

/// Forecasts for all requested entities at a single origin column. Every
/// quantity is computed from panel columns <= origin_col. The proposed
/// method's Markov combination pools the state histories of the nearest
/// stations (including self) at this same origin.
inline std::map<std::string, EntityOriginResult> evaluate_at_origin(
    const Panel& panel, const std::vector<StationMeta>& meta, const EvaluationPlan& plan,
    const PipelineConfig& config, const std::vector<int>& qfm_r, int sw_r,
    Eigen::Index origin_col, const std::vector<int>& horizons,
    const std::vector<std::string>& targets, const std::set<Method>& methods,
    QfmWarmCache* warm = nullptr) {
  require_data(config.strict_imputation || panel.complete(),
               "evaluate_at_origin: panel has missing entries (impute first or enable strict mode)");
  const Eigen::Index W = plan.window_length;
  const Eigen::Index first_col = origin_col - W + 1;
  require_data(first_col >= 0 && origin_col < panel.T(), "evaluate_at_origin: window leaves the panel");

  // Strict mode: complete the training window from its own columns only.
  const Panel* window_panel = &panel;
  Panel strict_window;
  if (config.strict_imputation && !panel.complete()) {
    strict_window = detail::window_slice(panel, first_col, W, config);
    window_panel = nullptr;  // window views come from strict_window below
  }
  auto window_row = [&](Eigen::Index row) -> Eigen::RowVectorXd {
    return window_panel != nullptr
               ? Eigen::RowVectorXd(panel.values.row(row).segment(first_col, W))
               : Eigen::RowVectorXd(strict_window.values.row(row));
  };

  std::map<std::string, Eigen::Index> row_of;
  for (Eigen::Index i = 0; i < panel.n(); ++i) row_of[panel.entity_ids[static_cast<std::size_t>(i)]] = i;

  const bool needs_quantile = methods.count(Method::proposed) > 0 || methods.count(Method::extended) > 0;
  const bool markov = config.weight_mode == WeightMode::markov;

  // The entity set that needs per-level fits: targets plus, for Markov
  // pooling, their nearest stations.
  std::vector<std::string> fit_entities = targets;
  if (needs_quantile && markov) {
    std::set<std::string> seen(targets.begin(), targets.end());
    for (const auto& id : targets) {
      for (const auto& nb : nearest_stations(meta, id, std::min<int>(config.near_k, static_cast<int>(meta.size())))) {
        if (seen.insert(nb).second) fit_entities.push_back(nb);
      }
    }
  }

  // Pre-create cache slots so parallel workers never mutate the map shape.
  if (warm != nullptr && needs_quantile) {
    for (const auto& id : fit_entities) {
      for (std::size_t l = 0; l < config.grid.size(); ++l) {
        warm->factors.try_emplace({id, static_cast<int>(l)});
      }
    }
  }

  std::vector<EntityOriginResult> slots(fit_entities.size());
  parallel_for(fit_entities.size(), config.threads, [&](std::size_t idx) {
    EntityOriginResult& res = slots[idx];
    try {
      const std::string& id = fit_entities[idx];
      require_data(row_of.count(id) > 0, "evaluate_at_origin: unknown entity " + id);
      const Eigen::Index row = row_of.at(id);

      // Window views: target series and the other-entity predictor panel.
      SeriesWindow target;
      target.values = window_row(row).transpose();
      target.time_index.assign(panel.time_index.begin() + first_col,
                               panel.time_index.begin() + origin_col + 1);
      Panel predictors;
      predictors.values.resize(panel.n() - 1, W);
      Eigen::Index at = 0;
      for (Eigen::Index i = 0; i < panel.n(); ++i) {
        if (i == row) continue;
        predictors.values.row(at) = window_row(i);
        predictors.entity_ids.push_back(panel.entity_ids[static_cast<std::size_t>(i)]);
        ++at;
      }
      predictors.time_index = target.time_index;
      predictors.mask = BoolMask::Constant(panel.n() - 1, W, true);

      const bool is_target = std::find(targets.begin(), targets.end(), id) != targets.end();

      std::optional<ArModel> ar_model;
      std::optional<ArimaModel> arima_model;
      if (is_target && methods.count(Method::ar)) ar_model = fit_ar_aic(target, config.ar_p_max);
      if (is_target && methods.count(Method::arima)) {
        arima_model = fit_arima(target, config.ar_p_max, config.arima_q_max);
      }

      if (is_target && methods.count(Method::naive)) {
        for (int h : horizons) res.forecasts[Method::naive][h] = forecast_naive(target, h);
      }
      if (ar_model) {
        for (int h : horizons) res.forecasts[Method::ar][h] = forecast_ar(*ar_model, target, h);
      }
      if (arima_model) {
        for (int h : horizons) res.forecasts[Method::arima][h] = forecast_arima(*arima_model, target, h);
      }

      if (is_target && methods.count(Method::near)) {
        // r nearest stations (excluding self), matching the SW factor count.
        const auto ids = nearest_stations(meta, id, std::min<int>(sw_r + 1, static_cast<int>(meta.size())));
        Eigen::MatrixXd nb(static_cast<Eigen::Index>(ids.size()) - 1, W);
        Eigen::Index nb_at = 0;
        for (const auto& nid : ids) {
          if (nid == id) continue;
          nb.row(nb_at++) = window_row(row_of.at(nid));
        }
        for (int h : horizons) {
          const NearStationsModel m = fit_near_stations(target, nb, h);
          res.forecasts[Method::near][h] =
              forecast_near_stations(m, nb.col(W - 1), target.values[W - 1]);
        }
      }

      if (is_target && methods.count(Method::sw2002)) {
        for (int h : horizons) {
          const SwForecastModel m = fit_sw2002(predictors, target, h, sw_r);
          res.forecasts[Method::sw2002][h] = forecast_sw2002_latest(m, target);
        }
      }

      if (needs_quantile && (is_target || markov)) {
        // The per-level decompositions are horizon-independent: fit once
        // (warm-started from the previous origin when available) and share
        // them across horizons and model variants.
        std::vector<FactorDecomposition> decs;
        for (std::size_t l = 0; l < config.grid.size(); ++l) {
          QfmOptions qo = config.qfm;
          if (warm != nullptr) {
            const Eigen::MatrixXd& prev = warm->factors.at({id, static_cast<int>(l)});
            if (prev.rows() == W && prev.cols() == qfm_r[l]) {
              Eigen::MatrixXd init(W, prev.cols());
              init.topRows(W - 1) = prev.bottomRows(W - 1);
              init.row(W - 1) = prev.row(W - 1);
              qo.factor_init = std::move(init);
            }
          }
          decs.push_back(fit_quantile_factors(predictors, config.grid.levels[l], qfm_r[l], qo));
        }
        if (warm != nullptr) {
          for (std::size_t l = 0; l < config.grid.size(); ++l) {
            warm->factors.at({id, static_cast<int>(l)}) = decs[l].factors;
          }
        }

        QuantileForecastOptions qopts;
        qopts.qfm = config.qfm;
        qopts.qr = config.qr;
        qopts.decompositions = decs;
        for (int h : horizons) {
          const QuantileForecastModel base =
              fit_quantile_forecaster(predictors, target, h, config.grid, qfm_r, qopts);
          res.state_history[h] = base.state_history;
          res.current_state[h] = base.current_state;
          if (is_target) {
            res.level_forecasts[h] = quantile_forecasts_latest(base, target);
            if (!markov && methods.count(Method::proposed)) {
              res.forecasts[Method::proposed][h] =
                  combine(base, res.level_forecasts[h], base.current_state, WeightMode::interval).point;
            }
            if (methods.count(Method::extended)) {
              const QuantileForecastModel ext =
                  fit_extended_forecaster(predictors, target, h, config.grid, qfm_r, qopts);
              res.ext_current_state[h] = ext.current_state;
              res.ext_level_forecasts[h] = quantile_forecasts_latest(ext, target);
              if (!markov) {
                res.forecasts[Method::extended][h] =
                    combine(ext, res.ext_level_forecasts[h], ext.current_state, WeightMode::interval).point;
              }
            }
          }
        }
      }
    } catch (const std::exception& e) {
      res.failed = true;
      res.error = e.what();
    }
  });

  std::map<std::string, EntityOriginResult> results;
  for (std::size_t i = 0; i < fit_entities.size(); ++i) results[fit_entities[i]] = std::move(slots[i]);

  // Markov combination with transitions pooled over the nearest stations.
  if (needs_quantile && markov) {
    const StateMap map = StateMap::for_grid(config.grid);
    Eigen::VectorXd prior = Eigen::Map<const Eigen::VectorXd>(map.state_prior.data(),
                                                              static_cast<Eigen::Index>(map.state_prior.size()));
    for (const auto& id : targets) {
      EntityOriginResult& res = results[id];
      if (res.failed) continue;
      try {
        const auto pool_ids =
            nearest_stations(meta, id, std::min<int>(config.near_k, static_cast<int>(meta.size())));
        for (int h : horizons) {
          std::vector<std::vector<int>> histories;
          for (const auto& nid : pool_ids) {
            const auto& nres = results.at(nid);
            if (!nres.failed && nres.state_history.count(h)) {
              histories.push_back(nres.state_history.at(h));
            }
          }
          const Eigen::MatrixXd P = estimate_transition_pooled(histories, h, map.n_states(), prior);
          QuantileForecastModel shim;
          shim.grid = config.grid;
          shim.state_map = map;
          shim.transition = P;
          if (methods.count(Method::proposed)) {
            res.forecasts[Method::proposed][h] =
                combine(shim, res.level_forecasts.at(h), res.current_state.at(h), WeightMode::markov).point;
          }
          if (methods.count(Method::extended)) {
            res.forecasts[Method::extended][h] =
                combine(shim, res.ext_level_forecasts.at(h), res.ext_current_state.at(h), WeightMode::markov).point;
          }
        }
      } catch (const std::exception& e) {
        res.failed = true;
        res.error = e.what();
      }
    }
  }
  return results;
}

/// Full rolling-origin evaluation over the plan's periods and horizons.
inline ForecastReport run_evaluation(const Panel& panel, const std::vector<StationMeta>& meta,
                                     const EvaluationPlan& plan, const std::set<Method>& methods,
                                     const PipelineConfig& config) {
  require_data(panel.complete() || config.strict_imputation,
               "run_evaluation: panel must be imputed/complete (or enable strict mode)");
  plan.validate();
  validate_station_meta(meta);
  require(!methods.empty(), "run_evaluation: empty method set");

  std::vector<std::string> targets = plan.target_entities;
  if (targets.empty()) targets = panel.entity_ids;
  std::map<std::string, Eigen::Index> row_of;
  for (Eigen::Index i = 0; i < panel.n(); ++i) row_of[panel.entity_ids[static_cast<std::size_t>(i)]] = i;
  for (const auto& id : targets) require_data(row_of.count(id) > 0, "run_evaluation: unknown target " + id);

  const PeriodSelections selections = select_period_ranks(panel, plan, config);

  ForecastReport report;
  for (std::size_t p = 0; p < plan.test_periods.size(); ++p) {
    report.selected_qfm_r["period " + std::to_string(p + 1)] = selections.qfm_r[p];
    report.selected_sw_r["period " + std::to_string(p + 1)] = selections.sw_r[p];
  }

  std::size_t total_pairs = 0, failed_pairs = 0;
  QfmWarmCache warm;
  for (std::size_t p = 0; p < plan.test_periods.size(); ++p) {
    const auto [start_tick, end_tick] = plan.test_periods[p];
    const Eigen::Index start_col = detail::tick_to_column(panel, start_tick, "run_evaluation");
    const Eigen::Index end_col = detail::tick_to_column(panel, end_tick, "run_evaluation");

    // Union of origins over horizons: T such that start <= T + h <= end.
    std::set<Eigen::Index> origin_set;
    for (int h : plan.horizons) {
      for (Eigen::Index s = start_col; s <= end_col; ++s) {
        if (s - h >= 0) origin_set.insert(s - h);
      }
    }
    for (const Eigen::Index origin : origin_set) {
      std::vector<int> active;
      for (int h : plan.horizons) {
        const Eigen::Index s = origin + h;
        if (s >= start_col && s <= end_col && s < panel.T()) active.push_back(h);
      }
      if (active.empty()) continue;

      const auto results = evaluate_at_origin(panel, meta, plan, config, selections.qfm_r[p],
                                              selections.sw_r[p], origin, active, targets, methods, &warm);
      for (const auto& id : targets) {
        const auto& res = results.at(id);
        ++total_pairs;
        if (res.failed) {
          ++failed_pairs;
          report.failure_log.push_back(id + " @ tick " +
                                       std::to_string(panel.time_index[static_cast<std::size_t>(origin)]) +
                                       ": " + res.error);
          continue;
        }
        for (const auto& [method, by_h] : res.forecasts) {
          for (const auto& [h, value] : by_h) {
            // Strict mode can leave the realized value unobserved; such
            // forecasts cannot be scored.
            if (!panel.mask(row_of.at(id), origin + h)) continue;
            ForecastRecord rec;
            rec.entity_id = id;
            rec.period = static_cast<int>(p) + 1;
            rec.horizon = h;
            rec.method = method;
            rec.origin_tick = panel.time_index[static_cast<std::size_t>(origin)];
            rec.forecast = value;
            rec.realized = panel.values(row_of.at(id), origin + h);
            report.records.push_back(rec);
          }
        }
      }
    }
  }
  require_numeric(static_cast<double>(failed_pairs) <=
                      config.max_failure_fraction * static_cast<double>(std::max<std::size_t>(1, total_pairs)),
                  "run_evaluation: too many per-(entity,origin) failures");

  // Aggregates: per (period, horizon, method) and per station, with the
  // station rows banded by the 0.2/0.4/0.6/0.8 quantiles of station MAEs.
  std::map<std::tuple<int, int, Method>, std::pair<double, std::int64_t>> agg;
  std::map<std::tuple<std::string, int, int, Method>, std::pair<double, std::int64_t>> st;
  for (const auto& rec : report.records) {
    const double err = std::abs(rec.forecast - rec.realized);
    auto& a = agg[{rec.period, rec.horizon, rec.method}];
    a.first += err;
    a.second += 1;
    auto& s = st[{rec.entity_id, rec.period, rec.horizon, rec.method}];
    s.first += err;
    s.second += 1;
  }
  for (const auto& [key, sum_count] : agg) {
    AggregateRow row;
    row.period = std::get<0>(key);
    row.horizon = std::get<1>(key);
    row.method = std::get<2>(key);
    row.mae = sum_count.first / static_cast<double>(sum_count.second);
    row.n_forecasts = sum_count.second;
    report.aggregates.push_back(row);
  }
  for (const auto& [key, sum_count] : st) {
    StationRow row;
    row.entity_id = std::get<0>(key);
    row.period = std::get<1>(key);
    row.horizon = std::get<2>(key);
    row.method = std::get<3>(key);
    row.mae = sum_count.first / static_cast<double>(sum_count.second);
    row.n_forecasts = sum_count.second;
    report.stations.push_back(row);
  }
  // Band assignment within each (period, horizon, method) group.
  std::map<std::tuple<int, int, Method>, std::vector<double>> group_maes;
  for (const auto& row : report.stations) {
    group_maes[{row.period, row.horizon, row.method}].push_back(row.mae);
  }
  for (auto& row : report.stations) {
    const auto& maes = group_maes[{row.period, row.horizon, row.method}];
    int band = 1;
    for (double q : {0.2, 0.4, 0.6, 0.8}) {
      if (row.mae > sample_quantile(maes, q)) ++band;
    }
    row.band = band;
  }
  return report;
}

// ---------------------------------------------------------------------------
// Report export

enum class ReportFormat { csv, markdown };

/// CSV: one row per (entity, period, horizon, method) with its MAE.
/// Markdown: per-period tables with one row per method and one column per
/// horizon, the lowest MAE per (period, horizon) in bold, plus the station
/// MAE quantile band cut points.
inline void export_report(const ForecastReport& report, const std::string& path, ReportFormat format) {
  std::ofstream os(path);
  require_data(os.good(), "export_report: cannot open " + path);
  if (format == ReportFormat::csv) {
    os << "entity_id,period,h,method,mae,n_forecasts\n";
    for (const auto& row : report.stations) {
      os << row.entity_id << ',' << row.period << ',' << row.horizon << ',' << to_string(row.method)
         << ',' << format_double(row.mae) << ',' << row.n_forecasts << '\n';
    }
    return;
  }

  std::set<int> periods;
  std::set<int> horizons;
  std::vector<Method> methods;
  for (const auto& row : report.aggregates) {
    periods.insert(row.period);
    horizons.insert(row.horizon);
    if (std::find(methods.begin(), methods.end(), row.method) == methods.end()) {
      methods.push_back(row.method);
    }
  }
  auto lookup = [&](int p, int h, Method m) -> const AggregateRow* {
    for (const auto& row : report.aggregates) {
      if (row.period == p && row.horizon == h && row.method == m) return &row;
    }
    return nullptr;
  };
  os << "# Forecast evaluation\n";
  for (int p : periods) {
    os << "\n## Period " << p << "\n\n";
    os << "| method |";
    for (int h : horizons) os << " h=" << h << " |";
    os << "\n|---|";
    for (std::size_t i = 0; i < horizons.size(); ++i) os << "---|";
    os << "\n";
    for (Method m : methods) {
      os << "| " << to_string(m) << " |";
      for (int h : horizons) {
        const AggregateRow* row = lookup(p, h, m);
        if (row == nullptr) {
          os << " - |";
          continue;
        }
        bool is_min = true;
        for (Method other : methods) {
          const AggregateRow* o = lookup(p, h, other);
          if (o != nullptr && o->mae < row->mae) is_min = false;
        }
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%.3f", row->mae);
        if (is_min) {
          os << " **" << buf << "** |";
        } else {
          os << ' ' << buf << " |";
        }
      }
      os << "\n";
    }
    // Station MAE bands mirror the map figure: cut points per horizon.
    os << "\nStation MAE band cut points (0.2/0.4/0.6/0.8 quantiles):\n\n";
    for (int h : horizons) {
      for (Method m : methods) {
        std::vector<double> maes;
        for (const auto& row : report.stations) {
          if (row.period == p && row.horizon == h && row.method == m) maes.push_back(row.mae);
        }
        if (maes.size() < 5) continue;
        char buf[160];
        std::snprintf(buf, sizeof(buf), "- h=%d %s: %.3f / %.3f / %.3f / %.3f\n", h,
                      to_string(m).c_str(), sample_quantile(maes, 0.2), sample_quantile(maes, 0.4),
                      sample_quantile(maes, 0.6), sample_quantile(maes, 0.8));
        os << buf;
      }
    }
  }
}

}  // namespace qff
