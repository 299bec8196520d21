// Acceptance suite: one pass/fail line per criterion. Run with no
// arguments for the full suite or pass criterion numbers to select a
// subset, e.g. `qff_acceptance 1 7 11`.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "qff/pipeline.hpp"
#include "qff/simulation.hpp"

using namespace qff;

namespace {

struct CheckFailure {
  std::string what;
};

void expect(bool ok, const std::string& what) {
  if (!ok) throw CheckFailure{what};
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.4g", v);
  return buf;
}

// ---------------------------------------------------------------------------
// Criterion 1: solver objective matches the brute-force oracle.

std::string criterion_qr_oracle() {
  const auto start = std::chrono::steady_clock::now();
  RngStream rng(1001);
  double worst = 0.0;
  for (int instance = 0; instance < 200; ++instance) {
    const int T = 5 + static_cast<int>(rng.uniform_int(26));  // up to 30
    const int k = 1 + static_cast<int>(rng.uniform_int(2));
    Eigen::MatrixXd X(T, k);
    Eigen::VectorXd y(T);
    for (int i = 0; i < T; ++i) {
      X(i, 0) = instance % 2 == 0 ? 1.0 : rng.normal();
      if (k == 2) X(i, 1) = rng.normal();
      double noise = 0.0;
      switch (instance % 3) {
        case 0: noise = rng.normal(); break;
        case 1: noise = rng.student_t2(); break;
        case 2: noise = rng.exponential(3.0); break;
      }
      y[i] = 0.7 * X(i, k - 1) + noise;
    }
    for (double tau : {0.1, 0.5, 0.9}) {
      const QrFit fit = fit_quantile_regression(X, y, tau);
      const double oracle = oracle::exact_qr_objective(X, y, tau);
      worst = std::max(worst, fit.objective - oracle);
      expect(std::abs(fit.objective - oracle) <= 1e-3,
             "objective gap " + fmt(fit.objective - oracle) + " at instance " +
                 std::to_string(instance) + ", tau " + fmt(tau));
    }
  }
  const double elapsed =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  expect(elapsed < 30.0, "runtime " + fmt(elapsed) + " s exceeds 30 s");
  return "600 fits, worst objective excess " + fmt(worst) + ", " + fmt(elapsed) + " s";
}

// ---------------------------------------------------------------------------
// Criterion 2: intercept-only fit returns a sample tau-quantile.

std::string criterion_intercept_quantile() {
  RngStream rng(1002);
  for (int sample = 0; sample < 50; ++sample) {
    const int T = 5 + static_cast<int>(rng.uniform_int(40));
    Eigen::VectorXd y(T);
    for (int i = 0; i < T; ++i) y[i] = sample % 2 == 0 ? rng.normal() : rng.exponential(2.0);
    const double tau = 0.05 + 0.9 * rng.uniform();
    const QrFit fit = fit_quantile_regression(Eigen::MatrixXd::Ones(T, 1), y, tau);
    const double beta = fit.coefficients[0];

    // The optimal set is the interval of sample points attaining the exact
    // minimum; any point between the bracketing order statistics passes.
    double best = std::numeric_limits<double>::infinity();
    for (int i = 0; i < T; ++i) {
      best = std::min(best,
                      mean_check_loss(y.array() - y[i], tau));
    }
    double lo = std::numeric_limits<double>::infinity();
    double hi = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < T; ++i) {
      if (mean_check_loss(y.array() - y[i], tau) <= best + 1e-12) {
        lo = std::min(lo, y[i]);
        hi = std::max(hi, y[i]);
      }
    }
    expect(fit.objective <= best + 1e-12, "attained objective above the sample optimum");
    expect(beta >= lo - 1e-9 && beta <= hi + 1e-9,
           "fit " + fmt(beta) + " outside bracket [" + fmt(lo) + ", " + fmt(hi) + "]");
  }
  return "50 samples, every fit inside the bracketing order statistics";
}

// ---------------------------------------------------------------------------
// Criterion 3: QFM descent and noiseless recovery.

std::string criterion_qfm_descent() {
  RngStream rng(1003);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 8 + static_cast<int>(rng.uniform_int(12));
    const int T = 8 + static_cast<int>(rng.uniform_int(12));
    Eigen::MatrixXd m(n, T);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      const double u = trial % 2 == 0 ? rng.student_t2() : rng.exponential(2.0);
      m(i % n, i / n) = u;
    }
    const Panel panel = Panel::from_matrix(m);
    const double tau = 0.1 + 0.8 * rng.uniform();
    const FactorDecomposition dec = fit_quantile_factors(panel, tau, 2);
    for (std::size_t s = 1; s < dec.objective_trace.size(); ++s) {
      expect(dec.objective_trace[s] <= dec.objective_trace[s - 1] + 1e-12,
             "objective increased at sweep " + std::to_string(s) + " of trial " +
                 std::to_string(trial));
    }
  }
  double worst = 0.0;
  for (double tau : {0.1, 0.25, 0.5, 0.75, 0.9}) {
    Eigen::VectorXd lam(12), f(18);
    for (int i = 0; i < 12; ++i) lam[i] = rng.normal();
    for (int t = 0; t < 18; ++t) f[t] = rng.normal();
    const Panel panel = Panel::from_matrix(lam * f.transpose());
    const FactorDecomposition dec = fit_quantile_factors(panel, tau, 1);
    worst = std::max(worst, dec.objective);
    expect(dec.objective < 1e-6, "rank-1 objective " + fmt(dec.objective) + " at tau " + fmt(tau));
  }
  return "50 panels monotone, rank-1 recovery worst objective " + fmt(worst);
}

// ---------------------------------------------------------------------------
// Criteria 4 + 5: Table 1 and Table 2 reproduction (scaled), shared runs.

struct CellAccumulator {
  double pca_r2[3] = {0, 0, 0};
  double qfm_r2[3] = {0, 0, 0};
  std::map<Method, std::vector<double>> abs_errors;
};

CellAccumulator run_table_cell(ErrorDist dist, int reps, std::uint64_t seed, int threads) {
  SimulationConfig cfg;
  cfg.n = 100;
  cfg.T = 100;
  cfg.error_dist = dist;
  cfg.target_error_dist = dist;
  cfg.replications = reps;
  cfg.seed = seed;
  const QuantileGrid grid = QuantileGrid::standard();
  const std::vector<Method> methods = {Method::naive, Method::ar, Method::arima, Method::sw2002,
                                       Method::proposed};

  struct RepOut {
    double pca[3], qfm[3];
    std::map<Method, double> err;
  };
  std::vector<RepOut> outs(static_cast<std::size_t>(reps));
  parallel_for(static_cast<std::size_t>(reps), threads, [&](std::size_t rep) {
    RngStream rng(cfg.seed, rep);
    const GeneratedData data = generate_panel(cfg, rng);
    SeriesWindow train;
    train.values = data.target.values.head(100);
    train.time_index.assign(data.target.time_index.begin(), data.target.time_index.begin() + 100);
    const double truth = data.target.values[100];

    // Shared quantile-factor fits: used for both the R^2 scores and the
    // proposed forecaster.
    std::vector<FactorDecomposition> decs;
    Eigen::MatrixXd stacked(100, 15);
    for (int l = 0; l < 5; ++l) {
      decs.push_back(fit_quantile_factors(data.panel, grid.levels[static_cast<std::size_t>(l)], 3));
      stacked.middleCols(3 * l, 3) = decs.back().factors;
    }
    const FactorDecomposition pca = fit_pca_factors(center_rows(data.panel).first, 3);
    const Eigen::VectorXd* truths[3] = {&data.factors.f1, &data.factors.f2, &data.factors.f3};
    RepOut& out = outs[rep];
    for (int k = 0; k < 3; ++k) {
      out.pca[k] = adjusted_r_squared(*truths[k], pca.factors);
      out.qfm[k] = adjusted_r_squared(*truths[k], stacked);
    }

    for (Method method : methods) {
      double forecast = 0.0;
      switch (method) {
        case Method::naive: forecast = forecast_naive(train, 1); break;
        case Method::ar: forecast = forecast_ar(fit_ar_aic(train), train, 1); break;
        case Method::arima: forecast = forecast_arima(fit_arima(train), train, 1); break;
        case Method::sw2002:
          forecast = forecast_sw2002_latest(fit_sw2002(data.panel, train, 1, 3), train);
          break;
        case Method::proposed: {
          QuantileForecastOptions opts;
          opts.decompositions = decs;
          const QuantileForecastModel model =
              fit_quantile_forecaster(data.panel, train, 1, grid, {3, 3, 3, 3, 3}, opts);
          forecast = forecast_combined_latest(model, train, WeightMode::interval).point;
          break;
        }
        default: break;
      }
      out.err[method] = std::abs(forecast - truth);
    }
  });

  CellAccumulator acc;
  for (const auto& out : outs) {
    for (int k = 0; k < 3; ++k) {
      acc.pca_r2[k] += out.pca[k] / reps;
      acc.qfm_r2[k] += out.qfm[k] / reps;
    }
    for (const auto& [method, err] : out.err) acc.abs_errors[method].push_back(err);
  }
  return acc;
}

double mean_of(const std::vector<double>& v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double se_of(const std::vector<double>& v) {
  const double m = mean_of(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1) / static_cast<double>(v.size()));
}

std::map<ErrorDist, CellAccumulator>& table_cells() {
  static std::map<ErrorDist, CellAccumulator> cells = [] {
    std::map<ErrorDist, CellAccumulator> out;
    for (ErrorDist dist : {ErrorDist::normal, ErrorDist::student_t2, ErrorDist::gamma15}) {
      out.emplace(dist, run_table_cell(dist, 100, 20240401, 0));
    }
    return out;
  }();
  return cells;
}

std::string criterion_table1() {
  const auto& cells = table_cells();
  const auto& normal = cells.at(ErrorDist::normal);
  const auto& t2 = cells.at(ErrorDist::student_t2);
  const auto& gamma = cells.at(ErrorDist::gamma15);

  expect(normal.pca_r2[0] >= 0.98,
         "normal PCA R^2 for f1 = " + fmt(normal.pca_r2[0]) + " < 0.98");
  const double t2_gap = t2.qfm_r2[2] - t2.pca_r2[2];
  expect(t2_gap >= 0.20, "t(2) QFM-PCA gap for f3 = " + fmt(t2_gap) + " < 0.20");
  expect(gamma.qfm_r2[0] >= gamma.pca_r2[0] + 0.04,
         "gamma QFM f1 " + fmt(gamma.qfm_r2[0]) + " not above PCA f1 " + fmt(gamma.pca_r2[0]) +
             " + 0.04");
  return "normal PCA f1 " + fmt(normal.pca_r2[0]) + "; t2 f3 gap " + fmt(t2_gap) + " (QFM " +
         fmt(t2.qfm_r2[2]) + " vs PCA " + fmt(t2.pca_r2[2]) + "); gamma f1 QFM " +
         fmt(gamma.qfm_r2[0]) + " vs PCA " + fmt(gamma.pca_r2[0]);
}

std::string criterion_table2() {
  const auto& cells = table_cells();
  std::ostringstream note;

  const auto mae = [&](ErrorDist d, Method m) { return mean_of(cells.at(d).abs_errors.at(m)); };
  const auto se = [&](ErrorDist d, Method m) { return se_of(cells.at(d).abs_errors.at(m)); };

  // Normal block.
  {
    const double prop = mae(ErrorDist::normal, Method::proposed);
    const double sw = mae(ErrorDist::normal, Method::sw2002);
    const double naive = mae(ErrorDist::normal, Method::naive);
    expect(std::abs(prop - sw) <= 0.10,
           "normal |proposed - sw| = " + fmt(std::abs(prop - sw)) + " > 0.10");
    expect(prop <= naive - 0.15, "normal proposed " + fmt(prop) + " not 0.15 below naive " + fmt(naive));
    expect(sw <= naive - 0.15, "normal sw " + fmt(sw) + " not 0.15 below naive " + fmt(naive));
    note << "normal prop/sw/naive " << fmt(prop) << "/" << fmt(sw) << "/" << fmt(naive);
  }
  // Gamma block.
  {
    const double prop = mae(ErrorDist::gamma15, Method::proposed);
    const double sw = mae(ErrorDist::gamma15, Method::sw2002);
    const double naive = mae(ErrorDist::gamma15, Method::naive);
    expect(prop < sw, "gamma proposed " + fmt(prop) + " not below sw " + fmt(sw));
    expect(sw < naive, "gamma sw " + fmt(sw) + " not below naive " + fmt(naive));
    expect(prop >= 3.4 && prop <= 4.6, "gamma proposed " + fmt(prop) + " outside [3.4, 4.6]");
    note << "; gamma prop/sw/naive " << fmt(prop) << "/" << fmt(sw) << "/" << fmt(naive);
  }
  // t(2) block: proposed is the minimum or within one pooled SE of it.
  {
    double best = std::numeric_limits<double>::infinity();
    Method best_method = Method::naive;
    for (Method m : {Method::naive, Method::ar, Method::arima, Method::sw2002, Method::proposed}) {
      const double v = mae(ErrorDist::student_t2, m);
      if (v < best) {
        best = v;
        best_method = m;
      }
    }
    const double prop = mae(ErrorDist::student_t2, Method::proposed);
    const double pooled = std::sqrt(se(ErrorDist::student_t2, Method::proposed) *
                                        se(ErrorDist::student_t2, Method::proposed) +
                                    se(ErrorDist::student_t2, best_method) *
                                        se(ErrorDist::student_t2, best_method));
    expect(prop <= best + pooled, "t2 proposed " + fmt(prop) + " above best " + fmt(best) + " (" +
                                      to_string(best_method) + ") + pooled SE " + fmt(pooled));
    note << "; t2 prop " << fmt(prop) << " vs best " << fmt(best) << " (" << to_string(best_method)
         << ")";
  }
  return note.str();
}

// ---------------------------------------------------------------------------
// Criterion 6: Table 3 reproduction (scaled).

std::string criterion_table3() {
  SimulationConfig cfg;
  cfg.n = 100;
  cfg.T = 50;
  cfg.replications = 100;
  cfg.seed = 20240402;
  cfg.threads = 0;
  cfg.methods = {Method::naive, Method::proposed, Method::extended};
  const ExperimentReport report = run_extension_experiment({cfg});

  double prop = 0, prop_se = 0, ext = 0, ext_se = 0;
  for (const auto& row : report.rows) {
    if (row.statistic != "mae") continue;
    if (row.key == "proposed") {
      prop = row.value;
      prop_se = row.stderr_value;
    }
    if (row.key == "extended") {
      ext = row.value;
      ext_se = row.stderr_value;
    }
  }
  const double pooled = std::sqrt(prop_se * prop_se + ext_se * ext_se);
  expect(ext <= prop + pooled, "extended " + fmt(ext) + " above proposed " + fmt(prop) +
                                   " + pooled SE " + fmt(pooled));
  return "extended " + fmt(ext) + " vs proposed " + fmt(prop) + " (pooled SE " + fmt(pooled) +
         ", dropped " + std::to_string(report.dropped) + ")";
}

// ---------------------------------------------------------------------------
// Criterion 7: Markov machinery.

std::string criterion_markov() {
  Eigen::MatrixXd P(5, 5);
  P << 0.4, 0.3, 0.1, 0.1, 0.1,
       0.2, 0.4, 0.2, 0.1, 0.1,
       0.1, 0.2, 0.4, 0.2, 0.1,
       0.1, 0.1, 0.2, 0.4, 0.2,
       0.1, 0.1, 0.1, 0.3, 0.4;
  RngStream rng(1007);
  std::vector<int> states = {0};
  for (int t = 1; t < 1000; ++t) {
    const double u = rng.uniform();
    double acc = 0.0;
    int next = 4;
    for (int j = 0; j < 5; ++j) {
      acc += P(states.back(), j);
      if (u <= acc) {
        next = j;
        break;
      }
    }
    states.push_back(next);
  }
  const Eigen::MatrixXd est = estimate_transition(states, 1, 5);
  const double worst = (est - P).cwiseAbs().maxCoeff();
  expect(worst < 0.06, "transition recovery error " + fmt(worst) + " >= 0.06");
  for (int i = 0; i < 5; ++i) {
    expect(std::abs(est.row(i).sum() - 1.0) <= 1e-10, "row " + std::to_string(i) + " not stochastic");
    expect(est.row(i).minCoeff() >= 0.0, "negative transition probability");
  }

  // Combination with the reported first-period row. The source text gives
  // the weights (0.33, 0.29, 0.12, 0.21, 0.04); their dot product with the
  // forecasts (1,2,3,4,5) is 2.31, computed here independently.
  QuantileForecastModel model;
  model.grid = QuantileGrid::standard();
  model.state_map = StateMap::for_grid(model.grid);
  model.transition = Eigen::MatrixXd::Constant(5, 5, 0.2);
  model.transition.row(0) << 0.33, 0.29, 0.12, 0.21, 0.04;
  Eigen::VectorXd q(5);
  q << 1, 2, 3, 4, 5;
  const double expected =
      0.33 * 1.0 + 0.29 * 2.0 + 0.12 * 3.0 + 0.21 * 4.0 + 0.04 * 5.0;  // = 2.31
  const CombinedForecast fc = combine(model, q, 0, WeightMode::markov);
  expect(fc.point == expected, "combined point " + fmt(fc.point) + " != " + fmt(expected));
  return "recovery error " + fmt(worst) + "; figure row gives " + fmt(fc.point) +
         " (weights sum 0.99 as printed; the spec's 2.35 is inconsistent with the quoted weights)";
}

// ---------------------------------------------------------------------------
// Criterion 8: EM imputation.

std::string criterion_imputation() {
  SimulationConfig cfg;
  cfg.n = 100;
  cfg.T = 200;
  cfg.error_scale = 0.0;
  RngStream rng(1008, 0);
  const GeneratedData data = generate_panel(cfg, rng);
  Panel masked = data.panel;
  RngStream holes(1008, 1);
  int n_missing = 0;
  for (Eigen::Index i = 0; i < masked.n(); ++i) {
    for (Eigen::Index t = 0; t < masked.T(); ++t) {
      if (holes.uniform() < 0.10) {
        masked.mask(i, t) = false;
        ++n_missing;
      }
    }
  }
  ImputeOptions opts;
  opts.tol = 1e-10;
  opts.max_iter = 3000;
  const ImputationResult result = impute_em(masked, 3, opts);

  const double scale = data.panel.values.cwiseAbs().maxCoeff();
  double worst = 0.0;
  for (Eigen::Index i = 0; i < masked.n(); ++i) {
    for (Eigen::Index t = 0; t < masked.T(); ++t) {
      if (!masked.mask(i, t)) {
        worst = std::max(worst, std::abs(result.completed.values(i, t) - data.panel.values(i, t)));
      } else {
        expect(result.completed.values(i, t) == data.panel.values(i, t),
               "observed entry modified at (" + std::to_string(i) + "," + std::to_string(t) + ")");
      }
    }
  }
  expect(worst / scale < 1e-6, "relative recovery error " + fmt(worst / scale) + " >= 1e-6");

  const ImputationResult noop = impute_em(data.panel, 3);
  expect(noop.completed.values == data.panel.values, "complete panel not a fixed point");
  expect(noop.iterations == 1, "fixed point took more than one iteration");
  return std::to_string(n_missing) + " entries imputed, relative error " + fmt(worst / scale) +
         " in " + std::to_string(result.iterations) + " iterations";
}

// ---------------------------------------------------------------------------
// Shared end-to-end world for criteria 9, 11 and 12.

struct World {
  Panel panel;
  std::vector<StationMeta> meta;
  EvaluationPlan plan;
  PipelineConfig config;
  std::set<Method> methods;
};

World& end_to_end_world() {
  static World world = [] {
    World w;
    SimulationConfig cfg;
    cfg.n = 30;
    cfg.T = 1200;
    cfg.error_dist = ErrorDist::gamma15;
    cfg.target_error_dist = ErrorDist::gamma15;
    RngStream rng(1012, 0);
    GeneratedData data = generate_panel(cfg, rng);
    w.panel = std::move(data.panel);
    for (int i = 0; i < 30; ++i) {
      StationMeta s;
      s.entity_id = w.panel.entity_ids[static_cast<std::size_t>(i)];
      s.latitude = 35.0 + 0.25 * (i % 6);
      s.longitude = 126.5 + 0.25 * (i / 6);
      w.meta.push_back(s);
    }
    w.plan.window_length = 150;
    w.plan.horizons = {1};
    w.plan.test_periods = {{600, 647}, {1000, 1047}};
    w.config.qfm_r_max = 4;
    w.config.pca_r_max = 6;
    w.config.near_k = 10;
    w.config.weight_mode = WeightMode::markov;
    w.methods = {Method::naive, Method::ar, Method::arima, Method::near, Method::sw2002,
                 Method::proposed};
    return w;
  }();
  return world;
}

// Criterion 9: perturbing post-origin data leaves forecasts unchanged.

std::string criterion_no_lookahead() {
  World& w = end_to_end_world();
  const PeriodSelections sel = select_period_ranks(w.panel, w.plan, w.config);

  RngStream rng(1009);
  int checked = 0;
  for (int pair = 0; pair < 20; ++pair) {
    const std::size_t period = rng.uniform_int(2);
    const auto [start_tick, end_tick] = w.plan.test_periods[period];
    const Eigen::Index origin = start_tick - 1 + static_cast<Eigen::Index>(rng.uniform_int(47));
    const std::string entity =
        w.panel.entity_ids[static_cast<std::size_t>(rng.uniform_int(30))];

    const auto clean = evaluate_at_origin(w.panel, w.meta, w.plan, w.config, sel.qfm_r[period],
                                          sel.sw_r[period], origin, {1}, {entity}, w.methods);
    Panel poked = w.panel;
    RngStream junk(1009, 100 + static_cast<std::uint64_t>(pair));
    for (Eigen::Index t = origin + 1; t < poked.T(); ++t) {
      for (Eigen::Index i = 0; i < poked.n(); ++i) {
        poked.values(i, t) = 500.0 + 100.0 * junk.normal();
      }
    }
    const auto perturbed = evaluate_at_origin(poked, w.meta, w.plan, w.config, sel.qfm_r[period],
                                              sel.sw_r[period], origin, {1}, {entity}, w.methods);
    expect(!clean.at(entity).failed && !perturbed.at(entity).failed,
           "evaluation failed at pair " + std::to_string(pair));
    for (const auto& [method, by_h] : clean.at(entity).forecasts) {
      for (const auto& [h, value] : by_h) {
        const double other = perturbed.at(entity).forecasts.at(method).at(h);
        expect(value == other, to_string(method) + " forecast changed at pair " +
                                   std::to_string(pair) + ": " + fmt(value) + " vs " + fmt(other));
        ++checked;
      }
    }
  }
  return std::to_string(checked) + " forecasts bitwise identical across 20 perturbed pairs";
}

// ---------------------------------------------------------------------------
// Criterion 10: baseline sanity.

std::string criterion_baselines() {
  int ar_hits = 0;
  for (int rep = 0; rep < 200; ++rep) {
    RngStream rng(1010, static_cast<std::uint64_t>(rep));
    Eigen::VectorXd y(500);
    for (int t = 0; t < 500; ++t) {
      double v = rng.normal();
      if (t >= 1) v += 0.5 * y[t - 1];
      if (t >= 2) v += 0.3 * y[t - 2];
      y[t] = v;
    }
    if (fit_ar_aic(SeriesWindow::from_vector(y)).order == 2) ++ar_hits;
  }
  expect(ar_hits >= 140, "AR(2) selected only " + std::to_string(ar_hits) + "/200 times");

  int noise_hits = 0, walk_hits = 0;
  for (int rep = 0; rep < 100; ++rep) {
    RngStream rng(1010, 1000 + static_cast<std::uint64_t>(rep));
    Eigen::VectorXd noise(500), walk(500);
    for (int t = 0; t < 500; ++t) noise[t] = rng.normal();
    walk[0] = rng.normal();
    for (int t = 1; t < 500; ++t) walk[t] = walk[t - 1] + rng.normal();
    if (kpss_select_d(SeriesWindow::from_vector(noise)) == 0) ++noise_hits;
    if (kpss_select_d(SeriesWindow::from_vector(walk)) == 1) ++walk_hits;
  }
  expect(noise_hits >= 90, "KPSS d=0 on noise only " + std::to_string(noise_hits) + "/100");
  expect(walk_hits >= 90, "KPSS d=1 on walks only " + std::to_string(walk_hits) + "/100");
  return "AR order 2 in " + std::to_string(ar_hits) + "/200; KPSS " + std::to_string(noise_hits) +
         "/100 stationary, " + std::to_string(walk_hits) + "/100 unit root";
}

// ---------------------------------------------------------------------------
// Criterion 11: determinism across thread counts and reruns.

std::string criterion_determinism() {
  SimulationConfig cfg;
  cfg.n = 40;
  cfg.T = 60;
  cfg.replications = 8;
  cfg.seed = 1011;
  cfg.methods = {Method::naive, Method::ar, Method::sw2002, Method::proposed};

  std::vector<std::string> outputs;
  for (int threads : {1, 4, 1}) {
    SimulationConfig run = cfg;
    run.threads = threads;
    outputs.push_back(run_mae_experiment({run}).to_csv());
  }
  expect(outputs[0] == outputs[1], "thread count changed the simulation report");
  expect(outputs[0] == outputs[2], "rerun changed the simulation report");

  // Pipeline reports: thread counts must not matter there either.
  World& w = end_to_end_world();
  EvaluationPlan small_plan = w.plan;
  small_plan.test_periods = {{600, 602}};
  std::vector<std::string> eval_outputs;
  for (int threads : {1, 3}) {
    PipelineConfig pc = w.config;
    pc.threads = threads;
    pc.fixed_qfm_r = 3;
    pc.fixed_sw_r = 3;
    const ForecastReport report =
        run_evaluation(w.panel, w.meta, small_plan, {Method::naive, Method::proposed}, pc);
    std::ostringstream os;
    for (const auto& rec : report.records) {
      os << rec.entity_id << ',' << rec.period << ',' << rec.horizon << ',' << to_string(rec.method)
         << ',' << rec.origin_tick << ',' << format_double(rec.forecast) << ','
         << format_double(rec.realized) << '\n';
    }
    eval_outputs.push_back(os.str());
  }
  expect(eval_outputs[0] == eval_outputs[1], "thread count changed the evaluation report");
  return "simulation and evaluation reports byte-identical across reruns and thread counts";
}

// ---------------------------------------------------------------------------
// Criterion 12: synthetic end-to-end pipeline (real-data substitute).

std::string criterion_end_to_end() {
  World& w = end_to_end_world();
  const ForecastReport report = run_evaluation(w.panel, w.meta, w.plan, w.methods, w.config);

  double naive_mae[2] = {0, 0}, proposed_mae[2] = {0, 0};
  for (const auto& agg : report.aggregates) {
    if (agg.horizon != 1) continue;
    if (agg.method == Method::naive) naive_mae[agg.period - 1] = agg.mae;
    if (agg.method == Method::proposed) proposed_mae[agg.period - 1] = agg.mae;
  }
  for (int p = 0; p < 2; ++p) {
    expect(proposed_mae[p] <= naive_mae[p],
           "period " + std::to_string(p + 1) + ": proposed " + fmt(proposed_mae[p]) +
               " above naive " + fmt(naive_mae[p]));
  }

  // Report-shape checks: export, re-parse, 12-significant-digit fidelity.
  const std::string dir = "acceptance_report";
  std::filesystem::create_directories(dir);
  export_report(report, dir + "/stations.csv", ReportFormat::csv);
  export_report(report, dir + "/summary.md", ReportFormat::markdown);
  const auto rows = read_csv(dir + "/stations.csv");
  expect(rows.size() == report.stations.size() + 1, "station csv row count mismatch");
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const double parsed = parse_double(rows[i][4], "in stations.csv");
    const double original = report.stations[i - 1].mae;
    expect(std::abs(parsed - original) <= 1e-12 * std::max(1.0, std::abs(original)),
           "csv round-trip lost precision at row " + std::to_string(i));
  }
  std::ifstream md(dir + "/summary.md");
  std::stringstream buf;
  buf << md.rdbuf();
  expect(buf.str().find("**") != std::string::npos, "markdown lacks bolded minima");

  std::ostringstream note;
  note << "h=1 proposed vs naive: period 1 " << fmt(proposed_mae[0]) << " vs " << fmt(naive_mae[0])
       << ", period 2 " << fmt(proposed_mae[1]) << " vs " << fmt(naive_mae[1]) << " ("
       << report.records.size() << " forecasts, " << report.failure_log.size() << " failures)";
  return note.str();
}

struct Criterion {
  int id;
  std::string name;
  std::function<std::string()> run;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> criteria = {
      {1, "quantile regression solver matches the brute-force oracle", criterion_qr_oracle},
      {2, "intercept-only fit returns the sample quantile", criterion_intercept_quantile},
      {3, "quantile factor descent and noiseless recovery", criterion_qfm_descent},
      {4, "factor recovery table reproduction (scaled)", criterion_table1},
      {5, "forecast MAE table reproduction (scaled)", criterion_table2},
      {6, "mixed-error extension table reproduction (scaled)", criterion_table3},
      {7, "Markov transition machinery", criterion_markov},
      {8, "EM imputation of missing entries", criterion_imputation},
      {9, "no look-ahead in the pipeline", criterion_no_lookahead},
      {10, "baseline order selection and stationarity tests", criterion_baselines},
      {11, "determinism across seeds, reruns and thread counts", criterion_determinism},
      {12, "synthetic end-to-end pipeline with report checks", criterion_end_to_end},
  };

  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));

  int failures = 0;
  for (const auto& criterion : criteria) {
    if (!selected.empty() && selected.count(criterion.id) == 0) continue;
    const auto start = std::chrono::steady_clock::now();
    std::string detail;
    bool ok = true;
    try {
      detail = criterion.run();
    } catch (const CheckFailure& f) {
      ok = false;
      detail = f.what;
    } catch (const std::exception& e) {
      ok = false;
      detail = std::string("exception: ") + e.what();
    }
    const double elapsed =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::printf("[%s] criterion %2d: %s — %s (%.1f s)\n", ok ? "PASS" : "FAIL", criterion.id,
                criterion.name.c_str(), detail.c_str(), elapsed);
    std::fflush(stdout);
    if (!ok) ++failures;
  }
  if (failures > 0) {
    std::printf("%d criterion(s) FAILED\n", failures);
    return 1;
  }
  std::printf("all criteria passed\n");
  return 0;
}
