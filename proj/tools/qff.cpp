// Command-line driver: simulation experiments, panel imputation, latest
// forecasts, and rolling-origin evaluation.
//
// Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "qff/config.hpp"
#include "qff/pipeline.hpp"
#include "qff/simulation.hpp"

namespace {

using namespace qff;

std::vector<int> parse_int_list(const std::string& csv, const char* what) {
  std::vector<int> out;
  for (const auto& item : split_csv_line(csv)) {
    if (!item.empty()) out.push_back(static_cast<int>(parse_int(item, std::string("in ") + what)));
  }
  require_data(!out.empty(), std::string(what) + ": empty list");
  return out;
}

QuantileGrid parse_grid(const std::string& csv) {
  std::vector<double> levels;
  for (const auto& item : split_csv_line(csv)) {
    if (!item.empty()) levels.push_back(parse_double(item, "in quantile grid"));
  }
  return QuantileGrid(levels);
}

std::set<Method> parse_methods(const std::string& csv) {
  std::set<Method> out;
  for (const auto& item : split_csv_line(csv)) {
    if (!item.empty()) out.insert(method_from_string(item));
  }
  require_data(!out.empty(), "empty method list");
  return out;
}

PanelFormat parse_format(const std::string& s) {
  if (s == "long") return PanelFormat::long_form;
  if (s == "wide") return PanelFormat::wide_form;
  throw DataError("unknown panel format: " + s + " (expected long|wide)");
}

int run_simulate(const std::string& experiment, const std::string& n_list, const std::string& t_list,
                 const std::string& dist, int reps, std::uint64_t seed, int h,
                 const std::string& methods_csv, const std::string& grid_csv, int threads,
                 const std::string& out_path) {
  std::vector<SimulationConfig> configs;
  for (int n : parse_int_list(n_list, "--n")) {
    for (int T : parse_int_list(t_list, "--t")) {
      SimulationConfig cfg;
      cfg.n = n;
      cfg.T = T;
      cfg.replications = reps;
      cfg.seed = seed;
      cfg.horizon = h;
      cfg.threads = threads;
      cfg.grid = parse_grid(grid_csv);
      if (experiment != "extension") {
        cfg.error_dist = error_dist_from_string(dist);
        cfg.target_error_dist = cfg.error_dist;
      }
      if (!methods_csv.empty()) {
        cfg.methods.clear();
        for (Method m : parse_methods(methods_csv)) cfg.methods.push_back(m);
      }
      configs.push_back(cfg);
    }
  }

  ExperimentReport report;
  if (experiment == "r2") {
    report = run_r2_experiment(configs);
    std::cout << report.format_table("adj_r2");
  } else if (experiment == "mae") {
    report = run_mae_experiment(configs);
    std::cout << report.format_table("mae");
  } else if (experiment == "extension") {
    report = run_extension_experiment(configs);
    std::cout << report.format_table("mae");
  } else {
    throw Error("unknown experiment: " + experiment + " (expected r2|mae|extension)");
  }
  if (report.dropped > 0) {
    std::cout << report.dropped << " replication(s) dropped:\n";
    for (const auto& line : report.drop_log) std::cout << "  " << line << '\n';
  }
  if (!out_path.empty()) {
    std::ofstream os(out_path);
    require_data(os.good(), "cannot open output file: " + out_path);
    report.write_csv(os);
    std::cout << "report written to " << out_path << '\n';
  }
  return 0;
}

EvaluationPlan plan_from_config(const Config& cfg) {
  EvaluationPlan plan;
  plan.window_length = static_cast<int>(cfg.get_int("plan.window_length", 500));
  plan.horizons.clear();
  for (int h : cfg.get_int_list("plan.horizons", {1, 2, 3, 4, 5, 6})) plan.horizons.push_back(h);
  for (const auto& token : cfg.get_list("plan.periods")) {
    const auto colon = token.find(':');
    require_data(colon != std::string::npos, "plan.periods entries must be start:end ticks");
    plan.test_periods.emplace_back(parse_int(token.substr(0, colon), "in plan.periods"),
                                   parse_int(token.substr(colon + 1), "in plan.periods"));
  }
  const auto targets = cfg.get_list("plan.targets");
  if (!(targets.size() == 1 && targets[0] == "all")) {
    plan.target_entities = targets;
  }
  return plan;
}

PipelineConfig pipeline_from_config(const Config& cfg) {
  PipelineConfig pc;
  if (cfg.has("model.grid")) {
    pc.grid = QuantileGrid(cfg.get_double_list("model.grid"));
  }
  pc.qfm_r_max = static_cast<int>(cfg.get_int("model.qfm_r_max", 20));
  pc.pca_r_max = static_cast<int>(cfg.get_int("model.pca_r_max", 20));
  if (cfg.has("model.fixed_qfm_r")) pc.fixed_qfm_r = static_cast<int>(cfg.get_int("model.fixed_qfm_r", 0));
  if (cfg.has("model.fixed_sw_r")) pc.fixed_sw_r = static_cast<int>(cfg.get_int("model.fixed_sw_r", 0));
  pc.near_k = static_cast<int>(cfg.get_int("model.near_k", 10));
  const std::string mode = cfg.get_string("model.weights", "markov");
  if (mode == "markov") {
    pc.weight_mode = WeightMode::markov;
  } else if (mode == "interval") {
    pc.weight_mode = WeightMode::interval;
  } else {
    throw DataError("model.weights must be markov or interval");
  }
  pc.ar_p_max = static_cast<int>(cfg.get_int("model.ar_p_max", 6));
  pc.arima_q_max = static_cast<int>(cfg.get_int("model.arima_q_max", 6));
  pc.max_failure_fraction = cfg.get_double("run.max_failure_fraction", 0.01);
  pc.threads = static_cast<int>(cfg.get_int("run.threads", 1));
  pc.strict_imputation = cfg.get_bool("run.strict_imputation", false);
  pc.strict_impute_rank = static_cast<int>(cfg.get_int("run.strict_impute_rank", 3));
  return pc;
}

void apply_override(Config& cfg, const std::string& key, const std::string& value) {
  if (!value.empty()) cfg.set(key, value);
}

int run_impute(const std::string& in_path, const std::string& out_path, int rank, double tol,
               int max_iter, const std::string& format, const std::string& meta_path,
               double drop_threshold) {
  const PanelFormat fmt = parse_format(format);
  const LoadedPanel loaded = load_panel(in_path, fmt, drop_threshold);
  for (const auto& id : loaded.dropped_entities) {
    std::cout << "dropped entity (missing rate above threshold): " << id << '\n';
  }
  ImputeOptions opts;
  opts.tol = tol;
  opts.max_iter = max_iter;
  std::vector<StationMeta> meta;
  if (!meta_path.empty()) {
    meta = load_station_meta(meta_path);
    opts.meta = &meta;
  }
  const ImputationResult result = impute_em(loaded.panel, rank, opts);
  write_panel_csv(result.completed, out_path, fmt);
  std::cout << "imputed " << loaded.panel.missing_count() << " entries in " << result.iterations
            << " iteration(s), final change " << result.final_change << ", rank " << result.rank_used
            << "; wrote " << out_path << '\n';
  return 0;
}

int run_forecast_cmd(const std::string& panel_path, const std::string& meta_path,
                     const std::string& config_path, const std::string& out_dir,
                     const std::string& format) {
  Config cfg = config_path.empty() ? Config() : Config::from_file(config_path);
  const LoadedPanel loaded = load_panel(panel_path, parse_format(format), 1.0);
  require_data(loaded.panel.complete(), "forecast: panel must be complete (run `qff impute` first)");
  const auto meta = load_station_meta(meta_path);
  PipelineConfig pc = pipeline_from_config(cfg);

  EvaluationPlan plan;
  plan.window_length = static_cast<int>(cfg.get_int("plan.window_length", 500));
  plan.horizons.clear();
  for (int h : cfg.get_int_list("plan.horizons", {1, 2, 3, 4, 5, 6})) plan.horizons.push_back(h);
  const Eigen::Index origin = loaded.panel.T() - 1;
  plan.test_periods.emplace_back(loaded.panel.time_index.back(), loaded.panel.time_index.back());
  std::vector<std::string> targets = cfg.get_list("plan.targets");
  if (targets.empty() || (targets.size() == 1 && targets[0] == "all")) targets = loaded.panel.entity_ids;

  std::set<Method> methods = parse_methods(cfg.get_string("run.methods", "proposed"));

  // Factor counts from the trailing window ending at the forecast origin.
  std::vector<int> qfm_r;
  int sw_r = 0;
  {
    EvaluationPlan sel_plan = plan;
    PeriodSelections sel;
    Panel window;
    const Eigen::Index W = plan.window_length;
    require_data(origin - W + 1 >= 0, "forecast: window longer than the panel");
    window.values = loaded.panel.values.middleCols(origin - W + 1, W);
    window.entity_ids = loaded.panel.entity_ids;
    window.time_index.assign(loaded.panel.time_index.end() - W, loaded.panel.time_index.end());
    window.mask = BoolMask::Constant(window.values.rows(), W, true);
    if (pc.fixed_qfm_r.has_value()) {
      qfm_r.assign(pc.grid.size(), *pc.fixed_qfm_r);
    } else {
      for (double tau : pc.grid.levels) {
        qfm_r.push_back(select_r_quantile(window, tau, pc.qfm_r_max, pc.qfm).chosen_r);
      }
    }
    sw_r = pc.fixed_sw_r.has_value() ? *pc.fixed_sw_r
                                     : select_r_bai_ng(center_rows(window).first, pc.pca_r_max).chosen_r;
  }

  const auto results = evaluate_at_origin(loaded.panel, meta, plan, pc, qfm_r, sw_r, origin,
                                          plan.horizons, targets, methods);

  std::filesystem::create_directories(out_dir);
  const std::string path = out_dir + "/forecasts.csv";
  std::ofstream os(path);
  require_data(os.good(), "cannot open " + path);
  os << "entity_id,origin_tick,h,method,forecast\n";
  for (const auto& id : targets) {
    const auto& res = results.at(id);
    if (res.failed) {
      std::cerr << "entity " << id << " failed: " << res.error << '\n';
      continue;
    }
    for (const auto& [method, by_h] : res.forecasts) {
      for (const auto& [h, value] : by_h) {
        os << id << ',' << loaded.panel.time_index.back() << ',' << h << ',' << to_string(method)
           << ',' << format_double(value) << '\n';
      }
    }
  }
  std::cout << "forecasts written to " << path << '\n';
  return 0;
}

int run_evaluate_cmd(const std::string& panel_path, const std::string& meta_path,
                     const std::string& plan_path, const std::string& methods_csv,
                     const std::string& out_dir, const std::string& format,
                     const std::string& threads_override) {
  Config cfg = Config::from_file(plan_path);
  apply_override(cfg, "run.threads", threads_override);
  const LoadedPanel loaded = load_panel(panel_path, parse_format(format), 1.0);
  const auto meta = load_station_meta(meta_path);
  const EvaluationPlan plan = plan_from_config(cfg);
  const PipelineConfig pc = pipeline_from_config(cfg);
  require_data(loaded.panel.complete() || pc.strict_imputation,
               "evaluate: panel must be complete (run `qff impute` first, or set run.strict_imputation)");
  const std::set<Method> methods =
      parse_methods(methods_csv.empty() ? cfg.get_string("run.methods", "naive,proposed") : methods_csv);

  const ForecastReport report = run_evaluation(loaded.panel, meta, plan, methods, pc);

  std::filesystem::create_directories(out_dir);
  export_report(report, out_dir + "/stations.csv", ReportFormat::csv);
  export_report(report, out_dir + "/summary.md", ReportFormat::markdown);
  {
    std::ofstream os(out_dir + "/forecasts.csv");
    os << "entity_id,period,h,method,origin_tick,forecast,realized\n";
    for (const auto& rec : report.records) {
      os << rec.entity_id << ',' << rec.period << ',' << rec.horizon << ',' << to_string(rec.method)
         << ',' << rec.origin_tick << ',' << format_double(rec.forecast) << ','
         << format_double(rec.realized) << '\n';
    }
  }
  for (const auto& [period, ranks] : report.selected_qfm_r) {
    std::cout << period << " selected quantile factor counts:";
    for (int r : ranks) std::cout << ' ' << r;
    std::cout << " | sw r = " << report.selected_sw_r.at(period) << '\n';
  }
  if (!report.failure_log.empty()) {
    std::cout << report.failure_log.size() << " (entity, origin) failure(s); first: "
              << report.failure_log.front() << '\n';
  }
  std::cout << "evaluation reports written to " << out_dir << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Combined quantile forecasting for high-dimensional panels"};
  app.require_subcommand(1);

  // simulate
  auto* sim = app.add_subcommand("simulate", "Run a Monte Carlo experiment");
  std::string experiment = "mae", n_list = "100", t_list = "100", dist = "normal";
  std::string sim_methods, sim_grid = "0.1,0.3,0.5,0.7,0.9", sim_out;
  int reps = 500, sim_h = 1, sim_threads = 0;
  std::uint64_t seed = 1;
  sim->add_option("--experiment", experiment, "r2 | mae | extension");
  sim->add_option("--n", n_list, "panel rows (comma list)");
  sim->add_option("--t", t_list, "panel columns (comma list)");
  sim->add_option("--dist", dist, "normal | t2 | gamma");
  sim->add_option("--reps", reps, "replication count");
  sim->add_option("--seed", seed, "RNG seed");
  sim->add_option("--horizon", sim_h, "forecast horizon");
  sim->add_option("--methods", sim_methods, "comma list of methods (mae/extension)");
  sim->add_option("--grid", sim_grid, "quantile levels");
  sim->add_option("--threads", sim_threads, "worker threads (0 = hardware)");
  sim->add_option("--out", sim_out, "report CSV path");

  // impute
  auto* imp = app.add_subcommand("impute", "EM imputation of missing panel entries");
  std::string imp_in, imp_out, imp_format = "long", imp_meta;
  int imp_rank = 3, imp_max_iter = 500;
  double imp_tol = 1e-6, imp_drop = 0.20;
  imp->add_option("--in", imp_in, "input panel CSV")->required();
  imp->add_option("--out", imp_out, "output panel CSV")->required();
  imp->add_option("--rank", imp_rank, "factor count r")->required();
  imp->add_option("--tol", imp_tol, "convergence tolerance");
  imp->add_option("--max-iter", imp_max_iter, "iteration cap");
  imp->add_option("--format", imp_format, "long | wide");
  imp->add_option("--meta", imp_meta, "station metadata CSV (enables spatial init)");
  imp->add_option("--drop-threshold", imp_drop, "drop entities above this missing rate");

  // forecast
  auto* fc = app.add_subcommand("forecast", "Forecast from the end of a panel");
  std::string fc_panel, fc_meta, fc_config, fc_out = "report", fc_format = "wide";
  fc->add_option("--panel", fc_panel, "complete panel CSV")->required();
  fc->add_option("--meta", fc_meta, "station metadata CSV")->required();
  fc->add_option("--config", fc_config, "run configuration file");
  fc->add_option("--out", fc_out, "output directory");
  fc->add_option("--format", fc_format, "long | wide");

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "Rolling-origin evaluation over test periods");
  std::string ev_panel, ev_meta, ev_plan, ev_methods, ev_out = "report", ev_format = "wide", ev_threads;
  ev->add_option("--panel", ev_panel, "complete panel CSV")->required();
  ev->add_option("--meta", ev_meta, "station metadata CSV")->required();
  ev->add_option("--plan", ev_plan, "evaluation plan file")->required();
  ev->add_option("--methods", ev_methods, "comma list of methods");
  ev->add_option("--out", ev_out, "output directory");
  ev->add_option("--format", ev_format, "long | wide");
  ev->add_option("--threads", ev_threads, "worker threads override");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (sim->parsed()) {
      return run_simulate(experiment, n_list, t_list, dist, reps, seed, sim_h, sim_methods, sim_grid,
                          sim_threads, sim_out);
    }
    if (imp->parsed()) {
      return run_impute(imp_in, imp_out, imp_rank, imp_tol, imp_max_iter, imp_format, imp_meta, imp_drop);
    }
    if (fc->parsed()) {
      return run_forecast_cmd(fc_panel, fc_meta, fc_config, fc_out, fc_format);
    }
    if (ev->parsed()) {
      return run_evaluate_cmd(ev_panel, ev_meta, ev_plan, ev_methods, ev_out, ev_format, ev_threads);
    }
  } catch (const qff::DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 2;
  } catch (const qff::NumericError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return 3;
  } catch (const qff::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "failure: " << e.what() << '\n';
    return 3;
  }
  return 1;
}
