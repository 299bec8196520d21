#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "qff/pipeline.hpp"
#include "qff/rng.hpp"
#include "qff/simulation.hpp"

using namespace qff;

namespace {

std::string write_temp(const std::string& name, const std::string& text) {
  const std::string path = (std::filesystem::temp_directory_path() / name).string();
  std::ofstream os(path);
  os << text;
  return path;
}

// Small DGP panel with a station grid for the evaluation tests.
struct SyntheticWorld {
  Panel panel;
  std::vector<StationMeta> meta;
};

SyntheticWorld make_world(int n, int T, std::uint64_t seed, ErrorDist dist = ErrorDist::gamma15) {
  SimulationConfig cfg;
  cfg.n = n;
  cfg.T = T;
  cfg.error_dist = dist;
  cfg.target_error_dist = dist == ErrorDist::mixed_half_t_half_gamma ? ErrorDist::gamma15 : dist;
  RngStream rng(seed, 0);
  GeneratedData data = generate_panel(cfg, rng);
  SyntheticWorld world;
  world.panel = std::move(data.panel);
  for (int i = 0; i < n; ++i) {
    StationMeta s;
    s.entity_id = world.panel.entity_ids[static_cast<std::size_t>(i)];
    s.latitude = 36.0 + 0.1 * (i % 5);
    s.longitude = 127.0 + 0.1 * (i / 5);
    world.meta.push_back(s);
  }
  return world;
}

PipelineConfig fast_config() {
  PipelineConfig pc;
  pc.fixed_qfm_r = 2;
  pc.fixed_sw_r = 3;
  pc.near_k = 4;
  pc.ar_p_max = 3;
  pc.arima_q_max = 2;
  return pc;
}

}  // namespace

TEST_CASE("wide panel loads with a complete mask", "[pipeline]") {
  const std::string path = write_temp("qff_wide.csv",
                                      "time,a,b,c\n"
                                      "1,1.0,2.0,3.0\n"
                                      "2,4.0,5.0,6.0\n"
                                      "3,7.0,8.0,9.0\n"
                                      "4,10.0,11.0,12.0\n");
  const LoadedPanel loaded = load_panel(path, PanelFormat::wide_form);
  CHECK(loaded.panel.n() == 3);
  CHECK(loaded.panel.T() == 4);
  CHECK(loaded.panel.complete());
  CHECK(loaded.dropped_entities.empty());
  CHECK(loaded.panel.values(1, 2) == 8.0);
  CHECK(loaded.panel.entity_ids == std::vector<std::string>{"a", "b", "c"});
}

TEST_CASE("long panel marks absent pairs as missing", "[pipeline]") {
  const std::string path = write_temp("qff_long.csv",
                                      "entity_id,time,value\n"
                                      "a,1,1.0\na,2,2.0\na,3,3.0\n"
                                      "b,1,4.0\nb,3,6.0\n");  // (b,2) absent
  const LoadedPanel loaded = load_panel(path, PanelFormat::long_form, /*drop_threshold=*/0.5);
  CHECK(loaded.panel.n() == 2);
  CHECK(loaded.panel.T() == 3);
  CHECK_FALSE(loaded.panel.complete());
  CHECK(loaded.panel.mask(0, 0));
  CHECK_FALSE(loaded.panel.mask(1, 1));
  CHECK(loaded.panel.missing_count() == 1);
}

TEST_CASE("entities above the missing-rate threshold are dropped", "[pipeline]") {
  // Entity b misses 1 of 4 ticks = 25% > 20%.
  const std::string path = write_temp("qff_drop.csv",
                                      "entity_id,time,value\n"
                                      "a,1,1\na,2,2\na,3,3\na,4,4\n"
                                      "b,1,5\nb,2,6\nb,3,7\n");
  const LoadedPanel loaded = load_panel(path, PanelFormat::long_form, 0.20);
  CHECK(loaded.dropped_entities == std::vector<std::string>{"b"});
  CHECK(loaded.panel.n() == 1);
  CHECK(loaded.panel.entity_ids[0] == "a");
}

TEST_CASE("malformed panels raise data errors with line numbers", "[pipeline]") {
  SECTION("bad number") {
    const std::string path = write_temp("qff_bad1.csv",
                                        "entity_id,time,value\n"
                                        "a,1,1.0\n"
                                        "a,2,oops\n");
    try {
      load_panel(path, PanelFormat::long_form);
      FAIL("expected DataError");
    } catch (const DataError& e) {
      CHECK(std::string(e.what()).find("line 3") != std::string::npos);
    }
  }
  SECTION("duplicate pair") {
    const std::string path = write_temp("qff_bad2.csv",
                                        "entity_id,time,value\n"
                                        "a,1,1.0\n"
                                        "a,1,2.0\n");
    try {
      load_panel(path, PanelFormat::long_form);
      FAIL("expected DataError");
    } catch (const DataError& e) {
      CHECK(std::string(e.what()).find("duplicate") != std::string::npos);
      CHECK(std::string(e.what()).find("line 3") != std::string::npos);
    }
  }
  SECTION("wrong field count") {
    const std::string path = write_temp("qff_bad3.csv",
                                        "entity_id,time,value\n"
                                        "a,1\n");
    CHECK_THROWS_AS(load_panel(path, PanelFormat::long_form), DataError);
  }
}

TEST_CASE("panel csv round-trips through both formats", "[pipeline]") {
  SyntheticWorld world = make_world(4, 12, 77);
  world.panel.mask(1, 3) = false;
  world.panel.mask(2, 7) = false;
  for (PanelFormat fmt : {PanelFormat::long_form, PanelFormat::wide_form}) {
    const std::string path = write_temp("qff_roundtrip.csv", "");
    write_panel_csv(world.panel, path, fmt);
    const LoadedPanel loaded = load_panel(path, fmt, 1.0);
    REQUIRE(loaded.panel.n() == world.panel.n());
    REQUIRE(loaded.panel.T() == world.panel.T());
    CHECK((loaded.panel.mask == world.panel.mask).all());
    for (Eigen::Index i = 0; i < world.panel.n(); ++i) {
      for (Eigen::Index t = 0; t < world.panel.T(); ++t) {
        if (world.panel.mask(i, t)) CHECK(loaded.panel.values(i, t) == world.panel.values(i, t));
      }
    }
  }
}

TEST_CASE("haversine distance matches a known city pair", "[pipeline]") {
  // Seoul to Busan is about 325 km.
  const double d = haversine_km(37.5665, 126.9780, 35.1796, 129.0756);
  CHECK(d == Catch::Approx(325.0).epsilon(0.02));
  CHECK(haversine_km(10.0, 20.0, 10.0, 20.0) == 0.0);
}

TEST_CASE("nearest stations ordering and ties", "[pipeline]") {
  std::vector<StationMeta> meta = {
      {"west", 0.0, 0.0}, {"mid", 0.0, 1.0}, {"east", 0.0, 2.0}};
  SECTION("k=1 returns self") {
    CHECK(nearest_stations(meta, "mid", 1) == std::vector<std::string>{"mid"});
  }
  SECTION("equidistant neighbors break ties by id") {
    const auto got = nearest_stations(meta, "mid", 2);
    REQUIRE(got.size() == 2);
    CHECK(got[0] == "mid");
    CHECK(got[1] == "east");  // "east" < "west" lexicographically
  }
  SECTION("full ordering from an endpoint") {
    CHECK(nearest_stations(meta, "west", 3) == std::vector<std::string>{"west", "mid", "east"});
  }
  SECTION("errors") {
    CHECK_THROWS_AS(nearest_stations(meta, "nowhere", 1), DataError);
    CHECK_THROWS_AS(nearest_stations(meta, "mid", 4), Error);
  }
}

TEST_CASE("imputation is a fixed point on complete panels", "[pipeline]") {
  const SyntheticWorld world = make_world(10, 30, 78);
  const ImputationResult result = impute_em(world.panel, 3);
  CHECK(result.iterations == 1);
  CHECK(result.final_change == 0.0);
  CHECK(result.completed.values == world.panel.values);
}

TEST_CASE("imputation recovers an exact low-rank panel", "[pipeline]") {
  SimulationConfig cfg;
  cfg.n = 40;
  cfg.T = 60;
  cfg.error_scale = 0.0;  // exact rank-3 panel
  RngStream rng(79, 0);
  const GeneratedData data = generate_panel(cfg, rng);
  Panel masked = data.panel;
  RngStream holes(80);
  int n_masked = 0;
  for (Eigen::Index i = 0; i < masked.n(); ++i) {
    for (Eigen::Index t = 0; t < masked.T(); ++t) {
      if (holes.uniform() < 0.10) {
        masked.mask(i, t) = false;
        ++n_masked;
      }
    }
  }
  REQUIRE(n_masked > 0);
  ImputeOptions opts;
  opts.tol = 1e-9;
  opts.max_iter = 2000;
  const ImputationResult result = impute_em(masked, 3, opts);

  const double scale = data.panel.values.cwiseAbs().maxCoeff();
  double worst = 0.0;
  for (Eigen::Index i = 0; i < masked.n(); ++i) {
    for (Eigen::Index t = 0; t < masked.T(); ++t) {
      if (!masked.mask(i, t)) {
        worst = std::max(worst, std::abs(result.completed.values(i, t) - data.panel.values(i, t)));
      } else {
        // Observed entries preserved bit-exactly.
        CHECK(result.completed.values(i, t) == data.panel.values(i, t));
      }
    }
  }
  CHECK(worst / scale < 1e-6);
  CHECK(result.completed.complete());
}

TEST_CASE("imputation error on observed entries is nonincreasing", "[pipeline]") {
  SyntheticWorld world = make_world(20, 40, 81, ErrorDist::student_t2);
  RngStream holes(82);
  for (Eigen::Index i = 0; i < world.panel.n(); ++i) {
    for (Eigen::Index t = 0; t < world.panel.T(); ++t) {
      if (holes.uniform() < 0.15) world.panel.mask(i, t) = false;
    }
  }
  // Deterministic initialization means running k iterations reproduces the
  // first k steps of a longer run; compare observed-entry errors.
  double prev = std::numeric_limits<double>::infinity();
  for (int iters = 1; iters <= 6; ++iters) {
    ImputeOptions opts;
    opts.tol = 0.0;
    opts.max_iter = iters;
    const ImputationResult res = impute_em(world.panel, 3, opts);
    const Eigen::MatrixXd fitted =
        qff::detail::rank_r_common_component(res.completed.values, 3);
    double err = 0.0;
    for (Eigen::Index i = 0; i < world.panel.n(); ++i) {
      for (Eigen::Index t = 0; t < world.panel.T(); ++t) {
        if (world.panel.mask(i, t)) {
          const double d = world.panel.values(i, t) - fitted(i, t);
          err += d * d;
        }
      }
    }
    CHECK(err <= prev + 1e-9);
    prev = err;
  }
}

TEST_CASE("imputation rejects hopeless panels", "[pipeline]") {
  SyntheticWorld world = make_world(6, 10, 83);
  SECTION("fully missing row") {
    world.panel.mask.row(2).setConstant(false);
    CHECK_THROWS_AS(impute_em(world.panel, 2), DataError);
  }
  SECTION("fully missing column") {
    world.panel.mask.col(4).setConstant(false);
    CHECK_THROWS_AS(impute_em(world.panel, 2), DataError);
  }
  SECTION("rank out of range") {
    CHECK_THROWS_AS(impute_em(world.panel, 0), Error);
    CHECK_THROWS_AS(impute_em(world.panel, 7), Error);
  }
}

TEST_CASE("rolling evaluation on a synthetic world", "[pipeline]") {
  const SyntheticWorld world = make_world(8, 220, 84);
  EvaluationPlan plan;
  plan.window_length = 60;
  plan.horizons = {1, 2};
  plan.test_periods = {{200, 205}};
  PipelineConfig pc = fast_config();
  const std::set<Method> methods = {Method::naive, Method::near, Method::sw2002, Method::proposed};

  const ForecastReport report = run_evaluation(world.panel, world.meta, plan, methods, pc);

  // Forecast counts: per horizon, one forecast per (entity, target tick).
  const int n_targets = 8, period_len = 6;
  std::map<Method, int> counts;
  for (const auto& rec : report.records) {
    counts[rec.method] += 1;
    CHECK(rec.period == 1);
    CHECK(std::isfinite(rec.forecast));
  }
  for (const auto& [method, count] : counts) {
    CHECK(count == n_targets * period_len * 2);
  }

  // Naive MAE equals the direct closed form on the same records.
  for (const auto& agg : report.aggregates) {
    if (agg.method != Method::naive) continue;
    double acc = 0.0;
    int cnt = 0;
    for (const auto& rec : report.records) {
      if (rec.method == Method::naive && rec.horizon == agg.horizon) {
        const Eigen::Index row = static_cast<Eigen::Index>(
            std::find(world.panel.entity_ids.begin(), world.panel.entity_ids.end(), rec.entity_id) -
            world.panel.entity_ids.begin());
        const Eigen::Index origin = rec.origin_tick;  // ticks are 0-based columns here
        const double direct = std::abs(world.panel.values(row, origin + agg.horizon) -
                                       world.panel.values(row, origin));
        acc += direct;
        ++cnt;
        CHECK(rec.forecast == world.panel.values(row, origin));
      }
    }
    CHECK(agg.mae == Catch::Approx(acc / cnt).margin(1e-12));
    CHECK(agg.n_forecasts == cnt);
  }

  // Aggregate MAE equals the forecast-count weighted mean of station MAEs.
  for (const auto& agg : report.aggregates) {
    double weighted = 0.0;
    std::int64_t total = 0;
    for (const auto& st : report.stations) {
      if (st.period == agg.period && st.horizon == agg.horizon && st.method == agg.method) {
        weighted += st.mae * static_cast<double>(st.n_forecasts);
        total += st.n_forecasts;
      }
    }
    CHECK(total == agg.n_forecasts);
    CHECK(agg.mae == Catch::Approx(weighted / static_cast<double>(total)).margin(1e-12));
  }

  // Bands take values 1..5.
  for (const auto& st : report.stations) {
    CHECK(st.band >= 1);
    CHECK(st.band <= 5);
  }
}

TEST_CASE("single origin and horizon produce exactly one forecast per entity", "[pipeline]") {
  const SyntheticWorld world = make_world(6, 150, 85);
  EvaluationPlan plan;
  plan.window_length = 50;
  plan.horizons = {1};
  plan.test_periods = {{120, 120}};  // one target tick -> one origin
  PipelineConfig pc = fast_config();
  const ForecastReport report = run_evaluation(world.panel, world.meta, plan, {Method::naive}, pc);
  CHECK(report.records.size() == 6);
}

TEST_CASE("evaluation ignores data after the origin", "[pipeline]") {
  const SyntheticWorld world = make_world(6, 160, 86);
  EvaluationPlan plan;
  plan.window_length = 60;
  plan.horizons = {1};
  plan.test_periods = {{130, 134}};
  PipelineConfig pc = fast_config();
  const std::set<Method> methods = {Method::naive, Method::near, Method::sw2002, Method::proposed};
  const std::vector<int> qfm_r(5, 2);

  for (const Eigen::Index origin : {130, 132}) {
    const std::vector<std::string> target = {world.panel.entity_ids[1]};
    const auto clean = evaluate_at_origin(world.panel, world.meta, plan, pc, qfm_r, 3, origin, {1},
                                          target, methods);
    Panel perturbed = world.panel;
    RngStream junk(87);
    for (Eigen::Index t = origin + 1; t < perturbed.T(); ++t) {
      for (Eigen::Index i = 0; i < perturbed.n(); ++i) {
        perturbed.values(i, t) = 1000.0 + 50.0 * junk.normal();
      }
    }
    const auto poked = evaluate_at_origin(perturbed, world.meta, plan, pc, qfm_r, 3, origin, {1},
                                          target, methods);
    for (const auto& [method, by_h] : clean.at(target[0]).forecasts) {
      for (const auto& [h, value] : by_h) {
        CHECK(value == poked.at(target[0]).forecasts.at(method).at(h));
      }
    }
  }
}

TEST_CASE("warm-started quantile factors match cold starts within tolerance", "[pipeline]") {
  const SyntheticWorld world = make_world(10, 120, 88);
  Panel window;
  const int W = 80;
  window.values = world.panel.values.middleCols(10, W);
  window.entity_ids = world.panel.entity_ids;
  window.time_index.assign(world.panel.time_index.begin() + 10, world.panel.time_index.begin() + 10 + W);
  window.mask = BoolMask::Constant(10, W, true);

  const FactorDecomposition cold = fit_quantile_factors(window, 0.5, 2);

  // Warm start from the previous window's solution, shifted by one tick.
  Panel prev;
  prev.values = world.panel.values.middleCols(9, W);
  prev.entity_ids = world.panel.entity_ids;
  prev.time_index.assign(world.panel.time_index.begin() + 9, world.panel.time_index.begin() + 9 + W);
  prev.mask = BoolMask::Constant(10, W, true);
  const FactorDecomposition before = fit_quantile_factors(prev, 0.5, 2);
  QfmOptions opts;
  Eigen::MatrixXd init(W, 2);
  init.topRows(W - 1) = before.factors.bottomRows(W - 1);
  init.row(W - 1) = before.factors.row(W - 1);
  opts.factor_init = init;
  const FactorDecomposition warm = fit_quantile_factors(window, 0.5, 2, opts);

  // The objective is non-convex, so the two starts may settle in different
  // basins; warm starting must never be materially worse than cold.
  CHECK(warm.objective <= cold.objective + 1e-3 * std::max(1.0, cold.objective));
}

TEST_CASE("strict mode evaluates masked panels from in-window data only", "[pipeline]") {
  SyntheticWorld world = make_world(6, 160, 90);
  // Punch holes everywhere, including the evaluation stretch.
  RngStream holes(91);
  for (Eigen::Index i = 0; i < world.panel.n(); ++i) {
    for (Eigen::Index t = 0; t < world.panel.T(); ++t) {
      if (holes.uniform() < 0.06) world.panel.mask(i, t) = false;
    }
  }
  EvaluationPlan plan;
  plan.window_length = 60;
  plan.horizons = {1};
  plan.test_periods = {{130, 135}};
  PipelineConfig pc = fast_config();
  pc.strict_imputation = true;
  pc.strict_impute_rank = 3;

  const ForecastReport report =
      run_evaluation(world.panel, world.meta, plan, {Method::naive, Method::sw2002}, pc);
  REQUIRE(!report.records.empty());
  std::map<std::string, Eigen::Index> row_of;
  for (Eigen::Index i = 0; i < world.panel.n(); ++i) {
    row_of[world.panel.entity_ids[static_cast<std::size_t>(i)]] = i;
  }
  for (const auto& rec : report.records) {
    // Only observed realizations are scored.
    CHECK(world.panel.mask(row_of.at(rec.entity_id), rec.origin_tick + rec.horizon));
    CHECK(std::isfinite(rec.forecast));
  }

  // Completeness is still demanded when strict mode is off.
  pc.strict_imputation = false;
  CHECK_THROWS_AS(run_evaluation(world.panel, world.meta, plan, {Method::naive}, pc), DataError);
}

TEST_CASE("report export", "[pipeline]") {
  SECTION("empty report gives a header-only csv") {
    const ForecastReport report;
    const std::string path = write_temp("qff_empty.csv", "");
    export_report(report, path, ReportFormat::csv);
    std::ifstream is(path);
    std::string line;
    std::getline(is, line);
    CHECK(line == "entity_id,period,h,method,mae,n_forecasts");
    CHECK_FALSE(std::getline(is, line));
  }
  SECTION("csv numbers round-trip and markdown bolds the per-cell minimum") {
    const SyntheticWorld world = make_world(6, 150, 89);
    EvaluationPlan plan;
    plan.window_length = 50;
    plan.horizons = {1};
    plan.test_periods = {{120, 122}};
    PipelineConfig pc = fast_config();
    const ForecastReport report =
        run_evaluation(world.panel, world.meta, plan, {Method::naive, Method::near}, pc);

    const std::string csv_path = write_temp("qff_report.csv", "");
    export_report(report, csv_path, ReportFormat::csv);
    const auto rows = read_csv(csv_path);
    REQUIRE(rows.size() == report.stations.size() + 1);
    for (std::size_t i = 1; i < rows.size(); ++i) {
      const auto& st = report.stations[i - 1];
      CHECK(rows[i][0] == st.entity_id);
      CHECK(parse_double(rows[i][4], "") == Catch::Approx(st.mae).epsilon(1e-12));
    }

    const std::string md_path = write_temp("qff_report.md", "");
    export_report(report, md_path, ReportFormat::markdown);
    std::ifstream is(md_path);
    std::stringstream buf;
    buf << is.rdbuf();
    const std::string md = buf.str();
    CHECK(md.find("## Period 1") != std::string::npos);
    CHECK(md.find("**") != std::string::npos);  // some minimum is bolded
    // Exactly one bolded value per (period, horizon) column.
    std::size_t bold_count = 0, pos = 0;
    while ((pos = md.find("**", pos)) != std::string::npos) {
      ++bold_count;
      pos += 2;
    }
    CHECK(bold_count == 2);  // one bold value = two ** markers
  }
}

TEST_CASE("config files drive the plan", "[pipeline]") {
  const std::string path = write_temp("qff_plan.cfg",
                                      "[plan]\n"
                                      "window_length = 64\n"
                                      "horizons = 1,2,3\n"
                                      "periods = 100:110, 200:210\n"
                                      "targets = all\n"
                                      "[model]\n"
                                      "grid = 0.1,0.3,0.5,0.7,0.9\n"
                                      "fixed_qfm_r = 2\n"
                                      "weights = interval\n");
  const Config cfg = Config::from_file(path);
  CHECK(cfg.get_int("plan.window_length", 0) == 64);
  CHECK(cfg.get_int_list("plan.horizons") == std::vector<int>{1, 2, 3});
  CHECK(cfg.get_list("plan.periods").size() == 2);
  CHECK(cfg.get_double_list("model.grid").size() == 5);
  CHECK(cfg.get_string("model.weights") == "interval");
  CHECK(cfg.get_int("model.fixed_qfm_r", 0) == 2);
  CHECK_THROWS_AS(Config::from_string("novalue"), DataError);
}
