#include "tentgp/cli.hpp"

#include <chrono>
#include <ctime>
#include <fstream>
#include <map>
#include <sstream>

#include <CLI11.hpp>

#include "tentgp/error.hpp"
#include "tentgp/evaluation.hpp"
#include "tentgp/parallel.hpp"
#include "tentgp/random.hpp"

namespace tentgp {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::uint64_t kStreamAggregate = 40;

// A config object with its dotted path, for messages that name the key.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(label() + "expected an object");
  }

  void allow(std::initializer_list<std::string_view> keys) const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (std::find(keys.begin(), keys.end(), it.key()) == keys.end()) {
        throw ConfigError("unknown config key '" + key(it.key()) + "'");
      }
    }
  }

  bool has(const std::string& k) const { return j_.contains(k); }
  const json& at(const std::string& k) const { return j_.at(k); }
  std::string key(const std::string& k) const { return path_.empty() ? k : path_ + "." + k; }

  template <typename T>
  void get(const std::string& k, T& out) const {
    if (!j_.contains(k)) return;
    try {
      out = j_.at(k).get<T>();
    } catch (const json::exception&) {
      throw ConfigError(key(k) + ": wrong type (" + j_.at(k).dump() + ")");
    }
  }

  void get_path(const std::string& k, std::optional<fs::path>& out) const {
    std::string s;
    get(k, s);
    if (has(k)) out = fs::path(s);
  }

 private:
  std::string label() const { return path_.empty() ? "config: " : path_ + ": "; }
  const json& j_;
  std::string path_;
};

Date parse_config_date(const Section& s, const std::string& k) {
  std::string text;
  s.get(k, text);
  try {
    return parse_date(text);
  } catch (const InputError& e) {
    throw ConfigError(s.key(k) + ": " + e.what());
  }
}

std::ofstream open_output(const fs::path& p) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw InputError("cannot write " + p.string());
  return out;
}

std::ifstream open_input(const fs::path& p, const std::string& what) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw InputError(what + ": cannot open " + p.string());
  return in;
}

json read_json(const fs::path& p, const std::string& what) {
  auto in = open_input(p, what);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw InputError(what + ": " + p.string() + ": " + e.what());
  }
}

void write_json(const fs::path& p, const json& j) { open_output(p) << j.dump(2) << '\n'; }

unsigned threads_of(const RunConfig& c) { return c.threads == 0 ? default_thread_count() : c.threads; }

void require_file(const fs::path& p, const std::string& key) {
  if (!fs::is_regular_file(p)) throw InputError(key + ": file not found: " + p.string());
}

// Every configured input must exist before a pipeline command starts.
void check_inputs(const RunConfig& c) {
  const RunPaths& p = c.paths;
  require_file(p.events_path(), "paths.events");
  require_file(p.weather_path(), "paths.weather");
  require_file(p.acs_path(), "paths.acs");
  require_file(p.cbg_path(), "paths.cbg");
  require_file(p.boundary_path(), "paths.boundary");
  if (p.ground_truth) require_file(*p.ground_truth, "paths.ground_truth");
}

GridSpec load_grid(const RunConfig& c) {
  return grid_from_boundary(read_boundary_geojson(c.paths.boundary_path().string()), c.cell_miles);
}

// ---------------------------------------------------------------------------
// Cube store

struct CubeStore {
  CubeTable cubes;
  GridSpec grid;
};

json standardization_to_json(const Standardization& s) {
  return {{"mean", s.mean}, {"scale", s.scale}};
}

CubeStore load_cubes(const RunConfig& c) {
  const fs::path dir = c.paths.output_dir;
  const fs::path meta_path = dir / "cubes.meta.json";
  const fs::path csv_path = dir / "cubes.csv";
  if (!fs::is_regular_file(meta_path) || !fs::is_regular_file(csv_path)) {
    throw InputError("cube store not found in " + dir.string() + " (run `ingest` first)");
  }
  const json meta = read_json(meta_path, "cube store");
  CubeStore store;
  store.grid = load_grid(c);
  try {
    const StudyWindow window{parse_date(meta.at("window").at("start").get<std::string>()),
                             meta.at("window").at("n_days").get<std::int32_t>()};
    const auto n_boxes = meta.at("n_boxes").get<std::int32_t>();
    if (n_boxes != store.grid.active_count()) {
      throw DataError("cube store has " + std::to_string(n_boxes) + " boxes but paths.boundary yields " +
                      std::to_string(store.grid.active_count()));
    }
    auto in = open_input(csv_path, "cube store");
    store.cubes = read_cube_csv(in, csv_path.string(), n_boxes, window);
    Standardization st;
    st.mean = meta.at("standardization").at("mean").get<Covariates>();
    st.scale = meta.at("standardization").at("scale").get<Covariates>();
    store.cubes.set_standardization(st);
  } catch (const json::exception& e) {
    throw InputError("cube store metadata: " + std::string(e.what()));
  }
  return store;
}

VariationalModel load_model(const RunConfig& c) {
  const fs::path p = c.paths.output_dir / "model.json";
  if (!fs::is_regular_file(p)) throw InputError("model not found: " + p.string() + " (run `train` first)");
  auto model = model_from_json(read_json(p, "model"));
  model.config.threads = threads_of(c);
  return model;
}

void write_manifest(const RunConfig& c, const std::string& command, const std::vector<std::string>& outputs) {
  // Outputs are listed relative to the output directory so that a run is
  // relocatable and byte-comparable across directories.
  std::vector<std::string> rel;
  for (const auto& o : outputs) {
    rel.push_back(fs::path(o).lexically_relative(c.paths.output_dir).generic_string());
  }
  json m{{"command", command}, {"seed", c.seed}, {"outputs", rel}};
  if (c.timestamp) {
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm utc{};
    gmtime_r(&now, &utc);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &utc);
    m["generated_at"] = buf;
  }
  write_json(c.paths.output_dir / ("run_" + command + ".json"), m);
}

// Inputs for every box on the given days, box-major.
std::vector<STInput> day_inputs(const CubeStore& s, std::int32_t first_day, std::int32_t n_days) {
  std::vector<STInput> out;
  out.reserve(static_cast<std::size_t>(s.cubes.n_boxes()) * static_cast<std::size_t>(n_days));
  for (std::int32_t d = first_day; d < first_day + n_days; ++d) {
    for (std::int32_t b = 0; b < s.cubes.n_boxes(); ++b) out.push_back(make_input(s.cubes, s.grid, BoxId{b}, d));
  }
  return out;
}

// Latent marginals per day (outer) and box (inner) over [first, first+n).
std::vector<std::vector<LatentMarginal>> daily_marginals(const VariationalModel& model, const CubeStore& s,
                                                         std::int32_t first_day, std::int32_t n_days,
                                                         unsigned threads) {
  std::vector<std::vector<LatentMarginal>> out;
  const std::int32_t block = 32;
  const auto B = static_cast<std::size_t>(s.cubes.n_boxes());
  for (std::int32_t d0 = first_day; d0 < first_day + n_days; d0 += block) {
    const std::int32_t nd = std::min(block, first_day + n_days - d0);
    const auto inputs = day_inputs(s, d0, nd);
    const auto marg = latent_marginals(model, inputs, threads);
    for (std::int32_t k = 0; k < nd; ++k) {
      out.emplace_back(marg.begin() + static_cast<std::ptrdiff_t>(k * B),
                       marg.begin() + static_cast<std::ptrdiff_t>((k + 1) * B));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Commands

void cmd_simulate(const RunConfig& c, std::ostream& log) {
  const SynthWorld world = generate(c.simulate);
  fs::create_directories(c.paths.output_dir);
  const DatasetPaths paths = write_synth_dataset(world, c.paths.data_dir());
  const fs::path truth = c.paths.data_dir() / "truth.csv";
  {
    auto out = open_output(truth);
    out << "box_id,date,f,lambda,y\n";
    for (std::size_t i = 0; i < world.cubes.size(); ++i) {
      out << world.cubes.box_at(i).index << ','
          << format_date(world.cubes.window().date_at(world.cubes.day_at(i))) << ','
          << format_double(world.f_true[i]) << ',' << format_double(world.lambda_true[i]) << ','
          << world.y_true[i] << '\n';
    }
  }
  log << "simulate: " << world.cubes.size() << " cubes, " << world.cubes.total_count()
      << " events written to " << c.paths.data_dir().string() << '\n';
  write_manifest(c, "simulate",
                 {paths.events.string(), paths.weather.string(), paths.acs.string(), paths.cbg.string(),
                  paths.boundary.string(), paths.ground_truth.string(), truth.string()});
}

void cmd_ingest(const RunConfig& c, std::ostream& log) {
  const GridSpec grid = load_grid(c);
  const auto weather = parse_weather(c.paths.weather_path().string());
  if (weather.empty()) throw DataError("paths.weather: no rows");
  StudyWindow window;
  window.start = c.window_start.value_or(weather.front().date);
  window.n_days = c.window_days.value_or(weather.back().date - window.start + 1);
  if (window.n_days < 1) throw ConfigError("window.n_days: must be positive");

  auto parsed = parse_events(c.paths.events_path().string());
  const std::size_t n_parsed = parsed.events.size();
  const auto kept = dedup(std::move(parsed.events), c.dedup_diameter_m);
  BuildReport report;
  CubeTable cubes = build_cubes(kept, grid, window, &report, {c.count_ceiling});
  join_covariates(cubes, grid, weather, parse_acs(c.paths.acs_path().string()),
                  parse_cbg_geojson(c.paths.cbg_path().string()), {c.standardize_observed_only});

  const fs::path dir = c.paths.output_dir;
  fs::create_directories(dir);
  {
    auto out = open_output(dir / "cubes.csv");
    write_cube_csv(cubes, out);
  }
  write_json(dir / "cubes.meta.json",
             {{"window", {{"start", format_date(window.start)}, {"n_days", window.n_days}}},
              {"n_boxes", cubes.n_boxes()},
              {"n_cubes", cubes.size()},
              {"total_count", cubes.total_count()},
              {"grid",
               {{"n_rows", grid.n_rows()},
                {"n_cols", grid.n_cols()},
                {"cell_miles", grid.cell_miles()},
                {"origin", {grid.origin().lat, grid.origin().lon}},
                {"ref_lat", grid.ref_lat()}}},
              {"standardization", standardization_to_json(cubes.standardization())}});
  json rejects = json::array();
  for (const auto& r : parsed.rejects) rejects.push_back({{"line", r.line}, {"reason", r.reason}, {"text", r.text}});
  std::size_t pos_in = 0, pos_out = 0;
  // Deduplication only touches positives.
  pos_out = static_cast<std::size_t>(std::count_if(kept.begin(), kept.end(), [](const TentEvent& e) {
    return e.label == EventLabel::positive;
  }));
  pos_in = pos_out + (n_parsed - kept.size());
  write_json(dir / "dedup_report.json", {{"rows_parsed", n_parsed},
                                         {"rows_rejected", parsed.rejects.size()},
                                         {"rejected", rejects},
                                         {"positives_in", pos_in},
                                         {"positives_kept", pos_out},
                                         {"duplicates_dropped", n_parsed - kept.size()},
                                         {"diameter_m", c.dedup_diameter_m}});
  json ceiling = json::array();
  for (const auto& [i, n] : report.ceiling_rejects) {
    ceiling.push_back({{"box_id", cubes.box_at(i).index},
                       {"date", format_date(window.date_at(cubes.day_at(i)))},
                       {"count", n}});
  }
  write_json(dir / "spillover_report.json", {{"positives_binned", report.positives_binned},
                                             {"negatives_binned", report.negatives_binned},
                                             {"outside_grid", report.spillover_outside_grid},
                                             {"outside_window", report.spillover_outside_window},
                                             {"count_ceiling", c.count_ceiling},
                                             {"ceiling_rejects", ceiling}});
  log << "ingest: " << cubes.size() << " cubes (" << cubes.n_boxes() << " boxes x " << window.n_days
      << " days), " << cubes.total_count() << " events binned\n";
  write_manifest(c, "ingest",
                 {(dir / "cubes.csv").string(), (dir / "cubes.meta.json").string(),
                  (dir / "dedup_report.json").string(), (dir / "spillover_report.json").string()});
}

TrainConfig train_config_for(const RunConfig& c) {
  TrainConfig t = c.train;
  t.threads = threads_of(c);
  return t;
}

void cmd_train(const RunConfig& c, std::ostream& log) {
  const CubeStore s = load_cubes(c);
  FitLog fit_log;
  const auto model = fit(s.cubes, s.grid, train_config_for(c), {}, &fit_log);
  const fs::path dir = c.paths.output_dir;
  json doc = model_to_json(model);
  // Context needed to interpret the model outside this output directory.
  const json meta = read_json(dir / "cubes.meta.json", "cube store");
  doc["grid"] = meta.at("grid");
  doc["window"] = meta.at("window");
  doc["standardization"] = standardization_to_json(s.cubes.standardization());
  write_json(dir / "model.json", doc);
  {
    auto out = open_output(dir / "training_log.csv");
    out << "epoch,elbo\n";
    for (std::size_t e = 0; e < fit_log.epoch_elbo.size(); ++e) {
      out << e + 1 << ',' << format_double(fit_log.epoch_elbo[e]) << '\n';
    }
  }
  log << "train: " << model.inducing.size() << " inducing points, final ELBO "
      << (fit_log.epoch_elbo.empty() ? 0.0 : fit_log.epoch_elbo.back()) << '\n';
  write_manifest(c, "train", {(dir / "model.json").string(), (dir / "training_log.csv").string()});
}

void cmd_cv(const RunConfig& c, std::ostream& log) {
  const CubeStore s = load_cubes(c);
  const FoldPlan plan = make_folds(s.grid, s.cubes.n_days(), c.cv_k_s, c.cv_k_t, c.seed);
  std::vector<CandidateConfig> candidates;
  if (c.cv_candidates.empty()) {
    candidates.push_back({"default", train_config_for(c)});
  } else {
    for (std::size_t k = 0; k < c.cv_candidates.size(); ++k) {
      TrainConfig t = train_config_from_json(c.cv_candidates[k].train, train_config_for(c));
      t.threads = threads_of(c);
      candidates.push_back({c.cv_candidates[k].id, t});
    }
  }
  const Selection sel = select_config(candidates, s.cubes, s.grid, plan, c.cv_nlpd_band);
  json reports = json::array();
  for (const auto& r : sel.reports) reports.push_back(cv_report_to_json(r));
  const fs::path p = c.paths.output_dir / "cv_report.json";
  write_json(p, {{"k_s", plan.k_s},
                 {"k_t", plan.k_t},
                 {"seed", plan.seed},
                 {"space_block_of_box", plan.space_block_of_box},
                 {"time_block_of_day", plan.time_block_of_day},
                 {"candidates", reports},
                 {"failures", sel.failures},
                 {"selected", sel.best.id},
                 {"selected_train", train_config_to_json(sel.best.config)}});
  log << "cv: selected '" << sel.best.id << "' (mean NLPD " << sel.best_report.mean_nlpd << ", mean RMSE "
      << sel.best_report.mean_rmse << ")\n";
  write_manifest(c, "cv", {p.string()});
}

void cmd_predict(const RunConfig& c, std::ostream& log) {
  const CubeStore s = load_cubes(c);
  const auto model = load_model(c);
  const std::int32_t T = s.cubes.n_days() + c.horizon_days;
  const std::int32_t B = s.cubes.n_boxes();
  const StudyWindow& window = s.cubes.window();
  std::map<int, std::vector<double>> annual;  // year -> per-box expected count
  const fs::path dir = c.paths.output_dir;
  {
    auto out = open_output(dir / "predictions.csv");
    out << "box_id,date,f_mean,f_var,lambda,p_occupied\n";
    const std::int32_t box_block = 64;
    for (std::int32_t b0 = 0; b0 < B; b0 += box_block) {
      const std::int32_t nb = std::min(box_block, B - b0);
      std::vector<STInput> targets;
      targets.reserve(static_cast<std::size_t>(nb) * static_cast<std::size_t>(T));
      for (std::int32_t b = b0; b < b0 + nb; ++b) {
        for (std::int32_t d = 0; d < T; ++d) targets.push_back(make_input(s.cubes, s.grid, BoxId{b}, d));
      }
      const auto pred = predict(model, targets, model.config.threads);
      std::size_t k = 0;
      for (std::int32_t b = b0; b < b0 + nb; ++b) {
        for (std::int32_t d = 0; d < T; ++d, ++k) {
          const Date date = window.date_at(d);
          const auto& p = pred[k];
          out << b << ',' << format_date(date) << ',' << format_double(p.f_mean) << ','
              << format_double(p.f_var) << ',' << format_double(p.lambda) << ','
              << format_double(p.p_occupied) << '\n';
          auto& year = annual[date.year()];
          if (year.empty()) year.assign(static_cast<std::size_t>(B), 0.0);
          year[static_cast<std::size_t>(b)] += p.lambda;
        }
      }
    }
  }
  std::vector<std::string> outputs{(dir / "predictions.csv").string()};
  for (const auto& [year, counts] : annual) {
    json features = json::array();
    for (std::int32_t b = 0; b < B; ++b) {
      const auto [sw, ne] = s.grid.cell_bounds(BoxId{b});
      const json ring = json::array({json::array({sw.lon, sw.lat}), json::array({ne.lon, sw.lat}),
                                     json::array({ne.lon, ne.lat}), json::array({sw.lon, ne.lat}),
                                     json::array({sw.lon, sw.lat})});
      features.push_back({{"type", "Feature"},
                          {"properties", {{"box_id", b}, {"year", year}, {"count", counts[static_cast<std::size_t>(b)]}}},
                          {"geometry", {{"type", "Polygon"}, {"coordinates", json::array({ring})}}}});
    }
    const fs::path p = dir / ("heatmap_" + std::to_string(year) + ".geojson");
    open_output(p) << json{{"type", "FeatureCollection"}, {"features", features}}.dump() << '\n';
    outputs.push_back(p.string());
  }
  log << "predict: " << static_cast<std::int64_t>(B) * T << " rows, " << annual.size() << " heatmap(s)\n";
  write_manifest(c, "predict", outputs);
}

void cmd_aggregate(const RunConfig& c, std::ostream& log) {
  const CubeStore s = load_cubes(c);
  const auto model = load_model(c);
  const StudyWindow& window = s.cubes.window();
  const unsigned threads = threads_of(c);
  AggregateOptions opts = c.aggregate;
  opts.seed = derive_seed(c.aggregate.seed, kStreamAggregate);

  const auto marg = daily_marginals(model, s, 0, window.n_days, threads);
  std::vector<CityAggregate> aggs(static_cast<std::size_t>(window.n_days));
  parallel_chunks(aggs.size(), threads, [&](std::size_t d) {
    aggs[d] = aggregate_day(marg[d], opts, window.date_at(static_cast<std::int32_t>(d)));
  });
  const fs::path dir = c.paths.output_dir;
  {
    auto out = open_output(dir / "city_aggregates.csv");
    out << "date,mean_total,p05,p50,p95,n_included\n";
    for (const auto& a : aggs) {
      out << format_date(a.date) << ',' << format_double(a.mean_total) << ',' << format_double(a.p05) << ','
          << format_double(a.p50) << ',' << format_double(a.p95) << ',' << format_double(a.n_included) << '\n';
    }
  }
  std::vector<std::string> outputs{(dir / "city_aggregates.csv").string()};

  const fs::path gt_path = c.paths.ground_truth_path();
  if (c.calibrate && fs::is_regular_file(gt_path)) {
    const auto truth = parse_ground_truth(gt_path.string());
    for (const auto& g : truth) {
      if (!window.contains(g.date)) {
        throw DataError("paths.ground_truth: date " + format_date(g.date) + " is outside the prediction window");
      }
    }
    std::vector<std::int32_t> days;
    for (const auto& g : truth) {
      for (int k = -c.match_window_days; k <= c.match_window_days; ++k) {
        const std::int32_t d = window.index_of(g.date) + k;
        if (d >= 0 && d < window.n_days && (days.empty() || days.back() < d)) days.push_back(d);
      }
    }
    const auto grid = theta_grid(c.theta_step, c.theta_max);
    const auto cal = calibrate_theta(
        [&](double theta) {
          AggregateOptions o = opts;
          o.theta = theta;
          std::vector<CityAggregate> out(days.size());
          parallel_chunks(days.size(), threads, [&](std::size_t k) {
            out[k] = aggregate_day(marg[static_cast<std::size_t>(days[k])], o, window.date_at(days[k]));
          });
          return out;
        },
        truth, grid, c.match_window_days);
    json j = calibration_to_json(cal);
    j["gate"] = c.aggregate.gate == GateMode::sampled ? "sampled" : "mean";
    j["mc_samples"] = c.aggregate.mc_samples;
    j["match_window_days"] = c.match_window_days;
    j["n_ground_truth"] = truth.size();
    write_json(dir / "theta_calibration.json", j);
    outputs.push_back((dir / "theta_calibration.json").string());
    log << "aggregate: calibrated theta = " << cal.chosen_theta << " (RMSE " << cal.chosen_rmse << ")\n";
  }
  log << "aggregate: " << aggs.size() << " days at theta = " << opts.theta << '\n';
  write_manifest(c, "aggregate", outputs);
}

void cmd_report(const RunConfig& c, std::ostream& log) {
  const fs::path dir = c.paths.output_dir;
  const fs::path src = dir / "city_aggregates.csv";
  if (!fs::is_regular_file(src)) throw InputError("city aggregates not found: " + src.string() + " (run `aggregate` first)");
  auto in = open_input(src, "city aggregates");
  CsvReader reader(in, src.string(), {"date", "mean_total"});
  std::vector<std::string> dates;
  std::vector<double> totals;
  while (reader.next()) {
    dates.emplace_back(reader.field("date"));
    totals.push_back(parse_double(reader.field("mean_total"), "mean_total"));
  }
  const auto rs = rolling_std(totals, c.report_window);
  {
    auto out = open_output(dir / "rolling_std.csv");
    out << "date,mean_total,rolling_std\n";
    for (std::size_t i = 0; i < dates.size(); ++i) {
      out << dates[i] << ',' << format_double(totals[i]) << ',';
      if (rs[i]) out << format_double(*rs[i]);
      out << '\n';
    }
  }
  std::vector<double> vals;
  for (const auto& v : rs) {
    if (v) vals.push_back(*v);
  }
  auto mean_of = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  };
  const double mean_total = mean_of(totals);
  double ss = 0.0;
  for (double t : totals) ss += (t - mean_total) * (t - mean_total);
  std::vector<double> sorted = vals;
  std::sort(sorted.begin(), sorted.end());
  write_json(dir / "report_summary.json",
             {{"n_days", totals.size()},
              {"window", c.report_window},
              {"mean_total_mean", mean_total},
              {"mean_total_sd", totals.size() > 1 ? std::sqrt(ss / static_cast<double>(totals.size() - 1)) : 0.0},
              {"mean_total_min", *std::min_element(totals.begin(), totals.end())},
              {"mean_total_max", *std::max_element(totals.begin(), totals.end())},
              {"rolling_std_mean", mean_of(vals)},
              {"rolling_std_median", sample_quantile(sorted, 0.5)},
              {"rolling_std_max", sorted.back()}});
  log << "report: mean rolling " << c.report_window << "-day std " << mean_of(vals) << '\n';
  write_manifest(c, "report", {(dir / "rolling_std.csv").string(), (dir / "report_summary.json").string()});
}

const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names{"simulate", "ingest", "train", "cv", "predict", "aggregate", "report"};
  return names;
}

}  // namespace

// ---------------------------------------------------------------------------

RunConfig parse_run_config(const json& j) {
  RunConfig c;
  const Section top(j, "");
  top.allow({"seed", "threads", "paths", "grid", "window", "ingest", "train", "cv", "predict", "aggregate",
             "report", "simulate"});
  if (top.has("paths")) {
    const Section s(top.at("paths"), "paths");
    s.allow({"events", "weather", "acs", "cbg", "boundary", "ground_truth", "output_dir"});
    std::string out;
    s.get("output_dir", out);
    if (s.has("output_dir")) c.paths.output_dir = out;
    s.get_path("events", c.paths.events);
    s.get_path("weather", c.paths.weather);
    s.get_path("acs", c.paths.acs);
    s.get_path("cbg", c.paths.cbg);
    s.get_path("boundary", c.paths.boundary);
    s.get_path("ground_truth", c.paths.ground_truth);
  }
  if (top.has("grid")) {
    const Section s(top.at("grid"), "grid");
    s.allow({"cell_miles"});
    s.get("cell_miles", c.cell_miles);
    if (!(c.cell_miles > 0.0)) throw ConfigError("grid.cell_miles: must be positive");
  }
  if (top.has("window")) {
    const Section s(top.at("window"), "window");
    s.allow({"start", "n_days"});
    if (s.has("start")) c.window_start = parse_config_date(s, "start");
    std::int32_t n = 0;
    s.get("n_days", n);
    if (s.has("n_days")) {
      if (n < 1) throw ConfigError("window.n_days: must be positive");
      c.window_days = n;
    }
  }
  if (top.has("ingest")) {
    const Section s(top.at("ingest"), "ingest");
    s.allow({"count_ceiling", "dedup_diameter_m", "standardize_observed_only"});
    s.get("count_ceiling", c.count_ceiling);
    s.get("dedup_diameter_m", c.dedup_diameter_m);
    s.get("standardize_observed_only", c.standardize_observed_only);
  }
  if (top.has("train")) {
    c.train = train_config_from_json(top.at("train"), c.train);
    try {
      c.train.validate();
    } catch (const std::exception& e) {
      throw ConfigError(std::string("train: ") + e.what());
    }
  }
  if (top.has("cv")) {
    const Section s(top.at("cv"), "cv");
    s.allow({"k_s", "k_t", "nlpd_band", "candidates"});
    s.get("k_s", c.cv_k_s);
    s.get("k_t", c.cv_k_t);
    s.get("nlpd_band", c.cv_nlpd_band);
    if (s.has("candidates")) {
      if (!s.at("candidates").is_array()) throw ConfigError("cv.candidates: expected an array");
      std::size_t k = 0;
      for (const auto& cand : s.at("candidates")) {
        const Section cs(cand, "cv.candidates[" + std::to_string(k++) + "]");
        cs.allow({"id", "train"});
        CvCandidate cc;
        cs.get("id", cc.id);
        if (cc.id.empty()) throw ConfigError(cs.key("id") + ": required");
        cc.train = cs.has("train") ? cs.at("train") : json::object();
        train_config_from_json(cc.train, c.train);  // validate keys now
        c.cv_candidates.push_back(std::move(cc));
      }
    }
  }
  if (top.has("predict")) {
    const Section s(top.at("predict"), "predict");
    s.allow({"horizon_days"});
    s.get("horizon_days", c.horizon_days);
    if (c.horizon_days < 0) throw ConfigError("predict.horizon_days: must be non-negative");
  }
  if (top.has("aggregate")) {
    const Section s(top.at("aggregate"), "aggregate");
    s.allow({"theta", "mc_samples", "gate", "calibrate", "theta_step", "theta_max", "match_window_days"});
    s.get("theta", c.aggregate.theta);
    s.get("mc_samples", c.aggregate.mc_samples);
    std::string gate = "sampled";
    s.get("gate", gate);
    if (gate == "sampled") {
      c.aggregate.gate = GateMode::sampled;
    } else if (gate == "mean") {
      c.aggregate.gate = GateMode::mean;
    } else {
      throw ConfigError("aggregate.gate: expected \"sampled\" or \"mean\", got \"" + gate + "\"");
    }
    s.get("calibrate", c.calibrate);
    s.get("theta_step", c.theta_step);
    s.get("theta_max", c.theta_max);
    s.get("match_window_days", c.match_window_days);
    if (!(c.aggregate.theta >= 0.0 && c.aggregate.theta <= 1.0)) throw ConfigError("aggregate.theta: must lie in [0, 1]");
    if (c.aggregate.mc_samples == 0) throw ConfigError("aggregate.mc_samples: must be positive");
    if (!(c.theta_step > 0.0)) throw ConfigError("aggregate.theta_step: must be positive");
    if (c.match_window_days < 0) throw ConfigError("aggregate.match_window_days: must be non-negative");
  }
  if (top.has("report")) {
    const Section s(top.at("report"), "report");
    s.allow({"window"});
    s.get("window", c.report_window);
    if (c.report_window < 2) throw ConfigError("report.window: must be at least 2");
  }
  if (top.has("simulate")) {
    const Section s(top.at("simulate"), "simulate");
    s.allow({"n_rows", "n_cols", "n_days", "start", "south_west", "cell_miles", "kernel", "mean_const",
             "observed_fraction", "gate_theta", "n_ground_truth"});
    SynthConfig& sc = c.simulate;
    s.get("n_rows", sc.n_rows);
    s.get("n_cols", sc.n_cols);
    s.get("n_days", sc.n_days);
    if (s.has("start")) sc.start = parse_config_date(s, "start");
    if (s.has("south_west")) {
      std::array<double, 2> ll{};
      s.get("south_west", ll);
      sc.south_west = {ll[0], ll[1]};
    }
    s.get("cell_miles", sc.cell_miles);
    if (s.has("kernel")) {
      try {
        sc.kernel = kernel_from_json(s.at("kernel"));
      } catch (const json::exception& e) {
        throw ConfigError(std::string("simulate.kernel: ") + e.what());
      }
    }
    s.get("mean_const", sc.mean_const);
    s.get("observed_fraction", sc.observed_fraction);
    s.get("gate_theta", sc.gate_theta);
    s.get("n_ground_truth", sc.n_ground_truth);
    try {
      sc.validate();
    } catch (const std::exception& e) {
      throw ConfigError(std::string("simulate: ") + e.what());
    }
  }
  std::uint64_t seed = 0;
  top.get("seed", seed);
  if (top.has("seed")) apply_seed(c, seed);
  top.get("threads", c.threads);
  return c;
}

void apply_seed(RunConfig& config, std::uint64_t seed) {
  config.seed = seed;
  config.train.seed = seed;
  config.simulate.seed = seed;
  config.aggregate.seed = seed;
}

void run_command(const std::string& command, const RunConfig& config, std::ostream& log) {
  if (command != "simulate" && command != "report") check_inputs(config);
  if (command == "simulate") {
    cmd_simulate(config, log);
  } else if (command == "ingest") {
    cmd_ingest(config, log);
  } else if (command == "train") {
    cmd_train(config, log);
  } else if (command == "cv") {
    cmd_cv(config, log);
  } else if (command == "predict") {
    cmd_predict(config, log);
  } else if (command == "aggregate") {
    cmd_aggregate(config, log);
  } else if (command == "report") {
    cmd_report(config, log);
  } else {
    throw ConfigError("unknown command '" + command + "'");
  }
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Spatiotemporal tent-count modeling pipeline"};
  app.name(args.empty() ? "tentgp" : args.front());
  std::string config_path;
  std::uint64_t seed = 0;
  unsigned threads = 0;
  std::string output_dir;
  bool no_timestamp = false;
  auto* config_opt = app.add_option("--config", config_path, "JSON run configuration");
  auto* seed_opt = app.add_option("--seed", seed, "global seed (overrides the config)");
  auto* threads_opt = app.add_option("--threads", threads, "worker threads (default: all cores)");
  auto* out_opt = app.add_option("--output-dir", output_dir, "output directory (overrides paths.output_dir)");
  app.add_flag("--no-timestamp", no_timestamp, "omit the timestamp from run manifests");
  app.require_subcommand(1, 1);
  app.fallthrough();
  for (const auto& name : command_names()) app.add_subcommand(name);

  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitInput;
  }
  const std::string command = app.get_subcommands().front()->get_name();

  try {
    RunConfig config;
    if (config_opt->count() > 0) {
      if (!fs::is_regular_file(config_path)) throw InputError("--config: file not found: " + config_path);
      config = parse_run_config(read_json(config_path, "--config"));
    }
    if (seed_opt->count() > 0) apply_seed(config, seed);
    if (threads_opt->count() > 0) config.threads = threads;
    if (out_opt->count() > 0) config.paths.output_dir = output_dir;
    if (no_timestamp) config.timestamp = false;
    run_command(command, config, out);
    return kExitOk;
  } catch (const NumericalError& e) {
    err << "error: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitInput;
  }
}

}  // namespace tentgp
