#include "tentgp/ingestion.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>
#include <ostream>
#include <set>
#include <sstream>
#include <tuple>

#include <json.hpp>

#include "tentgp/error.hpp"

namespace tentgp {

namespace {

std::ifstream open_input(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path);
  return in;
}

bool is_missing(std::string_view v) {
  v = trim(v);
  return v.empty() || v == "NA" || v == "NaN" || v == "nan" || v == "null";
}

auto event_key(const TentEvent& e) {
  return std::make_tuple(e.day, e.location.lat, e.location.lon, static_cast<int>(e.source),
                         static_cast<int>(e.label));
}

}  // namespace

std::string to_string(EventSource s) {
  return s == EventSource::call_report ? "call_report" : "image_detection";
}

std::string to_string(EventLabel l) { return l == EventLabel::positive ? "positive" : "negative"; }

EventParseResult parse_events(std::istream& in, const std::string& source_name,
                              const std::optional<StudyWindow>& window) {
  CsvReader reader(in, source_name, {"source", "date", "lat", "lon", "label"});
  EventParseResult result;
  while (reader.next()) {
    auto reject = [&](std::string reason) {
      result.rejects.push_back({reader.line_number(), std::move(reason), reader.raw_line()});
    };
    if (reader.field_count() != reader.column_count()) {
      reject("expected " + std::to_string(reader.column_count()) + " fields, found " +
             std::to_string(reader.field_count()));
      continue;
    }
    TentEvent ev;
    const auto source = reader.field("source");
    if (source == "call_report") {
      ev.source = EventSource::call_report;
    } else if (source == "image_detection") {
      ev.source = EventSource::image_detection;
    } else {
      reject("unknown source '" + std::string(source) + "'");
      continue;
    }
    const auto label = reader.field("label");
    if (label == "positive") {
      ev.label = EventLabel::positive;
    } else if (label == "negative") {
      ev.label = EventLabel::negative;
    } else {
      reject("unknown label '" + std::string(label) + "'");
      continue;
    }
    try {
      ev.day = parse_date(reader.field("date"));
      ev.location.lat = parse_double(reader.field("lat"), "lat");
      ev.location.lon = parse_double(reader.field("lon"), "lon");
    } catch (const InputError& e) {
      reject(e.what());
      continue;
    }
    if (!std::isfinite(ev.location.lat) || !std::isfinite(ev.location.lon)) {
      reject("coordinate is not finite");
      continue;
    }
    if (ev.location.lat < -90.0 || ev.location.lat > 90.0) {
      reject("latitude out of range");
      continue;
    }
    if (ev.location.lon < -180.0 || ev.location.lon > 180.0) {
      reject("longitude out of range");
      continue;
    }
    if (window && !window->contains(ev.day)) {
      reject("date outside study window");
      continue;
    }
    result.events.push_back(ev);
  }
  return result;
}

EventParseResult parse_events(const std::string& path, const std::optional<StudyWindow>& window) {
  auto in = open_input(path);
  return parse_events(in, path, window);
}

std::vector<TentEvent> dedup(std::vector<TentEvent> events, double diameter_m) {
  std::sort(events.begin(), events.end(),
            [](const TentEvent& a, const TentEvent& b) { return event_key(a) < event_key(b); });
  // Latitude span of the diameter plus slack; kept positives are visited in
  // latitude order, so the scan stops once they fall below this band.
  const double lat_band = diameter_m / (kEarthRadiusM * std::numbers::pi / 180.0) * 1.01;
  std::vector<TentEvent> out;
  out.reserve(events.size());
  std::vector<GeoPoint> kept;
  std::size_t i = 0;
  while (i < events.size()) {
    const Date day = events[i].day;
    kept.clear();
    for (; i < events.size() && events[i].day == day; ++i) {
      const TentEvent& ev = events[i];
      if (ev.label == EventLabel::negative) {
        out.push_back(ev);
        continue;
      }
      bool duplicate = false;
      for (auto it = kept.rbegin(); it != kept.rend(); ++it) {
        if (it->lat < ev.location.lat - lat_band) break;
        if (haversine_m(*it, ev.location) <= diameter_m) {
          duplicate = true;
          break;
        }
      }
      if (!duplicate) {
        kept.push_back(ev.location);
        out.push_back(ev);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

const std::array<std::string, kNumCovariates>& covariate_names() {
  static const std::array<std::string, kNumCovariates> names{
      "precip", "tmax", "tmin", "pct_white", "pct_black", "income"};
  return names;
}

Covariates Standardization::apply(const Covariates& raw) const {
  Covariates z{};
  for (std::size_t k = 0; k < kNumCovariates; ++k) z[k] = (raw[k] - mean[k]) / scale[k];
  return z;
}

Covariates Standardization::invert(const Covariates& z) const {
  Covariates raw{};
  for (std::size_t k = 0; k < kNumCovariates; ++k) raw[k] = z[k] * scale[k] + mean[k];
  return raw;
}

std::vector<WeatherRecord> parse_weather(std::istream& in, const std::string& source_name) {
  CsvReader reader(in, source_name, {"date", "tmax_f", "tmin_f", "precip_in"});
  std::vector<WeatherRecord> out;
  while (reader.next()) {
    const std::string where = source_name + ":" + std::to_string(reader.line_number());
    try {
      WeatherRecord rec;
      rec.date = parse_date(reader.field("date"));
      rec.values.tmax_f = parse_double(reader.field("tmax_f"), "tmax_f");
      rec.values.tmin_f = parse_double(reader.field("tmin_f"), "tmin_f");
      rec.values.precip_in = parse_double(reader.field("precip_in"), "precip_in");
      out.push_back(rec);
    } catch (const InputError& e) {
      throw InputError(where + ": " + e.what());
    }
  }
  std::sort(out.begin(), out.end(),
            [](const WeatherRecord& a, const WeatherRecord& b) { return a.date < b.date; });
  for (std::size_t i = 1; i < out.size(); ++i) {
    if (out[i].date == out[i - 1].date) {
      throw DataError(source_name + ": duplicate date " + format_date(out[i].date));
    }
  }
  return out;
}

std::vector<WeatherRecord> parse_weather(const std::string& path) {
  auto in = open_input(path);
  return parse_weather(in, path);
}

std::vector<AcsRecord> parse_acs(std::istream& in, const std::string& source_name) {
  CsvReader reader(in, source_name, {"cbg_id", "year", "median_income", "pct_white", "pct_black"});
  std::vector<AcsRecord> out;
  auto value = [](std::string_view v, const std::string& what) {
    return is_missing(v) ? std::numeric_limits<double>::quiet_NaN() : parse_double(v, what);
  };
  while (reader.next()) {
    const std::string where = source_name + ":" + std::to_string(reader.line_number());
    try {
      AcsRecord rec;
      rec.cbg_id = std::string(reader.field("cbg_id"));
      if (rec.cbg_id.empty()) throw InputError("cbg_id is empty");
      rec.year = static_cast<int>(parse_int(reader.field("year"), "year"));
      rec.median_income = value(reader.field("median_income"), "median_income");
      rec.pct_white = value(reader.field("pct_white"), "pct_white");
      rec.pct_black = value(reader.field("pct_black"), "pct_black");
      for (double f : {rec.pct_white, rec.pct_black}) {
        if (std::isfinite(f) && (f < 0.0 || f > 1.0)) {
          throw InputError("population fraction outside [0,1]");
        }
      }
      out.push_back(std::move(rec));
    } catch (const InputError& e) {
      throw InputError(where + ": " + e.what());
    }
  }
  return out;
}

std::vector<AcsRecord> parse_acs(const std::string& path) {
  auto in = open_input(path);
  return parse_acs(in, path);
}

std::vector<CbgGeometry> parse_cbg_geojson_text(const std::string& text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("CBG GeoJSON parse error: ") + e.what());
  }
  if (doc.value("type", "") != "FeatureCollection") {
    throw InputError("CBG GeoJSON must be a FeatureCollection");
  }
  std::vector<CbgGeometry> out;
  for (const auto& feature : doc.at("features")) {
    const auto& props = feature.at("properties");
    if (!props.contains("cbg_id")) throw InputError("CBG feature without property 'cbg_id'");
    const auto& id = props["cbg_id"];
    CbgGeometry g;
    g.cbg_id = id.is_string() ? id.get<std::string>() : id.dump();
    g.polygons = parse_boundary_geojson(feature.at("geometry").dump());
    out.push_back(std::move(g));
  }
  return out;
}

std::vector<CbgGeometry> parse_cbg_geojson(const std::string& path) {
  auto in = open_input(path);
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_cbg_geojson_text(ss.str());
  } catch (const InputError& e) {
    throw InputError(path + ": " + e.what());
  }
}

std::vector<GroundTruthCount> parse_ground_truth(std::istream& in,
                                                 const std::string& source_name) {
  CsvReader reader(in, source_name, {"date", "count"});
  std::vector<GroundTruthCount> out;
  while (reader.next()) {
    const std::string where = source_name + ":" + std::to_string(reader.line_number());
    try {
      GroundTruthCount g;
      g.date = parse_date(reader.field("date"));
      g.count = parse_int(reader.field("count"), "count");
      if (g.count < 0) throw InputError("count is negative");
      out.push_back(g);
    } catch (const InputError& e) {
      throw InputError(where + ": " + e.what());
    }
  }
  std::sort(out.begin(), out.end(),
            [](const GroundTruthCount& a, const GroundTruthCount& b) { return a.date < b.date; });
  for (std::size_t i = 1; i < out.size(); ++i) {
    if (out[i].date == out[i - 1].date) {
      throw DataError(source_name + ": duplicate date " + format_date(out[i].date));
    }
  }
  return out;
}

std::vector<GroundTruthCount> parse_ground_truth(const std::string& path) {
  auto in = open_input(path);
  return parse_ground_truth(in, path);
}

// ---------------------------------------------------------------------------

CubeTable::CubeTable(std::int32_t n_boxes, StudyWindow window)
    : n_boxes_(n_boxes), window_(window) {
  if (n_boxes <= 0) throw InputError("cube table needs at least one box");
  if (window.n_days <= 0) throw InputError("study window must contain at least one day");
  const std::size_t n = static_cast<std::size_t>(n_boxes) * static_cast<std::size_t>(window.n_days);
  y_.assign(n, 0);
  observed_.assign(n, 0);
  standardization_.scale.fill(1.0);
}

void CubeTable::set_covariates(std::vector<WeatherRow> weather, int first_year, int n_years,
                               std::vector<std::array<double, 3>> demographics) {
  if (weather.size() != static_cast<std::size_t>(window_.n_days)) {
    throw InputError("weather series length does not match the study window");
  }
  if (n_years <= 0 ||
      demographics.size() != static_cast<std::size_t>(n_boxes_) * static_cast<std::size_t>(n_years)) {
    throw InputError("demographic table has the wrong shape");
  }
  weather_ = std::move(weather);
  first_year_ = first_year;
  n_years_ = n_years;
  demographics_ = std::move(demographics);
  year_slot_.resize(static_cast<std::size_t>(window_.n_days));
  for (std::int32_t d = 0; d < window_.n_days; ++d) {
    year_slot_[static_cast<std::size_t>(d)] =
        std::clamp(window_.date_at(d).year() - first_year_, 0, n_years_ - 1);
  }
}

Covariates CubeTable::x_raw(std::size_t i) const {
  return x_raw_at(box_at(i), day_at(i));
}

Covariates CubeTable::x_raw_at(BoxId box, std::int32_t day) const {
  if (!has_covariates()) throw InputError("cube table has no covariates joined");
  std::int32_t wd = day;
  int slot = 0;
  if (day >= 0 && day < window_.n_days) {
    slot = year_slot_[static_cast<std::size_t>(day)];
  } else {
    // Outside the window: repeat the seasonal cycle when a full year is
    // available, otherwise hold the nearest edge value.
    if (window_.n_days >= 365) {
      while (wd >= window_.n_days) wd -= 365;
      while (wd < 0) wd += 365;
    } else {
      wd = std::clamp(wd, 0, window_.n_days - 1);
    }
    slot = std::clamp(window_.date_at(day).year() - first_year_, 0, n_years_ - 1);
  }
  const WeatherRow& w = weather_[static_cast<std::size_t>(wd)];
  const auto& demo = demographics_[static_cast<std::size_t>(box.index) * n_years_ + slot];
  return {w.precip_in, w.tmax_f, w.tmin_f, demo[0], demo[1], demo[2]};
}

void CubeTable::standardize(bool observed_only) {
  Covariates sum{}, sum_sq{};
  std::size_t n = 0;
  // Two-pass for accuracy: means first, then centred second moments.
  for (std::size_t i = 0; i < size(); ++i) {
    if (observed_only && !observed(i)) continue;
    const auto x = x_raw(i);
    for (std::size_t k = 0; k < kNumCovariates; ++k) sum[k] += x[k];
    ++n;
  }
  if (n < 2) throw DataError("standardization needs at least two training cubes");
  Standardization s;
  for (std::size_t k = 0; k < kNumCovariates; ++k) s.mean[k] = sum[k] / static_cast<double>(n);
  for (std::size_t i = 0; i < size(); ++i) {
    if (observed_only && !observed(i)) continue;
    const auto x = x_raw(i);
    for (std::size_t k = 0; k < kNumCovariates; ++k) {
      const double d = x[k] - s.mean[k];
      sum_sq[k] += d * d;
    }
  }
  for (std::size_t k = 0; k < kNumCovariates; ++k) {
    const double sd = std::sqrt(sum_sq[k] / static_cast<double>(n - 1));
    s.scale[k] = sd > 0.0 ? sd : 1.0;
  }
  standardization_ = s;
}

SpaceTimeCube CubeTable::cube(std::size_t i) const {
  SpaceTimeCube c;
  c.box = box_at(i);
  c.day_index = day_at(i);
  c.y = y_[i];
  c.observed = observed_[i] != 0;
  if (has_covariates()) {
    c.x_raw = x_raw(i);
    c.x = standardization_.apply(c.x_raw);
  }
  return c;
}

std::int64_t CubeTable::total_count() const {
  std::int64_t total = 0;
  for (auto v : y_) total += v;
  return total;
}

bool CubeTable::operator==(const CubeTable& o) const {
  auto weather_eq = [](const WeatherRow& a, const WeatherRow& b) {
    return a.tmax_f == b.tmax_f && a.tmin_f == b.tmin_f && a.precip_in == b.precip_in;
  };
  return n_boxes_ == o.n_boxes_ && window_.start == o.window_.start &&
         window_.n_days == o.window_.n_days && y_ == o.y_ && observed_ == o.observed_ &&
         weather_.size() == o.weather_.size() &&
         std::equal(weather_.begin(), weather_.end(), o.weather_.begin(), weather_eq) &&
         first_year_ == o.first_year_ && n_years_ == o.n_years_ &&
         demographics_ == o.demographics_ && standardization_.mean == o.standardization_.mean &&
         standardization_.scale == o.standardization_.scale;
}

CubeTable build_cubes(const std::vector<TentEvent>& events, const GridSpec& grid,
                      const StudyWindow& window, BuildReport* report,
                      const BuildCubesOptions& options) {
  CubeTable cubes(grid.active_count(), window);
  BuildReport local;
  BuildReport& rep = report ? *report : local;
  rep = BuildReport{};
  for (const auto& ev : events) {
    if (!window.contains(ev.day)) {
      ++rep.spillover_outside_window;
      continue;
    }
    const auto box = assign_box(ev.location, grid);
    if (!box) {
      ++rep.spillover_outside_grid;
      continue;
    }
    const std::size_t i = cubes.index(*box, window.index_of(ev.day));
    cubes.set_observed(i, true);
    if (ev.label == EventLabel::positive) {
      cubes.add_count(i, 1);
      ++rep.positives_binned;
    } else {
      ++rep.negatives_binned;
    }
  }
  for (std::size_t i = 0; i < cubes.size(); ++i) {
    if (cubes.y(i) > options.count_ceiling) {
      rep.ceiling_rejects.emplace_back(i, cubes.y(i));
      rep.positives_binned -= static_cast<std::size_t>(cubes.y(i));
      cubes.set_y(i, 0);
    }
  }
  return cubes;
}

std::vector<WeatherRow> fill_weather(const std::vector<WeatherRecord>& weather,
                                     const StudyWindow& window) {
  std::vector<std::optional<WeatherRow>> series(static_cast<std::size_t>(window.n_days));
  for (const auto& rec : weather) {
    if (window.contains(rec.date)) {
      series[static_cast<std::size_t>(window.index_of(rec.date))] = rec.values;
    }
  }
  std::vector<WeatherRow> out(series.size());
  std::int32_t prev = -1;
  const auto n = static_cast<std::int32_t>(series.size());
  for (std::int32_t d = 0; d <= n; ++d) {
    if (d < n && !series[static_cast<std::size_t>(d)]) continue;
    const std::int32_t gap = d - prev - 1;
    if (gap > kMaxWeatherGapDays) {
      throw DataError("weather: " + std::to_string(gap) + " consecutive days missing starting " +
                      format_date(window.date_at(prev + 1)));
    }
    if (prev < 0 && d == n) throw DataError("weather: no records inside the study window");
    for (std::int32_t g = prev + 1; g < d; ++g) {
      if (prev < 0) {
        out[static_cast<std::size_t>(g)] = *series[static_cast<std::size_t>(d)];
      } else if (d == n) {
        out[static_cast<std::size_t>(g)] = *series[static_cast<std::size_t>(prev)];
      } else {
        const auto& a = *series[static_cast<std::size_t>(prev)];
        const auto& b = *series[static_cast<std::size_t>(d)];
        const double t = static_cast<double>(g - prev) / static_cast<double>(d - prev);
        out[static_cast<std::size_t>(g)] = {a.tmax_f + t * (b.tmax_f - a.tmax_f),
                                            a.tmin_f + t * (b.tmin_f - a.tmin_f),
                                            a.precip_in + t * (b.precip_in - a.precip_in)};
      }
    }
    if (d < n) out[static_cast<std::size_t>(d)] = *series[static_cast<std::size_t>(d)];
    prev = d;
  }
  return out;
}

void join_covariates(CubeTable& cubes, const GridSpec& grid,
                     const std::vector<WeatherRecord>& weather, const std::vector<AcsRecord>& acs,
                     const std::vector<CbgGeometry>& cbgs, const JoinOptions& options) {
  if (grid.active_count() != cubes.n_boxes()) {
    throw InputError("grid and cube table disagree on the number of boxes");
  }
  auto daily = fill_weather(weather, cubes.window());

  // ACS vintages per CBG, with missing values imputed by the city mean for
  // that vintage.
  if (acs.empty()) throw DataError("acs: no records");
  std::map<int, std::array<double, 3>> vintage_sum;
  std::map<int, std::array<int, 3>> vintage_n;
  for (const auto& r : acs) {
    const std::array<double, 3> v{r.pct_white, r.pct_black, r.median_income};
    for (std::size_t k = 0; k < 3; ++k) {
      if (std::isfinite(v[k])) {
        vintage_sum[r.year][k] += v[k];
        vintage_n[r.year][k] += 1;
      }
    }
  }
  std::map<std::string, std::map<int, std::array<double, 3>>> by_cbg;
  for (const auto& r : acs) {
    std::array<double, 3> v{r.pct_white, r.pct_black, r.median_income};
    for (std::size_t k = 0; k < 3; ++k) {
      if (!std::isfinite(v[k])) {
        const int n = vintage_n[r.year][k];
        if (n == 0) {
          throw DataError("acs: column " + covariate_names()[3 + k] + " has no values in " +
                          std::to_string(r.year));
        }
        v[k] = vintage_sum[r.year][k] / n;
      }
    }
    if (!by_cbg[r.cbg_id].emplace(r.year, v).second) {
      throw DataError("acs: duplicate row for cbg " + r.cbg_id + " year " + std::to_string(r.year));
    }
  }

  const StudyWindow& window = cubes.window();
  const int first_year = window.start.year();
  const int n_years = window.date_at(window.n_days - 1).year() - first_year + 1;

  std::vector<std::array<double, 3>> demo(static_cast<std::size_t>(cubes.n_boxes()) *
                                          static_cast<std::size_t>(n_years));
  for (std::int32_t b = 0; b < cubes.n_boxes(); ++b) {
    const GeoPoint c = grid.centroid(BoxId{b});
    const CbgGeometry* home = nullptr;
    for (const auto& g : cbgs) {
      if (std::any_of(g.polygons.begin(), g.polygons.end(),
                      [&](const Polygon& p) { return point_in_polygon(c, p); })) {
        home = &g;
        break;
      }
    }
    if (!home) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& g : cbgs) {
        for (const auto& p : g.polygons) {
          const double d = distance_to_polygon_m(c, p);
          if (d < best) {
            best = d;
            home = &g;
          }
        }
      }
      if (!home || best > kMaxCbgDistanceM) {
        throw DataError("box " + std::to_string(b) + " centroid (" + format_double(c.lat) + ", " +
                        format_double(c.lon) + ") has no census block group within 1 km");
      }
    }
    const auto it = by_cbg.find(home->cbg_id);
    if (it == by_cbg.end()) throw DataError("acs: no rows for cbg " + home->cbg_id);
    for (int yi = 0; yi < n_years; ++yi) {
      const int year = first_year + yi;
      // Nearest vintage; ties go to the earlier year.
      const std::array<double, 3>* pick = nullptr;
      int best_gap = std::numeric_limits<int>::max();
      for (const auto& [vy, vals] : it->second) {
        const int gap = std::abs(vy - year);
        if (gap < best_gap) {
          best_gap = gap;
          pick = &vals;
        }
      }
      demo[static_cast<std::size_t>(b) * n_years + yi] = *pick;
    }
  }
  cubes.set_covariates(std::move(daily), first_year, n_years, std::move(demo));
  cubes.standardize(options.observed_only);
}

void write_cube_csv(const CubeTable& cubes, std::ostream& out) {
  out << "box_id,day_index,y,observed,precip,tmax,tmin,pct_white,pct_black,income\n";
  const bool cov = cubes.has_covariates();
  for (std::size_t i = 0; i < cubes.size(); ++i) {
    out << cubes.box_at(i).index << ',' << cubes.day_at(i) << ',' << cubes.y(i) << ','
        << (cubes.observed(i) ? 1 : 0);
    if (cov) {
      for (double v : cubes.x_raw(i)) out << ',' << format_double(v);
    } else {
      out << ",,,,,,";
    }
    out << '\n';
  }
}

CubeTable read_cube_csv(std::istream& in, const std::string& source_name, std::int32_t n_boxes,
                        const StudyWindow& window) {
  CsvReader reader(in, source_name,
                   {"box_id", "day_index", "y", "observed", "precip", "tmax", "tmin", "pct_white",
                    "pct_black", "income"});
  CubeTable cubes(n_boxes, window);
  const int first_year = window.start.year();
  const int n_years = window.date_at(window.n_days - 1).year() - first_year + 1;
  std::vector<std::optional<WeatherRow>> weather(static_cast<std::size_t>(window.n_days));
  std::vector<std::optional<std::array<double, 3>>> demo(static_cast<std::size_t>(n_boxes) *
                                                         static_cast<std::size_t>(n_years));
  std::vector<std::uint8_t> seen(cubes.size(), 0);
  bool any_cov = false, any_missing_cov = false;
  while (reader.next()) {
    const std::string where = source_name + ":" + std::to_string(reader.line_number());
    try {
      const auto box = parse_int(reader.field("box_id"), "box_id");
      const auto day = parse_int(reader.field("day_index"), "day_index");
      if (box < 0 || box >= n_boxes || day < 0 || day >= window.n_days) {
        throw InputError("cube (" + std::to_string(box) + ", " + std::to_string(day) +
                         ") outside the grid/window");
      }
      const std::size_t i =
          cubes.index(BoxId{static_cast<std::int32_t>(box)}, static_cast<std::int32_t>(day));
      if (seen[i]) throw InputError("duplicate cube");
      seen[i] = 1;
      const auto y = parse_int(reader.field("y"), "y");
      if (y < 0) throw InputError("negative count");
      cubes.set_y(i, static_cast<std::int32_t>(y));
      cubes.set_observed(i, parse_int(reader.field("observed"), "observed") != 0);
      if (reader.field("precip").empty()) {
        any_missing_cov = true;
        continue;
      }
      any_cov = true;
      const WeatherRow w{parse_double(reader.field("tmax"), "tmax"),
                         parse_double(reader.field("tmin"), "tmin"),
                         parse_double(reader.field("precip"), "precip")};
      const std::array<double, 3> d{parse_double(reader.field("pct_white"), "pct_white"),
                                    parse_double(reader.field("pct_black"), "pct_black"),
                                    parse_double(reader.field("income"), "income")};
      auto& ws = weather[static_cast<std::size_t>(day)];
      if (!ws) {
        ws = w;
      } else if (ws->tmax_f != w.tmax_f || ws->tmin_f != w.tmin_f || ws->precip_in != w.precip_in) {
        throw DataError("weather differs between boxes on day " + std::to_string(day));
      }
      const int slot = std::clamp(
          window.date_at(static_cast<std::int32_t>(day)).year() - first_year, 0, n_years - 1);
      auto& ds = demo[static_cast<std::size_t>(box) * n_years + slot];
      if (!ds) {
        ds = d;
      } else if (*ds != d) {
        throw DataError("demographics differ within box " + std::to_string(box) + " in one year");
      }
    } catch (const InputError& e) {
      throw InputError(where + ": " + e.what());
    }
  }
  if (std::find(seen.begin(), seen.end(), 0) != seen.end()) {
    throw DataError(source_name + ": cube store is missing cubes");
  }
  if (any_cov && any_missing_cov) throw DataError(source_name + ": covariates partially missing");
  if (any_cov) {
    std::vector<WeatherRow> w(weather.size());
    for (std::size_t d = 0; d < w.size(); ++d) w[d] = *weather[d];
    std::vector<std::array<double, 3>> dm(demo.size());
    for (std::size_t k = 0; k < dm.size(); ++k) {
      if (!demo[k]) {
        // Years not covered by any day of the window never occur.
        dm[k] = demo[k - (k % static_cast<std::size_t>(n_years))].value_or(std::array<double, 3>{});
      } else {
        dm[k] = *demo[k];
      }
    }
    cubes.set_covariates(std::move(w), first_year, n_years, std::move(dm));
  }
  return cubes;
}

}  // namespace tentgp
