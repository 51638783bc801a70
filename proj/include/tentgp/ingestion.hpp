#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "tentgp/geo_grid.hpp"
#include "tentgp/table_io.hpp"

namespace tentgp {

enum class EventSource { call_report, image_detection };
enum class EventLabel { positive, negative };

std::string to_string(EventSource s);
std::string to_string(EventLabel l);

struct TentEvent {
  EventSource source = EventSource::call_report;
  Date day{};
  GeoPoint location{};
  EventLabel label = EventLabel::positive;
  bool operator==(const TentEvent&) const = default;
};

// Inclusive range of study days [start, start + n_days).
struct StudyWindow {
  Date start{};
  std::int32_t n_days = 0;

  bool contains(Date d) const { return d >= start && d - start < n_days; }
  std::int32_t index_of(Date d) const { return d - start; }
  Date date_at(std::int32_t day_index) const { return start + day_index; }
};

struct RejectRecord {
  std::size_t line = 0;
  std::string reason;
  std::string text;
};

struct EventParseResult {
  std::vector<TentEvent> events;
  std::vector<RejectRecord> rejects;
};

// events.csv: source,date,lat,lon,label. Malformed rows are reported, not
// dropped silently; a missing column is a ConfigError.
EventParseResult parse_events(const std::string& path,
                              const std::optional<StudyWindow>& window = std::nullopt);
EventParseResult parse_events(std::istream& in, const std::string& source_name,
                              const std::optional<StudyWindow>& window = std::nullopt);

inline constexpr double kDedupDiameterM = 10.0;

// Same-day positives within `diameter_m` of an already kept positive are
// dropped, scanning in (day, lat, lon, source) order. Negatives pass through.
std::vector<TentEvent> dedup(std::vector<TentEvent> events, double diameter_m = kDedupDiameterM);

// ---------------------------------------------------------------------------
// Covariates

inline constexpr std::size_t kNumCovariates = 6;
using Covariates = std::array<double, kNumCovariates>;

// Column order of every covariate vector.
enum CovariateIndex : std::size_t {
  kPrecip = 0,
  kTmax = 1,
  kTmin = 2,
  kPctWhite = 3,
  kPctBlack = 4,
  kIncome = 5,
};

const std::array<std::string, kNumCovariates>& covariate_names();

struct Standardization {
  Covariates mean{};
  Covariates scale{};  // sample standard deviation, 1 for constant columns

  Covariates apply(const Covariates& raw) const;
  Covariates invert(const Covariates& z) const;
};

struct WeatherRow {
  double tmax_f = 0.0;
  double tmin_f = 0.0;
  double precip_in = 0.0;
};

struct WeatherRecord {
  Date date{};
  WeatherRow values{};
};

std::vector<WeatherRecord> parse_weather(const std::string& path);
std::vector<WeatherRecord> parse_weather(std::istream& in, const std::string& source_name);

struct AcsRecord {
  std::string cbg_id;
  int year = 0;
  // NaN marks a missing value, imputed during the join.
  double median_income = 0.0;
  double pct_white = 0.0;
  double pct_black = 0.0;
};

std::vector<AcsRecord> parse_acs(const std::string& path);
std::vector<AcsRecord> parse_acs(std::istream& in, const std::string& source_name);

struct CbgGeometry {
  std::string cbg_id;
  PolygonSet polygons;
};

std::vector<CbgGeometry> parse_cbg_geojson_text(const std::string& text);
std::vector<CbgGeometry> parse_cbg_geojson(const std::string& path);

struct GroundTruthCount {
  Date date{};
  std::int64_t count = 0;
};

// ground_truth.csv: date,count. Dates must be unique; output is sorted.
std::vector<GroundTruthCount> parse_ground_truth(const std::string& path);
std::vector<GroundTruthCount> parse_ground_truth(std::istream& in, const std::string& source_name);

// ---------------------------------------------------------------------------
// Cubes

struct SpaceTimeCube {
  BoxId box{};
  std::int32_t day_index = 0;
  std::int32_t y = 0;
  bool observed = false;
  Covariates x_raw{};
  Covariates x{};  // standardized
};

// All (box, day) cells of a grid over a study window, stored column-wise with
// cube index = box * n_days + day. Covariates are held in their natural
// factored form: weather per day, demographics per (box, calendar year).
class CubeTable {
 public:
  CubeTable() = default;
  CubeTable(std::int32_t n_boxes, StudyWindow window);

  std::int32_t n_boxes() const { return n_boxes_; }
  std::int32_t n_days() const { return window_.n_days; }
  const StudyWindow& window() const { return window_; }
  std::size_t size() const { return y_.size(); }

  std::size_t index(BoxId box, std::int32_t day) const {
    return static_cast<std::size_t>(box.index) * static_cast<std::size_t>(window_.n_days) +
           static_cast<std::size_t>(day);
  }
  BoxId box_at(std::size_t i) const {
    return BoxId{static_cast<std::int32_t>(i / static_cast<std::size_t>(window_.n_days))};
  }
  std::int32_t day_at(std::size_t i) const {
    return static_cast<std::int32_t>(i % static_cast<std::size_t>(window_.n_days));
  }

  std::int32_t y(std::size_t i) const { return y_[i]; }
  bool observed(std::size_t i) const { return observed_[i] != 0; }
  void set_y(std::size_t i, std::int32_t v) { y_[i] = v; }
  void set_observed(std::size_t i, bool v) { observed_[i] = v ? 1 : 0; }
  void add_count(std::size_t i, std::int32_t n) { y_[i] += n; }

  bool has_covariates() const { return !weather_.empty(); }
  // Installs the factored covariates; `demographics` is indexed
  // [box * n_years + (year - first_year)].
  void set_covariates(std::vector<WeatherRow> weather, int first_year, int n_years,
                      std::vector<std::array<double, 3>> demographics);
  const std::vector<WeatherRow>& weather() const { return weather_; }
  const std::vector<std::array<double, 3>>& demographics() const { return demographics_; }
  int first_year() const { return first_year_; }
  int n_years() const { return n_years_; }

  Covariates x_raw(std::size_t i) const;
  Covariates x(std::size_t i) const { return standardization_.apply(x_raw(i)); }
  // Raw covariates for an arbitrary day index (forecast days extend the
  // last known weather and demographics).
  Covariates x_raw_at(BoxId box, std::int32_t day) const;

  const Standardization& standardization() const { return standardization_; }
  void set_standardization(const Standardization& s) { standardization_ = s; }
  // Recomputes standardization over all cubes or over observed cubes only.
  void standardize(bool observed_only);

  SpaceTimeCube cube(std::size_t i) const;
  std::int64_t total_count() const;

  bool operator==(const CubeTable&) const;

 private:
  std::int32_t n_boxes_ = 0;
  StudyWindow window_{};
  std::vector<std::int32_t> y_;
  std::vector<std::uint8_t> observed_;
  std::vector<WeatherRow> weather_;
  int first_year_ = 0;
  int n_years_ = 0;
  std::vector<std::array<double, 3>> demographics_;
  std::vector<int> year_slot_;  // per day index
  Standardization standardization_{};
};

struct BuildCubesOptions {
  std::int32_t count_ceiling = 50;
};

struct BuildReport {
  std::size_t positives_binned = 0;
  std::size_t negatives_binned = 0;
  std::size_t spillover_outside_grid = 0;
  std::size_t spillover_outside_window = 0;
  // Cubes whose count exceeded the ceiling; their events are excluded.
  std::vector<std::pair<std::size_t, std::int32_t>> ceiling_rejects;
};

// Bins deduplicated events into active_count x n_days cubes.
CubeTable build_cubes(const std::vector<TentEvent>& events, const GridSpec& grid,
                      const StudyWindow& window, BuildReport* report = nullptr,
                      const BuildCubesOptions& options = {});

inline constexpr int kMaxWeatherGapDays = 3;
inline constexpr double kMaxCbgDistanceM = 1000.0;

struct JoinOptions {
  bool observed_only = false;  // standardize over observed cubes only
};

// Broadcasts daily weather city-wide, attaches per-box demographics from the
// containing (or nearest, within 1 km) CBG using the nearest ACS vintage, and
// standardizes the result.
void join_covariates(CubeTable& cubes, const GridSpec& grid,
                     const std::vector<WeatherRecord>& weather, const std::vector<AcsRecord>& acs,
                     const std::vector<CbgGeometry>& cbgs, const JoinOptions& options = {});

// Daily weather over the window with short gaps linearly interpolated.
std::vector<WeatherRow> fill_weather(const std::vector<WeatherRecord>& weather,
                                     const StudyWindow& window);

// Cube store: CSV with header
// box_id,day_index,y,observed,precip,tmax,tmin,pct_white,pct_black,income
void write_cube_csv(const CubeTable& cubes, std::ostream& out);
// Rebuilds a table from a CSV dump; covariates must have the factored shape
// produced by join_covariates.
CubeTable read_cube_csv(std::istream& in, const std::string& source_name, std::int32_t n_boxes,
                        const StudyWindow& window);

}  // namespace tentgp
