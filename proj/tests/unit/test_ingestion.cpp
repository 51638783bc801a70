#include <doctest.h>

#include <algorithm>
#include <random>
#include <sstream>

#include "tentgp/error.hpp"
#include "tentgp/ingestion.hpp"

using namespace tentgp;

namespace {

EventParseResult parse(const std::string& body) {
  std::istringstream in("source,date,lat,lon,label\n" + body);
  return parse_events(in, "events.csv");
}

// Point `m` meters north of p.
GeoPoint north(GeoPoint p, double m) { return {p.lat + m / (kEarthRadiusM * 3.14159265358979323846 / 180.0), p.lon}; }

TentEvent pos(Date d, GeoPoint p) { return {EventSource::call_report, d, p, EventLabel::positive}; }

}  // namespace

TEST_CASE("parse_events") {
  SUBCASE("field mapping") {
    const auto r = parse("call_report,2020-04-01,37.78,-122.42,positive\n");
    REQUIRE(r.events.size() == 1);
    CHECK(r.rejects.empty());
    const TentEvent& e = r.events[0];
    CHECK(e.source == EventSource::call_report);
    CHECK(e.day == make_date(2020, 4, 1));
    CHECK(e.location == GeoPoint{37.78, -122.42});
    CHECK(e.label == EventLabel::positive);
  }
  SUBCASE("latitude out of range") {
    const auto r = parse("call_report,2020-04-01,91.0,-122.42,positive\n");
    CHECK(r.events.empty());
    REQUIRE(r.rejects.size() == 1);
    CHECK(r.rejects[0].reason == "latitude out of range");
    CHECK(r.rejects[0].line == 2);
  }
  SUBCASE("malformed rows are reported") {
    const auto r = parse(
        "image_detection,2020-04-01,37.78,-122.42,negative\n"
        "call_report,2020-13-01,37.78,-122.42,positive\n"
        "satellite,2020-04-01,37.78,-122.42,positive\n"
        "call_report,2020-04-01,37.78,-122.42,maybe\n");
    CHECK(r.events.size() == 1);
    CHECK(r.events[0].source == EventSource::image_detection);
    CHECK(r.events[0].label == EventLabel::negative);
    CHECK(r.rejects.size() == 3);
  }
  SUBCASE("empty file") {
    const auto r = parse("");
    CHECK(r.events.empty());
    CHECK(r.rejects.empty());
  }
  SUBCASE("missing column") {
    std::istringstream in("source,date,lat,label\n");
    CHECK_THROWS_AS(parse_events(in, "events.csv"), ConfigError);
  }
}

TEST_CASE("dedup") {
  const GeoPoint p{37.78, -122.42};
  const Date d = make_date(2020, 4, 1);
  CHECK(dedup({pos(d, p), pos(d, north(p, 5))}).size() == 1);
  CHECK(dedup({pos(d, p), pos(d, north(p, 12))}).size() == 2);
  CHECK(dedup({pos(d, p), pos(d + 1, north(p, 5))}).size() == 2);
  // Negatives never merge.
  TentEvent neg = pos(d, p);
  neg.label = EventLabel::negative;
  CHECK(dedup({pos(d, p), neg, neg}).size() == 3);
}

TEST_CASE("dedup is idempotent and order invariant") {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u(0.0, 60.0);
  std::vector<TentEvent> ev;
  const GeoPoint p{37.78, -122.42};
  for (int i = 0; i < 400; ++i) {
    TentEvent e = pos(make_date(2020, 1, 1) + static_cast<int>(u(rng)) % 3, north(p, u(rng)));
    e.location.lon += u(rng) * 1e-6;
    ev.push_back(e);
  }
  const auto once = dedup(ev);
  CHECK(dedup(once) == once);
  std::shuffle(ev.begin(), ev.end(), rng);
  CHECK(dedup(ev) == once);
  // No two kept same-day positives lie within the diameter.
  for (std::size_t i = 0; i < once.size(); ++i) {
    for (std::size_t j = i + 1; j < once.size(); ++j) {
      if (once[i].day == once[j].day) CHECK(haversine_m(once[i].location, once[j].location) >= kDedupDiameterM);
    }
  }
}

TEST_CASE("build_cubes") {
  const GridSpec g({37.70, -122.50}, 0.1, 37.70, 2, 2, std::vector<bool>(4, true));
  const StudyWindow w{make_date(2020, 1, 1), 5};
  SUBCASE("no events") {
    const CubeTable c = build_cubes({}, g, w);
    CHECK(c.size() == 20);
    for (std::size_t i = 0; i < c.size(); ++i) CHECK(c.y(i) == 0);
  }
  SUBCASE("counts, observation flags and spillover") {
    const GeoPoint c1 = g.centroid(BoxId{1});
    std::vector<TentEvent> ev{pos(w.start + 2, c1), pos(w.start + 2, north(c1, 15)), pos(w.start + 2, north(c1, -15))};
    TentEvent neg = pos(w.start + 3, g.centroid(BoxId{2}));
    neg.label = EventLabel::negative;
    ev.push_back(neg);
    ev.push_back(pos(w.start + 9, c1));             // outside the window
    ev.push_back(pos(w.start, {37.0, -122.50}));  // outside the grid
    BuildReport rep;
    const CubeTable c = build_cubes(ev, g, w, &rep);
    CHECK(c.y(c.index(BoxId{1}, 2)) == 3);
    CHECK(c.observed(c.index(BoxId{1}, 2)));
    CHECK(c.y(c.index(BoxId{2}, 3)) == 0);
    CHECK(c.observed(c.index(BoxId{2}, 3)));
    CHECK_FALSE(c.observed(c.index(BoxId{0}, 0)));
    CHECK(c.total_count() == 3);
    CHECK(rep.positives_binned == 3);
    CHECK(rep.negatives_binned == 1);
    CHECK(rep.spillover_outside_window == 1);
    CHECK(rep.spillover_outside_grid == 1);
  }
  SUBCASE("count ceiling") {
    std::vector<TentEvent> ev(4, pos(w.start, g.centroid(BoxId{0})));
    for (std::size_t i = 0; i < ev.size(); ++i) ev[i].location = north(ev[i].location, 12.0 * static_cast<double>(i));
    BuildReport rep;
    const CubeTable c = build_cubes(ev, g, w, &rep, BuildCubesOptions{3});
    CHECK(c.y(c.index(BoxId{0}, 0)) == 0);
    REQUIRE(rep.ceiling_rejects.size() == 1);
    CHECK(rep.ceiling_rejects[0].second == 4);
  }
}

TEST_CASE("fill_weather interpolates short gaps") {
  const StudyWindow w{make_date(2020, 1, 1), 3};
  const std::vector<WeatherRecord> recs{{w.start, {60, 40, 0.0}}, {w.start + 2, {70, 50, 1.0}}};
  const auto rows = fill_weather(recs, w);
  REQUIRE(rows.size() == 3);
  CHECK(rows[1].tmax_f == doctest::Approx(65));
  CHECK(rows[1].tmin_f == doctest::Approx(45));
  CHECK(rows[1].precip_in == doctest::Approx(0.5));
  const std::vector<WeatherRecord> gappy{{w.start + (-5), {60, 40, 0}}, {w.start + 10, {60, 40, 0}}};
  CHECK_THROWS(fill_weather(gappy, w));
}

TEST_CASE("covariate join uses the containing CBG and the nearest ACS vintage") {
  const GridSpec g({37.70, -122.50}, 0.1, 37.70, 1, 2, {true, true});
  const StudyWindow w{make_date(2016, 12, 31), 2};  // spans two years
  CubeTable c = build_cubes({}, g, w);
  const auto [sw0, ne0] = g.cell_bounds(BoxId{0});
  const auto [sw1, ne1] = g.cell_bounds(BoxId{1});
  auto square = [](GeoPoint a, GeoPoint b) { return PolygonSet{Polygon{{a, {a.lat, b.lon}, b, {b.lat, a.lon}}, {}}}; };
  const std::vector<CbgGeometry> cbgs{{"A", square(sw0, ne0)}, {"B", square(sw1, ne1)}};
  const std::vector<AcsRecord> acs{{"A", 2017, 50000, 0.5, 0.1}, {"B", 2017, 90000, 0.7, 0.2},
                                   {"B", 2018, 99000, 0.6, 0.3}};
  const std::vector<WeatherRecord> wx{{w.start, {60, 45, 0.0}}, {w.start + 1, {58, 44, 0.2}}};
  join_covariates(c, g, wx, acs, cbgs);
  // 2016 falls back to the earliest vintage (2017).
  const Covariates b0 = c.x_raw(c.index(BoxId{1}, 0));
  CHECK(b0[kIncome] == 90000);
  CHECK(b0[kPctWhite] == doctest::Approx(0.7));
  CHECK(b0[kTmax] == 60);
  const Covariates a1 = c.x_raw(c.index(BoxId{0}, 1));
  CHECK(a1[kIncome] == 50000);
  CHECK(a1[kPrecip] == doctest::Approx(0.2));
  // Standardized columns have zero mean.
  double sum = 0.0;
  for (std::size_t i = 0; i < c.size(); ++i) sum += c.x(i)[kTmax];
  CHECK(sum == doctest::Approx(0.0).epsilon(1e-12).scale(1));
}

TEST_CASE("cube CSV round trip") {
  const GridSpec g({37.70, -122.50}, 0.1, 37.70, 1, 2, {true, true});
  const StudyWindow w{make_date(2020, 1, 1), 3};
  CubeTable c = build_cubes({pos(w.start + 1, g.centroid(BoxId{1}))}, g, w);
  const std::vector<CbgGeometry> cbgs{
      {"A", PolygonSet{Polygon{{{37.6, -122.6}, {37.6, -122.4}, {37.8, -122.4}, {37.8, -122.6}}, {}}}}};
  join_covariates(c, g, {{w.start, {60, 45, 0}}, {w.start + 1, {61, 46, 0.1}}, {w.start + 2, {59, 44, 0}}},
                  {{"A", 2020, 70000, 0.4, 0.1}}, cbgs);
  std::stringstream s;
  write_cube_csv(c, s);
  CubeTable back = read_cube_csv(s, "cubes.csv", c.n_boxes(), w);
  back.set_standardization(c.standardization());
  REQUIRE(back.size() == c.size());
  for (std::size_t i = 0; i < c.size(); ++i) {
    CHECK(back.y(i) == c.y(i));
    CHECK(back.observed(i) == c.observed(i));
    for (std::size_t k = 0; k < kNumCovariates; ++k) CHECK(back.x(i)[k] == doctest::Approx(c.x(i)[k]));
  }
}
