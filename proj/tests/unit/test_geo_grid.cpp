#include <doctest.h>

#include <cmath>
#include <numbers>

#include "tentgp/geo_grid.hpp"

using namespace tentgp;

namespace {

// Central angle by the spherical law of cosines in vector form, a formula
// independent of the haversine implementation.
double chord_angle_distance(GeoPoint a, GeoPoint b) {
  const double d = std::numbers::pi / 180.0;
  const double xa = std::cos(a.lat * d) * std::cos(a.lon * d), ya = std::cos(a.lat * d) * std::sin(a.lon * d),
               za = std::sin(a.lat * d);
  const double xb = std::cos(b.lat * d) * std::cos(b.lon * d), yb = std::cos(b.lat * d) * std::sin(b.lon * d),
               zb = std::sin(b.lat * d);
  const double cx = ya * zb - za * yb, cy = za * xb - xa * zb, cz = xa * yb - ya * xb;
  return kEarthRadiusM * std::atan2(std::sqrt(cx * cx + cy * cy + cz * cz), xa * xb + ya * yb + za * zb);
}

GridSpec grid3(GeoPoint origin) { return GridSpec(origin, 0.1, origin.lat, 3, 3, std::vector<bool>(9, true)); }

Polygon rect(double s, double w, double n, double e) { return Polygon{{{s, w}, {s, e}, {n, e}, {n, w}}, {}}; }

}  // namespace

TEST_CASE("haversine") {
  const GeoPoint a{37.7793, -122.4193};
  CHECK(haversine_m(a, a) == 0.0);
  CHECK(haversine_m({0, 0}, {0, 1}) == doctest::Approx(2 * std::numbers::pi * kEarthRadiusM / 360).epsilon(1e-12));
  CHECK(std::abs(haversine_m({0, 0}, {0, 1}) - 111195.0) <= 1.0);
  const GeoPoint b{37.7955, -122.3937};
  const double oracle = chord_angle_distance(a, b);
  CHECK(std::abs(haversine_m(a, b) - oracle) <= 1e-3 * oracle);
  CHECK(haversine_m(a, b) == doctest::Approx(haversine_m(b, a)));
}

TEST_CASE("assign_box uses half-open cells") {
  const GeoPoint o{37.70, -122.50};
  const GridSpec g = grid3(o);
  REQUIRE(assign_box(o, g).has_value());
  CHECK(g.cell_of(*assign_box(o, g)) == CellRC{0, 0});
  const GeoPoint inside{o.lat + 0.05 * g.deg_lat_per_mile(), o.lon + 0.05 * g.deg_lon_per_mile()};
  CHECK(g.cell_of(*assign_box(inside, g)) == CellRC{0, 0});
  const GeoPoint edge{inside.lat, o.lon + g.cell_deg_lon()};
  CHECK(g.cell_of(*assign_box(edge, g)) == CellRC{0, 1});
  CHECK_FALSE(assign_box({o.lat - 0.001, o.lon}, g).has_value());
  CHECK_FALSE(assign_box({o.lat, o.lon + 3.5 * g.cell_deg_lon()}, g).has_value());
}

TEST_CASE("inactive cells get no box") {
  std::vector<bool> mask(9, true);
  mask[4] = false;  // centre cell
  const GridSpec g({37.7, -122.5}, 0.1, 37.7, 3, 3, mask);
  CHECK(g.active_count() == 8);
  const auto c = g.centroid(BoxId{0});
  const GeoPoint centre{c.lat + g.cell_deg_lat(), c.lon + g.cell_deg_lon()};
  CHECK_FALSE(assign_box(centre, g).has_value());
  for (std::int32_t i = 0; i < g.active_count(); ++i) {
    CHECK(assign_box(g.centroid(BoxId{i}), g) == BoxId{i});
  }
}

TEST_CASE("local projection round trip") {
  const GridSpec g = grid3({37.7, -122.5});
  const GeoPoint p{37.7123, -122.4871};
  const GeoPoint q = g.from_local(g.to_local(p));
  CHECK(q.lat == doctest::Approx(p.lat).epsilon(1e-12));
  CHECK(q.lon == doctest::Approx(p.lon).epsilon(1e-12));
  // One mile north is one mile of great-circle distance to within the
  // projection error.
  const GeoPoint n = g.from_local({0.0, 1.0});
  CHECK(haversine_m(g.origin(), n) == doctest::Approx(kMetersPerMile).epsilon(1e-3));
}

TEST_CASE("grid from boundary") {
  const double s = 37.70, w = -122.50;
  const double dlat = GridSpec({s, w}, 0.1, s, 1, 1, {true}).deg_lat_per_mile();
  const double mid = s + 0.5 * dlat;
  const double dlon = GridSpec({s, w}, 0.1, mid, 1, 1, {true}).deg_lon_per_mile();

  SUBCASE("one-mile square gives 10 x 10 cells") {
    const GridSpec g = grid_from_boundary({rect(s, w, s + dlat, w + dlon)});
    CHECK(g.n_rows() == 10);
    CHECK(g.n_cols() == 10);
    CHECK(g.active_count() == 100);
  }
  SUBCASE("boundary inside one cell") {
    const GridSpec g = grid_from_boundary({rect(s, w, s + 0.03 * dlat, w + 0.03 * dlon)});
    CHECK(g.active_count() == 1);
  }
  SUBCASE("L shape leaves the notch inactive") {
    // Extents and the notch corner sit clear of cell edges.
    const double a = 0.09, b = 0.195;
    const Polygon l{{{s, w}, {s, w + b * dlon}, {s + a * dlat, w + b * dlon}, {s + a * dlat, w + a * dlon},
                     {s + b * dlat, w + a * dlon}, {s + b * dlat, w}},
                    {}};
    const GridSpec g = grid_from_boundary({l});
    CHECK(g.n_rows() == 2);
    CHECK(g.n_cols() == 2);
    CHECK(g.active_count() == 3);
  }
}

TEST_CASE("polygon helpers") {
  const Polygon sq = rect(0, 0, 1, 1);
  CHECK(polygon_area_deg2(sq) == doctest::Approx(1.0));
  Polygon holed = rect(0, 0, 4, 4);
  holed.holes.push_back(rect(1, 1, 2, 2).outer);
  CHECK(polygon_area_deg2(holed) == doctest::Approx(15.0));
  CHECK(point_in_polygon({0.5, 0.5}, sq));
  CHECK_FALSE(point_in_polygon({1.5, 0.5}, sq));
  CHECK_FALSE(point_in_polygon({1.5, 1.5}, holed));
  CHECK(distance_to_polygon_m({0.5, 0.5}, sq) == 0.0);
  CHECK(distance_to_polygon_m({0.5, 2.0}, sq) == doctest::Approx(haversine_m({0.5, 1.0}, {0.5, 2.0})).epsilon(1e-3));
}

TEST_CASE("boundary GeoJSON") {
  const auto ps = parse_boundary_geojson(
      R"({"type":"FeatureCollection","features":[{"type":"Feature","properties":{},"geometry":)"
      R"({"type":"MultiPolygon","coordinates":[[[[-122.5,37.7],[-122.4,37.7],[-122.4,37.8],[-122.5,37.7]]],)"
      R"([[[-122.3,37.7],[-122.2,37.7],[-122.2,37.8],[-122.3,37.7]]]]}}]})");
  REQUIRE(ps.size() == 2);
  CHECK(ps[0].outer[1].lon == -122.4);
  CHECK(ps[0].outer[1].lat == 37.7);
  CHECK_THROWS(parse_boundary_geojson(R"({"type":"Point","coordinates":[0,0]})"));
}
