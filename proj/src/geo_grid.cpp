#include "tentgp/geo_grid.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <sstream>

#include <json.hpp>

#include "tentgp/error.hpp"

namespace tentgp {

namespace {

constexpr double kDegToRad = std::numbers::pi / 180.0;
// Offsets within this fraction of a cell are snapped onto the cell edge.
constexpr double kEdgeSnap = 1e-9;
// Cells whose overlap with the boundary is below this fraction of the cell
// area are treated as touching only along an edge.
constexpr double kMinOverlapFraction = 1e-9;

// Shoelace sums run on coordinates relative to the first vertex; raw
// longitudes near +-120 cancel badly.
double ring_signed_area(const Ring& ring) {
  if (ring.empty()) return 0.0;
  const GeoPoint o = ring.front();
  double a = 0.0;
  const std::size_t n = ring.size();
  for (std::size_t i = 0; i < n; ++i) {
    const auto& p = ring[i];
    const auto& q = ring[(i + 1) % n];
    a += (p.lon - o.lon) * (q.lat - o.lat) - (q.lon - o.lon) * (p.lat - o.lat);
  }
  return 0.5 * a;
}

// Sutherland-Hodgman clip of a ring against an axis-aligned rectangle.
Ring clip_ring(const Ring& ring, double west, double south, double east, double north) {
  Ring out = ring;
  auto clip_edge = [&out](auto inside, auto intersect) {
    if (out.empty()) return;
    Ring in = std::move(out);
    out.clear();
    for (std::size_t i = 0; i < in.size(); ++i) {
      const GeoPoint& cur = in[i];
      const GeoPoint& prev = in[(i + in.size() - 1) % in.size()];
      const bool cur_in = inside(cur);
      const bool prev_in = inside(prev);
      if (cur_in) {
        if (!prev_in) out.push_back(intersect(prev, cur));
        out.push_back(cur);
      } else if (prev_in) {
        out.push_back(intersect(prev, cur));
      }
    }
  };
  auto at_lon = [](const GeoPoint& a, const GeoPoint& b, double lon) {
    const double t = (lon - a.lon) / (b.lon - a.lon);
    return GeoPoint{a.lat + t * (b.lat - a.lat), lon};
  };
  auto at_lat = [](const GeoPoint& a, const GeoPoint& b, double lat) {
    const double t = (lat - a.lat) / (b.lat - a.lat);
    return GeoPoint{lat, a.lon + t * (b.lon - a.lon)};
  };
  clip_edge([&](const GeoPoint& p) { return p.lon >= west; },
            [&](const GeoPoint& a, const GeoPoint& b) { return at_lon(a, b, west); });
  clip_edge([&](const GeoPoint& p) { return p.lon <= east; },
            [&](const GeoPoint& a, const GeoPoint& b) { return at_lon(a, b, east); });
  clip_edge([&](const GeoPoint& p) { return p.lat >= south; },
            [&](const GeoPoint& a, const GeoPoint& b) { return at_lat(a, b, south); });
  clip_edge([&](const GeoPoint& p) { return p.lat <= north; },
            [&](const GeoPoint& a, const GeoPoint& b) { return at_lat(a, b, north); });
  return out;
}

double overlap_area(const PolygonSet& polys, double west, double south, double east,
                    double north) {
  double area = 0.0;
  for (const auto& poly : polys) {
    area += std::abs(ring_signed_area(clip_ring(poly.outer, west, south, east, north)));
    for (const auto& hole : poly.holes) {
      area -= std::abs(ring_signed_area(clip_ring(hole, west, south, east, north)));
    }
  }
  return area;
}

// Area-weighted latitude moment of a ring: integral of lat over its area.
// First moment of the ring's area about the parallel lat0, orientation-free.
double ring_lat_moment(const Ring& ring, double lat0) {
  if (ring.empty()) return 0.0;
  const double lon0 = ring.front().lon;
  double m = 0.0;
  const std::size_t n = ring.size();
  for (std::size_t i = 0; i < n; ++i) {
    const double px = ring[i].lon - lon0, py = ring[i].lat - lat0;
    const double qx = ring[(i + 1) % n].lon - lon0, qy = ring[(i + 1) % n].lat - lat0;
    m += (py + qy) * (px * qy - qx * py);
  }
  return ring_signed_area(ring) < 0.0 ? -m / 6.0 : m / 6.0;
}

bool ring_contains(const Ring& ring, const GeoPoint& p) {
  bool inside = false;
  const std::size_t n = ring.size();
  for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
    const auto& a = ring[i];
    const auto& b = ring[j];
    if ((a.lat > p.lat) != (b.lat > p.lat)) {
      const double lon_cross = a.lon + (p.lat - a.lat) * (b.lon - a.lon) / (b.lat - a.lat);
      if (p.lon < lon_cross) inside = !inside;
    }
  }
  return inside;
}

double snap_floor(double q) {
  const double r = std::round(q);
  if (std::abs(q - r) < kEdgeSnap) return r;
  return std::floor(q);
}

Ring parse_ring(const nlohmann::json& coords) {
  Ring ring;
  for (const auto& c : coords) {
    if (!c.is_array() || c.size() < 2) throw InputError("GeoJSON: malformed position");
    GeoPoint p{c[1].get<double>(), c[0].get<double>()};
    p.validate();
    ring.push_back(p);
  }
  if (ring.size() >= 2 && ring.front() == ring.back()) ring.pop_back();
  return ring;
}

Polygon parse_polygon(const nlohmann::json& coords) {
  if (!coords.is_array() || coords.empty()) throw InputError("GeoJSON: empty polygon");
  Polygon poly;
  poly.outer = parse_ring(coords[0]);
  for (std::size_t i = 1; i < coords.size(); ++i) poly.holes.push_back(parse_ring(coords[i]));
  return poly;
}

void collect_polygons(const nlohmann::json& node, PolygonSet& out) {
  const std::string type = node.value("type", "");
  if (type == "FeatureCollection") {
    for (const auto& f : node.at("features")) collect_polygons(f, out);
  } else if (type == "Feature") {
    if (!node.contains("geometry") || node["geometry"].is_null()) return;
    collect_polygons(node["geometry"], out);
  } else if (type == "Polygon") {
    out.push_back(parse_polygon(node.at("coordinates")));
  } else if (type == "MultiPolygon") {
    for (const auto& p : node.at("coordinates")) out.push_back(parse_polygon(p));
  } else {
    throw InputError("GeoJSON: unsupported geometry type '" + type + "'");
  }
}

}  // namespace

void GeoPoint::validate() const {
  if (!std::isfinite(lat) || !std::isfinite(lon)) {
    throw InputError("coordinate is not finite");
  }
  if (lat < -90.0 || lat > 90.0) throw InputError("latitude out of range");
  if (lon < -180.0 || lon > 180.0) throw InputError("longitude out of range");
}

double haversine_m(const GeoPoint& a, const GeoPoint& b) {
  a.validate();
  b.validate();
  const double phi1 = a.lat * kDegToRad;
  const double phi2 = b.lat * kDegToRad;
  const double dphi = (b.lat - a.lat) * kDegToRad;
  const double dlam = (b.lon - a.lon) * kDegToRad;
  const double s1 = std::sin(dphi / 2.0);
  const double s2 = std::sin(dlam / 2.0);
  const double h = s1 * s1 + std::cos(phi1) * std::cos(phi2) * s2 * s2;
  return 2.0 * kEarthRadiusM * std::asin(std::sqrt(std::min(1.0, h)));
}

GridSpec::GridSpec(GeoPoint origin, double cell_miles, double ref_lat, std::int32_t n_rows,
                   std::int32_t n_cols, std::vector<bool> active_mask)
    : origin_(origin),
      cell_miles_(cell_miles),
      ref_lat_(ref_lat),
      n_rows_(n_rows),
      n_cols_(n_cols),
      active_mask_(std::move(active_mask)) {
  origin_.validate();
  if (!(cell_miles_ > 0.0) || !std::isfinite(cell_miles_)) {
    throw InputError("cell_miles must be positive");
  }
  if (n_rows_ <= 0 || n_cols_ <= 0) throw InputError("grid must have at least one cell");
  if (active_mask_.size() != static_cast<std::size_t>(n_rows_) * n_cols_) {
    throw InputError("active mask size does not match grid dimensions");
  }
  cell_to_box_.assign(active_mask_.size(), -1);
  for (std::int32_t r = 0; r < n_rows_; ++r) {
    for (std::int32_t c = 0; c < n_cols_; ++c) {
      const std::size_t flat = static_cast<std::size_t>(r) * n_cols_ + c;
      if (active_mask_[flat]) {
        cell_to_box_[flat] = static_cast<std::int32_t>(active_cells_.size());
        active_cells_.push_back({r, c});
      }
    }
  }
}

double GridSpec::deg_lat_per_mile() const {
  return kMetersPerMile / (kEarthRadiusM * kDegToRad);
}

double GridSpec::deg_lon_per_mile() const {
  return deg_lat_per_mile() / std::cos(ref_lat_ * kDegToRad);
}

std::optional<BoxId> GridSpec::box_of(CellRC rc) const {
  if (rc.row < 0 || rc.col < 0 || rc.row >= n_rows_ || rc.col >= n_cols_) return std::nullopt;
  const std::int32_t id = cell_to_box_[static_cast<std::size_t>(rc.row) * n_cols_ + rc.col];
  if (id < 0) return std::nullopt;
  return BoxId{id};
}

LocalXY GridSpec::to_local(const GeoPoint& p) const {
  return {(p.lon - origin_.lon) / deg_lon_per_mile(), (p.lat - origin_.lat) / deg_lat_per_mile()};
}

GeoPoint GridSpec::from_local(const LocalXY& xy) const {
  return {origin_.lat + xy.y * deg_lat_per_mile(), origin_.lon + xy.x * deg_lon_per_mile()};
}

LocalXY GridSpec::centroid_local(BoxId id) const {
  const CellRC rc = cell_of(id);
  return {(rc.col + 0.5) * cell_miles_, (rc.row + 0.5) * cell_miles_};
}

GeoPoint GridSpec::centroid(BoxId id) const {
  const CellRC rc = cell_of(id);
  return {origin_.lat + (rc.row + 0.5) * cell_deg_lat(),
          origin_.lon + (rc.col + 0.5) * cell_deg_lon()};
}

std::pair<GeoPoint, GeoPoint> GridSpec::cell_bounds(BoxId id) const {
  const CellRC rc = cell_of(id);
  const GeoPoint sw{origin_.lat + rc.row * cell_deg_lat(), origin_.lon + rc.col * cell_deg_lon()};
  const GeoPoint ne{origin_.lat + (rc.row + 1) * cell_deg_lat(),
                    origin_.lon + (rc.col + 1) * cell_deg_lon()};
  return {sw, ne};
}

std::optional<BoxId> assign_box(const GeoPoint& p, const GridSpec& grid) {
  p.validate();
  const double qc = (p.lon - grid.origin().lon) / grid.cell_deg_lon();
  const double qr = (p.lat - grid.origin().lat) / grid.cell_deg_lat();
  const double col = snap_floor(qc);
  const double row = snap_floor(qr);
  if (row < 0.0 || col < 0.0 || row >= grid.n_rows() || col >= grid.n_cols()) return std::nullopt;
  return grid.box_of({static_cast<std::int32_t>(row), static_cast<std::int32_t>(col)});
}

double polygon_area_deg2(const Polygon& poly) {
  double a = std::abs(ring_signed_area(poly.outer));
  for (const auto& h : poly.holes) a -= std::abs(ring_signed_area(h));
  return a;
}

bool point_in_polygon(const GeoPoint& p, const Polygon& poly) {
  if (poly.outer.size() < 3 || !ring_contains(poly.outer, p)) return false;
  return std::none_of(poly.holes.begin(), poly.holes.end(),
                      [&](const Ring& h) { return h.size() >= 3 && ring_contains(h, p); });
}

double distance_to_polygon_m(const GeoPoint& p, const Polygon& poly) {
  if (point_in_polygon(p, poly)) return 0.0;
  // Local equirectangular frame centred on p.
  const double m_per_deg_lat = kEarthRadiusM * kDegToRad;
  const double m_per_deg_lon = m_per_deg_lat * std::cos(p.lat * kDegToRad);
  double best = std::numeric_limits<double>::infinity();
  auto scan = [&](const Ring& ring) {
    const std::size_t n = ring.size();
    for (std::size_t i = 0; i < n; ++i) {
      const auto& a = ring[i];
      const auto& b = ring[(i + 1) % n];
      const double ax = (a.lon - p.lon) * m_per_deg_lon, ay = (a.lat - p.lat) * m_per_deg_lat;
      const double bx = (b.lon - p.lon) * m_per_deg_lon, by = (b.lat - p.lat) * m_per_deg_lat;
      const double dx = bx - ax, dy = by - ay;
      const double len2 = dx * dx + dy * dy;
      double t = len2 > 0.0 ? -(ax * dx + ay * dy) / len2 : 0.0;
      t = std::clamp(t, 0.0, 1.0);
      best = std::min(best, std::hypot(ax + t * dx, ay + t * dy));
    }
  };
  scan(poly.outer);
  for (const auto& h : poly.holes) scan(h);
  return best;
}

GridSpec grid_from_boundary(const PolygonSet& boundary, double cell_miles) {
  if (!(cell_miles > 0.0) || !std::isfinite(cell_miles)) {
    throw InputError("cell_miles must be positive");
  }
  if (boundary.empty()) throw InputError("boundary has no polygons");
  double west = std::numeric_limits<double>::infinity(), east = -west;
  double south = west, north = -west;
  double area = 0.0, lat_moment = 0.0;
  for (const auto& poly : boundary) {
    if (poly.outer.size() < 3) throw InputError("boundary polygon has fewer than 3 vertices");
    for (const auto& p : poly.outer) {
      p.validate();
      west = std::min(west, p.lon);
      east = std::max(east, p.lon);
      south = std::min(south, p.lat);
      north = std::max(north, p.lat);
    }
    area += polygon_area_deg2(poly);
  }
  for (const auto& poly : boundary) {
    lat_moment += ring_lat_moment(poly.outer, south);
    for (const auto& h : poly.holes) lat_moment -= ring_lat_moment(h, south);
  }
  if (!(area > 0.0)) throw InputError("boundary is degenerate (zero area)");
  const double ref_lat = south + lat_moment / area;

  const GeoPoint origin{south, west};
  // Provisional grid used only for its unit conversions.
  const GridSpec unit(origin, cell_miles, ref_lat, 1, 1, {true});
  const double cell_lat = unit.cell_deg_lat();
  const double cell_lon = unit.cell_deg_lon();
  const auto count = [](double extent, double cell) {
    const double q = extent / cell;
    return std::max<std::int32_t>(1, static_cast<std::int32_t>(std::ceil(q - kEdgeSnap)));
  };
  const std::int32_t n_cols = count(east - west, cell_lon);
  const std::int32_t n_rows = count(north - south, cell_lat);
  const double min_overlap = kMinOverlapFraction * cell_lat * cell_lon;

  std::vector<bool> mask(static_cast<std::size_t>(n_rows) * n_cols, false);
  for (std::int32_t r = 0; r < n_rows; ++r) {
    const double s = south + r * cell_lat;
    for (std::int32_t c = 0; c < n_cols; ++c) {
      const double w = west + c * cell_lon;
      mask[static_cast<std::size_t>(r) * n_cols + c] =
          overlap_area(boundary, w, s, w + cell_lon, s + cell_lat) > min_overlap;
    }
  }
  return GridSpec(origin, cell_miles, ref_lat, n_rows, n_cols, std::move(mask));
}

PolygonSet parse_boundary_geojson(const std::string& text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("GeoJSON parse error: ") + e.what());
  }
  PolygonSet out;
  try {
    collect_polygons(doc, out);
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("GeoJSON structure error: ") + e.what());
  }
  if (out.empty()) throw InputError("GeoJSON contains no polygons");
  return out;
}

PolygonSet read_boundary_geojson(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open boundary file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_boundary_geojson(ss.str());
  } catch (const InputError& e) {
    throw InputError(path + ": " + e.what());
  }
}

}  // namespace tentgp
