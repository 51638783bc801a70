#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace tentgp {

inline constexpr double kEarthRadiusM = 6371000.0;
inline constexpr double kMetersPerMile = 1609.344;
inline constexpr double kDefaultCellMiles = 0.1;

struct GeoPoint {
  double lat = 0.0;
  double lon = 0.0;

  // Throws InputError when a field is non-finite or out of range.
  void validate() const;
  bool operator==(const GeoPoint&) const = default;
};

// Great-circle distance in meters on a sphere of radius kEarthRadiusM.
double haversine_m(const GeoPoint& a, const GeoPoint& b);

// A closed ring of vertices (first vertex need not be repeated).
using Ring = std::vector<GeoPoint>;

// One polygon: an outer ring followed by optional holes.
struct Polygon {
  Ring outer;
  std::vector<Ring> holes;
};

using PolygonSet = std::vector<Polygon>;

// Reads a GeoJSON Polygon, MultiPolygon, Feature or FeatureCollection.
PolygonSet read_boundary_geojson(const std::string& path);
PolygonSet parse_boundary_geojson(const std::string& text);

struct BoxId {
  std::int32_t index = 0;
  auto operator<=>(const BoxId&) const = default;
};

struct CellRC {
  std::int32_t row = 0;
  std::int32_t col = 0;
  bool operator==(const CellRC&) const = default;
};

// Planar coordinates in miles, relative to the grid origin.
struct LocalXY {
  double x = 0.0;  // east
  double y = 0.0;  // north
};

// Axis-aligned square grid in a local equirectangular projection. Cell
// extents are half-open: [west, east) x [south, north).
class GridSpec {
 public:
  GridSpec() = default;
  GridSpec(GeoPoint origin, double cell_miles, double ref_lat, std::int32_t n_rows,
           std::int32_t n_cols, std::vector<bool> active_mask);

  const GeoPoint& origin() const { return origin_; }
  double cell_miles() const { return cell_miles_; }
  double ref_lat() const { return ref_lat_; }
  std::int32_t n_rows() const { return n_rows_; }
  std::int32_t n_cols() const { return n_cols_; }
  std::int32_t active_count() const { return static_cast<std::int32_t>(active_cells_.size()); }
  const std::vector<bool>& active_mask() const { return active_mask_; }

  double deg_lat_per_mile() const;
  double deg_lon_per_mile() const;
  double cell_deg_lat() const { return cell_miles_ * deg_lat_per_mile(); }
  double cell_deg_lon() const { return cell_miles_ * deg_lon_per_mile(); }

  CellRC cell_of(BoxId id) const { return active_cells_.at(static_cast<std::size_t>(id.index)); }
  std::optional<BoxId> box_of(CellRC rc) const;

  LocalXY to_local(const GeoPoint& p) const;
  GeoPoint from_local(const LocalXY& xy) const;

  // Centroid of the cell in planar miles / in WGS84.
  LocalXY centroid_local(BoxId id) const;
  GeoPoint centroid(BoxId id) const;
  // South-west and north-east corners of the cell.
  std::pair<GeoPoint, GeoPoint> cell_bounds(BoxId id) const;

 private:
  GeoPoint origin_{};
  double cell_miles_ = kDefaultCellMiles;
  double ref_lat_ = 0.0;
  std::int32_t n_rows_ = 0;
  std::int32_t n_cols_ = 0;
  std::vector<bool> active_mask_;
  std::vector<CellRC> active_cells_;
  std::vector<std::int32_t> cell_to_box_;  // -1 when inactive
};

// Active cell containing p, or nullopt when p lies in no active cell.
std::optional<BoxId> assign_box(const GeoPoint& p, const GridSpec& grid);

// Grid covering the bounding box of the boundary, anchored at its south-west
// corner. A cell is active when its interior overlaps the boundary.
GridSpec grid_from_boundary(const PolygonSet& boundary, double cell_miles = kDefaultCellMiles);

// Signed-area-free helpers, exposed for tests.
double polygon_area_deg2(const Polygon& poly);
bool point_in_polygon(const GeoPoint& p, const Polygon& poly);
// Distance in meters from p to the nearest edge of poly (0 when inside).
double distance_to_polygon_m(const GeoPoint& p, const Polygon& poly);

}  // namespace tentgp
