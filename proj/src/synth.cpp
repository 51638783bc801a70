#include "tentgp/synth.hpp"

#include <cmath>
#include <fstream>
#include <numbers>

#include <json.hpp>

#include "tentgp/error.hpp"
#include "tentgp/random.hpp"
#include "tentgp/svgp.hpp"

namespace tentgp {

namespace {

using Matrix = Eigen::MatrixXd;

constexpr std::uint64_t kStreamWeather = 21;
constexpr std::uint64_t kStreamDemographics = 22;
constexpr std::uint64_t kStreamLatent = 23;  // + term index
constexpr std::uint64_t kStreamCounts = 30;
constexpr std::uint64_t kStreamObserved = 31;
constexpr std::uint64_t kStreamEvents = 32;

void check_params(const KernelParams& p, const char* what) {
  if (!(p.variance >= 0.0) || !std::isfinite(p.variance)) {
    throw ConfigError(std::string("synth: ") + what + " variance must be non-negative");
  }
  if (p.lengthscales.empty()) throw ConfigError(std::string("synth: ") + what + " lengthscales missing");
  for (double l : p.lengthscales) {
    if (!(l > 0.0) || !std::isfinite(l)) {
      throw ConfigError(std::string("synth: ") + what + " lengthscales must be positive");
    }
  }
}

// L Z L2' for Z a matrix of standard normals: a draw from N(0, K1 (x) K2)
// laid out as [row of K1, row of K2].
Matrix kron_draw(const Matrix& K1, const Matrix& K2, std::uint64_t seed) {
  const Matrix L1 = cholesky_with_jitter(K1, 0.0).L;
  const Matrix L2 = cholesky_with_jitter(K2, 0.0).L;
  const auto z = standard_normals(seed, static_cast<std::size_t>(K1.rows() * K2.rows()));
  const Eigen::Map<const Matrix> Z(z.data(), K1.rows(), K2.rows());
  return L1 * Z * L2.transpose();
}

template <typename Fn>
Matrix gram_of(Eigen::Index n, Fn&& k) {
  Matrix K(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j <= i; ++j) K(i, j) = K(j, i) = k(i, j);
  }
  return K;
}

}  // namespace

void SynthConfig::validate() const {
  if (n_rows < 1 || n_cols < 1 || n_days < 1) throw ConfigError("synth: grid and window must be non-empty");
  if (n_cubes() > kMaxExactCubes) {
    throw ConfigError("synth: " + std::to_string(n_cubes()) + " cubes exceed the exact-sampling limit of " +
                      std::to_string(kMaxExactCubes));
  }
  if (!(cell_miles > 0.0)) throw ConfigError("synth: cell_miles must be positive");
  south_west.validate();
  check_params(kernel.spatial, "spatial");
  check_params(kernel.temporal, "temporal");
  check_params(kernel.covariate, "covariate");
  if (kernel.spatial.lengthscales.size() != 1 && kernel.spatial.lengthscales.size() != 2) {
    throw ConfigError("synth: spatial kernel needs 1 or 2 lengthscales");
  }
  if (kernel.covariate.lengthscales.size() != 1 &&
      kernel.covariate.lengthscales.size() != kNumCovariates) {
    throw ConfigError("synth: covariate kernel needs 1 or 6 lengthscales");
  }
  if (!(observed_fraction >= 0.0 && observed_fraction <= 1.0)) {
    throw ConfigError("synth: observed_fraction must lie in [0, 1]");
  }
  if (!(gate_theta >= 0.0 && gate_theta <= 1.0)) throw ConfigError("synth: gate_theta must lie in [0, 1]");
  if (n_ground_truth < 0 || n_ground_truth > n_days) {
    throw ConfigError("synth: n_ground_truth must lie in [0, n_days]");
  }
}

PolygonSet synth_boundary(const SynthConfig& config) {
  const GeoPoint sw = config.south_west;
  const GridSpec probe(sw, config.cell_miles, sw.lat, 1, 1, {true});
  const double dlat = config.n_rows * config.cell_miles * probe.deg_lat_per_mile();
  const double ref_lat = sw.lat + 0.5 * dlat;
  const GridSpec at_ref(sw, config.cell_miles, ref_lat, 1, 1, {true});
  const double dlon = config.n_cols * config.cell_miles * at_ref.deg_lon_per_mile();
  Polygon rect;
  rect.outer = {sw, {sw.lat, sw.lon + dlon}, {sw.lat + dlat, sw.lon + dlon}, {sw.lat + dlat, sw.lon}};
  return {rect};
}

SynthWorld generate(const SynthConfig& config) {
  config.validate();
  SynthWorld w;
  w.config = config;
  w.boundary = synth_boundary(config);
  w.grid = grid_from_boundary(w.boundary, config.cell_miles);
  if (w.grid.n_rows() != config.n_rows || w.grid.n_cols() != config.n_cols ||
      w.grid.active_count() != config.n_rows * config.n_cols) {
    throw NumericalError("synth: boundary rectangle did not reproduce the requested grid");
  }
  const std::int32_t B = w.grid.active_count();
  const std::int32_t T = config.n_days;
  const StudyWindow window{config.start, T};
  w.cubes = CubeTable(B, window);

  // Covariates.
  const CovariateSpec& cs = config.covariates;
  std::vector<WeatherRow> weather(static_cast<std::size_t>(T));
  {
    Rng rng(derive_seed(config.seed, kStreamWeather));
    const Date jan1 = make_date(config.start.year(), 1, 1);
    for (std::int32_t d = 0; d < T; ++d) {
      const double doy = static_cast<double>((window.date_at(d) - jan1) % 365);
      auto& row = weather[static_cast<std::size_t>(d)];
      // Warmest around early August.
      row.tmax_f = cs.tmax_mean_f +
                   cs.tmax_amplitude_f * std::sin(2.0 * std::numbers::pi * (doy - 126.0) / 365.0) +
                   cs.tmax_noise_f * standard_normal(rng);
      row.tmin_f = row.tmax_f - cs.diurnal_range_f + cs.diurnal_noise_f * standard_normal(rng);
      const double u = uniform01(rng);
      const double amount = -cs.rain_mean_in * std::log1p(-uniform01(rng));
      row.precip_in = u < cs.rain_probability ? std::round(amount * 100.0) / 100.0 : 0.0;
    }
  }
  const int first_year = window.start.year();
  const int n_years = window.date_at(T - 1).year() - first_year + 1;
  std::vector<std::array<double, 3>> demo(static_cast<std::size_t>(B) * static_cast<std::size_t>(n_years));
  {
    Rng rng(derive_seed(config.seed, kStreamDemographics));
    for (std::int32_t b = 0; b < B; ++b) {
      // Population fractions, as in the ACS file contract.
      const double white = 0.2 + 0.6 * uniform01(rng);
      const double black = std::min(0.3, 1.0 - white) * uniform01(rng);
      const double income = cs.income_median * std::exp(cs.income_log_sd * standard_normal(rng));
      for (int y = 0; y < n_years; ++y) {
        demo[static_cast<std::size_t>(b) * static_cast<std::size_t>(n_years) + static_cast<std::size_t>(y)] =
            {white, black, std::round(income)};
      }
    }
  }
  w.cubes.set_covariates(weather, first_year, n_years, demo);
  w.cubes.standardize(false);

  // Kernel factors. Weather depends only on the day and demographics only on
  // the box, so the ARD RBF splits into a day factor and a box factor.
  const HybridKernel& k = config.kernel;
  std::vector<STInput> box_in(static_cast<std::size_t>(B)), day_in(static_cast<std::size_t>(T));
  for (std::int32_t b = 0; b < B; ++b) box_in[static_cast<std::size_t>(b)] = make_input(w.cubes, w.grid, BoxId{b}, 0);
  for (std::int32_t d = 0; d < T; ++d) day_in[static_cast<std::size_t>(d)] = make_input(w.cubes, w.grid, BoxId{0}, d);
  KernelParams demo_p{1.0, {k.covariate.lengthscale(kPctWhite), k.covariate.lengthscale(kPctBlack),
                            k.covariate.lengthscale(kIncome)}};
  KernelParams weather_p{k.covariate.variance, {k.covariate.lengthscale(kPrecip), k.covariate.lengthscale(kTmax),
                                                k.covariate.lengthscale(kTmin)}};
  auto sub = [](const Covariates& x, std::size_t from) {
    return std::array<double, 3>{x[from], x[from + 1], x[from + 2]};
  };
  const Matrix Ks = gram_of(B, [&](Eigen::Index i, Eigen::Index j) {
    const auto& a = box_in[static_cast<std::size_t>(i)];
    const auto& c = box_in[static_cast<std::size_t>(j)];
    return matern(a.s, c.s, k.spatial, k.spatial_order);
  });
  const Matrix Kt = gram_of(T, [&](Eigen::Index i, Eigen::Index j) {
    const double a = day_in[static_cast<std::size_t>(i)].t, c = day_in[static_cast<std::size_t>(j)].t;
    return matern(std::span<const double>(&a, 1), std::span<const double>(&c, 1), k.temporal, k.temporal_order);
  });
  const Matrix D = gram_of(B, [&](Eigen::Index i, Eigen::Index j) {
    return rbf(sub(box_in[static_cast<std::size_t>(i)].x, kPctWhite), sub(box_in[static_cast<std::size_t>(j)].x, kPctWhite),
               demo_p);
  });
  const Matrix W = gram_of(T, [&](Eigen::Index i, Eigen::Index j) {
    return rbf(sub(day_in[static_cast<std::size_t>(i)].x, kPrecip), sub(day_in[static_cast<std::size_t>(j)].x, kPrecip),
               weather_p);
  });

  // Four independent terms; each has its own seed stream, so a zero variance
  // drops a term without shifting the others.
  Matrix G = Matrix::Constant(B, T, config.mean_const);
  const Matrix one_b = Matrix::Ones(1, 1);
  if (k.spatial.variance > 0.0) {
    G.colwise() += kron_draw(Ks, one_b, derive_seed(config.seed, kStreamLatent + 0)).col(0);
  }
  if (k.temporal.variance > 0.0) {
    G.rowwise() += kron_draw(Kt, one_b, derive_seed(config.seed, kStreamLatent + 1)).col(0).transpose();
  }
  if (k.covariate.variance > 0.0) {
    G += kron_draw(D, W, derive_seed(config.seed, kStreamLatent + 2));
  }
  if (k.spatial.variance > 0.0 && k.temporal.variance > 0.0 && k.covariate.variance > 0.0) {
    G += kron_draw(Ks.cwiseProduct(D), Kt.cwiseProduct(W), derive_seed(config.seed, kStreamLatent + 3));
  }

  const std::size_t N = w.cubes.size();
  w.f_true.resize(N);
  w.lambda_true.resize(N);
  w.y_true.resize(N);
  Rng count_rng(derive_seed(config.seed, kStreamCounts));
  Rng obs_rng(derive_seed(config.seed, kStreamObserved));
  for (std::size_t i = 0; i < N; ++i) {
    const double f = G(w.cubes.box_at(i).index, w.cubes.day_at(i));
    w.f_true[i] = f;
    w.lambda_true[i] = std::exp(f);
    w.y_true[i] = static_cast<std::int32_t>(poisson_draw(count_rng, w.lambda_true[i]));
    const bool observed = config.observed_fraction >= 1.0 || uniform01(obs_rng) < config.observed_fraction;
    w.cubes.set_observed(i, observed);
    w.cubes.set_y(i, observed ? w.y_true[i] : 0);
  }

  for (std::int32_t g = 0; g < config.n_ground_truth; ++g) {
    const auto day = static_cast<std::int32_t>((2 * static_cast<std::int64_t>(g) + 1) * T /
                                               (2 * static_cast<std::int64_t>(config.n_ground_truth)));
    w.ground_truth.push_back({window.date_at(day), gated_true_total(w, day, config.gate_theta)});
  }
  return w;
}

std::int64_t gated_true_total(const SynthWorld& world, std::int32_t day, double theta) {
  std::int64_t total = 0;
  for (std::int32_t b = 0; b < world.cubes.n_boxes(); ++b) {
    const std::size_t i = world.cubes.index(BoxId{b}, day);
    if (-std::expm1(-world.lambda_true[i]) >= theta) total += world.y_true[i];
  }
  return total;
}

DenseGpResult dense_gp_oracle(const Eigen::MatrixXd& K, const Eigen::VectorXd& y, double noise_var,
                              double mean) {
  const Eigen::Index n = K.rows();
  if (static_cast<std::size_t>(n) > kMaxOracleSize) {
    throw InputError("dense_gp_oracle: refusing n = " + std::to_string(n) + " (limit " +
                     std::to_string(kMaxOracleSize) + ")");
  }
  if (K.cols() != n || y.size() != n) throw InputError("dense_gp_oracle: dimension mismatch");
  if (!(noise_var >= 0.0)) throw InputError("dense_gp_oracle: noise variance must be non-negative");
  Matrix C = K;
  C.diagonal().array() += noise_var;
  const Matrix L = cholesky_with_jitter(C, 0.0).L;
  const auto Ltri = L.triangularView<Eigen::Lower>();
  const Eigen::VectorXd r = y.array() - mean;
  const Eigen::VectorXd a = Ltri.solve(r);
  DenseGpResult out;
  out.log_marginal = -0.5 * a.squaredNorm() - L.diagonal().array().log().sum() -
                     0.5 * static_cast<double>(n) * std::log(2.0 * std::numbers::pi);
  const Eigen::VectorXd alpha = L.transpose().triangularView<Eigen::Upper>().solve(a);
  const Matrix V = Ltri.solve(K);
  out.mean = (K * alpha).array() + mean;
  out.var = (K.diagonal() - V.colwise().squaredNorm().transpose()).cwiseMax(0.0);
  return out;
}

// ---------------------------------------------------------------------------

namespace {

void write_polygon_ring(nlohmann::json& ring, const std::vector<GeoPoint>& pts) {
  for (const auto& p : pts) ring.push_back({p.lon, p.lat});
  ring.push_back({pts.front().lon, pts.front().lat});
}

std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw InputError("cannot write " + p.string());
  return out;
}

}  // namespace

DatasetPaths write_synth_dataset(const SynthWorld& world, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  DatasetPaths paths{dir / "events.csv",  dir / "weather.csv",  dir / "acs.csv",
                     dir / "cbg.geojson", dir / "boundary.geojson", dir / "ground_truth.csv"};
  const GridSpec& grid = world.grid;
  const CubeTable& cubes = world.cubes;
  const StudyWindow& window = cubes.window();

  {
    auto out = open_out(paths.events);
    out << "source,date,lat,lon,label\n";
    Rng rng(derive_seed(world.config.seed, kStreamEvents));
    const double margin = 2.0 / kMetersPerMile;  // keep points off cell edges
    const double side = grid.cell_miles() - 2.0 * margin;
    std::vector<LocalXY> placed;
    for (std::size_t i = 0; i < cubes.size(); ++i) {
      if (!cubes.observed(i)) continue;
      const BoxId box = cubes.box_at(i);
      const std::string date = format_date(window.date_at(cubes.day_at(i)));
      const LocalXY c = grid.centroid_local(box);
      const LocalXY sw{c.x - 0.5 * grid.cell_miles() + margin, c.y - 0.5 * grid.cell_miles() + margin};
      if (cubes.y(i) == 0) {
        const GeoPoint p = grid.from_local(c);
        out << "call_report," << date << ',' << format_double(p.lat) << ',' << format_double(p.lon)
            << ",negative\n";
        continue;
      }
      placed.clear();
      for (std::int32_t n = 0; n < cubes.y(i); ++n) {
        GeoPoint p{};
        for (int attempt = 0;; ++attempt) {
          if (attempt > 10'000) throw NumericalError("synth: cannot place spaced events in a box");
          const LocalXY xy{sw.x + side * uniform01(rng), sw.y + side * uniform01(rng)};
          p = grid.from_local(xy);
          bool clear = true;
          for (const auto& q : placed) {
            if (haversine_m(p, grid.from_local(q)) < kSynthMinEventSpacingM) {
              clear = false;
              break;
            }
          }
          if (clear && assign_box(p, grid) == box) {
            placed.push_back(xy);
            break;
          }
        }
        const char* source = uniform01(rng) < 0.5 ? "call_report" : "image_detection";
        out << source << ',' << date << ',' << format_double(p.lat) << ',' << format_double(p.lon)
            << ",positive\n";
      }
    }
  }
  {
    auto out = open_out(paths.weather);
    out << "date,tmax_f,tmin_f,precip_in\n";
    for (std::int32_t d = 0; d < window.n_days; ++d) {
      const auto& r = cubes.weather()[static_cast<std::size_t>(d)];
      out << format_date(window.date_at(d)) << ',' << format_double(r.tmax_f) << ','
          << format_double(r.tmin_f) << ',' << format_double(r.precip_in) << '\n';
    }
  }
  auto cbg_id = [](std::int32_t b) {
    std::string s = std::to_string(b);
    return "06075" + std::string(7 - std::min<std::size_t>(7, s.size()), '0') + s;
  };
  {
    auto out = open_out(paths.acs);
    out << "cbg_id,year,median_income,pct_white,pct_black\n";
    for (std::int32_t b = 0; b < cubes.n_boxes(); ++b) {
      const auto& d = cubes.demographics()[static_cast<std::size_t>(b) * static_cast<std::size_t>(cubes.n_years())];
      out << cbg_id(b) << ',' << cubes.first_year() << ',' << format_double(d[2]) << ','
          << format_double(d[0]) << ',' << format_double(d[1]) << '\n';
    }
  }
  {
    nlohmann::json features = nlohmann::json::array();
    for (std::int32_t b = 0; b < cubes.n_boxes(); ++b) {
      const auto [sw, ne] = grid.cell_bounds(BoxId{b});
      nlohmann::json ring = nlohmann::json::array();
      write_polygon_ring(ring, {sw, {sw.lat, ne.lon}, ne, {ne.lat, sw.lon}});
      features.push_back({{"type", "Feature"},
                          {"properties", {{"cbg_id", cbg_id(b)}}},
                          {"geometry", {{"type", "Polygon"}, {"coordinates", {ring}}}}});
    }
    auto out = open_out(paths.cbg);
    out << nlohmann::json{{"type", "FeatureCollection"}, {"features", features}}.dump() << '\n';
  }
  {
    nlohmann::json ring = nlohmann::json::array();
    write_polygon_ring(ring, world.boundary.front().outer);
    auto out = open_out(paths.boundary);
    out << nlohmann::json{{"type", "Polygon"}, {"coordinates", {ring}}}.dump() << '\n';
  }
  {
    auto out = open_out(paths.ground_truth);
    out << "date,count\n";
    for (const auto& g : world.ground_truth) out << format_date(g.date) << ',' << g.count << '\n';
  }
  return paths;
}

}  // namespace tentgp
