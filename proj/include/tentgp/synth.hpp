#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "tentgp/geo_grid.hpp"
#include "tentgp/ingestion.hpp"
#include "tentgp/kernels.hpp"

namespace tentgp {

inline constexpr std::size_t kMaxExactCubes = 200'000;
inline constexpr std::size_t kMaxOracleSize = 2'000;

// Shapes of the generated covariates: a seasonal temperature sinusoid with
// daily noise, intermittent rain, and per-box demographic constants.
struct CovariateSpec {
  double tmax_mean_f = 64.0;
  double tmax_amplitude_f = 8.0;
  double tmax_noise_f = 3.0;
  double diurnal_range_f = 14.0;
  double diurnal_noise_f = 2.0;
  double rain_probability = 0.2;
  double rain_mean_in = 0.3;
  double income_median = 90'000.0;
  double income_log_sd = 0.4;
};

struct SynthConfig {
  std::int32_t n_rows = 15;
  std::int32_t n_cols = 15;
  std::int32_t n_days = 120;
  Date start = make_date(2019, 1, 1);
  GeoPoint south_west{37.74, -122.46};
  double cell_miles = kDefaultCellMiles;
  // Variances may be zero here (the term is then absent); lengthscales must
  // be positive.
  HybridKernel kernel{{0.6, {0.4, 0.4}}, {0.3, {10.0}}, {0.3, std::vector<double>(6, 2.0)}};
  double mean_const = -0.3;
  CovariateSpec covariates{};
  // Share of cubes that carry a report (positive or negative); the rest are
  // unobserved and recorded as zero.
  double observed_fraction = 1.0;
  // Ground-truth city counts: totals over boxes whose true rate passes the
  // gate, on `n_ground_truth` evenly spaced days.
  double gate_theta = 0.7;
  std::int32_t n_ground_truth = 4;
  std::uint64_t seed = 0;

  std::size_t n_cubes() const {
    return static_cast<std::size_t>(n_rows) * static_cast<std::size_t>(n_cols) *
           static_cast<std::size_t>(n_days);
  }
  void validate() const;
};

struct SynthWorld {
  SynthConfig config;
  PolygonSet boundary;
  GridSpec grid;
  CubeTable cubes;  // y = 0 on unobserved cubes
  // Hidden truth, indexed like `cubes`.
  std::vector<double> f_true;
  std::vector<double> lambda_true;
  std::vector<std::int32_t> y_true;
  std::vector<GroundTruthCount> ground_truth;
};

// f ~ GP(mean_const, hybrid kernel) drawn exactly over every cube, then
// y ~ Poisson(e^f). Deterministic in the seed.
SynthWorld generate(const SynthConfig& config);

// Rectangle boundary whose derived grid is exactly n_rows x n_cols.
PolygonSet synth_boundary(const SynthConfig& config);

// Sum of true counts on `day` over boxes with 1 - exp(-lambda) >= theta.
std::int64_t gated_true_total(const SynthWorld& world, std::int32_t day, double theta);

struct DenseGpResult {
  double log_marginal = 0.0;
  Eigen::VectorXd mean;  // posterior mean of the latent at the inputs
  Eigen::VectorXd var;   // posterior variance of the latent at the inputs
};

// Exact GP regression y = f + e, f ~ N(mean, K), e ~ N(0, noise_var I),
// by dense Cholesky. noise_var = 0 treats y as the latent itself.
DenseGpResult dense_gp_oracle(const Eigen::MatrixXd& K, const Eigen::VectorXd& y,
                              double noise_var, double mean = 0.0);

template <typename Point, typename Kernel>
DenseGpResult dense_gp_oracle(std::span<const Point> inputs, const Kernel& kernel,
                              const Eigen::VectorXd& y, double noise_var, double mean = 0.0) {
  if (inputs.size() > kMaxOracleSize) {
    throw InputError("dense_gp_oracle: refusing n = " + std::to_string(inputs.size()) +
                     " (limit " + std::to_string(kMaxOracleSize) + ")");
  }
  const auto n = static_cast<Eigen::Index>(inputs.size());
  Eigen::MatrixXd K(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j <= i; ++j) {
      K(i, j) = K(j, i) =
          kernel(inputs[static_cast<std::size_t>(i)], inputs[static_cast<std::size_t>(j)]);
    }
  }
  return dense_gp_oracle(K, y, noise_var, mean);
}

struct DatasetPaths {
  std::filesystem::path events, weather, acs, cbg, boundary, ground_truth;
};

inline constexpr double kSynthMinEventSpacingM = 12.0;

// Writes the world in the ingestion file contracts: one positive report per
// counted tent (points at least 12 m apart inside the box, so deduplication
// keeps them all), one negative report per observed empty cube, daily
// weather, one ACS row and one CBG polygon per box, the boundary rectangle
// and the ground-truth counts.
DatasetPaths write_synth_dataset(const SynthWorld& world, const std::filesystem::path& dir);

}  // namespace tentgp
