#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include <json.hpp>

#include "tentgp/ingestion.hpp"
#include "tentgp/svgp.hpp"

namespace tentgp {

inline constexpr double kDefaultTheta = 0.7;
inline constexpr std::size_t kDefaultAggregationSamples = 1000;

// P(Y > 0) = 1 - exp(-lambda).
double inclusion_prob(double lambda);

enum class GateMode {
  sampled,  // gate each MC draw on its own sampled rate
  mean,     // gate once on the posterior-mean rate
};

struct CityAggregate {
  Date date{};
  double mean_total = 0.0;
  double p05 = 0.0;
  double p50 = 0.0;
  double p95 = 0.0;
  // Boxes passing the gate: per-sample average in sampled mode, the
  // deterministic count in mean mode (reported rounded).
  double n_included = 0.0;
  std::size_t mc_samples = 0;
  // Standard error of mean_total.
  double std_error = 0.0;
};

struct AggregateOptions {
  double theta = kDefaultTheta;
  std::size_t mc_samples = kDefaultAggregationSamples;
  std::uint64_t seed = 0;
  GateMode gate = GateMode::sampled;
};

// Monte-Carlo city total for one day from per-box latent marginals: draw f,
// set lambda = e^f, keep the box iff 1 - exp(-lambda) >= theta, draw
// y ~ Poisson(lambda) and sum. Every draw is made for every box regardless
// of theta, so runs that share a seed use common random numbers.
CityAggregate aggregate_day(std::span<const LatentMarginal> boxes, const AggregateOptions& options,
                            Date date = {});

// Order-statistic quantile (nearest rank) of sorted samples.
double sample_quantile(std::span<const double> sorted, double q);

struct ThetaCalibration {
  std::vector<double> thetas;
  std::vector<double> rmse;
  double chosen_theta = 0.0;
  double chosen_rmse = 0.0;
};

// City totals for a given theta, one per prediction date.
using AggregatesForTheta = std::function<std::vector<CityAggregate>(double theta)>;

// RMSE of mean_total against ground truth per theta; the minimum wins with
// ties going to the smaller theta. With match_window_days > 0 the
// prediction is averaged over date +/- that many days (inside the window).
ThetaCalibration calibrate_theta(const AggregatesForTheta& aggregates,
                                 std::span<const GroundTruthCount> ground_truth,
                                 std::span<const double> theta_grid, int match_window_days = 0);

std::vector<double> theta_grid(double step = 0.05, double max_theta = 0.95);

nlohmann::json calibration_to_json(const ThetaCalibration& c);

}  // namespace tentgp
