#include "tentgp/aggregation.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "tentgp/error.hpp"
#include "tentgp/random.hpp"

namespace tentgp {

double inclusion_prob(double lambda) {
  if (!(lambda >= 0.0)) throw InputError("inclusion_prob: rate must be non-negative");
  return -std::expm1(-lambda);
}

double sample_quantile(std::span<const double> sorted, double q) {
  if (sorted.empty()) return 0.0;
  const auto n = static_cast<double>(sorted.size());
  const auto rank = static_cast<std::size_t>(std::max(1.0, std::ceil(q * n)));
  return sorted[std::min(rank, sorted.size()) - 1];
}

CityAggregate aggregate_day(std::span<const LatentMarginal> boxes, const AggregateOptions& options,
                            Date date) {
  if (!(options.theta >= 0.0 && options.theta <= 1.0)) {
    throw InputError("aggregate_day: theta must lie in [0, 1]");
  }
  if (options.mc_samples == 0) throw InputError("aggregate_day: need at least one sample");
  CityAggregate agg;
  agg.date = date;
  agg.mc_samples = options.mc_samples;
  std::vector<double> totals(options.mc_samples);
  std::vector<bool> mean_gate(boxes.size());
  double included_sum = 0.0;
  if (options.gate == GateMode::mean) {
    for (std::size_t b = 0; b < boxes.size(); ++b) {
      const double lam = std::exp(boxes[b].mean + 0.5 * boxes[b].var);
      mean_gate[b] = inclusion_prob(lam) >= options.theta;
    }
  }
  Rng rng(derive_seed(options.seed, static_cast<std::uint64_t>(static_cast<std::int64_t>(date.days))));
  for (std::size_t s = 0; s < options.mc_samples; ++s) {
    double total = 0.0;
    std::size_t included = 0;
    for (std::size_t b = 0; b < boxes.size(); ++b) {
      const double f = boxes[b].mean + std::sqrt(boxes[b].var) * standard_normal(rng);
      const double lam = std::exp(f);
      const auto y = poisson_draw(rng, lam);
      const bool keep = options.gate == GateMode::mean ? static_cast<bool>(mean_gate[b])
                                                       : inclusion_prob(lam) >= options.theta;
      if (keep) {
        total += static_cast<double>(y);
        ++included;
      }
    }
    totals[s] = total;
    included_sum += static_cast<double>(included);
  }
  const auto n = static_cast<double>(options.mc_samples);
  double mean = 0.0;
  for (double t : totals) mean += t;
  mean /= n;
  double ss = 0.0;
  for (double t : totals) ss += (t - mean) * (t - mean);
  agg.mean_total = mean;
  agg.std_error = options.mc_samples > 1 ? std::sqrt(ss / (n - 1.0) / n) : 0.0;
  agg.n_included = included_sum / n;
  std::sort(totals.begin(), totals.end());
  agg.p05 = sample_quantile(totals, 0.05);
  agg.p50 = sample_quantile(totals, 0.50);
  agg.p95 = sample_quantile(totals, 0.95);
  return agg;
}

ThetaCalibration calibrate_theta(const AggregatesForTheta& aggregates,
                                 std::span<const GroundTruthCount> ground_truth,
                                 std::span<const double> theta_grid, int match_window_days) {
  if (theta_grid.empty()) throw InputError("calibrate_theta: empty theta grid");
  if (ground_truth.empty()) throw InputError("calibrate_theta: no ground-truth counts");
  std::vector<double> grid(theta_grid.begin(), theta_grid.end());
  std::sort(grid.begin(), grid.end());
  ThetaCalibration cal;
  cal.thetas = grid;
  bool checked = false;
  for (double theta : grid) {
    const auto aggs = aggregates(theta);
    std::map<Date, double> by_date;
    for (const auto& a : aggs) by_date[a.date] = a.mean_total;
    if (!checked) {
      for (const auto& g : ground_truth) {
        if (!by_date.contains(g.date)) {
          throw InputError("calibrate_theta: ground-truth date " + format_date(g.date) +
                           " is outside the prediction window");
        }
      }
      checked = true;
    }
    double se = 0.0;
    for (const auto& g : ground_truth) {
      double sum = 0.0;
      int n = 0;
      for (int d = -match_window_days; d <= match_window_days; ++d) {
        const auto it = by_date.find(g.date + d);
        if (it != by_date.end()) {
          sum += it->second;
          ++n;
        }
      }
      const double r = static_cast<double>(g.count) - sum / n;
      se += r * r;
    }
    cal.rmse.push_back(std::sqrt(se / static_cast<double>(ground_truth.size())));
  }
  std::size_t best = 0;
  for (std::size_t i = 1; i < cal.rmse.size(); ++i) {
    if (cal.rmse[i] < cal.rmse[best]) best = i;
  }
  cal.chosen_theta = cal.thetas[best];
  cal.chosen_rmse = cal.rmse[best];
  return cal;
}

std::vector<double> theta_grid(double step, double max_theta) {
  if (!(step > 0.0)) throw InputError("theta_grid: step must be positive");
  std::vector<double> out;
  for (int i = 0;; ++i) {
    const double t = std::round(i * step * 1e9) / 1e9;
    if (t > max_theta + 1e-12) break;
    out.push_back(t);
  }
  return out;
}

nlohmann::json calibration_to_json(const ThetaCalibration& c) {
  nlohmann::json table = nlohmann::json::array();
  for (std::size_t i = 0; i < c.thetas.size(); ++i) {
    table.push_back({{"theta", c.thetas[i]}, {"rmse", c.rmse[i]}});
  }
  return {{"grid", table}, {"chosen_theta", c.chosen_theta}, {"chosen_rmse", c.chosen_rmse}};
}

}  // namespace tentgp
