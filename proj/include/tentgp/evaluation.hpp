#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "tentgp/geo_grid.hpp"
#include "tentgp/ingestion.hpp"
#include "tentgp/svgp.hpp"

namespace tentgp {

inline constexpr std::int32_t kMinTimeBlockDays = 7;

// Contiguous spatial bands (by grid column, balanced on active boxes) and
// contiguous day intervals; fold (i, j) tests on their intersection and
// trains on cubes outside both.
struct FoldPlan {
  std::vector<std::int32_t> space_block_of_box;  // per BoxId
  std::vector<std::int32_t> time_block_of_day;   // per day index
  std::int32_t k_s = 0;
  std::int32_t k_t = 0;
  std::uint64_t seed = 0;

  struct Fold {
    std::int32_t space_block = 0;
    std::int32_t time_block = 0;
  };
  std::vector<Fold> folds;

  enum class Role { train, test, excluded };
  Role role(const Fold& f, BoxId box, std::int32_t day) const;
  std::vector<std::size_t> train_indices(const Fold& f, const CubeTable& cubes) const;
  std::vector<std::size_t> test_indices(const Fold& f, const CubeTable& cubes) const;
};

// `seed` is recorded for reproducibility; the blocking itself is
// deterministic.
FoldPlan make_folds(const GridSpec& grid, std::int32_t n_days, std::int32_t k_s, std::int32_t k_t,
                    std::uint64_t seed);

struct Scores {
  double rmse = 0.0;
  double nlpd = 0.0;
};

// Log Poisson(y | lambda), computed in log space.
double log_poisson_pmf(std::int64_t y, double log_rate);

// Monte-Carlo log predictive density of y under f ~ N(mean, var), using the
// given standard-normal draws.
double log_predictive_density(std::int64_t y, const LatentMarginal& lm,
                              std::span<const double> normals);

// RMSE of the predictive rate against y and mean NLPD.
Scores score_predictions(std::span<const PosteriorSummary> predictions,
                         std::span<const std::int32_t> y, std::span<const double> normals);

Scores score(const VariationalModel& model, const CubeTable& cubes, const GridSpec& grid,
             std::span<const std::size_t> test, unsigned threads = 1);

struct FoldScore {
  std::int32_t space_block = 0;
  std::int32_t time_block = 0;
  std::size_t n_train = 0;
  std::size_t n_test = 0;
  std::size_t n_excluded = 0;
  Scores scores;
};

struct CVReport {
  std::string config_id;
  std::vector<FoldScore> folds;
  double mean_rmse = 0.0;
  double sd_rmse = 0.0;
  double mean_nlpd = 0.0;
  double sd_nlpd = 0.0;
};

void finalize_report(CVReport& report);

struct CandidateConfig {
  std::string id;
  TrainConfig config;
};

// Trains one model per fold and scores it on the fold's test cubes.
CVReport cross_validate(const CandidateConfig& candidate, const CubeTable& cubes,
                        const GridSpec& grid, const FoldPlan& plan);

inline constexpr double kDefaultNlpdBand = 0.01;

// Picks the lowest mean NLPD, then the lowest mean RMSE among candidates
// whose NLPD lies within `nlpd_band` (relative) of the best; ties by id.
std::size_t choose_config(std::span<const CVReport> reports, double nlpd_band = kDefaultNlpdBand);

struct Selection {
  CandidateConfig best;
  CVReport best_report;
  std::vector<CVReport> reports;
  std::vector<std::string> failures;
};

Selection select_config(std::span<const CandidateConfig> candidates, const CubeTable& cubes,
                        const GridSpec& grid, const FoldPlan& plan,
                        double nlpd_band = kDefaultNlpdBand);

// Trailing-window sample standard deviation; the first window-1 entries are
// empty.
std::vector<std::optional<double>> rolling_std(std::span<const double> series,
                                               std::size_t window = 7);

nlohmann::json cv_report_to_json(const CVReport& r);

}  // namespace tentgp
