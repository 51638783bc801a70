#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tentgp/aggregation.hpp"
#include "tentgp/synth.hpp"
#include "tentgp/svgp.hpp"

namespace tentgp {

// Exit statuses.
inline constexpr int kExitOk = 0;
inline constexpr int kExitInput = 1;
inline constexpr int kExitNumerical = 2;

struct RunPaths {
  std::filesystem::path output_dir = "tentgp_out";
  // Unset entries default to <output_dir>/data/<standard name>.
  std::optional<std::filesystem::path> events, weather, acs, cbg, boundary, ground_truth;

  std::filesystem::path data_dir() const { return output_dir / "data"; }
  std::filesystem::path events_path() const { return events.value_or(data_dir() / "events.csv"); }
  std::filesystem::path weather_path() const { return weather.value_or(data_dir() / "weather.csv"); }
  std::filesystem::path acs_path() const { return acs.value_or(data_dir() / "acs.csv"); }
  std::filesystem::path cbg_path() const { return cbg.value_or(data_dir() / "cbg.geojson"); }
  std::filesystem::path boundary_path() const {
    return boundary.value_or(data_dir() / "boundary.geojson");
  }
  std::filesystem::path ground_truth_path() const {
    return ground_truth.value_or(data_dir() / "ground_truth.csv");
  }
};

struct CvCandidate {
  std::string id;
  nlohmann::json train;  // overrides applied on top of the `train` section
};

struct RunConfig {
  RunPaths paths;
  double cell_miles = kDefaultCellMiles;
  // Study window; when unset it spans the weather file.
  std::optional<Date> window_start;
  std::optional<std::int32_t> window_days;

  std::int32_t count_ceiling = 50;
  double dedup_diameter_m = kDedupDiameterM;
  bool standardize_observed_only = false;

  TrainConfig train{};
  std::int32_t cv_k_s = 5;
  std::int32_t cv_k_t = 5;
  double cv_nlpd_band = 0.01;
  std::vector<CvCandidate> cv_candidates;

  std::int32_t horizon_days = 0;

  AggregateOptions aggregate{};
  bool calibrate = true;
  double theta_step = 0.05;
  double theta_max = 0.95;
  int match_window_days = 0;

  std::size_t report_window = 7;

  SynthConfig simulate{};

  std::uint64_t seed = 0;
  unsigned threads = 0;  // 0: all available cores
  bool timestamp = true;
};

// Parses a config document; unknown keys are rejected with their dotted
// path.
RunConfig parse_run_config(const nlohmann::json& j);

// Applies the global seed to every stage.
void apply_seed(RunConfig& config, std::uint64_t seed);

// Full command line: `tentgp <command> [--config FILE] [--seed N]
// [--threads N] [--output-dir DIR] [--no-timestamp]`. Returns the exit
// status; diagnostics go to `err`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// Runs one command with a parsed configuration. Throws on failure.
void run_command(const std::string& command, const RunConfig& config, std::ostream& log);

}  // namespace tentgp
