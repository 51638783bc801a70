#include "tentgp/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "tentgp/error.hpp"

namespace tentgp {

FoldPlan::Role FoldPlan::role(const Fold& f, BoxId box, std::int32_t day) const {
  const bool in_space = space_block_of_box[static_cast<std::size_t>(box.index)] == f.space_block;
  const bool in_time = time_block_of_day[static_cast<std::size_t>(day)] == f.time_block;
  if (in_space && in_time) return Role::test;
  if (!in_space && !in_time) return Role::train;
  return Role::excluded;
}

std::vector<std::size_t> FoldPlan::train_indices(const Fold& f, const CubeTable& cubes) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < cubes.size(); ++i) {
    if (role(f, cubes.box_at(i), cubes.day_at(i)) == Role::train) out.push_back(i);
  }
  return out;
}

std::vector<std::size_t> FoldPlan::test_indices(const Fold& f, const CubeTable& cubes) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < cubes.size(); ++i) {
    if (role(f, cubes.box_at(i), cubes.day_at(i)) == Role::test) out.push_back(i);
  }
  return out;
}

FoldPlan make_folds(const GridSpec& grid, std::int32_t n_days, std::int32_t k_s, std::int32_t k_t,
                    std::uint64_t seed) {
  if (k_s < 2 || k_t < 2) throw ConfigError("cv: k_s and k_t must both be at least 2");
  const std::int32_t n_boxes = grid.active_count();
  if (n_boxes < k_s) {
    throw ConfigError("cv: " + std::to_string(k_s) + " spatial blocks need at least as many boxes");
  }
  if (n_days < k_t * kMinTimeBlockDays) {
    throw ConfigError("cv: " + std::to_string(k_t) + " time blocks of at least " +
                      std::to_string(kMinTimeBlockDays) + " days need " +
                      std::to_string(k_t * kMinTimeBlockDays) + " days, have " +
                      std::to_string(n_days));
  }
  FoldPlan plan;
  plan.k_s = k_s;
  plan.k_t = k_t;
  plan.seed = seed;

  // Each column goes to the block containing the midpoint of its share of
  // the cumulative active-box count, so bands are contiguous and balanced.
  std::vector<std::int32_t> per_col(static_cast<std::size_t>(grid.n_cols()), 0);
  for (std::int32_t b = 0; b < n_boxes; ++b) ++per_col[static_cast<std::size_t>(grid.cell_of(BoxId{b}).col)];
  std::vector<std::int32_t> block_of_col(per_col.size(), 0);
  double running = 0.0;
  for (std::size_t c = 0; c < per_col.size(); ++c) {
    const double mid = running + 0.5 * per_col[c];
    block_of_col[c] = std::min<std::int32_t>(k_s - 1, static_cast<std::int32_t>(k_s * mid / n_boxes));
    running += per_col[c];
  }
  plan.space_block_of_box.resize(static_cast<std::size_t>(n_boxes));
  std::vector<std::int32_t> block_size(static_cast<std::size_t>(k_s), 0);
  for (std::int32_t b = 0; b < n_boxes; ++b) {
    const auto blk = block_of_col[static_cast<std::size_t>(grid.cell_of(BoxId{b}).col)];
    plan.space_block_of_box[static_cast<std::size_t>(b)] = blk;
    ++block_size[static_cast<std::size_t>(blk)];
  }
  for (std::int32_t s = 0; s < k_s; ++s) {
    if (block_size[static_cast<std::size_t>(s)] < 1) {
      throw ConfigError("cv: spatial block " + std::to_string(s) +
                        " is empty; the grid has too few occupied columns for k_s = " +
                        std::to_string(k_s));
    }
  }
  plan.time_block_of_day.resize(static_cast<std::size_t>(n_days));
  for (std::int32_t d = 0; d < n_days; ++d) {
    plan.time_block_of_day[static_cast<std::size_t>(d)] =
        static_cast<std::int32_t>(static_cast<std::int64_t>(d) * k_t / n_days);
  }
  for (std::int32_t i = 0; i < k_s; ++i) {
    for (std::int32_t j = 0; j < k_t; ++j) plan.folds.push_back({i, j});
  }
  return plan;
}

double log_poisson_pmf(std::int64_t y, double log_rate) {
  const double yd = static_cast<double>(y);
  return yd * log_rate - std::exp(log_rate) - std::lgamma(yd + 1.0);
}

double log_predictive_density(std::int64_t y, const LatentMarginal& lm,
                              std::span<const double> normals) {
  const double sd = std::sqrt(lm.var);
  double best = -std::numeric_limits<double>::infinity();
  std::vector<double> lp(normals.size());
  for (std::size_t k = 0; k < normals.size(); ++k) {
    lp[k] = log_poisson_pmf(y, lm.mean + sd * normals[k]);
    best = std::max(best, lp[k]);
  }
  double sum = 0.0;
  for (double v : lp) sum += std::exp(v - best);
  return best + std::log(sum / static_cast<double>(normals.size()));
}

Scores score_predictions(std::span<const PosteriorSummary> predictions,
                         std::span<const std::int32_t> y, std::span<const double> normals) {
  if (predictions.empty()) throw InputError("score: empty test set");
  if (predictions.size() != y.size()) throw InputError("score: length mismatch");
  double se = 0.0, nlpd = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double r = y[i] - predictions[i].lambda;
    se += r * r;
    nlpd -= log_predictive_density(y[i], {predictions[i].f_mean, predictions[i].f_var}, normals);
  }
  const auto n = static_cast<double>(y.size());
  return {std::sqrt(se / n), nlpd / n};
}

Scores score(const VariationalModel& model, const CubeTable& cubes, const GridSpec& grid,
             std::span<const std::size_t> test, unsigned threads) {
  std::vector<STInput> targets;
  std::vector<std::int32_t> y;
  targets.reserve(test.size());
  y.reserve(test.size());
  for (std::size_t i : test) {
    targets.push_back(cube_input(cubes, grid, i));
    y.push_back(cubes.y(i));
  }
  const auto pred = predict(model, targets, threads);
  return score_predictions(pred, y, latent_sample_normals(model));
}

void finalize_report(CVReport& report) {
  const auto n = static_cast<double>(report.folds.size());
  if (report.folds.empty()) return;
  double sr = 0.0, sn = 0.0;
  for (const auto& f : report.folds) {
    sr += f.scores.rmse;
    sn += f.scores.nlpd;
  }
  report.mean_rmse = sr / n;
  report.mean_nlpd = sn / n;
  double vr = 0.0, vn = 0.0;
  for (const auto& f : report.folds) {
    vr += (f.scores.rmse - report.mean_rmse) * (f.scores.rmse - report.mean_rmse);
    vn += (f.scores.nlpd - report.mean_nlpd) * (f.scores.nlpd - report.mean_nlpd);
  }
  report.sd_rmse = report.folds.size() > 1 ? std::sqrt(vr / (n - 1.0)) : 0.0;
  report.sd_nlpd = report.folds.size() > 1 ? std::sqrt(vn / (n - 1.0)) : 0.0;
}

CVReport cross_validate(const CandidateConfig& candidate, const CubeTable& cubes,
                        const GridSpec& grid, const FoldPlan& plan) {
  CVReport report;
  report.config_id = candidate.id;
  for (const auto& fold : plan.folds) {
    auto train = plan.train_indices(fold, cubes);
    const auto test = plan.test_indices(fold, cubes);
    if (candidate.config.observed_only) {
      std::erase_if(train, [&](std::size_t i) { return !cubes.observed(i); });
    }
    FoldScore fs;
    fs.space_block = fold.space_block;
    fs.time_block = fold.time_block;
    fs.n_train = train.size();
    fs.n_test = test.size();
    fs.n_excluded = cubes.size() - plan.train_indices(fold, cubes).size() - test.size();
    const auto model = fit(cubes, grid, candidate.config, train);
    fs.scores = score(model, cubes, grid, test, candidate.config.threads);
    report.folds.push_back(fs);
  }
  finalize_report(report);
  return report;
}

std::size_t choose_config(std::span<const CVReport> reports, double nlpd_band) {
  if (reports.empty()) throw ConfigError("select_config: no candidates");
  double best_nlpd = std::numeric_limits<double>::infinity();
  for (const auto& r : reports) best_nlpd = std::min(best_nlpd, r.mean_nlpd);
  const double limit = best_nlpd + nlpd_band * std::abs(best_nlpd);
  std::size_t pick = reports.size();
  for (std::size_t i = 0; i < reports.size(); ++i) {
    const auto& r = reports[i];
    if (!(r.mean_nlpd <= limit)) continue;
    if (pick == reports.size()) {
      pick = i;
      continue;
    }
    const auto& p = reports[pick];
    if (r.mean_rmse < p.mean_rmse || (r.mean_rmse == p.mean_rmse && r.config_id < p.config_id)) {
      pick = i;
    }
  }
  return pick;
}

Selection select_config(std::span<const CandidateConfig> candidates, const CubeTable& cubes,
                        const GridSpec& grid, const FoldPlan& plan, double nlpd_band) {
  if (candidates.empty()) throw ConfigError("select_config: no candidates");
  Selection sel;
  std::vector<std::size_t> ok;
  for (std::size_t c = 0; c < candidates.size(); ++c) {
    try {
      sel.reports.push_back(cross_validate(candidates[c], cubes, grid, plan));
      ok.push_back(c);
    } catch (const std::exception& e) {
      sel.failures.push_back(candidates[c].id + ": " + e.what());
    }
  }
  if (sel.reports.empty()) {
    std::string msg = "select_config: every candidate failed:";
    for (const auto& f : sel.failures) msg += "\n  " + f;
    throw NumericalError(msg);
  }
  const std::size_t pick = choose_config(sel.reports, nlpd_band);
  sel.best = candidates[ok[pick]];
  sel.best_report = sel.reports[pick];
  return sel;
}

std::vector<std::optional<double>> rolling_std(std::span<const double> series, std::size_t window) {
  if (window < 2) throw InputError("rolling_std: window must be at least 2");
  if (series.size() < window) throw InputError("rolling_std: series shorter than the window");
  std::vector<std::optional<double>> out(series.size());
  for (std::size_t i = window - 1; i < series.size(); ++i) {
    const auto w = series.subspan(i + 1 - window, window);
    const double mean = std::accumulate(w.begin(), w.end(), 0.0) / static_cast<double>(window);
    double ss = 0.0;
    for (double v : w) ss += (v - mean) * (v - mean);
    out[i] = std::sqrt(ss / static_cast<double>(window - 1));
  }
  return out;
}

nlohmann::json cv_report_to_json(const CVReport& r) {
  nlohmann::json folds = nlohmann::json::array();
  for (const auto& f : r.folds) {
    folds.push_back({{"space_block", f.space_block},
                     {"time_block", f.time_block},
                     {"n_train", f.n_train},
                     {"n_test", f.n_test},
                     {"n_excluded", f.n_excluded},
                     {"rmse", f.scores.rmse},
                     {"nlpd", f.scores.nlpd}});
  }
  return {{"config_id", r.config_id},
          {"folds", folds},
          {"mean_rmse", r.mean_rmse},
          {"sd_rmse", r.sd_rmse},
          {"mean_nlpd", r.mean_nlpd},
          {"sd_nlpd", r.sd_nlpd}};
}

}  // namespace tentgp
