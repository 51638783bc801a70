#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "tentgp/error.hpp"
#include "tentgp/geo_grid.hpp"
#include "tentgp/ingestion.hpp"
#include "tentgp/kernels.hpp"

namespace tentgp {

// Inducing inputs. Spatial locations are box centroids (hotspots by total
// count, then seeded random boxes); each also carries a day anchor spread
// evenly over the training window and that cube's covariates, so the
// conditional reaches time and covariates through the hybrid kernel.
struct InducingSet {
  std::vector<STInput> Z;
  std::vector<BoxId> boxes;
  std::vector<std::int32_t> anchor_days;
  std::size_t n_hotspot = 0;
  std::size_t n_random = 0;
  std::size_t anchors_per_box = 1;
  std::uint64_t seed = 0;

  std::size_t size() const { return Z.size(); }
};

// Box totals over the window ranked descending (ties by BoxId) give the
// hotspots; randoms are drawn without replacement from the remaining boxes.
// Each chosen box contributes `anchors_per_box` points on evenly spaced days,
// staggered across boxes.
InducingSet select_inducing(const CubeTable& cubes, const GridSpec& grid, std::size_t n_hotspot,
                            std::size_t n_random, std::uint64_t seed,
                            std::size_t anchors_per_box = 1);
// Hotspot/random box choice alone, exposed for tests.
std::vector<BoxId> rank_hotspots(std::span<const std::int64_t> box_totals, std::size_t n_hotspot,
                                 std::size_t n_random, std::uint64_t seed);

// q(v) = N(m, L_S L_S') over whitened inducing values v, u = L_uu v.
// `L_raw` holds the lower-triangular factor with the diagonal stored as the
// softplus pre-image.
struct VariationalState {
  Eigen::VectorXd m;
  Eigen::MatrixXd L_raw;

  static VariationalState prior(std::size_t n);
  Eigen::MatrixXd L_S() const;
  bool operator==(const VariationalState& o) const { return m == o.m && L_raw == o.L_raw; }
};

double softplus(double x);
double softplus_inverse(double y);

// E_{f ~ N(m, v)} log Poisson(y | e^f) = y m - exp(m + v/2) - log y!.
double expected_poisson_loglik(std::int64_t y, double m, double v);

// KL(N(m_q, S_q) || N(m_p, S_p)) for full covariances.
double kl_gaussian(const Eigen::VectorXd& m_q, const Eigen::MatrixXd& S_q,
                   const Eigen::VectorXd& m_p, const Eigen::MatrixXd& S_p);
// KL(q(u) || p(u)) in whitened form: KL(N(m, S) || N(0, I)).
double kl_qu_pu(const VariationalState& q);

enum class LikelihoodKind { poisson, gaussian };

struct Likelihood {
  LikelihoodKind kind = LikelihoodKind::poisson;
  double noise_variance = 1.0;  // gaussian only; a test hook

  static Likelihood poisson() { return {}; }
  static Likelihood gaussian(double noise_var) { return {LikelihoodKind::gaussian, noise_var}; }
};

struct TrainConfig {
  double learning_rate = 1e-2;
  int epochs = 100;
  std::size_t batch_size = 4096;
  std::uint64_t seed = 0;
  bool learn_hyperparameters = true;
  bool observed_only = false;
  std::size_t n_hotspot = 400;
  std::size_t n_random = 300;
  std::size_t anchors_per_box = 1;
  double jitter = 1e-6;
  std::size_t mc_samples = 256;
  unsigned threads = 1;
  HybridKernel initial_kernel{{0.5, {0.3, 0.3}}, {0.3, {14.0}}, {0.2, std::vector<double>(6, 2.0)}};

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

struct VariationalModel {
  InducingSet inducing;
  VariationalState q;
  HybridKernel kernel;
  double mean_const = 0.0;
  TrainConfig config;
  Likelihood likelihood{};
  // Training record.
  double mean_const_init = 0.0;
  std::vector<double> elbo_trace;

  void validate() const;
};

// Parameter vector packing: [m, lower(L_raw) column-major, kernel
// log-params, mean_const]. Kernel entries are present only when
// `with_hyper` is set.
struct ParamLayout {
  std::size_t n_inducing = 0;
  std::size_t n_kernel = 0;
  bool with_hyper = true;

  std::size_t m_offset() const { return 0; }
  std::size_t l_offset() const { return n_inducing; }
  std::size_t kernel_offset() const { return n_inducing + n_inducing * (n_inducing + 1) / 2; }
  std::size_t mean_offset() const { return kernel_offset() + (with_hyper ? n_kernel : 0); }
  std::size_t size() const { return mean_offset() + 1; }
};

ParamLayout param_layout(const VariationalModel& model, bool with_hyper);
Eigen::VectorXd pack_params(const VariationalModel& model, const ParamLayout& layout);
void unpack_params(VariationalModel& model, const ParamLayout& layout, const Eigen::VectorXd& p);

struct ElboResult {
  double elbo = 0.0;
  double expected_loglik = 0.0;  // scaled data term
  double kl = 0.0;
  Eigen::VectorXd grad;  // w.r.t. pack_params(model, layout); empty if not requested
};

// scale * sum_i E_q[log p(y_i | f_i)] - KL(q(u) || p(u)). Observations are
// counts for the Poisson likelihood and real values for the Gaussian hook.
ElboResult elbo(const VariationalModel& model, std::span<const STInput> inputs,
                std::span<const double> y, double scale, bool with_grad,
                bool with_hyper_grad = true, unsigned threads = 1);

// Optimal q for the Gaussian hook at fixed hyperparameters (test oracle
// support): S = (I + A A' / s2)^-1, m = S A (y - mean) / s2 in whitened form.
VariationalState optimal_gaussian_q(const VariationalModel& model, std::span<const STInput> inputs,
                                    std::span<const double> y);

// Builds the model input for one cube.
STInput cube_input(const CubeTable& cubes, const GridSpec& grid, std::size_t i);
STInput make_input(const CubeTable& cubes, const GridSpec& grid, BoxId box, std::int32_t day);

struct FitLog {
  std::vector<double> epoch_elbo;
  std::size_t rejected_steps = 0;
};

// Raised when the ELBO turns non-finite; carries the last good model.
class TrainingDiverged : public NumericalError {
 public:
  TrainingDiverged(const std::string& what, VariationalModel last_good)
      : NumericalError(what), last_good_(std::move(last_good)) {}
  const VariationalModel& last_good() const { return last_good_; }

 private:
  VariationalModel last_good_;
};

// Initial model: inducing points selected from `training`, mean_const =
// log(mean positive count), q = prior.
VariationalModel init_model(const CubeTable& cubes, const GridSpec& grid,
                            std::span<const std::size_t> training, const TrainConfig& config);

// Adam ascent on the ELBO over the given cube indices (all cubes when empty).
// Full-batch runs reject steps that lower the ELBO and halve the step size.
VariationalModel fit(const CubeTable& cubes, const GridSpec& grid, const TrainConfig& config,
                     std::span<const std::size_t> training = {}, FitLog* log = nullptr);

// Same optimizer over explicit inputs (used by tests and the synthetic
// oracle checks).
void fit_inputs(VariationalModel& model, std::span<const STInput> inputs, std::span<const double> y,
                FitLog* log = nullptr);

struct PosteriorSummary {
  double f_mean = 0.0;
  double f_var = 0.0;
  double lambda = 0.0;
  double p_occupied = 0.0;
};

struct LatentMarginal {
  double mean = 0.0;
  double var = 0.0;
};

std::vector<LatentMarginal> latent_marginals(const VariationalModel& model,
                                             std::span<const STInput> targets, unsigned threads = 1);

// Seeded standard-normal draws shared by occupancy and NLPD estimates.
std::vector<double> latent_sample_normals(const VariationalModel& model);

PosteriorSummary summarize(const LatentMarginal& lm, std::span<const double> normals);

std::vector<PosteriorSummary> predict(const VariationalModel& model,
                                      std::span<const STInput> targets, unsigned threads = 1);

inline constexpr int kModelFormatVersion = 1;

nlohmann::json model_to_json(const VariationalModel& model);
VariationalModel model_from_json(const nlohmann::json& j);
nlohmann::json kernel_to_json(const HybridKernel& k);
HybridKernel kernel_from_json(const nlohmann::json& j);
nlohmann::json train_config_to_json(const TrainConfig& c);
// Applies the keys present in `j` over `base`; unknown keys are rejected.
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});

}  // namespace tentgp
