#pragma once

#include <optional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "tentgp/kernels.hpp"

namespace tentgp {

// Linear-Gaussian SDE dx = F x dt + L dW (spectral density Qc), f = H x,
// whose stationary covariance H P_inf H' reproduces a 1-D Matérn kernel.
struct StateSpaceModel {
  MaternOrder order = MaternOrder::three_half;
  double variance = 1.0;
  double lambda = 1.0;  // sqrt(2 nu) / lengthscale
  Eigen::MatrixXd F;
  Eigen::VectorXd L;
  double Qc = 0.0;
  Eigen::RowVectorXd H;
  Eigen::MatrixXd P_inf;

  Eigen::Index dim() const { return F.rows(); }
  // exp(F dt), closed form: F has the single eigenvalue -lambda, so
  // (F + lambda I) is nilpotent.
  Eigen::MatrixXd transition(double dt) const;
  // Discrete process noise over a gap: P_inf - A P_inf A'.
  Eigen::MatrixXd process_noise(const Eigen::MatrixXd& A) const;
};

StateSpaceModel matern_to_ssm(const KernelParams& p, MaternOrder order);

struct FilterState {
  double time = 0.0;
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

struct FilterResult {
  std::vector<double> times;
  std::vector<Eigen::VectorXd> pred_mean;
  std::vector<Eigen::MatrixXd> pred_cov;
  std::vector<Eigen::VectorXd> filt_mean;
  std::vector<Eigen::MatrixXd> filt_cov;
  // transition[k] maps step k-1 to step k (identity-free for k = 0).
  std::vector<Eigen::MatrixXd> transition;
  double log_marginal = 0.0;

  FilterState final_state() const {
    return {times.back(), filt_mean.back(), filt_cov.back()};
  }
};

// Exact Kalman filter for y_k = H x(t_k) + e_k, e_k ~ N(0, noise_var[k]).
// Without `init`, the state starts from the stationary prior at times[0];
// with it, the first step predicts forward from init.time.
FilterResult kalman_filter(std::span<const double> times, std::span<const double> y,
                           std::span<const double> noise_var, const StateSpaceModel& ssm,
                           const std::optional<FilterState>& init = std::nullopt);

struct SmootherResult {
  std::vector<Eigen::VectorXd> mean;
  std::vector<Eigen::MatrixXd> cov;

  // Marginals of f = H x.
  std::vector<double> f_mean(const StateSpaceModel& ssm) const;
  std::vector<double> f_var(const StateSpaceModel& ssm) const;
};

// Rauch-Tung-Striebel backward pass.
SmootherResult rts_smoother(const FilterResult& fr, const StateSpaceModel& ssm);

}  // namespace tentgp
