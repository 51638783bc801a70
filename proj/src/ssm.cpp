#include "tentgp/ssm.hpp"

#include <cmath>
#include <numbers>

#include "tentgp/error.hpp"

namespace tentgp {

namespace {

void symmetrize(Eigen::MatrixXd& P) { P = 0.5 * (P + P.transpose()).eval(); }

}  // namespace

StateSpaceModel matern_to_ssm(const KernelParams& p, MaternOrder order) {
  p.validate();
  if (p.lengthscales.size() != 1) throw InputError("temporal kernel must be one-dimensional");
  const double ell = p.lengthscales[0];
  const double var = p.variance;
  StateSpaceModel m;
  m.order = order;
  m.variance = var;
  switch (order) {
    case MaternOrder::half: {
      const double lam = 1.0 / ell;
      m.lambda = lam;
      m.F = Eigen::MatrixXd::Constant(1, 1, -lam);
      m.Qc = 2.0 * lam * var;
      m.P_inf = Eigen::MatrixXd::Constant(1, 1, var);
      break;
    }
    case MaternOrder::three_half: {
      const double lam = std::sqrt(3.0) / ell;
      m.lambda = lam;
      m.F.resize(2, 2);
      m.F << 0.0, 1.0, -lam * lam, -2.0 * lam;
      m.Qc = 4.0 * lam * lam * lam * var;
      m.P_inf = Eigen::Vector2d(var, var * lam * lam).asDiagonal();
      break;
    }
    case MaternOrder::five_half: {
      const double lam = std::sqrt(5.0) / ell;
      m.lambda = lam;
      m.F.resize(3, 3);
      m.F << 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, -lam * lam * lam, -3.0 * lam * lam, -3.0 * lam;
      m.Qc = 16.0 / 3.0 * std::pow(lam, 5) * var;
      const double kappa = var * lam * lam / 3.0;
      m.P_inf.resize(3, 3);
      m.P_inf << var, 0.0, -kappa, 0.0, kappa, 0.0, -kappa, 0.0, var * std::pow(lam, 4);
      break;
    }
  }
  const Eigen::Index d = m.F.rows();
  m.L = Eigen::VectorXd::Zero(d);
  m.L(d - 1) = 1.0;
  m.H = Eigen::RowVectorXd::Zero(d);
  m.H(0) = 1.0;
  return m;
}

Eigen::MatrixXd StateSpaceModel::transition(double dt) const {
  const Eigen::Index d = dim();
  const Eigen::MatrixXd N = F + lambda * Eigen::MatrixXd::Identity(d, d);
  Eigen::MatrixXd term = Eigen::MatrixXd::Identity(d, d);
  Eigen::MatrixXd sum = term;
  for (Eigen::Index k = 1; k < d; ++k) {
    term = (term * N * dt / static_cast<double>(k)).eval();
    sum += term;
  }
  return std::exp(-lambda * dt) * sum;
}

Eigen::MatrixXd StateSpaceModel::process_noise(const Eigen::MatrixXd& A) const {
  Eigen::MatrixXd Q = P_inf - A * P_inf * A.transpose();
  symmetrize(Q);
  return Q;
}

FilterResult kalman_filter(std::span<const double> times, std::span<const double> y,
                           std::span<const double> noise_var, const StateSpaceModel& ssm,
                           const std::optional<FilterState>& init) {
  const std::size_t n = times.size();
  if (y.size() != n || noise_var.size() != n) {
    throw InputError("kalman_filter: times, observations and noise differ in length");
  }
  for (std::size_t k = 1; k < n; ++k) {
    if (!(times[k] > times[k - 1])) {
      throw InputError("kalman_filter: time stamps must be strictly increasing");
    }
  }
  if (init && n > 0 && !(times[0] > init->time)) {
    throw InputError("kalman_filter: first time stamp must follow the initial state");
  }
  for (double r : noise_var) {
    if (!(r > 0.0)) throw InputError("kalman_filter: noise variances must be positive");
  }
  const Eigen::Index d = ssm.dim();
  FilterResult fr;
  fr.times.assign(times.begin(), times.end());
  Eigen::VectorXd m = init ? init->mean : Eigen::VectorXd::Zero(d);
  Eigen::MatrixXd P = init ? init->cov : ssm.P_inf;
  double prev_t = init ? init->time : (n > 0 ? times[0] : 0.0);
  const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(d, d);
  const double log2pi = std::log(2.0 * std::numbers::pi);

  for (std::size_t k = 0; k < n; ++k) {
    Eigen::MatrixXd A = I;
    if (init || k > 0) {
      A = ssm.transition(times[k] - prev_t);
      m = A * m;
      P = A * P * A.transpose() + ssm.process_noise(A);
      symmetrize(P);
    }
    fr.transition.push_back(A);
    fr.pred_mean.push_back(m);
    fr.pred_cov.push_back(P);

    const Eigen::VectorXd PHt = P * ssm.H.transpose();
    const double S = ssm.H.dot(PHt) + noise_var[k];
    const double innov = y[k] - ssm.H.dot(m);
    fr.log_marginal += -0.5 * (log2pi + std::log(S) + innov * innov / S);
    const Eigen::VectorXd K = PHt / S;
    m += K * innov;
    // Joseph form.
    const Eigen::MatrixXd IKH = I - K * ssm.H;
    P = IKH * P * IKH.transpose() + noise_var[k] * K * K.transpose();
    symmetrize(P);
    fr.filt_mean.push_back(m);
    fr.filt_cov.push_back(P);
    prev_t = times[k];
  }
  return fr;
}

SmootherResult rts_smoother(const FilterResult& fr, const StateSpaceModel& ssm) {
  (void)ssm;
  const std::size_t n = fr.filt_mean.size();
  SmootherResult sr;
  sr.mean = fr.filt_mean;
  sr.cov = fr.filt_cov;
  if (n == 0) return sr;
  for (std::size_t k = n - 1; k-- > 0;) {
    const Eigen::MatrixXd& A = fr.transition[k + 1];
    const Eigen::MatrixXd& Pp = fr.pred_cov[k + 1];
    // G = P_f A' P_pred^-1, via a symmetric solve.
    const Eigen::MatrixXd G =
        Pp.ldlt().solve(A * fr.filt_cov[k]).transpose();
    sr.mean[k] = fr.filt_mean[k] + G * (sr.mean[k + 1] - fr.pred_mean[k + 1]);
    Eigen::MatrixXd P = fr.filt_cov[k] + G * (sr.cov[k + 1] - Pp) * G.transpose();
    symmetrize(P);
    sr.cov[k] = P;
  }
  return sr;
}

std::vector<double> SmootherResult::f_mean(const StateSpaceModel& ssm) const {
  std::vector<double> out;
  out.reserve(mean.size());
  for (const auto& m : mean) out.push_back(ssm.H.dot(m));
  return out;
}

std::vector<double> SmootherResult::f_var(const StateSpaceModel& ssm) const {
  std::vector<double> out;
  out.reserve(cov.size());
  for (const auto& P : cov) out.push_back(ssm.H.dot(P * ssm.H.transpose()));
  return out;
}

}  // namespace tentgp
