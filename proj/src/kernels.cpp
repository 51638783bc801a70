#include "tentgp/kernels.hpp"

#include <cmath>

#include "tentgp/error.hpp"

namespace tentgp {

namespace {

constexpr double kSqrt3 = 1.7320508075688772;
constexpr double kSqrt5 = 2.23606797749979;

// g'(r) / r, finite at r = 0 for the smooth orders.
double matern_dshape_over_r(double r, MaternOrder order) {
  switch (order) {
    case MaternOrder::half:
      return r > 0.0 ? -std::exp(-r) / r : 0.0;
    case MaternOrder::three_half:
      return -3.0 * std::exp(-kSqrt3 * r);
    case MaternOrder::five_half:
      return -(5.0 / 3.0) * (1.0 + kSqrt5 * r) * std::exp(-kSqrt5 * r);
  }
  return 0.0;
}

double scaled_sq_dist(std::span<const double> a, std::span<const double> b, const KernelParams& p) {
  double q = 0.0;
  for (std::size_t d = 0; d < a.size(); ++d) {
    const double z = (a[d] - b[d]) / p.lengthscale(d);
    q += z * z;
  }
  return q;
}

void check_dims(std::span<const double> a, std::span<const double> b, const KernelParams& p) {
  if (a.size() != b.size()) throw InputError("kernel inputs differ in dimension");
  if (p.lengthscales.size() != 1 && p.lengthscales.size() != a.size()) {
    throw InputError("lengthscale count does not match input dimension");
  }
}

}  // namespace

MaternOrder parse_matern_order(const std::string& s) {
  if (s == "half" || s == "1/2") return MaternOrder::half;
  if (s == "three_half" || s == "3/2") return MaternOrder::three_half;
  if (s == "five_half" || s == "5/2") return MaternOrder::five_half;
  throw ConfigError("unknown Matern order '" + s + "'");
}

std::string to_string(MaternOrder order) {
  switch (order) {
    case MaternOrder::half:
      return "half";
    case MaternOrder::three_half:
      return "three_half";
    case MaternOrder::five_half:
      return "five_half";
  }
  return "?";
}

void KernelParams::validate() const {
  if (!(variance > 0.0) || !std::isfinite(variance)) {
    throw InputError("kernel variance must be positive and finite");
  }
  if (lengthscales.empty()) throw InputError("kernel needs at least one lengthscale");
  for (double l : lengthscales) {
    if (!(l > 0.0) || !std::isfinite(l)) {
      throw InputError("kernel lengthscales must be positive and finite");
    }
  }
}

double matern_shape(double r, MaternOrder order) {
  switch (order) {
    case MaternOrder::half:
      return std::exp(-r);
    case MaternOrder::three_half:
      return (1.0 + kSqrt3 * r) * std::exp(-kSqrt3 * r);
    case MaternOrder::five_half:
      return (1.0 + kSqrt5 * r + 5.0 * r * r / 3.0) * std::exp(-kSqrt5 * r);
  }
  return 0.0;
}

double matern(std::span<const double> a, std::span<const double> b, const KernelParams& p,
              MaternOrder order) {
  check_dims(a, b, p);
  return p.variance * matern_shape(std::sqrt(scaled_sq_dist(a, b, p)), order);
}

double rbf(std::span<const double> a, std::span<const double> b, const KernelParams& p) {
  check_dims(a, b, p);
  return p.variance * std::exp(-0.5 * scaled_sq_dist(a, b, p));
}

double matern_with_grad(std::span<const double> a, std::span<const double> b,
                        const KernelParams& p, MaternOrder order, std::span<double> grad) {
  const double r = std::sqrt(scaled_sq_dist(a, b, p));
  const double k = p.variance * matern_shape(r, order);
  grad[0] = k;
  // dr/dlog l_d = -(delta_d / l_d)^2 / r, so dk/dlog l_d = -var g'(r)/r (delta_d/l_d)^2.
  const double w = -p.variance * matern_dshape_over_r(r, order);
  for (std::size_t j = 1; j < grad.size(); ++j) grad[j] = 0.0;
  for (std::size_t d = 0; d < a.size(); ++d) {
    const double z = (a[d] - b[d]) / p.lengthscale(d);
    grad[p.lengthscales.size() == 1 ? 1 : 1 + d] += w * z * z;
  }
  return k;
}

double rbf_with_grad(std::span<const double> a, std::span<const double> b, const KernelParams& p,
                     std::span<double> grad) {
  double q = 0.0;
  for (std::size_t j = 1; j < grad.size(); ++j) grad[j] = 0.0;
  for (std::size_t d = 0; d < a.size(); ++d) {
    const double z = (a[d] - b[d]) / p.lengthscale(d);
    q += z * z;
    grad[p.lengthscales.size() == 1 ? 1 : 1 + d] += z * z;
  }
  const double k = p.variance * std::exp(-0.5 * q);
  grad[0] = k;
  for (std::size_t j = 1; j < grad.size(); ++j) grad[j] *= k;
  return k;
}

void HybridKernel::validate() const {
  spatial.validate();
  temporal.validate();
  covariate.validate();
  if (spatial.lengthscales.size() != 1 && spatial.lengthscales.size() != 2) {
    throw InputError("spatial kernel needs 1 or 2 lengthscales");
  }
  if (temporal.lengthscales.size() != 1) throw InputError("temporal kernel needs 1 lengthscale");
  if (covariate.lengthscales.size() != 1 && covariate.lengthscales.size() != kNumCovariates) {
    throw InputError("covariate kernel needs 1 or 6 lengthscales");
  }
}

HybridKernel::Parts HybridKernel::parts(const STInput& a, const STInput& b) const {
  Parts p;
  p.ks = spatial.variance * matern_shape(std::sqrt(scaled_sq_dist(a.s, b.s, spatial)), spatial_order);
  const double dt = (a.t - b.t) / temporal.lengthscales[0];
  p.kt = temporal.variance * matern_shape(std::abs(dt), temporal_order);
  p.kx = covariate.variance * std::exp(-0.5 * scaled_sq_dist(a.x, b.x, covariate));
  return p;
}

double HybridKernel::diag() const {
  return spatial.variance + temporal.variance + covariate.variance +
         spatial.variance * temporal.variance * covariate.variance;
}

std::size_t HybridKernel::n_log_params() const {
  return spatial.n_log_params() + temporal.n_log_params() + covariate.n_log_params();
}

std::vector<double> HybridKernel::log_params() const {
  std::vector<double> out;
  out.reserve(n_log_params());
  for (const KernelParams* p : {&spatial, &temporal, &covariate}) {
    out.push_back(std::log(p->variance));
    for (double l : p->lengthscales) out.push_back(std::log(l));
  }
  return out;
}

void HybridKernel::set_log_params(std::span<const double> theta) {
  if (theta.size() != n_log_params()) throw InputError("wrong number of kernel log-parameters");
  std::size_t k = 0;
  for (KernelParams* p : {&spatial, &temporal, &covariate}) {
    p->variance = std::exp(theta[k++]);
    for (double& l : p->lengthscales) l = std::exp(theta[k++]);
  }
}

double HybridKernel::eval_with_grad(const STInput& a, const STInput& b,
                                    std::span<double> grad) const {
  const std::size_t ns = spatial.n_log_params();
  const std::size_t nt = temporal.n_log_params();
  const std::size_t nx = covariate.n_log_params();
  auto gs = grad.subspan(0, ns);
  auto gt = grad.subspan(ns, nt);
  auto gx = grad.subspan(ns + nt, nx);
  const double ks = matern_with_grad(a.s, b.s, spatial, spatial_order, gs);
  const std::array<double, 1> ta{a.t}, tb{b.t};
  const double kt = matern_with_grad(ta, tb, temporal, temporal_order, gt);
  const double kx = rbf_with_grad(a.x, b.x, covariate, gx);
  const double ws = 1.0 + kt * kx;
  const double wt = 1.0 + ks * kx;
  const double wx = 1.0 + ks * kt;
  for (auto& g : gs) g *= ws;
  for (auto& g : gt) g *= wt;
  for (auto& g : gx) g *= wx;
  return ks + kt + kx + ks * kt * kx;
}

void HybridKernel::diag_grad(std::span<double> grad) const {
  std::fill(grad.begin(), grad.end(), 0.0);
  const double vs = spatial.variance, vt = temporal.variance, vx = covariate.variance;
  const std::size_t ns = spatial.n_log_params();
  const std::size_t nt = temporal.n_log_params();
  grad[0] = vs * (1.0 + vt * vx);
  grad[ns] = vt * (1.0 + vs * vx);
  grad[ns + nt] = vx * (1.0 + vs * vt);
}

double hybrid_eval(const HybridKernel& h, const STInput& a, const STInput& b) { return h(a, b); }

CholeskyResult cholesky_with_jitter(const Eigen::MatrixXd& K, double jitter) {
  if (K.rows() != K.cols()) throw InputError("Cholesky of a non-square matrix");
  const Eigen::Index n = K.rows();
  if (n == 0) return {Eigen::MatrixXd(0, 0), jitter};
  const double max_diag = K.diagonal().cwiseAbs().maxCoeff();
  const double ceiling = 1e-4 * std::max(max_diag, 1e-300);
  double j = jitter;
  while (true) {
    Eigen::MatrixXd A = K;
    if (j > 0.0) A.diagonal().array() += j;
    Eigen::LLT<Eigen::MatrixXd> llt(A);
    if (llt.info() == Eigen::Success && A.allFinite()) {
      Eigen::MatrixXd L = llt.matrixL();
      if ((L.diagonal().array() > 0.0).all()) return {std::move(L), j};
    }
    if (j >= ceiling) break;
    j = j > 0.0 ? std::min(j * 10.0, ceiling) : std::min(1e-10 * std::max(max_diag, 1.0), ceiling);
  }
  throw NumericalError("Cholesky factorization failed for a " + std::to_string(n) + "x" +
                       std::to_string(n) + " matrix even with jitter " + std::to_string(j));
}

}  // namespace tentgp
