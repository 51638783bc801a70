#pragma once

#include <array>
#include <functional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "tentgp/ingestion.hpp"

namespace tentgp {

enum class MaternOrder { half, three_half, five_half };

MaternOrder parse_matern_order(const std::string& s);
std::string to_string(MaternOrder order);

// Output scale and lengthscales. A single lengthscale is shared across all
// input dimensions; otherwise there is one per dimension.
struct KernelParams {
  double variance = 1.0;
  std::vector<double> lengthscales{1.0};

  void validate() const;
  double lengthscale(std::size_t dim) const {
    return lengthscales.size() == 1 ? lengthscales[0] : lengthscales[dim];
  }
  // log-variance followed by log-lengthscales.
  std::size_t n_log_params() const { return 1 + lengthscales.size(); }
  bool operator==(const KernelParams&) const = default;
};

// Matérn correlation shape g(r) at unit variance and lengthscale.
double matern_shape(double r, MaternOrder order);

double matern(std::span<const double> a, std::span<const double> b, const KernelParams& p,
              MaternOrder order);
double rbf(std::span<const double> a, std::span<const double> b, const KernelParams& p);

// Value plus derivatives with respect to the log-parameters, written to
// `grad` (size p.n_log_params()).
double matern_with_grad(std::span<const double> a, std::span<const double> b,
                        const KernelParams& p, MaternOrder order, std::span<double> grad);
double rbf_with_grad(std::span<const double> a, std::span<const double> b, const KernelParams& p,
                     std::span<double> grad);

// One model input: planar location in miles, day index, standardized
// covariates.
struct STInput {
  std::array<double, 2> s{};
  double t = 0.0;
  Covariates x{};
};

// k = k_s + k_t + k_x + k_s * k_t * k_x, Matérn in space and time, RBF over
// covariates.
struct HybridKernel {
  KernelParams spatial{1.0, {1.0, 1.0}};
  KernelParams temporal{1.0, {1.0}};
  KernelParams covariate{1.0, std::vector<double>(kNumCovariates, 1.0)};
  MaternOrder spatial_order = MaternOrder::three_half;
  MaternOrder temporal_order = MaternOrder::three_half;

  void validate() const;

  struct Parts {
    double ks = 0.0;
    double kt = 0.0;
    double kx = 0.0;
    double total() const { return ks + kt + kx + ks * kt * kx; }
  };

  Parts parts(const STInput& a, const STInput& b) const;
  double operator()(const STInput& a, const STInput& b) const { return parts(a, b).total(); }
  double diag() const;

  // Log-parameters packed as [spatial, temporal, covariate], each block
  // log-variance then log-lengthscales.
  std::size_t n_log_params() const;
  std::vector<double> log_params() const;
  void set_log_params(std::span<const double> theta);
  double eval_with_grad(const STInput& a, const STInput& b, std::span<double> grad) const;
  // Gradient of the prior variance k(x, x).
  void diag_grad(std::span<double> grad) const;

  bool operator==(const HybridKernel&) const = default;
};

double hybrid_eval(const HybridKernel& h, const STInput& a, const STInput& b);

struct CholeskyResult {
  Eigen::MatrixXd L;  // lower-triangular factor of K + jitter * I
  double jitter = 0.0;
};

// Factorizes K + jitter I, escalating the jitter tenfold per attempt up to
// 1e-4 * max(diag K). Throws NumericalError when every attempt fails.
CholeskyResult cholesky_with_jitter(const Eigen::MatrixXd& K, double jitter);

// Gram matrix with `jitter` on the diagonal. Throws NumericalError when the
// result cannot be factorized even after jitter escalation.
template <typename Point, typename Kernel>
Eigen::MatrixXd gram(std::span<const Point> points, const Kernel& kernel, double jitter) {
  const auto n = static_cast<Eigen::Index>(points.size());
  Eigen::MatrixXd K(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j <= i; ++j) {
      const double v = kernel(points[static_cast<std::size_t>(i)], points[static_cast<std::size_t>(j)]);
      K(i, j) = v;
      K(j, i) = v;
    }
    K(i, i) += jitter;
  }
  cholesky_with_jitter(K, 0.0);
  return K;
}

}  // namespace tentgp
