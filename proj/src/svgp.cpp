#include "tentgp/svgp.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

#include "tentgp/parallel.hpp"
#include "tentgp/random.hpp"

namespace tentgp {

namespace {

constexpr std::size_t kChunk = 256;
constexpr std::uint64_t kStreamRandomBoxes = 11;
constexpr std::uint64_t kStreamAnchors = 12;
constexpr std::uint64_t kStreamBatches = 13;
constexpr std::uint64_t kStreamLatentSamples = 14;

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

Matrix inducing_gram(const HybridKernel& k, const std::vector<STInput>& Z) {
  const auto M = static_cast<Eigen::Index>(Z.size());
  Matrix K(M, M);
  for (Eigen::Index i = 0; i < M; ++i) {
    for (Eigen::Index j = 0; j <= i; ++j) {
      const double v = k(Z[static_cast<std::size_t>(i)], Z[static_cast<std::size_t>(j)]);
      K(i, j) = v;
      K(j, i) = v;
    }
  }
  return K;
}

Matrix cross_gram(const HybridKernel& k, const std::vector<STInput>& Z,
                  std::span<const STInput> X) {
  Matrix K(static_cast<Eigen::Index>(Z.size()), static_cast<Eigen::Index>(X.size()));
  for (std::size_t c = 0; c < X.size(); ++c) {
    for (std::size_t r = 0; r < Z.size(); ++r) {
      K(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = k(Z[r], X[c]);
    }
  }
  return K;
}

// Per-chunk partial sums, reduced in chunk order.
struct ChunkAccum {
  double data = 0.0;
  double grad_mean = 0.0;
  Vector grad_m;
  Matrix W;     // sum_i g_v_i a_i (L_S' a_i)'
  Matrix Lbar;  // -Kuf_bar A'
  std::vector<double> grad_theta;
};

}  // namespace

// ---------------------------------------------------------------------------

std::vector<BoxId> rank_hotspots(std::span<const std::int64_t> box_totals, std::size_t n_hotspot,
                                 std::size_t n_random, std::uint64_t seed) {
  const std::size_t n_boxes = box_totals.size();
  if (n_hotspot + n_random > n_boxes) {
    throw ConfigError("inducing points: " + std::to_string(n_hotspot) + " hotspots + " +
                      std::to_string(n_random) + " random exceed the " + std::to_string(n_boxes) +
                      " active boxes");
  }
  if (n_hotspot + n_random == 0) throw ConfigError("inducing points: need at least one");
  std::vector<std::int32_t> order(n_boxes);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::int32_t a, std::int32_t b) {
    return box_totals[static_cast<std::size_t>(a)] > box_totals[static_cast<std::size_t>(b)];
  });
  std::vector<BoxId> chosen;
  chosen.reserve(n_hotspot + n_random);
  for (std::size_t i = 0; i < n_hotspot; ++i) chosen.push_back(BoxId{order[i]});
  std::vector<std::int32_t> rest(order.begin() + static_cast<std::ptrdiff_t>(n_hotspot), order.end());
  std::sort(rest.begin(), rest.end());
  Rng rng(derive_seed(seed, kStreamRandomBoxes));
  // Partial Fisher-Yates over the remaining boxes.
  for (std::size_t i = 0; i < n_random; ++i) {
    const std::size_t span = rest.size() - i;
    const std::size_t j = i + static_cast<std::size_t>(uniform01(rng) * static_cast<double>(span));
    std::swap(rest[i], rest[std::min(j, rest.size() - 1)]);
    chosen.push_back(BoxId{rest[i]});
  }
  return chosen;
}

namespace {

InducingSet select_inducing_impl(const CubeTable& cubes, const GridSpec& grid,
                                 std::span<const std::size_t> training, std::size_t n_hotspot,
                                 std::size_t n_random, std::size_t anchors_per_box,
                                 std::uint64_t seed) {
  if (anchors_per_box == 0) throw ConfigError("inducing points: anchors_per_box must be positive");
  std::vector<std::int64_t> totals(static_cast<std::size_t>(cubes.n_boxes()), 0);
  if (training.empty()) {
    for (std::size_t i = 0; i < cubes.size(); ++i) {
      totals[static_cast<std::size_t>(cubes.box_at(i).index)] += cubes.y(i);
    }
  } else {
    for (std::size_t i : training) totals[static_cast<std::size_t>(cubes.box_at(i).index)] += cubes.y(i);
  }
  InducingSet set;
  set.n_hotspot = n_hotspot;
  set.n_random = n_random;
  set.anchors_per_box = anchors_per_box;
  set.seed = seed;
  const auto chosen = rank_hotspots(totals, n_hotspot, n_random, seed);
  const std::size_t M = chosen.size();
  // Day anchors: each box gets evenly spaced days offset by its stratum,
  // strata assigned to boxes in seeded order.
  std::vector<std::size_t> perm(M);
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(derive_seed(seed, kStreamAnchors));
  for (std::size_t i = M; i > 1; --i) {
    const std::size_t j = std::min(i - 1, static_cast<std::size_t>(uniform01(rng) * static_cast<double>(i)));
    std::swap(perm[i - 1], perm[j]);
  }
  const double T = cubes.n_days();
  const double A = static_cast<double>(anchors_per_box);
  for (std::size_t j = 0; j < M; ++j) {
    const double offset = (static_cast<double>(perm[j]) + 0.5) / static_cast<double>(M);
    for (std::size_t a = 0; a < anchors_per_box; ++a) {
      const auto day = static_cast<std::int32_t>(
          std::min(T - 1.0, std::floor((static_cast<double>(a) + offset) * T / A)));
      set.boxes.push_back(chosen[j]);
      set.anchor_days.push_back(day);
      set.Z.push_back(make_input(cubes, grid, chosen[j], day));
    }
  }
  return set;
}

}  // namespace

InducingSet select_inducing(const CubeTable& cubes, const GridSpec& grid, std::size_t n_hotspot,
                            std::size_t n_random, std::uint64_t seed,
                            std::size_t anchors_per_box) {
  return select_inducing_impl(cubes, grid, {}, n_hotspot, n_random, anchors_per_box, seed);
}

STInput make_input(const CubeTable& cubes, const GridSpec& grid, BoxId box, std::int32_t day) {
  STInput in;
  const LocalXY c = grid.centroid_local(box);
  in.s = {c.x, c.y};
  in.t = static_cast<double>(day);
  if (cubes.has_covariates()) in.x = cubes.standardization().apply(cubes.x_raw_at(box, day));
  return in;
}

STInput cube_input(const CubeTable& cubes, const GridSpec& grid, std::size_t i) {
  return make_input(cubes, grid, cubes.box_at(i), cubes.day_at(i));
}

// ---------------------------------------------------------------------------

VariationalState VariationalState::prior(std::size_t n) {
  VariationalState q;
  q.m = Vector::Zero(static_cast<Eigen::Index>(n));
  q.L_raw = Matrix::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  q.L_raw.diagonal().setConstant(softplus_inverse(1.0));
  return q;
}

Matrix VariationalState::L_S() const {
  Matrix L = L_raw.triangularView<Eigen::Lower>();
  for (Eigen::Index i = 0; i < L.rows(); ++i) L(i, i) = softplus(L_raw(i, i));
  return L;
}

double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }

double softplus_inverse(double y) {
  if (!(y > 0.0)) throw InputError("softplus_inverse of a non-positive value");
  return y > 30.0 ? y : std::log(std::expm1(y));
}

double expected_poisson_loglik(std::int64_t y, double m, double v) {
  const double yd = static_cast<double>(y);
  return yd * m - std::exp(m + 0.5 * v) - std::lgamma(yd + 1.0);
}

double kl_gaussian(const Vector& m_q, const Matrix& S_q, const Vector& m_p, const Matrix& S_p) {
  const Eigen::Index n = m_q.size();
  const Eigen::LLT<Matrix> lp(S_p);
  const Eigen::LLT<Matrix> lq(S_q);
  if (lp.info() != Eigen::Success || lq.info() != Eigen::Success) {
    throw NumericalError("kl_gaussian: covariance is not positive definite");
  }
  const Matrix Lp = lp.matrixL();
  const Matrix Lq = lq.matrixL();
  const Matrix LpInvLq = Lp.triangularView<Eigen::Lower>().solve(Lq);
  const Vector diff = Lp.triangularView<Eigen::Lower>().solve(m_p - m_q);
  const double logdet_p = 2.0 * Lp.diagonal().array().log().sum();
  const double logdet_q = 2.0 * Lq.diagonal().array().log().sum();
  return 0.5 * (LpInvLq.squaredNorm() + diff.squaredNorm() - static_cast<double>(n) + logdet_p -
                logdet_q);
}

double kl_qu_pu(const VariationalState& q) {
  const Matrix L = q.L_S();
  return 0.5 * (L.squaredNorm() + q.m.squaredNorm() - static_cast<double>(q.m.size()) -
                2.0 * L.diagonal().array().log().sum());
}

// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw ConfigError("training.learning_rate must be positive");
  }
  if (epochs < 0) throw ConfigError("training.epochs must be non-negative");
  if (batch_size == 0) throw ConfigError("training.batch_size must be positive");
  if (n_hotspot + n_random == 0) throw ConfigError("training: need at least one inducing point");
  if (anchors_per_box == 0) throw ConfigError("training.anchors_per_box must be positive");
  if (!(jitter >= 0.0)) throw ConfigError("training.jitter must be non-negative");
  if (mc_samples == 0) throw ConfigError("training.mc_samples must be positive");
  try {
    initial_kernel.validate();
  } catch (const InputError& e) {
    throw ConfigError(std::string("training.kernel: ") + e.what());
  }
}

void VariationalModel::validate() const {
  kernel.validate();
  const auto M = static_cast<Eigen::Index>(inducing.size());
  if (M == 0) throw InputError("model has no inducing points");
  if (q.m.size() != M || q.L_raw.rows() != M || q.L_raw.cols() != M) {
    throw InputError("variational state does not match the inducing set");
  }
  if (!std::isfinite(mean_const)) throw InputError("mean_const is not finite");
}

ParamLayout param_layout(const VariationalModel& model, bool with_hyper) {
  return {model.inducing.size(), model.kernel.n_log_params(), with_hyper};
}

Vector pack_params(const VariationalModel& model, const ParamLayout& layout) {
  Vector p(static_cast<Eigen::Index>(layout.size()));
  const auto M = static_cast<Eigen::Index>(layout.n_inducing);
  p.segment(0, M) = model.q.m;
  Eigen::Index k = static_cast<Eigen::Index>(layout.l_offset());
  for (Eigen::Index c = 0; c < M; ++c) {
    for (Eigen::Index r = c; r < M; ++r) p(k++) = model.q.L_raw(r, c);
  }
  if (layout.with_hyper) {
    const auto theta = model.kernel.log_params();
    for (double t : theta) p(k++) = t;
  }
  p(k) = model.mean_const;
  return p;
}

void unpack_params(VariationalModel& model, const ParamLayout& layout, const Vector& p) {
  const auto M = static_cast<Eigen::Index>(layout.n_inducing);
  model.q.m = p.segment(0, M);
  model.q.L_raw.setZero(M, M);
  Eigen::Index k = static_cast<Eigen::Index>(layout.l_offset());
  for (Eigen::Index c = 0; c < M; ++c) {
    for (Eigen::Index r = c; r < M; ++r) model.q.L_raw(r, c) = p(k++);
  }
  if (layout.with_hyper) {
    std::vector<double> theta(layout.n_kernel);
    for (auto& t : theta) t = p(k++);
    model.kernel.set_log_params(theta);
  }
  model.mean_const = p(k);
}

ElboResult elbo(const VariationalModel& model, std::span<const STInput> inputs,
                std::span<const double> y, double scale, bool with_grad, bool with_hyper_grad,
                unsigned threads) {
  if (inputs.empty()) throw InputError("elbo: empty batch");
  if (inputs.size() != y.size()) throw InputError("elbo: inputs and observations differ in length");
  const HybridKernel& kern = model.kernel;
  const auto& Z = model.inducing.Z;
  const auto M = static_cast<Eigen::Index>(Z.size());
  const std::size_t P = kern.n_log_params();
  const bool hyper = with_grad && with_hyper_grad;

  const Matrix Kuu = inducing_gram(kern, Z);
  Matrix L;
  try {
    L = cholesky_with_jitter(Kuu, model.config.jitter).L;
  } catch (const NumericalError& e) {
    throw NumericalError(std::string("elbo: inducing covariance: ") + e.what());
  }
  const auto Ltri = L.triangularView<Eigen::Lower>();
  const Matrix LS = model.q.L_S();
  const Vector& mq = model.q.m;
  const double kdiag = kern.diag();
  std::vector<double> kdiag_grad(P);
  kern.diag_grad(kdiag_grad);
  const bool gaussian = model.likelihood.kind == LikelihoodKind::gaussian;
  const double s2 = model.likelihood.noise_variance;
  const double log2pis2 = std::log(2.0 * std::numbers::pi * s2);

  const std::size_t n = inputs.size();
  const std::size_t n_chunks = (n + kChunk - 1) / kChunk;
  std::vector<ChunkAccum> acc(n_chunks);

  parallel_chunks(n_chunks, threads, [&](std::size_t c) {
    const std::size_t lo = c * kChunk;
    const std::size_t hi = std::min(n, lo + kChunk);
    const auto b = static_cast<Eigen::Index>(hi - lo);
    const auto X = inputs.subspan(lo, hi - lo);
    ChunkAccum& a = acc[c];
    const Matrix A = Ltri.solve(cross_gram(kern, Z, X));
    const Matrix Bm = LS.transpose() * A;  // L_S' A
    Vector gm(b), gv(b);
    for (Eigen::Index i = 0; i < b; ++i) {
      const double mi = model.mean_const + A.col(i).dot(mq);
      const double vi = std::max(0.0, kdiag - A.col(i).squaredNorm() + Bm.col(i).squaredNorm());
      const double yi = y[lo + static_cast<std::size_t>(i)];
      if (gaussian) {
        const double r = yi - mi;
        a.data += -0.5 * log2pis2 - 0.5 * (r * r + vi) / s2;
        gm(i) = r / s2;
        gv(i) = -0.5 / s2;
      } else {
        const double e = std::exp(mi + 0.5 * vi);
        a.data += yi * mi - e - std::lgamma(yi + 1.0);
        gm(i) = yi - e;
        gv(i) = -0.5 * e;
      }
    }
    a.data *= scale;
    if (!with_grad) return;
    gm *= scale;
    gv *= scale;
    a.grad_mean = gm.sum();
    a.grad_m = A * gm;
    const Matrix AG = A * gv.asDiagonal();
    a.W = AG * Bm.transpose();
    if (!hyper) return;
    // d/dA of the data term, then back through A = L^-1 Kuf.
    const Matrix Abar = mq * gm.transpose() + 2.0 * (LS * Bm - A) * gv.asDiagonal();
    const Matrix Kbar = L.transpose().triangularView<Eigen::Upper>().solve(Abar);
    a.Lbar = -Kbar * A.transpose();
    a.grad_theta.assign(P, 0.0);
    std::vector<double> g(P);
    for (Eigen::Index i = 0; i < b; ++i) {
      const STInput& xi = X[static_cast<std::size_t>(i)];
      for (Eigen::Index r = 0; r < M; ++r) {
        const double w = Kbar(r, i);
        kern.eval_with_grad(Z[static_cast<std::size_t>(r)], xi, g);
        for (std::size_t p = 0; p < P; ++p) a.grad_theta[p] += w * g[p];
      }
      for (std::size_t p = 0; p < P; ++p) a.grad_theta[p] += gv(i) * kdiag_grad[p];
    }
  });

  ElboResult res;
  for (const auto& a : acc) res.expected_loglik += a.data;
  res.kl = kl_qu_pu(model.q);
  res.elbo = res.expected_loglik - res.kl;
  if (!with_grad) return res;

  const ParamLayout layout = param_layout(model, with_hyper_grad);
  res.grad = Vector::Zero(static_cast<Eigen::Index>(layout.size()));
  Vector grad_m = -mq;
  Matrix W = Matrix::Zero(M, M);
  Matrix Lbar = Matrix::Zero(M, M);
  std::vector<double> grad_theta(P, 0.0);
  double grad_mean = 0.0;
  for (const auto& a : acc) {
    grad_mean += a.grad_mean;
    grad_m += a.grad_m;
    W += a.W;
    if (hyper) {
      Lbar += a.Lbar;
      for (std::size_t p = 0; p < P; ++p) grad_theta[p] += a.grad_theta[p];
    }
  }
  // d/dL_S: data term 2 W; KL term -L_S + diag(1 / L_ii).
  Matrix gLS = 2.0 * W - LS;
  for (Eigen::Index i = 0; i < M; ++i) gLS(i, i) += 1.0 / LS(i, i);

  res.grad.segment(0, M) = grad_m;
  Eigen::Index k = static_cast<Eigen::Index>(layout.l_offset());
  for (Eigen::Index c = 0; c < M; ++c) {
    for (Eigen::Index r = c; r < M; ++r) {
      res.grad(k++) = r == c ? gLS(r, c) * sigmoid(model.q.L_raw(r, c)) : gLS(r, c);
    }
  }
  if (hyper) {
    // Cholesky backward: Kuu_bar = L^-T Phi(L' Lbar) L^-1.
    Matrix Lb = Lbar.triangularView<Eigen::Lower>();
    Matrix Phi = (L.transpose() * Lb).triangularView<Eigen::Lower>();
    Phi.diagonal() *= 0.5;
    Matrix tmp = L.transpose().triangularView<Eigen::Upper>().solve(Phi);                             // L^-T Phi
    const Matrix Kuu_bar = L.transpose().triangularView<Eigen::Upper>().solve(tmp.transpose()).transpose();  // (L^-T (L^-T Phi)')'
    std::vector<double> g(P);
    for (Eigen::Index r = 0; r < M; ++r) {
      for (Eigen::Index c = 0; c <= r; ++c) {
        const double w = r == c ? Kuu_bar(r, c) : Kuu_bar(r, c) + Kuu_bar(c, r);
        kern.eval_with_grad(Z[static_cast<std::size_t>(r)], Z[static_cast<std::size_t>(c)], g);
        for (std::size_t p = 0; p < P; ++p) grad_theta[p] += w * g[p];
      }
    }
    for (std::size_t p = 0; p < P; ++p) res.grad(k++) = grad_theta[p];
  }
  res.grad(k) = grad_mean;
  return res;
}

VariationalState optimal_gaussian_q(const VariationalModel& model, std::span<const STInput> inputs,
                                    std::span<const double> y) {
  if (model.likelihood.kind != LikelihoodKind::gaussian) {
    throw InputError("optimal_gaussian_q requires the Gaussian likelihood");
  }
  const double s2 = model.likelihood.noise_variance;
  const Matrix Kuu = inducing_gram(model.kernel, model.inducing.Z);
  const Matrix L = cholesky_with_jitter(Kuu, model.config.jitter).L;
  const Matrix A =
      L.triangularView<Eigen::Lower>().solve(cross_gram(model.kernel, model.inducing.Z, inputs));
  const auto M = A.rows();
  Vector r(static_cast<Eigen::Index>(y.size()));
  for (std::size_t i = 0; i < y.size(); ++i) r(static_cast<Eigen::Index>(i)) = y[i] - model.mean_const;
  const Matrix prec = Matrix::Identity(M, M) + A * A.transpose() / s2;
  const Eigen::LLT<Matrix> llt(prec);
  const Matrix S = llt.solve(Matrix::Identity(M, M));
  VariationalState q;
  q.m = S * (A * r) / s2;
  const Matrix LS = Eigen::LLT<Matrix>(0.5 * (S + S.transpose())).matrixL();
  q.L_raw = LS;
  for (Eigen::Index i = 0; i < M; ++i) q.L_raw(i, i) = softplus_inverse(LS(i, i));
  return q;
}

// ---------------------------------------------------------------------------

namespace {

using BatchFn = std::function<void(std::span<const std::size_t>, std::vector<STInput>&,
                                   std::vector<double>&)>;

struct Adam {
  Vector m1, m2;
  long t = 0;
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

  explicit Adam(Eigen::Index n) : m1(Vector::Zero(n)), m2(Vector::Zero(n)) {}

  // Ascent step; returns the proposed parameters and updated moments.
  Vector propose(const Vector& p, const Vector& g, double lr, Adam& next) const {
    next.t = t + 1;
    next.m1 = kBeta1 * m1 + (1.0 - kBeta1) * g;
    next.m2 = kBeta2 * m2 + (1.0 - kBeta2) * g.cwiseProduct(g);
    const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(next.t));
    const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(next.t));
    return p + lr * ((next.m1 / c1).array() / ((next.m2 / c2).array().sqrt() + kEps)).matrix();
  }
};

void run_optimizer(VariationalModel& model, std::size_t n_train, const BatchFn& batch_fn,
                   FitLog* log) {
  const TrainConfig& cfg = model.config;
  FitLog local;
  FitLog& out = log ? *log : local;
  out = FitLog{};
  if (cfg.epochs == 0 || n_train == 0) return;
  const ParamLayout layout = param_layout(model, cfg.learn_hyperparameters);
  Vector p = pack_params(model, layout);
  Adam adam(p.size());
  double lr = cfg.learning_rate;
  const std::size_t B = std::min(cfg.batch_size, n_train);
  const bool full_batch = B >= n_train;
  std::vector<std::size_t> order(n_train);
  std::iota(order.begin(), order.end(), 0);
  std::vector<STInput> xb;
  std::vector<double> yb;
  VariationalModel last_good = model;

  auto evaluate = [&](const Vector& params, std::span<const std::size_t> idx, double scale) {
    VariationalModel trial = model;
    unpack_params(trial, layout, params);
    batch_fn(idx, xb, yb);
    return elbo(trial, xb, yb, scale, true, cfg.learn_hyperparameters, cfg.threads);
  };

  if (full_batch) {
    ElboResult cur;
    try {
      cur = evaluate(p, order, 1.0);
    } catch (const NumericalError& e) {
      throw TrainingDiverged(e.what(), last_good);
    }
    if (!std::isfinite(cur.elbo)) throw TrainingDiverged("initial ELBO is not finite", last_good);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
      bool accepted = false;
      while (!accepted && lr > 1e-12) {
        Adam next(p.size());
        const Vector trial = adam.propose(p, cur.grad, lr, next);
        ElboResult res;
        bool ok = true;
        try {
          res = evaluate(trial, order, 1.0);
          ok = std::isfinite(res.elbo) && res.grad.allFinite();
        } catch (const NumericalError&) {
          ok = false;
        }
        if (ok && res.elbo >= cur.elbo - 1e-9) {
          p = trial;
          cur = std::move(res);
          adam = std::move(next);
          accepted = true;
        } else {
          lr *= 0.5;
          ++out.rejected_steps;
        }
      }
      unpack_params(model, layout, p);
      last_good = model;
      out.epoch_elbo.push_back(cur.elbo);
    }
  } else {
    const double scale = static_cast<double>(n_train);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
      Rng rng(derive_seed(cfg.seed, kStreamBatches + 1000ULL * static_cast<std::uint64_t>(epoch)));
      for (std::size_t i = n_train; i > 1; --i) {
        const std::size_t j =
            std::min(i - 1, static_cast<std::size_t>(uniform01(rng) * static_cast<double>(i)));
        std::swap(order[i - 1], order[j]);
      }
      double sum = 0.0;
      std::size_t nb = 0;
      for (std::size_t lo = 0; lo < n_train; lo += B) {
        const std::size_t hi = std::min(n_train, lo + B);
        const std::span<const std::size_t> idx(order.data() + lo, hi - lo);
        ElboResult res;
        try {
          res = evaluate(p, idx, scale / static_cast<double>(hi - lo));
        } catch (const NumericalError& e) {
          throw TrainingDiverged(e.what(), last_good);
        }
        if (!std::isfinite(res.elbo) || !res.grad.allFinite()) {
          throw TrainingDiverged("ELBO became non-finite in epoch " + std::to_string(epoch),
                                 last_good);
        }
        Adam next(p.size());
        p = adam.propose(p, res.grad, lr, next);
        adam = std::move(next);
        sum += res.elbo;
        ++nb;
      }
      unpack_params(model, layout, p);
      last_good = model;
      out.epoch_elbo.push_back(sum / static_cast<double>(nb));
    }
  }
  unpack_params(model, layout, p);
  model.elbo_trace = out.epoch_elbo;
}

}  // namespace

VariationalModel init_model(const CubeTable& cubes, const GridSpec& grid,
                            std::span<const std::size_t> training, const TrainConfig& config) {
  config.validate();
  VariationalModel model;
  model.config = config;
  model.kernel = config.initial_kernel;
  model.inducing =
      select_inducing_impl(cubes, grid, training, config.n_hotspot, config.n_random,
                           config.anchors_per_box, config.seed);
  model.q = VariationalState::prior(model.inducing.size());
  double pos_sum = 0.0;
  std::size_t pos_n = 0, n_train = 0;
  auto visit = [&](std::size_t i) {
    ++n_train;
    if (cubes.y(i) > 0) {
      pos_sum += cubes.y(i);
      ++pos_n;
    }
  };
  if (training.empty()) {
    for (std::size_t i = 0; i < cubes.size(); ++i) visit(i);
  } else {
    for (std::size_t i : training) visit(i);
  }
  // log of the mean positive count; half a count spread over the training
  // cubes when nothing was observed.
  model.mean_const = pos_n > 0 ? std::log(pos_sum / static_cast<double>(pos_n))
                               : std::log(0.5 / static_cast<double>(std::max<std::size_t>(n_train, 1)));
  model.mean_const_init = model.mean_const;
  return model;
}

VariationalModel fit(const CubeTable& cubes, const GridSpec& grid, const TrainConfig& config,
                     std::span<const std::size_t> training, FitLog* log) {
  std::vector<std::size_t> all;
  if (training.empty()) {
    all.reserve(cubes.size());
    for (std::size_t i = 0; i < cubes.size(); ++i) {
      if (!config.observed_only || cubes.observed(i)) all.push_back(i);
    }
    training = all;
  }
  if (training.empty()) throw DataError("fit: no training cubes");
  VariationalModel model = init_model(cubes, grid, training, config);
  const BatchFn batch = [&](std::span<const std::size_t> idx, std::vector<STInput>& xb,
                            std::vector<double>& yb) {
    xb.resize(idx.size());
    yb.resize(idx.size());
    for (std::size_t k = 0; k < idx.size(); ++k) {
      const std::size_t i = training[idx[k]];
      xb[k] = cube_input(cubes, grid, i);
      yb[k] = cubes.y(i);
    }
  };
  run_optimizer(model, training.size(), batch, log);
  return model;
}

void fit_inputs(VariationalModel& model, std::span<const STInput> inputs, std::span<const double> y,
                FitLog* log) {
  if (inputs.size() != y.size()) throw InputError("fit_inputs: length mismatch");
  const BatchFn batch = [&](std::span<const std::size_t> idx, std::vector<STInput>& xb,
                            std::vector<double>& yb) {
    xb.resize(idx.size());
    yb.resize(idx.size());
    for (std::size_t k = 0; k < idx.size(); ++k) {
      xb[k] = inputs[idx[k]];
      yb[k] = y[idx[k]];
    }
  };
  run_optimizer(model, inputs.size(), batch, log);
}

// ---------------------------------------------------------------------------

std::vector<LatentMarginal> latent_marginals(const VariationalModel& model,
                                             std::span<const STInput> targets, unsigned threads) {
  const HybridKernel& kern = model.kernel;
  const Matrix Kuu = inducing_gram(kern, model.inducing.Z);
  const Matrix L = cholesky_with_jitter(Kuu, model.config.jitter).L;
  const Matrix LS = model.q.L_S();
  const double kdiag = kern.diag();
  std::vector<LatentMarginal> out(targets.size());
  const std::size_t n_chunks = (targets.size() + kChunk - 1) / kChunk;
  parallel_chunks(n_chunks, threads, [&](std::size_t c) {
    const std::size_t lo = c * kChunk;
    const std::size_t hi = std::min(targets.size(), lo + kChunk);
    const Matrix A = L.triangularView<Eigen::Lower>().solve(
        cross_gram(kern, model.inducing.Z, targets.subspan(lo, hi - lo)));
    const Matrix Bm = LS.transpose() * A;
    for (Eigen::Index i = 0; i < A.cols(); ++i) {
      auto& o = out[lo + static_cast<std::size_t>(i)];
      o.mean = model.mean_const + A.col(i).dot(model.q.m);
      o.var = std::max(0.0, kdiag - A.col(i).squaredNorm() + Bm.col(i).squaredNorm());
    }
  });
  return out;
}

std::vector<double> latent_sample_normals(const VariationalModel& model) {
  return standard_normals(derive_seed(model.config.seed, kStreamLatentSamples),
                          model.config.mc_samples);
}

PosteriorSummary summarize(const LatentMarginal& lm, std::span<const double> normals) {
  PosteriorSummary s;
  s.f_mean = lm.mean;
  s.f_var = lm.var;
  s.lambda = std::exp(lm.mean + 0.5 * lm.var);
  const double sd = std::sqrt(lm.var);
  double occ = 0.0;
  for (double z : normals) occ += -std::expm1(-std::exp(lm.mean + sd * z));
  occ /= static_cast<double>(normals.size());
  const double lo = std::numeric_limits<double>::min();
  s.p_occupied = std::clamp(occ, lo, std::nextafter(1.0, 0.0));
  return s;
}

std::vector<PosteriorSummary> predict(const VariationalModel& model,
                                      std::span<const STInput> targets, unsigned threads) {
  const auto marg = latent_marginals(model, targets, threads);
  const auto normals = latent_sample_normals(model);
  std::vector<PosteriorSummary> out;
  out.reserve(marg.size());
  for (const auto& lm : marg) out.push_back(summarize(lm, normals));
  return out;
}

// ---------------------------------------------------------------------------

nlohmann::json kernel_to_json(const HybridKernel& k) {
  auto params = [](const KernelParams& p) {
    return nlohmann::json{{"variance", p.variance}, {"lengthscales", p.lengthscales}};
  };
  return {{"spatial", params(k.spatial)},
          {"temporal", params(k.temporal)},
          {"covariate", params(k.covariate)},
          {"spatial_order", to_string(k.spatial_order)},
          {"temporal_order", to_string(k.temporal_order)}};
}

HybridKernel kernel_from_json(const nlohmann::json& j) {
  HybridKernel k;
  auto params = [](const nlohmann::json& p, KernelParams& out) {
    for (auto it = p.begin(); it != p.end(); ++it) {
      if (it.key() != "variance" && it.key() != "lengthscales") {
        throw ConfigError("kernel: unknown key '" + it.key() + "'");
      }
    }
    if (p.contains("variance")) out.variance = p.at("variance").get<double>();
    if (p.contains("lengthscales")) out.lengthscales = p.at("lengthscales").get<std::vector<double>>();
  };
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& key = it.key();
    if (key == "spatial") {
      params(*it, k.spatial);
    } else if (key == "temporal") {
      params(*it, k.temporal);
    } else if (key == "covariate") {
      params(*it, k.covariate);
    } else if (key == "spatial_order") {
      k.spatial_order = parse_matern_order(it->get<std::string>());
    } else if (key == "temporal_order") {
      k.temporal_order = parse_matern_order(it->get<std::string>());
    } else {
      throw ConfigError("kernel: unknown key '" + key + "'");
    }
  }
  return k;
}

nlohmann::json train_config_to_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"seed", c.seed},
          {"learn_hyperparameters", c.learn_hyperparameters},
          {"observed_only", c.observed_only},
          {"n_hotspot", c.n_hotspot},
          {"n_random", c.n_random},
          {"anchors_per_box", c.anchors_per_box},
          {"jitter", c.jitter},
          {"mc_samples", c.mc_samples},
          {"kernel", kernel_to_json(c.initial_kernel)}};
}

TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c) {
  if (!j.is_object()) throw ConfigError("train: expected an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& key = it.key();
    try {
      if (key == "learning_rate") c.learning_rate = it->get<double>();
      else if (key == "epochs") c.epochs = it->get<int>();
      else if (key == "batch_size") c.batch_size = it->get<std::size_t>();
      else if (key == "seed") c.seed = it->get<std::uint64_t>();
      else if (key == "learn_hyperparameters") c.learn_hyperparameters = it->get<bool>();
      else if (key == "observed_only") c.observed_only = it->get<bool>();
      else if (key == "n_hotspot") c.n_hotspot = it->get<std::size_t>();
      else if (key == "n_random") c.n_random = it->get<std::size_t>();
      else if (key == "anchors_per_box") c.anchors_per_box = it->get<std::size_t>();
      else if (key == "jitter") c.jitter = it->get<double>();
      else if (key == "mc_samples") c.mc_samples = it->get<std::size_t>();
      else if (key == "kernel") c.initial_kernel = kernel_from_json(*it);
      else throw ConfigError("unknown config key 'train." + key + "'");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("train." + key + ": " + e.what());
    }
  }
  return c;
}

namespace {

nlohmann::json matrix_to_json(const Matrix& m) {
  std::vector<double> flat(m.data(), m.data() + m.size());
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", flat}};
}

Matrix matrix_from_json(const nlohmann::json& j) {
  const auto rows = j.at("rows").get<Eigen::Index>();
  const auto cols = j.at("cols").get<Eigen::Index>();
  const auto flat = j.at("data").get<std::vector<double>>();
  if (static_cast<Eigen::Index>(flat.size()) != rows * cols) {
    throw InputError("model file: matrix data has the wrong size");
  }
  return Eigen::Map<const Matrix>(flat.data(), rows, cols);
}

}  // namespace

nlohmann::json model_to_json(const VariationalModel& model) {
  nlohmann::json z = nlohmann::json::array();
  for (std::size_t j = 0; j < model.inducing.size(); ++j) {
    const auto& in = model.inducing.Z[j];
    z.push_back({{"box", model.inducing.boxes[j].index},
                 {"day", model.inducing.anchor_days[j]},
                 {"s", in.s},
                 {"t", in.t},
                 {"x", in.x}});
  }
  std::vector<double> m(model.q.m.data(), model.q.m.data() + model.q.m.size());
  return {{"format_version", kModelFormatVersion},
          {"inducing",
           {{"points", z},
            {"n_hotspot", model.inducing.n_hotspot},
            {"n_random", model.inducing.n_random},
            {"anchors_per_box", model.inducing.anchors_per_box},
            {"seed", model.inducing.seed}}},
          {"variational", {{"m", m}, {"L_raw", matrix_to_json(model.q.L_raw)}}},
          {"kernel", kernel_to_json(model.kernel)},
          {"mean_const", model.mean_const},
          {"mean_const_init", model.mean_const_init},
          {"likelihood",
           {{"kind", model.likelihood.kind == LikelihoodKind::poisson ? "poisson" : "gaussian"},
            {"noise_variance", model.likelihood.noise_variance}}},
          {"training", train_config_to_json(model.config)},
          {"elbo_trace", model.elbo_trace}};
}

VariationalModel model_from_json(const nlohmann::json& j) {
  VariationalModel model;
  try {
    const int version = j.at("format_version").get<int>();
    if (version != kModelFormatVersion) {
      throw InputError("model file: unsupported format_version " + std::to_string(version));
    }
    const auto& ind = j.at("inducing");
    for (const auto& p : ind.at("points")) {
      STInput in;
      in.s = p.at("s").get<std::array<double, 2>>();
      in.t = p.at("t").get<double>();
      in.x = p.at("x").get<Covariates>();
      model.inducing.Z.push_back(in);
      model.inducing.boxes.push_back(BoxId{p.at("box").get<std::int32_t>()});
      model.inducing.anchor_days.push_back(p.at("day").get<std::int32_t>());
    }
    model.inducing.n_hotspot = ind.at("n_hotspot").get<std::size_t>();
    model.inducing.n_random = ind.at("n_random").get<std::size_t>();
    model.inducing.anchors_per_box = ind.at("anchors_per_box").get<std::size_t>();
    model.inducing.seed = ind.at("seed").get<std::uint64_t>();
    const auto m = j.at("variational").at("m").get<std::vector<double>>();
    model.q.m = Eigen::Map<const Vector>(m.data(), static_cast<Eigen::Index>(m.size()));
    model.q.L_raw = matrix_from_json(j.at("variational").at("L_raw"));
    model.kernel = kernel_from_json(j.at("kernel"));
    model.mean_const = j.at("mean_const").get<double>();
    model.mean_const_init = j.at("mean_const_init").get<double>();
    const auto& lik = j.at("likelihood");
    model.likelihood.kind =
        lik.at("kind").get<std::string>() == "gaussian" ? LikelihoodKind::gaussian : LikelihoodKind::poisson;
    model.likelihood.noise_variance = lik.at("noise_variance").get<double>();
    model.config = train_config_from_json(j.at("training"));
    model.elbo_trace = j.at("elbo_trace").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("model file: ") + e.what());
  }
  model.validate();
  return model;
}

}  // namespace tentgp
