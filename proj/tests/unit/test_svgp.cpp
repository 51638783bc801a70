#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>

#include <Eigen/Dense>

#include "tentgp/error.hpp"
#include "tentgp/svgp.hpp"
#include "tentgp/synth.hpp"

using namespace tentgp;

namespace {

// Gauss-Hermite rule (physicists' weight e^{-x^2}) via Golub-Welsch.
std::pair<Eigen::VectorXd, Eigen::VectorXd> gauss_hermite(int n) {
  Eigen::MatrixXd J = Eigen::MatrixXd::Zero(n, n);
  for (int i = 1; i < n; ++i) J(i, i - 1) = J(i - 1, i) = std::sqrt(i / 2.0);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(J);
  const Eigen::VectorXd w = std::sqrt(std::numbers::pi) * es.eigenvectors().row(0).transpose().array().square();
  return {es.eigenvalues(), w};
}

double quadrature_loglik(std::int64_t y, double m, double v) {
  static const auto [x, w] = gauss_hermite(50);
  double s = 0.0;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double f = m + std::sqrt(2.0 * v) * x(i);
    s += w(i) * (static_cast<double>(y) * f - std::exp(f) - std::lgamma(static_cast<double>(y) + 1.0));
  }
  return s / std::sqrt(std::numbers::pi);
}

STInput at(double sx, double sy, double t) {
  STInput in;
  in.s = {sx, sy};
  in.t = t;
  return in;
}

VariationalModel small_model(std::vector<STInput> z) {
  VariationalModel m;
  m.kernel = HybridKernel{{0.5, {0.4, 0.4}}, {0.3, {5.0}}, {0.2, std::vector<double>(kNumCovariates, 2.0)}};
  m.inducing.Z = std::move(z);
  for (std::size_t i = 0; i < m.inducing.Z.size(); ++i) {
    m.inducing.boxes.push_back(BoxId{static_cast<std::int32_t>(i)});
    m.inducing.anchor_days.push_back(static_cast<std::int32_t>(m.inducing.Z[i].t));
  }
  m.q = VariationalState::prior(m.inducing.size());
  m.mean_const = -0.2;
  return m;
}

SynthWorld small_world(std::uint64_t seed) {
  SynthConfig c;
  c.n_rows = 5;
  c.n_cols = 5;
  c.n_days = 30;
  c.seed = seed;
  return generate(c);
}

}  // namespace

TEST_CASE("expected Poisson log-likelihood") {
  CHECK(expected_poisson_loglik(0, 0.0, 0.0) == doctest::Approx(-1.0));
  CHECK(expected_poisson_loglik(2, 0.5, 0.3) == doctest::Approx(1.0 - std::exp(0.65) - std::log(2.0)));
  CHECK(expected_poisson_loglik(2, 0.5, 0.3) == doctest::Approx(-1.6087).epsilon(1e-4));
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> um(-2, 2), uv(0, 1.5);
  for (int i = 0; i < 50; ++i) {
    const std::int64_t y = i % 7;
    const double m = um(rng), v = uv(rng);
    CHECK(std::abs(expected_poisson_loglik(y, m, v) - quadrature_loglik(y, m, v)) <= 1e-8);
    // Concave in m.
    const double h = 1e-3;
    CHECK(expected_poisson_loglik(y, m + h, v) + expected_poisson_loglik(y, m - h, v) -
              2 * expected_poisson_loglik(y, m, v) <
          0.0);
  }
}

TEST_CASE("KL divergences") {
  Eigen::VectorXd m1(1), m0(1);
  m1 << 1.0;
  m0 << 0.0;
  const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(1, 1);
  CHECK(kl_gaussian(m1, I, m0, I) == doctest::Approx(0.5));
  CHECK(kl_qu_pu(VariationalState::prior(4)) == doctest::Approx(0.0).scale(1));
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n;
  for (int r = 0; r < 10; ++r) {
    Eigen::MatrixXd A(3, 3), B(3, 3);
    for (int i = 0; i < 9; ++i) {
      A.data()[i] = n(rng);
      B.data()[i] = n(rng);
    }
    const Eigen::MatrixXd Sa = A * A.transpose() + 0.1 * Eigen::MatrixXd::Identity(3, 3);
    const Eigen::MatrixXd Sb = B * B.transpose() + 0.1 * Eigen::MatrixXd::Identity(3, 3);
    Eigen::VectorXd ma(3), mb(3);
    ma << n(rng), n(rng), n(rng);
    mb << n(rng), n(rng), n(rng);
    CHECK(kl_gaussian(ma, Sa, mb, Sb) >= 0.0);
  }
  // Whitened KL equals the general formula against N(0, I).
  VariationalState q = VariationalState::prior(3);
  q.m << 0.3, -0.2, 0.5;
  q.L_raw(1, 0) = 0.4;
  q.L_raw(2, 2) = 0.1;
  const Eigen::MatrixXd L = q.L_S();
  CHECK(kl_qu_pu(q) == doctest::Approx(kl_gaussian(q.m, L * L.transpose(), Eigen::VectorXd::Zero(3),
                                                   Eigen::MatrixXd::Identity(3, 3))));
}

TEST_CASE("rank_hotspots") {
  const std::vector<std::int64_t> totals{3, 9, 0, 9, 1};
  const auto two = rank_hotspots(totals, 2, 0, 0);
  REQUIRE(two.size() == 2);
  CHECK(two[0] == BoxId{1});
  CHECK(two[1] == BoxId{3});
  const auto all = rank_hotspots(totals, 5, 0, 0);
  CHECK(all == std::vector<BoxId>{{1}, {3}, {0}, {4}, {2}});
  const auto mixed = rank_hotspots(totals, 1, 2, 9);
  REQUIRE(mixed.size() == 3);
  CHECK(mixed[0] == BoxId{1});
  CHECK(mixed[1] != BoxId{1});
  CHECK(mixed[2] != mixed[1]);
  CHECK(mixed == rank_hotspots(totals, 1, 2, 9));
  CHECK_THROWS_AS(rank_hotspots(totals, 4, 2, 0), ConfigError);
}

TEST_CASE("default inducing set has 700 points") {
  const GridSpec g({37.70, -122.50}, 0.1, 37.70, 30, 30, std::vector<bool>(900, true));
  const CubeTable c = build_cubes({}, g, {make_date(2020, 1, 1), 10});
  const TrainConfig tc;
  const auto z = select_inducing(c, g, tc.n_hotspot, tc.n_random, 0);
  CHECK(z.size() == 700);
  const auto z3 = select_inducing(c, g, 10, 0, 0, 3);
  CHECK(z3.size() == 30);
  CHECK(z3.boxes[0] == z3.boxes[2]);
  CHECK(z3.anchor_days[0] != z3.anchor_days[1]);
}

TEST_CASE("single-cube ELBO reduces to the closed form") {
  auto m = small_model({at(0, 0, 0), at(0.3, 0.1, 2)});
  m.config.jitter = 0.0;
  const std::vector<STInput> x{at(0.1, 0.2, 1)};
  const std::vector<double> y{0.0};
  const double v = m.kernel.diag();
  const auto r = elbo(m, x, y, 3.0, false);
  CHECK(r.kl == doctest::Approx(0.0).scale(1));
  CHECK(r.elbo == doctest::Approx(-3.0 * std::exp(m.mean_const + 0.5 * v)).epsilon(1e-9));
}

TEST_CASE("ELBO gradient matches finite differences") {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n;
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<STInput> z, x;
  for (int i = 0; i < 4; ++i) z.push_back(at(u(rng), u(rng), 10 * u(rng)));
  std::vector<double> y;
  for (int i = 0; i < 20; ++i) {
    auto in = at(u(rng), u(rng), 10 * u(rng));
    for (auto& c : in.x) c = n(rng);
    x.push_back(in);
    y.push_back(static_cast<double>(static_cast<int>(3 * u(rng))));
  }
  auto m = small_model(z);
  m.config.jitter = 1e-8;
  for (Eigen::Index i = 0; i < m.q.m.size(); ++i) m.q.m(i) = 0.3 * n(rng);
  m.q.L_raw(2, 1) = 0.2;
  const auto layout = param_layout(m, true);
  const Eigen::VectorXd p0 = pack_params(m, layout);
  const auto r = elbo(m, x, y, 2.0, true);
  REQUIRE(r.grad.size() == p0.size());
  Eigen::VectorXd fd(p0.size());
  for (Eigen::Index k = 0; k < p0.size(); ++k) {
    auto f = [&](double h) {
      auto mm = m;
      Eigen::VectorXd p = p0;
      p(k) += h;
      unpack_params(mm, layout, p);
      return elbo(mm, x, y, 2.0, false).elbo;
    };
    fd(k) = (f(1e-5) - f(-1e-5)) / 2e-5;
  }
  CHECK((r.grad - fd).norm() / fd.norm() <= 1e-4);
}

TEST_CASE("Gaussian hook with inducing points at every input matches the dense GP") {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<STInput> x;
  for (int i = 0; i < 25; ++i) x.push_back(at(u(rng), u(rng), 8 * u(rng)));
  auto m = small_model(x);
  m.config.jitter = 0.0;
  m.likelihood.kind = LikelihoodKind::gaussian;
  m.likelihood.noise_variance = 0.25;
  std::vector<double> y;
  for (int i = 0; i < 25; ++i) y.push_back(std::sin(3 * x[i].s[0]) + 0.1 * x[i].t);
  m.q = optimal_gaussian_q(m, x, y);
  const auto dense = dense_gp_oracle(std::span<const STInput>(x), m.kernel,
                                     Eigen::Map<const Eigen::VectorXd>(y.data(), 25), 0.25, m.mean_const);
  CHECK(elbo(m, x, y, 1.0, false).elbo == doctest::Approx(dense.log_marginal).epsilon(1e-9));
  // Fewer inducing points give a lower bound.
  auto sparse = small_model({x[0], x[5], x[10]});
  sparse.config.jitter = 0.0;
  sparse.likelihood = m.likelihood;
  sparse.q = optimal_gaussian_q(sparse, x, y);
  CHECK(elbo(sparse, x, y, 1.0, false).elbo < dense.log_marginal);
}

TEST_CASE("fit") {
  const SynthWorld w = small_world(21);
  TrainConfig tc;
  tc.n_hotspot = 8;
  tc.n_random = 4;
  tc.epochs = 0;
  SUBCASE("zero epochs returns the initial model") {
    const auto m = fit(w.cubes, w.grid, tc);
    const auto init = init_model(w.cubes, w.grid, {}, tc);
    CHECK(m.q == VariationalState::prior(12));
    CHECK(m.mean_const == init.mean_const);
    double pos = 0.0, npos = 0.0;
    for (std::size_t i = 0; i < w.cubes.size(); ++i)
      if (w.cubes.y(i) > 0) {
        pos += w.cubes.y(i);
        npos += 1;
      }
    CHECK(m.mean_const == doctest::Approx(std::log(pos / npos)));
    CHECK(m.kernel == tc.initial_kernel);
  }
  SUBCASE("deterministic and non-decreasing in full-batch mode") {
    tc.epochs = 15;
    tc.batch_size = w.cubes.size();
    tc.learn_hyperparameters = false;
    FitLog a, b;
    const auto m1 = fit(w.cubes, w.grid, tc, {}, &a);
    const auto m2 = fit(w.cubes, w.grid, tc, {}, &b);
    CHECK(a.epoch_elbo == b.epoch_elbo);
    CHECK(m1.q == m2.q);
    for (std::size_t e = 1; e < a.epoch_elbo.size(); ++e) CHECK(a.epoch_elbo[e] >= a.epoch_elbo[e - 1] - 1e-9);
    CHECK(a.epoch_elbo.back() > a.epoch_elbo.front());
  }
  SUBCASE("predictions") {
    tc.epochs = 10;
    const auto m = fit(w.cubes, w.grid, tc);
    const std::size_t last = w.cubes.index(BoxId{3}, w.cubes.n_days() - 1);
    STInput in = cube_input(w.cubes, w.grid, last);
    STInput ahead = in;
    ahead.t += 30;
    const auto lm = latent_marginals(m, std::vector<STInput>{in, ahead});
    CHECK(lm[1].var > lm[0].var);
    // Permuting targets permutes outputs.
    std::vector<STInput> ts;
    for (std::size_t i = 0; i < 6; ++i) ts.push_back(cube_input(w.cubes, w.grid, i * 7));
    const auto fwd = predict(m, ts);
    std::vector<STInput> rev(ts.rbegin(), ts.rend());
    const auto bwd = predict(m, rev);
    for (std::size_t i = 0; i < ts.size(); ++i) {
      CHECK(fwd[i].f_mean == bwd[ts.size() - 1 - i].f_mean);
      CHECK(fwd[i].f_var == bwd[ts.size() - 1 - i].f_var);
      CHECK(fwd[i].f_var >= 0.0);
    }
  }
}

TEST_CASE("posterior summary") {
  const auto s = summarize({0.0, 0.0}, std::vector<double>(16, 0.3));
  CHECK(s.lambda == doctest::Approx(1.0));
  CHECK(s.p_occupied == doctest::Approx(1.0 - std::exp(-1.0)));
  CHECK(s.p_occupied == doctest::Approx(0.6321).epsilon(1e-4));
  const auto t = summarize({0.2, 0.5}, std::vector<double>{0.0});
  CHECK(t.lambda == doctest::Approx(std::exp(0.45)));
}

TEST_CASE("model JSON round trip") {
  const SynthWorld w = small_world(5);
  TrainConfig tc;
  tc.n_hotspot = 6;
  tc.n_random = 3;
  tc.epochs = 3;
  const auto m = fit(w.cubes, w.grid, tc);
  const auto j = model_to_json(m);
  CHECK(j.at("format_version") == kModelFormatVersion);
  const auto back = model_from_json(nlohmann::json::parse(j.dump()));
  std::vector<STInput> x;
  std::vector<double> y;
  for (std::size_t i = 0; i < 50; ++i) {
    x.push_back(cube_input(w.cubes, w.grid, i));
    y.push_back(w.cubes.y(i));
  }
  CHECK(elbo(back, x, y, 1.0, false).elbo == elbo(m, x, y, 1.0, false).elbo);
  auto bad = j;
  bad["format_version"] = 99;
  CHECK_THROWS_AS(model_from_json(bad), InputError);
}

TEST_CASE("training config validation") {
  TrainConfig tc;
  CHECK_NOTHROW(tc.validate());
  tc.learning_rate = 0.0;
  CHECK_THROWS_AS(tc.validate(), ConfigError);
  CHECK_THROWS_AS(train_config_from_json({{"epoch", 3}}, TrainConfig{}), ConfigError);
  CHECK(train_config_from_json({{"epochs", 3}, {"anchors_per_box", 2}}, TrainConfig{}).anchors_per_box == 2);
}
