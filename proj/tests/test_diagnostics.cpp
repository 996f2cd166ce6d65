#include "doctest.h"

#include "mfip/diagnostics.hpp"
#include "mfip/errors.hpp"
#include "mfip/gaussian.hpp"
#include "mfip/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

using namespace mfip;

namespace {

std::vector<double> draw(CounterRng& rng, std::size_t m, double mean, double sd) {
  std::vector<double> v(m);
  for (auto& x : v) x = mean + sd * rng.normal();
  return v;
}

EnsembleState ensemble(const ProductGaussian& law, std::size_t m, std::uint64_t seed) {
  return sample_initial(law, law.dims(), m, seed);
}

// Brute-force W2 between empirical measures: midpoint rule on a fine u grid.
double w2_brute(std::vector<double> a, std::vector<double> b) {
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  const std::size_t N = 200000;
  double s = 0;
  for (std::size_t k = 0; k < N; ++k) {
    const double u = (k + 0.5) / N;
    const double d = a[static_cast<std::size_t>(u * a.size())] - b[static_cast<std::size_t>(u * b.size())];
    s += d * d;
  }
  return std::sqrt(s / N);
}

// Marginal of a joint Gaussian on the scalar coordinates in v.
GaussianState sub_gaussian(const GaussianState& g, const std::vector<std::size_t>& v) {
  GaussianState out{Vec(v.size()), Mat(v.size(), v.size())};
  for (std::size_t a = 0; a < v.size(); ++a) {
    out.mean(a) = g.mean(v[a]);
    for (std::size_t b = 0; b < v.size(); ++b) out.cov(a, b) = g.cov(v[a], v[b]);
  }
  return out;
}

Mat random_spd(CounterRng& rng, std::size_t n, double min_eig) {
  Mat B(n, n);
  for (auto& x : B.reshaped()) x = rng.normal();
  Mat S = B * B.transpose() / static_cast<double>(n);
  return S + (min_eig - Eigen::SelfAdjointEigenSolver<Mat>(S).eigenvalues().minCoeff()) * Mat::Identity(n, n) +
         rng.uniform() * Mat::Identity(n, n);
}

DriftSpec linear_spec(const Mat& A) { return DriftSpec::linear(A); }

}  // namespace

TEST_CASE("empirical_w2_1d") {
  const std::vector<double> a{0, 1}, b{1, 2}, c{0, 2}, e{1, 1};
  CHECK(empirical_w2_1d(a, a) == 0.0);
  CHECK(empirical_w2_1d(a, b) == doctest::Approx(1.0));
  CHECK(empirical_w2_1d(c, e) == doctest::Approx(1.0));
  CHECK_THROWS_AS(empirical_w2_1d(std::vector<double>{}, a), InvalidArgument);

  // Unequal sizes: repeating every point leaves the measure unchanged.
  const std::vector<double> x{0, 1, 3}, xx{3, 0, 1, 1, 0, 3};
  CHECK(empirical_w2_1d(x, xx) == 0.0);
  CHECK(empirical_w2_1d(std::vector<double>{0, 1}, std::vector<double>{0.5}) == doctest::Approx(0.5));

  CounterRng rng(3, RngStream::kTest, 0, 0);
  for (int trial = 0; trial < 5; ++trial) {
    const auto p = draw(rng, 37, 0, 1), q = draw(rng, 53, 0.5, 2);
    CHECK(empirical_w2_1d(p, q) == doctest::Approx(w2_brute(p, q)).epsilon(1e-3));
  }
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t m = 1 + trial % 17;
    const auto p = draw(rng, m, rng.normal(), 1), q = draw(rng, m, rng.normal(), 2), r = draw(rng, m, 0, 0.5);
    CHECK(empirical_w2_1d(p, r) <= empirical_w2_1d(p, q) + empirical_w2_1d(q, r) + 1e-12);
  }
}

TEST_CASE("ks statistic and p-value") {
  const std::vector<double> a{1, 2, 3}, b{4, 5, 6};
  CHECK(ks_statistic(a, b) == 1.0);
  CHECK(ks_statistic(a, a) == 0.0);
  CHECK(ks_statistic(std::vector<double>{1, 3}, std::vector<double>{2}) == doctest::Approx(0.5));
  CHECK(ks_pvalue(0.0, 100, 100) == 1.0);
  CHECK(ks_pvalue(0.5, 100, 100) < 1e-9);
  // Kolmogorov tail at lambda = 1.36 is about 0.05.
  const double ne = 5000.0;
  const double D = 1.3581 / (std::sqrt(ne) + 0.12 + 0.11 / std::sqrt(ne));
  CHECK(ks_pvalue(D, 10000, 10000) == doctest::Approx(0.05).epsilon(1e-3));
}

TEST_CASE("jackknife of a mean is sd / sqrt(m)") {
  CounterRng rng(4, RngStream::kTest, 0, 0);
  const auto v = draw(rng, 50, 1, 3);
  const double sum = std::accumulate(v.begin(), v.end(), 0.0);
  std::vector<double> leave;
  for (double x : v) leave.push_back((sum - x) / 49.0);
  const double mean = sum / 50;
  double ss = 0;
  for (double x : v) ss += (x - mean) * (x - mean);
  CHECK(jackknife_std_err(leave) == doctest::Approx(std::sqrt(ss / 49 / 50)));
  CHECK(jackknife_std_err(std::vector<double>{1.0}) == 0.0);
}

TEST_CASE("w_k_marginal_distance") {
  const std::size_t n = 4;
  Vec m0(4), m1(4), v0(4), v1(4);
  m0 << 0, 1, -1, 0.5;
  m1 << 0.5, 1, -0.2, 0;
  v0 << 1, 0.5, 2, 1;
  v1 << 1, 1, 1, 0.25;
  ProductGaussian p0, p1;
  for (std::size_t i = 0; i < n; ++i) {
    p0.means.push_back(Vec::Constant(1, m0(i)));
    p0.covs.push_back(Mat::Constant(1, 1, v0(i)));
    p1.means.push_back(Vec::Constant(1, m1(i)));
    p1.covs.push_back(Mat::Constant(1, 1, v1(i)));
  }
  const auto e0 = ensemble(p0, 20000, 1), e1 = ensemble(p1, 20000, 2);

  const auto self = w_k_marginal_distance(e0, e0, 2);
  CHECK(self.value == 0.0);
  CHECK(self.std_err == 0.0);
  CHECK_FALSE(self.lower_bound);

  SUBCASE("k = 1 is the average of per-coordinate distances") {
    double avg = 0;
    for (Eigen::Index c = 0; c < 4; ++c) {
      std::vector<double> a(20000), b(20000);
      for (Eigen::Index k = 0; k < 20000; ++k) {
        a[k] = e0.particles(k, c);
        b[k] = e1.particles(k, c);
      }
      avg += std::pow(empirical_w2_1d(a, b), 2) / 4;
    }
    CHECK(w_k_marginal_distance(e0, e1, 1).value == doctest::Approx(avg).epsilon(1e-12));
  }
  SUBCASE("product Gaussians: blockwise Bures distances") {
    double per_coord = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const double w = w2_gaussian(GaussianState{p0.means[i], p0.covs[i]}, GaussianState{p1.means[i], p1.covs[i]});
      per_coord += w * w;
    }
    for (std::size_t k = 1; k <= n; ++k) {
      const auto s = w_k_marginal_distance(e0, e1, k);
      const double expected = per_coord * static_cast<double>(k) / static_cast<double>(n);
      CHECK(s.std_err > 0);
      CHECK(std::abs(s.value - expected) <= 2 * s.std_err);
    }
    // Random subsets instead of enumeration.
    const auto sampled = w_k_marginal_distance(e0, e1, 2, 4, 9);
    CHECK(std::abs(sampled.value - per_coord / 2) <= 3 * sampled.std_err);
  }
  SUBCASE("errors and flags") {
    CHECK_THROWS_AS(w_k_marginal_distance(e0, e1, 5), InvalidArgument);
    CHECK_THROWS_AS(w_k_marginal_distance(e0, e1, 0), InvalidArgument);
    const auto pd = ProductGaussian::isotropic(Vec::Zero(4), 1.0, 2);
    const auto d2 = ensemble(pd, 500, 3);
    CHECK(w_k_marginal_distance(d2, ensemble(pd, 500, 4), 1).lower_bound);
    CHECK_THROWS_AS(w_k_marginal_distance(d2, e0, 1), InvalidArgument);
  }
}

TEST_CASE("subadditivity on linear-Gaussian laws") {
  CounterRng rng(11, RngStream::kTest, 0, 0);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 2 + static_cast<std::size_t>(trial % 4);
    const Mat A = -random_spd(rng, n, 0.2);
    Vec mean(n);
    for (auto& x : mean) x = rng.normal();
    const auto mu0 = ProductGaussian::isotropic(mean, 0.5 + rng.uniform());
    const double T = 0.5 + 1.5 * rng.uniform();
    const GaussianState mu = ip_moments_exact(A, mu0, T).joint();
    const auto rho0 = mu0.joint();
    const GaussianState rho = ou_moments_exact(A, rho0.mean, rho0.cov, T);
    const double full = std::pow(w2_gaussian(mu, rho), 2);
    for (std::size_t k = 1; k <= n; ++k) {
      // All k-subsets; coordinate order does not change W2.
      std::vector<int> pick(n, 0);
      std::fill(pick.end() - static_cast<long>(k), pick.end(), 1);
      double total = 0;
      std::size_t count = 0;
      do {
        std::vector<std::size_t> v;
        for (std::size_t i = 0; i < n; ++i)
          if (pick[i]) v.push_back(i);
        total += std::pow(w2_gaussian(sub_gaussian(mu, v), sub_gaussian(rho, v)), 2);
        ++count;
      } while (std::next_permutation(pick.begin(), pick.end()));
      CHECK(total / static_cast<double>(count) <= 2.0 * k / n * full * (1 + 1e-9) + 1e-14);
    }
  }
}

TEST_CASE("entropy_growth_rate_mc") {
  SUBCASE("separable drift has zero rate") {
    Mat A = Mat::Zero(3, 3);
    A.diagonal() << -1, -2, -0.5;
    const auto e = ensemble(ProductGaussian::isotropic(Vec::Zero(3), 1.0), 1000, 5);
    const auto s = entropy_growth_rate_mc(e, linear_spec(A));
    CHECK(std::abs(s.value) <= 1e-14);
    CHECK(s.std_err <= 1e-14);
  }
  SUBCASE("off-diagonal 0.5 at the product N(0,1) law") {
    Mat A(2, 2);
    A << -1, 0.5, 0.5, -1;
    const auto e = ensemble(ProductGaussian::isotropic(Vec::Zero(2), 1.0), 100000, 6);
    const auto s = entropy_growth_rate_mc(e, linear_spec(A));
    CHECK(s.m_used == 100000);
    CHECK(std::abs(s.value - 0.125) <= 3 * s.std_err);
  }
  SUBCASE("mean-field K2(x, y) = y with n = 3") {
    const auto spec = DriftSpec::pairwise(SiteKernel::zero(1),
                                          PairKernel::affine(Mat::Zero(1, 1), Mat::Identity(1, 1), Vec::Zero(1)),
                                          mean_field_matrix(3));
    const auto e = ensemble(ProductGaussian::isotropic(Vec::Zero(3), 1.0), 100000, 7);
    const auto s = entropy_growth_rate_mc(e, spec);
    CHECK(std::abs(s.value - 0.375) <= 3 * s.std_err);
  }
  SUBCASE("matches the Gaussian oracle on random linear specs") {
    CounterRng rng(12, RngStream::kTest, 0, 0);
    int outside = 0;
    for (int trial = 0; trial < 20; ++trial) {
      const std::size_t n = 2 + static_cast<std::size_t>(trial % 4);
      Mat A(n, n);
      for (auto& x : A.reshaped()) x = rng.normal();
      Vec mean(n);
      for (auto& x : mean) x = rng.normal();
      ProductGaussian law;
      for (std::size_t i = 0; i < n; ++i) {
        law.means.push_back(Vec::Constant(1, mean(i)));
        law.covs.push_back(Mat::Constant(1, 1, 0.3 + 2 * rng.uniform()));
      }
      const auto s = entropy_growth_rate_mc(ensemble(law, 20000, 100 + trial), linear_spec(A));
      const double exact = entropy_growth_rate_gaussian(law, A);
      if (std::abs(s.value - exact) > 3 * s.std_err) ++outside;
      CHECK(std::abs(s.value - exact) <= 4 * s.std_err);
    }
    // Two or more 3-sigma misses in 20 would be a 2% event.
    CHECK(outside <= 1);
  }
  SUBCASE("perturbed coordinate drifts grow faster") {
    Mat A(2, 2);
    A << -1, 0.5, 0.5, -1;
    const auto spec = linear_spec(A);
    const auto e = ensemble(ProductGaussian::isotropic(Vec::Zero(2), 1.0), 50000, 8);
    const auto base = entropy_growth_rate_mc(e, spec);
    CounterRng rng(13, RngStream::kTest, 0, 0);
    for (int trial = 0; trial < 10; ++trial) {
      Vec a(2), c(2);
      for (int i = 0; i < 2; ++i) {
        a(i) = rng.normal();
        c(i) = rng.normal();
      }
      const CoordinateField g = [a, c](std::size_t i, std::span<const double> x, std::span<double> out) {
        out[0] = a(static_cast<Eigen::Index>(i)) * x[0] + c(static_cast<Eigen::Index>(i));
      };
      // E g^i(X^i)^2 under N(0, 1).
      const double Eg2 = a.squaredNorm() + c.squaredNorm();
      for (double eps : {-1.0, -0.5, 0.5, 1.0}) {
        const double gap = 0.25 * eps * eps * Eg2;
        const auto pert = entropy_growth_rate_mc(e, spec, g, eps);
        const auto diff = entropy_growth_gap_mc(e, spec, g, eps);
        CHECK(pert.value - base.value == doctest::Approx(diff.value).epsilon(1e-9));
        CHECK(pert.value - base.value >= gap - 3 * diff.std_err);
        CHECK(std::abs(diff.value - gap) <= 4 * diff.std_err);
      }
    }
  }
  CHECK_THROWS_AS(entropy_growth_rate_mc(ensemble(ProductGaussian::isotropic(Vec::Zero(2), 1.0), 99, 1),
                                         linear_spec(-Mat::Identity(2, 2))),
                  InvalidArgument);
}

TEST_CASE("poincare_constant_bound") {
  CHECK(poincare_constant_bound(1.7, 2.0, 0.0) == 1.7);
  CHECK(poincare_constant_bound(1.0, 1.0, std::log(2.0) / 2) == doctest::Approx(3.0).epsilon(1e-14));
  CHECK(poincare_constant_bound(1.0, 0.0, 2.0) == 5.0);
  CHECK(poincare_constant_bound(1.0, 1e-6, 2.0) == doctest::Approx(5.0).epsilon(1e-9));
}

TEST_CASE("proximity_bound") {
  BoundInputs in;
  in.L = 1.3;
  in.c0 = 0.8;
  in.T = 1.5;
  CHECK_THROWS_AS(proximity_bound(in, [](double) { return 1.0; }), InvalidArgument);
  in.h0 = 0.25;
  CHECK(proximity_bound(in, [](double) { return 0.0; }) == 0.25);

  // Constant G: int_0^T c_t dt = c0 (e^{aT} - 1)/a + ((e^{aT} - 1)/a - T)/L^2 with a = 2L^2.
  const double G = 0.7, a = 2 * in.L * in.L;
  const double integral = in.c0 * std::expm1(a * in.T) / a + (std::expm1(a * in.T) / a - in.T) / (in.L * in.L);
  CHECK(std::abs(proximity_bound(in, [G](double) { return G; }) - (0.25 + 0.25 * G * integral)) <= 1e-8);

  std::vector<double> times, vals;
  for (int s = 0; s <= 3000; ++s) {
    times.push_back(in.T * s / 3000.0);
    vals.push_back(G);
  }
  CHECK(proximity_bound(in, times, vals) == doctest::Approx(0.25 + 0.25 * G * integral).epsilon(1e-5));
  CHECK_THROWS_AS(proximity_bound(in, std::vector<double>{0.5, 1.5}, std::vector<double>{1, 1}), InvalidArgument);

  SUBCASE("dominates the path entropy on random linear-Gaussian specs") {
    CounterRng rng(21, RngStream::kTest, 0, 0);
    for (int trial = 0; trial < 100; ++trial) {
      const std::size_t n = 2 + static_cast<std::size_t>(trial % 4);
      const Mat Q = random_spd(rng, n, 0.2);
      const Mat A = -Q;
      Vec mean(n);
      for (auto& x : mean) x = rng.normal();
      ProductGaussian mu0;
      for (std::size_t i = 0; i < n; ++i) {
        mu0.means.push_back(Vec::Constant(1, mean(i)));
        mu0.covs.push_back(Mat::Constant(1, 1, 0.2 + 2 * rng.uniform()));
      }
      // rho0: either mu0 itself or a correlated Gaussian with the same mean.
      GaussianState rho0 = mu0.joint();
      if (trial % 2) rho0.cov = random_spd(rng, n, 0.3);
      BoundInputs b;
      b.T = 2.0 * rng.uniform();
      b.L = Eigen::SelfAdjointEigenSolver<Mat>(Q).eigenvalues().cwiseAbs().maxCoeff();
      b.c0 = 0;
      for (const auto& c : mu0.covs) b.c0 = std::max(b.c0, c(0, 0));
      b.h0 = kl_gaussian(mu0, rho0);
      const double G = hess_trace_linear(A, 1);
      const double bound = proximity_bound(b, [G](double) { return G; });
      CHECK(path_entropy_linear_gaussian(A, mu0, rho0, b.T) <= bound * (1 + 1e-10));
    }
  }
}

TEST_CASE("proximity_bound_uniform") {
  BoundInputs in;
  in.kappa = 0.5;
  in.eta0 = 0.8;
  in.c0 = 1.0;
  in.h0 = 0.3;
  const double eta = 0.5, c = 2.0;
  CHECK(proximity_bound_uniform(in, [](double) { return 0.0; }, 3.0) == doctest::Approx(std::exp(-eta * 3) * 0.3));
  const double G = 1.7;
  for (double t : {0.1, 1.0, 5.0}) {
    const double expected = std::exp(-eta * t) * 0.3 + c * G / (2 * eta) * (1 - std::exp(-eta * t));
    CHECK(proximity_bound_uniform(in, [G](double) { return G; }, t) == doctest::Approx(expected).epsilon(1e-10));
  }
  // Stationary limit with c = 1/kappa and eta = kappa.
  in.c0 = 0.5;
  CHECK(std::abs(proximity_bound_uniform(in, [G](double) { return G; }, 50.0) / (G / (2 * 0.25)) - 1) <= 1e-6);

  in.kappa = 0;
  CHECK_THROWS_AS(proximity_bound_uniform(in, [](double) { return 0.0; }, 1.0), Unsupported);
  in.kappa = 0.5;
  in.h0.reset();
  CHECK_THROWS_AS(proximity_bound_uniform(in, [](double) { return 0.0; }, 1.0), InvalidArgument);
}

TEST_CASE("hess_trace") {
  Mat A(3, 3);
  A << -1, 0.5, 0.2, 0.1, -1, 0.3, 0, 0.4, -2;
  const double exact = 0.25 + 0.04 + 0.01 + 0.09 + 0.16;
  CHECK(hess_trace_linear(A, 1) == doctest::Approx(exact));
  const auto e = ensemble(ProductGaussian::isotropic(Vec::Zero(3), 1.0), 200, 1);
  const auto s = hess_trace_mc(e, linear_spec(A));
  CHECK(s.value == doctest::Approx(exact).epsilon(1e-10));
  CHECK(s.std_err <= 1e-12);
}

TEST_CASE("chaos_scaling_experiment (small)") {
  const auto K1 = SiteKernel::affine(-Mat::Identity(1, 1), Vec::Zero(1));
  const auto K2 = PairKernel::affine(-Mat::Identity(1, 1), Mat::Identity(1, 1), Vec::Zero(1));
  ChaosOptions opts;
  opts.dt = 1e-2;
  const std::vector<InteractionMatrix> fam{mean_field_matrix(4), random_walk_matrix(ring_adjacency(8)),
                                           mean_field_matrix(8)};
  const auto rows = chaos_scaling_experiment(fam, K1, K2, 0.5, 2000, 3, opts);
  REQUIRE(rows.size() == 3);
  CHECK(rows[0].n == 4);
  CHECK(rows[0].trace_ratio == doctest::Approx(1.0 / 3));
  CHECK(rows[1].trace_ratio == doctest::Approx(0.5));
  CHECK(rows[2].trace_ratio == doctest::Approx(1.0 / 7));
  for (const auto& r : rows) {
    CHECK(r.w2_sq >= 0);
    CHECK(r.std_err >= 0);
  }
  // Same seed, same table.
  const auto again = chaos_scaling_experiment(fam, K1, K2, 0.5, 2000, 3, opts);
  for (std::size_t k = 0; k < rows.size(); ++k) CHECK(again[k].w2_sq == rows[k].w2_sq);

  Mat bad = Mat::Constant(3, 3, 0.3);
  bad.diagonal().setZero();
  CHECK_THROWS_AS(chaos_scaling_experiment({InteractionMatrix(bad)}, K1, K2, 0.5, 100, 1, opts), InvalidArgument);
}

TEST_CASE("metric csv rows") {
  std::ostringstream out;
  write_metric_header(out);
  write_metric_row(out, "growth_rate", 0.5, MetricSample{0.1, 0.01, 100, false});
  CHECK(out.str() == "metric,t,value,stderr,m_used\ngrowth_rate,0.5,0.10000000000000001,0.01,100\n");
}
