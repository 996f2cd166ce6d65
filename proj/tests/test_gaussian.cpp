#include "doctest.h"

#include "mfip/errors.hpp"
#include "mfip/gaussian.hpp"
#include "mfip/rng.hpp"

#include <unsupported/Eigen/MatrixFunctions>

#include <cmath>

using namespace mfip;

namespace {

Mat mat2(double a, double b, double c, double d) {
  Mat m(2, 2);
  m << a, b, c, d;
  return m;
}

Vec vec2(double a, double b) {
  Vec v(2);
  v << a, b;
  return v;
}

GaussianState g1d(double mean, double var) { return {Vec::Constant(1, mean), Mat::Constant(1, 1, var)}; }

const Mat kQ = mat2(1, 0.5, 0.5, 1);

// Van Loan block exponential: independent route to the OU covariance.
GaussianState van_loan(const Mat& A, const Vec& m0, const Mat& S0, double t) {
  const Eigen::Index k = A.rows();
  Mat C = Mat::Zero(2 * k, 2 * k);
  C.topLeftCorner(k, k) = -A;
  C.topRightCorner(k, k) = 2.0 * Mat::Identity(k, k);
  C.bottomRightCorner(k, k) = A.transpose();
  const Mat F = (C * t).exp();
  const Mat eAt = (A * t).exp();
  const Mat noise = F.bottomRightCorner(k, k).transpose() * F.topRightCorner(k, k);
  return {eAt * m0, eAt * S0 * eAt.transpose() + noise};
}

Mat random_spd(CounterRng& rng, Eigen::Index k, double min_eig) {
  Mat B(k, k);
  for (Eigen::Index i = 0; i < k; ++i)
    for (Eigen::Index j = 0; j < k; ++j) B(i, j) = rng.normal();
  Eigen::SelfAdjointEigenSolver<Mat> es(B * B.transpose());
  Vec ev = es.eigenvalues();
  ev = (ev.array() / ev.maxCoeff() * 2.0 + min_eig).matrix();
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

// E|Cx + c|^2 under N(m, S).
double affine_second_moment(const Mat& C, const Vec& c, const GaussianState& g) {
  return (C * g.cov * C.transpose()).trace() + (C * g.mean + c).squaredNorm();
}

}  // namespace

TEST_CASE("ou_moments_exact examples") {
  const Vec v = vec2(1.5, -0.5);
  const auto g0 = ou_moments_exact(-Mat::Identity(2, 2), v, Mat::Zero(2, 2), 0.0);
  CHECK(g0.mean == v);
  CHECK(g0.cov == Mat::Zero(2, 2));

  for (double t : {0.1, 1.0, 3.7}) {
    const auto g = ou_moments_exact(-Mat::Identity(2, 2), v, Mat::Zero(2, 2), t);
    CHECK((g.mean - std::exp(-t) * v).norm() <= 1e-14);
    CHECK((g.cov - (1 - std::exp(-2 * t)) * Mat::Identity(2, 2)).norm() <= 1e-14);
  }

  const Mat A = mat2(-1, 0.5, 0.5, -1);
  const auto inf = ou_moments_exact(A, vec2(1, 2), Mat::Identity(2, 2), 60.0);
  CHECK((inf.cov - (4.0 / 3.0) * mat2(1, 0.5, 0.5, 1)).norm() <= 1e-12);
  // Stationary covariance solves the Lyapunov equation.
  CHECK((A * inf.cov + inf.cov * A.transpose() + 2.0 * Mat::Identity(2, 2)).norm() <= 1e-12);
}

TEST_CASE("ou_moments_exact matches the Van Loan exponential") {
  CounterRng rng(3, RngStream::kTest, 0, 0);
  SUBCASE("symmetric") {
    const Mat A = -random_spd(rng, 4, 0.3);
    const Vec m0 = Vec::Random(4);
    const Mat S0 = random_spd(rng, 4, 0.1);
    for (double t : {0.05, 0.7, 2.5}) {
      const auto a = ou_moments_exact(A, m0, S0, t);
      const auto b = van_loan(A, m0, S0, t);
      CHECK((a.mean - b.mean).norm() <= 1e-10 * std::max(1.0, b.mean.norm()));
      CHECK((a.cov - b.cov).norm() <= 1e-10 * std::max(1.0, b.cov.norm()));
    }
  }
  SUBCASE("non-symmetric") {
    Mat A(3, 3);
    A << -1.0, 0.8, 0.0, -0.3, -0.5, 0.4, 0.2, 0.0, -2.0;
    const Vec m0 = Vec::Random(3);
    const Mat S0 = random_spd(rng, 3, 0.1);
    for (double t : {0.3, 1.0, 4.0}) {
      const auto a = ou_moments_exact(A, m0, S0, t);
      const auto b = van_loan(A, m0, S0, t);
      CHECK((a.mean - b.mean).norm() <= 1e-10 * std::max(1.0, b.mean.norm()));
      CHECK((a.cov - b.cov).norm() <= 1e-10 * std::max(1.0, b.cov.norm()));
    }
  }
}

TEST_CASE("ip_moments_exact examples") {
  const Mat A = mat2(-1, 0.5, 0.5, -1);
  const auto mu0 = ProductGaussian::isotropic(vec2(1, -1), 0.3);
  for (double t : {0.0, 0.5, 2.0}) {
    const auto mu = ip_moments_exact(A, mu0, t);
    CHECK(std::abs(mu.means[0](0) - std::exp(-1.5 * t)) <= 1e-14);
    CHECK(std::abs(mu.means[1](0) + std::exp(-1.5 * t)) <= 1e-14);
  }
  const auto far = ip_moments_exact(A, mu0, 40.0);
  CHECK(far.covs[0](0, 0) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(far.covs[1](0, 0) == doctest::Approx(1.0).epsilon(1e-12));

  SUBCASE("block-diagonal A coincides with per-block OU") {
    Mat B = Mat::Zero(4, 4);
    B.topLeftCorner(2, 2) = mat2(-1, 0.2, 0.2, -0.7);
    B.bottomRightCorner(2, 2) = mat2(-2, 0.0, 0.0, -0.4);
    ProductGaussian g;
    g.means = {vec2(1, 2), vec2(-1, 0.5)};
    g.covs = {mat2(1, 0.1, 0.1, 0.5), mat2(0.2, 0, 0, 0.3)};
    const auto ip = ip_moments_exact(B, g, 1.3);
    const auto full = ou_moments_exact(B, g.stacked_mean(), g.joint().cov, 1.3);
    CHECK((ip.joint().mean - full.mean).norm() <= 1e-13);
    CHECK((ip.joint().cov - full.cov).norm() <= 1e-13);
  }
}

TEST_CASE("w2_gaussian") {
  const GaussianState a{Vec::Zero(2), Mat::Identity(2, 2)};
  CHECK(w2_gaussian(a, a) == doctest::Approx(0.0));
  CHECK(w2_gaussian(a, GaussianState{vec2(2, 0), Mat::Identity(2, 2)}) == doctest::Approx(2.0));
  CHECK(w2_gaussian(g1d(0, 1), g1d(0, 4)) == doctest::Approx(1.0));
  CHECK_THROWS_AS(w2_gaussian(a, GaussianState{Vec::Zero(2), -Mat::Identity(2, 2)}), InvalidArgument);

  CounterRng rng(8, RngStream::kTest, 0, 0);
  for (int trial = 0; trial < 20; ++trial) {
    const GaussianState x{Vec::Random(3), random_spd(rng, 3, 0.05)};
    const GaussianState y{Vec::Random(3), random_spd(rng, 3, 0.05)};
    CHECK(std::abs(w2_gaussian(x, y) - w2_gaussian(y, x)) <= 1e-10);
    CHECK(w2_gaussian(x, x) <= 1e-6);
  }

  // Product inputs tensorize.
  ProductGaussian p, q;
  p.means = {Vec::Constant(1, 0.0), Vec::Constant(1, 1.0)};
  p.covs = {Mat::Constant(1, 1, 1.0), Mat::Constant(1, 1, 4.0)};
  q.means = {Vec::Constant(1, 3.0), Vec::Constant(1, 1.0)};
  q.covs = {Mat::Constant(1, 1, 1.0), Mat::Constant(1, 1, 1.0)};
  CHECK(w2_gaussian(p, q) == doctest::Approx(std::sqrt(9.0 + 1.0)));
  CHECK(w2_gaussian(p, q) == doctest::Approx(w2_gaussian(p.joint(), q.joint())));
}

TEST_CASE("kl_gaussian") {
  CHECK(kl_gaussian(g1d(0.3, 2.0), g1d(0.3, 2.0)) == doctest::Approx(0.0));
  CHECK(kl_gaussian(g1d(1, 1), g1d(0, 1)) == doctest::Approx(0.5));
  CHECK(kl_gaussian(g1d(0, 2), g1d(0, 1)) == doctest::Approx(0.5 * (1.0 - std::log(2.0))));
  CHECK(kl_gaussian(g1d(0, 0), g1d(0, 1)) == kInfiniteEntropy);
  CHECK_THROWS_AS(kl_gaussian(g1d(0, 1), g1d(0, 0)), InvalidArgument);

  // Product against joint via block-diagonal embedding.
  const auto mu = ProductGaussian::isotropic(vec2(0.5, -0.2), 1.5);
  const GaussianState rho{Vec::Zero(2), kQ.inverse()};
  const double direct = kl_gaussian(mu, rho);
  CHECK(direct == doctest::Approx(kl_gaussian(mu.joint(), rho)));
  CHECK(direct > 0.0);
}

TEST_CASE("stationary_mf_gaussian") {
  MeanFieldSolveInfo info;
  const auto mf = stationary_mf_gaussian(kQ, vec2(1, 1), 1, &info);
  CHECK(mf.means[0](0) == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  CHECK(mf.means[1](0) == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  CHECK(mf.covs[0](0, 0) == doctest::Approx(1.0));
  CHECK(mf.covs[1](0, 0) == doctest::Approx(1.0));
  CHECK(info.jacobi_spectral_radius == doctest::Approx(0.5));
  CHECK_FALSE(info.used_direct_solve);
  CHECK(info.residual <= 1e-12);

  const Mat Qd = mat2(2, 0, 0, 4);
  const auto sep = stationary_mf_gaussian(Qd, vec2(1, 1));
  CHECK(sep.means[0](0) == doctest::Approx(0.5));
  CHECK(sep.covs[1](0, 0) == doctest::Approx(0.25));

  CounterRng rng(4, RngStream::kTest, 0, 0);
  const Mat Q = random_spd(rng, 6, 0.2);
  const auto z = stationary_mf_gaussian(Q, Vec::Zero(6), 2);
  for (const auto& m : z.means) CHECK(m.norm() <= 1e-14);

  SUBCASE("Jacobi divergence falls back to a direct solve") {
    Mat Qs(3, 3);
    Qs << 1, 0.9, 0.9, 0.9, 1, 0.9, 0.9, 0.9, 1;  // PD, Jacobi radius 1.8
    MeanFieldSolveInfo si;
    const auto s = stationary_mf_gaussian(Qs, Vec::Ones(3), 1, &si);
    CHECK(si.used_direct_solve);
    CHECK((Qs * s.stacked_mean() - Vec::Ones(3)).norm() <= 1e-12);
  }
  CHECK_THROWS_AS(stationary_mf_gaussian(mat2(1, 1, 1, 1), vec2(1, 0)), InvalidArgument);
  CHECK_THROWS_AS(stationary_mf_gaussian(mat2(-1, 0, 0, 1), vec2(1, 0)), InvalidArgument);
}

TEST_CASE("projected_fisher_gaussian") {
  const Vec l = vec2(1, 1);
  CHECK(projected_fisher_gaussian(stationary_mf_gaussian(kQ, l), kQ, l) <= 1e-20);

  SUBCASE("separable target: equals the full Fisher information") {
    const Mat Qd = mat2(2, 0, 0, 0.5);
    const Vec ld = vec2(0.3, -1);
    ProductGaussian mu;
    mu.means = {Vec::Constant(1, 1.0), Vec::Constant(1, -0.4)};
    mu.covs = {Mat::Constant(1, 1, 0.7), Mat::Constant(1, 1, 3.0)};
    // Full score: (Q - S^{-1})(x - m) + (Qm - l).
    const GaussianState j = mu.joint();
    const Mat C = Qd - j.cov.inverse();
    const double full = (C * j.cov * C.transpose()).trace() + (Qd * j.mean - ld).squaredNorm();
    CHECK(projected_fisher_gaussian(mu, Qd, ld) == doctest::Approx(full).epsilon(1e-12));
  }

  SUBCASE("off the fixed point, against a Monte Carlo swap estimator") {
    const auto mu = ProductGaussian::isotropic(vec2(0.5, 0.5), 2.0);
    const double closed = projected_fisher_gaussian(mu, kQ, Vec::Zero(2));
    CHECK(closed == doctest::Approx(2.125));
    const std::size_t m = 1'000'000;
    std::vector<double> x1(m), x2(m);
    CounterRng rng(17, RngStream::kTest, 0, 0);
    double s1 = 0, s2 = 0;
    for (std::size_t k = 0; k < m; ++k) {
      x1[k] = 0.5 + std::sqrt(2.0) * rng.normal();
      x2[k] = 0.5 + std::sqrt(2.0) * rng.normal();
      s1 += x1[k];
      s2 += x2[k];
    }
    double acc = 0;
    const double md = static_cast<double>(m);
    for (std::size_t k = 0; k < m; ++k) {
      // Score of dmu/drho*: -(x - m)/S + Qx - l, averaged over the other coordinate.
      const double other2 = (s2 - x2[k]) / (md - 1);
      const double other1 = (s1 - x1[k]) / (md - 1);
      const double g1 = -(x1[k] - 0.5) / 2.0 + x1[k] + 0.5 * other2;
      const double g2 = -(x2[k] - 0.5) / 2.0 + x2[k] + 0.5 * other1;
      acc += g1 * g1 + g2 * g2;
    }
    CHECK(acc / md == doctest::Approx(closed).epsilon(0.01));
  }
}

TEST_CASE("entropy_growth_rate_gaussian") {
  const auto unit = ProductGaussian::isotropic(vec2(0, 0), 1.0);
  CHECK(entropy_growth_rate_gaussian(unit, mat2(-1, 0, 0, -3)) == 0.0);
  CHECK(entropy_growth_rate_gaussian(unit, mat2(-1, 0.5, 0.5, -1)) == doctest::Approx(0.125));

  // Mean-field K2(x, y) = y with n = 3.
  Mat A = Mat::Constant(3, 3, 0.5);
  A.diagonal().setZero();
  const auto unit3 = ProductGaussian::isotropic(Vec::Zero(3), 1.0);
  const double closed = entropy_growth_rate_gaussian(unit3, A);
  CHECK(closed == doctest::Approx(0.375));

  // Monte Carlo oracle: residual of b^i against its conditional mean.
  const std::size_t m = 1'000'000;
  CounterRng rng(21, RngStream::kTest, 0, 0);
  double acc = 0;
  for (std::size_t k = 0; k < m; ++k) {
    const double x0 = rng.normal(), x1 = rng.normal(), x2 = rng.normal();
    const double r0 = 0.5 * (x1 + x2), r1 = 0.5 * (x0 + x2), r2 = 0.5 * (x0 + x1);
    acc += r0 * r0 + r1 * r1 + r2 * r2;
  }
  CHECK(0.25 * acc / double(m) == doctest::Approx(closed).epsilon(0.01));
}

TEST_CASE("path_entropy_linear_gaussian") {
  const Mat A = mat2(-1, 0.5, 0.5, -1);
  const auto mu0 = ProductGaussian::isotropic(vec2(0, 0), 1.0);
  const GaussianState rho0 = mu0.joint();
  CHECK(path_entropy_linear_gaussian(A, mu0, rho0, 0.0) == 0.0);
  CHECK(path_entropy_linear_gaussian(A, mu0, rho0, 1.0) == doctest::Approx(0.125).epsilon(1e-10));

  const auto shifted = ProductGaussian::isotropic(vec2(0.3, 0), 2.0);
  CHECK(path_entropy_linear_gaussian(A, shifted, rho0, 0.0) == doctest::Approx(kl_gaussian(shifted, rho0)));

  const Mat Ad = mat2(-1, 0, 0, -2);
  for (double T : {0.5, 3.0}) CHECK(path_entropy_linear_gaussian(Ad, mu0, rho0, T) == 0.0);

  // Variance starting at 2 relaxes to 1: sigma^2(t) = 1 + e^{-2t}.
  const auto wide = ProductGaussian::isotropic(vec2(0, 0), 2.0);
  const double T = 1.5;
  const double h0 = kl_gaussian(wide, GaussianState{Vec::Zero(2), 2.0 * Mat::Identity(2, 2)});
  CHECK(h0 == doctest::Approx(0.0));
  const double expected = 0.125 * (T + 0.5 * (1 - std::exp(-2 * T)));
  CHECK(path_entropy_linear_gaussian(A, wide, GaussianState{Vec::Zero(2), 2.0 * Mat::Identity(2, 2)}, T) ==
        doctest::Approx(expected).epsilon(1e-10));

  CHECK_THROWS_AS(path_entropy_linear_gaussian(A, mu0, GaussianState{Vec::Zero(2), Mat::Zero(2, 2)}, 1.0),
                  InvalidArgument);
}

TEST_CASE("contraction and entropy decay along the independent projection") {
  CounterRng rng(31, RngStream::kTest, 0, 0);
  for (int trial = 0; trial < 10; ++trial) {
    const Eigen::Index n = 2 + trial % 3;
    const Mat Q = random_spd(rng, n, 0.2 + 0.1 * trial);
    const Vec l = Vec::Random(n);
    const double kappa = Eigen::SelfAdjointEigenSolver<Mat>(Q).eigenvalues()(0);
    ProductGaussian mu0;
    for (Eigen::Index i = 0; i < n; ++i) {
      mu0.means.push_back(Vec::Constant(1, 2.0 * rng.normal()));
      mu0.covs.push_back(Mat::Constant(1, 1, 0.2 + std::abs(rng.normal())));
    }
    const auto star = stationary_mf_gaussian(Q, l);
    // Drift -Qx + l: run the linear flow in coordinates centred at Q^{-1} l.
    const Vec centre = Q.ldlt().solve(l);
    auto flow = [&](double t) {
      ProductGaussian shifted = mu0;
      for (Eigen::Index i = 0; i < n; ++i) shifted.means[i](0) -= centre(i);
      ProductGaussian out = ip_moments_exact(-Q, shifted, t);
      for (Eigen::Index i = 0; i < n; ++i) out.means[i](0) += centre(i);
      return out;
    };
    const GaussianState rho = gibbs_gaussian(Q, l);
    const double w0 = w2_gaussian(mu0, star);
    const double hstar = kl_gaussian(star, rho);
    const double h0 = kl_gaussian(mu0, rho) - hstar;
    CHECK(h0 >= -1e-12);
    for (int j = 0; j <= 16; ++j) {
      const double t = 0.25 * j;
      const auto mu = flow(t);
      CHECK(w2_gaussian(mu, star) <= std::exp(-kappa * t) * w0 * (1 + 1e-8));
      const double ht = kl_gaussian(mu, rho) - hstar;
      CHECK(ht <= std::exp(-2 * kappa * t) * h0 * (1 + 1e-8) + 1e-14);
      // dH/dt = -projected Fisher information.
      const double tc = 0.1 + 0.3 * j;
      const double h = 1e-4;
      const double dH = (kl_gaussian(flow(tc + h), rho) -
                         kl_gaussian(flow(tc - h), rho)) /
                        (2 * h);
      const double fisher = projected_fisher_gaussian(flow(tc), Q, l);
      CHECK(std::abs(dH + fisher) <= 1e-4 * std::max(1.0, fisher));
    }
  }
}

TEST_CASE("conditional expectation minimizes the entropy growth rate") {
  // b(x) = Ax; candidates beta^i(x) = A_ii x^i + sum_{j != i} A_ij m_j + eps x^i.
  const Mat A = mat2(-1, 0.5, 0.5, -1);
  ProductGaussian mu;
  mu.means = {Vec::Constant(1, 0.4), Vec::Constant(1, -0.2)};
  mu.covs = {Mat::Constant(1, 1, 1.3), Mat::Constant(1, 1, 0.6)};
  const GaussianState j = mu.joint();
  auto rate = [&](double eps) {
    double total = 0;
    for (int i = 0; i < 2; ++i) {
      // beta^i - b^i as an affine function Cx + c of the joint state.
      Mat C = Mat::Zero(1, 2);
      C(0, i) = eps;
      Vec c = Vec::Zero(1);
      for (int k = 0; k < 2; ++k) {
        if (k == i) continue;
        C(0, k) -= A(i, k);
        c(0) += A(i, k) * j.mean(k);
      }
      total += affine_second_moment(C, c, j);
    }
    return 0.25 * total;
  };
  const double base = rate(0.0);
  CHECK(base == doctest::Approx(entropy_growth_rate_gaussian(mu, A)).epsilon(1e-12));
  const double curvature = 0.25 * (1.3 + 0.16 + 0.6 + 0.04);
  for (double eps : {-1.0, -0.5, -0.1, 0.1, 0.5, 1.0}) {
    CHECK(rate(eps) > base);
    CHECK(rate(eps) - base == doctest::Approx(curvature * eps * eps).epsilon(1e-10));
  }
}
