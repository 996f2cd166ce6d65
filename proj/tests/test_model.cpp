#include "doctest.h"

#include "mfip/errors.hpp"
#include "mfip/model.hpp"
#include "mfip/rng.hpp"

#include <cmath>
#include <sstream>

using namespace mfip;

namespace {

Mat mat2(double a, double b, double c, double d) {
  Mat m(2, 2);
  m << a, b, c, d;
  return m;
}

Vec vec(std::initializer_list<double> v) {
  Vec out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out(i++) = x;
  return out;
}

Vec random_vec(CounterRng& rng, Eigen::Index n) {
  Vec v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = rng.normal();
  return v;
}

// K2(x, y) = y - x as a plain callback (no affine metadata).
PairKernel difference_kernel_fn() {
  return PairKernel::function([](std::span<const double> x, std::span<const double> y, std::span<double> out) {
    for (std::size_t c = 0; c < out.size(); ++c) out[c] = y[c] - x[c];
  });
}

}  // namespace

TEST_CASE("pairwise drift matches direct summation") {
  Mat A = Mat::Constant(3, 3, 0.5);
  A.diagonal().setZero();
  const auto spec = DriftSpec::pairwise(SiteKernel::zero(1), difference_kernel_fn(), InteractionMatrix(A));
  const Vec b = eval_drift(spec, vec({0, 1, 2}));
  CHECK(b(0) == doctest::Approx(1.5));
  CHECK(b(1) == doctest::Approx(0.0));
  CHECK(b(2) == doctest::Approx(-1.5));

  // Same system through the affine kernel form.
  const auto affine = DriftSpec::pairwise(SiteKernel::zero(1),
                                          PairKernel::affine(-Mat::Identity(1, 1), Mat::Identity(1, 1), Vec::Zero(1)),
                                          InteractionMatrix(A));
  CHECK((eval_drift(affine, vec({0, 1, 2})) - b).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("pairwise drift with zero interaction is the self term") {
  auto K1 = SiteKernel::function([](std::span<const double> x, std::span<double> out) { out[0] = std::sin(x[0]); });
  const auto spec = DriftSpec::pairwise(K1, PairKernel::zero(), mean_field_matrix(4));
  const Vec x = vec({0.3, -1.0, 2.0, 5.0});
  const Vec b = eval_drift(spec, x);
  for (Eigen::Index i = 0; i < 4; ++i) CHECK(b(i) == std::sin(x(i)));
}

TEST_CASE("linear drift with -I returns -x") {
  const auto spec = DriftSpec::linear(-Mat::Identity(3, 3));
  const Vec x = vec({1.0, -2.0, 0.25});
  CHECK(eval_drift(spec, x) == -x);
}

TEST_CASE("eval_drift rejects dimension mismatch") {
  const auto spec = DriftSpec::linear(-Mat::Identity(3, 3));
  CHECK_THROWS_AS(eval_drift(spec, vec({1.0, 2.0})), InvalidArgument);
}

TEST_CASE("quadratic drift equals -Qx + l") {
  CounterRng rng(11, RngStream::kTest, 0, 0);
  Mat B = Mat::Random(6, 6);
  const Mat Q = B * B.transpose() + Mat::Identity(6, 6);
  const Vec l = random_vec(rng, 6);
  const auto spec = DriftSpec::quadratic(Q, l, 2);
  CHECK(spec.dims() == Dims{3, 2});
  for (int trial = 0; trial < 100; ++trial) {
    const Vec x = random_vec(rng, 6);
    const Vec resid = eval_drift(spec, x) + Q * x - l;
    const double scale = std::max(1.0, (Q * x).norm());
    CHECK(resid.norm() <= 1e-10 * scale);
  }
}

TEST_CASE("quadratic spec rejects asymmetric Q") {
  CHECK_THROWS_AS(DriftSpec::quadratic(mat2(1, 0.5, 0.4, 1), Vec::Zero(2)), InvalidArgument);
}

TEST_CASE("cross-Hessian norms") {
  SUBCASE("quadratic potential uses Q blocks and ignores x") {
    CounterRng rng(5, RngStream::kTest, 0, 0);
    Mat B = Mat::Random(6, 6);
    const Mat Q = B * B.transpose();
    const auto spec = DriftSpec::quadratic(Q, Vec::Zero(6), 2);
    const Mat h1 = cross_hessian_frobenius(spec, random_vec(rng, 6));
    const Mat h2 = cross_hessian_frobenius(spec, random_vec(rng, 6));
    CHECK(h1 == h2);
    CHECK(h1(0, 0) == 0.0);
    CHECK(h1(0, 2) == doctest::Approx(Q.block(0, 4, 2, 2).squaredNorm()));
  }
  SUBCASE("pairwise difference kernel gives A_ij^2") {
    Mat A(3, 3);
    A << 0, 0.2, 0.8, 0.5, 0, 0.5, 1, 0, 0;
    const auto spec = DriftSpec::pairwise(SiteKernel::zero(1), difference_kernel_fn(), InteractionMatrix(A));
    const Mat h = cross_hessian_frobenius(spec, vec({0.4, -2.0, 7.0}));
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) CHECK(h(i, j) == doctest::Approx(i == j ? 0.0 : A(i, j) * A(i, j)).epsilon(1e-8));
  }
  SUBCASE("linear 2x2") {
    const auto spec = DriftSpec::linear(mat2(0, 0.5, 0.5, 0));
    const Mat h = cross_hessian_frobenius(spec, vec({1, 2}));
    CHECK(h == mat2(0, 0.25, 0.25, 0));
  }
  SUBCASE("custom drift by finite differences") {
    const Mat A = mat2(-1, 0.3, -0.7, -2);
    Custom c;
    c.drift = [A](std::span<const double> x, std::span<double> out) {
      out[0] = A(0, 0) * x[0] + A(0, 1) * x[1] + 0.1 * x[0] * x[0];
      out[1] = A(1, 0) * x[0] + A(1, 1) * x[1];
    };
    c.lipschitz = 3.0;
    const auto spec = DriftSpec::custom({2, 1}, c);
    const Mat h = cross_hessian_frobenius(spec, vec({0.5, -1.0}));
    CHECK(h(0, 1) == doctest::Approx(0.09).epsilon(1e-8));
    CHECK(h(1, 0) == doctest::Approx(0.49).epsilon(1e-8));
    c.allow_finite_differences = false;
    CHECK_THROWS_AS(cross_hessian_frobenius(DriftSpec::custom({2, 1}, c), vec({0, 0})), Unsupported);
  }
}

TEST_CASE("mean-field matrix") {
  CHECK(mean_field_matrix(2).entries() == mat2(0, 1, 1, 0));
  CHECK(mean_field_matrix(5).trace_aat() == doctest::Approx(1.25));
  CHECK(mean_field_matrix(3).row_sums() == Vec::Ones(3));
  CHECK_THROWS_AS(mean_field_matrix(1), InvalidArgument);
  for (std::size_t n = 2; n <= 50; ++n) {
    const auto A = mean_field_matrix(n);
    CHECK(std::abs(A.trace_aat() - double(n) / double(n - 1)) <= 1e-12);
    CHECK(A.rows_sum_to_one(1e-12));
  }
}

TEST_CASE("random-walk matrices") {
  const auto ring = random_walk_matrix(ring_adjacency(6));
  CHECK(ring.trace_aat() == doctest::Approx(3.0));
  CHECK(ring.rows_sum_to_one(1e-12));

  for (std::size_t n : {3u, 7u, 12u}) {
    const auto complete = random_walk_matrix(complete_adjacency(n));
    CHECK((complete.entries() - mean_field_matrix(n).entries()).cwiseAbs().maxCoeff() <= 1e-15);
  }

  const auto star = random_walk_matrix(star_adjacency(4));
  CHECK(star.trace_aat() == doctest::Approx(10.0 / 3.0));
  CHECK(star.rows_sum_to_one(1e-12));

  Mat asym = ring_adjacency(4);
  asym(0, 2) = 1.0;
  CHECK_THROWS_AS(random_walk_matrix(asym), InvalidArgument);
  Mat isolated = Mat::Zero(3, 3);
  isolated(0, 1) = isolated(1, 0) = 1.0;
  CHECK_THROWS_AS(random_walk_matrix(isolated), InvalidArgument);
  Mat self_loop = ring_adjacency(4);
  self_loop(1, 1) = 1.0;
  CHECK_THROWS_AS(random_walk_matrix(self_loop), InvalidArgument);
}

TEST_CASE("interaction matrix invariants") {
  Mat bad = mat2(0.1, 1, 1, 0);
  CHECK_THROWS_AS(InteractionMatrix{bad}, InvalidArgument);
  Mat A(3, 3);
  A << 0, 0.3, -0.2, 0.1, 0, 2.0, 0.5, 0.5, 0;
  const InteractionMatrix im(A);
  double sum = 0.0;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) sum += A(i, j) * A(i, j);
  CHECK(std::abs(im.trace_aat() - sum) <= 1e-12);
}

TEST_CASE("edge list parsing") {
  std::istringstream in("# ring\n0 1\n1 2\n\n2 3\n3 0\n");
  CHECK(read_edge_list(in, 4) == ring_adjacency(4));
  std::istringstream bad("0 1\n1 x\n");
  try {
    read_edge_list(bad, 4);
    FAIL("expected parse error");
  } catch (const ParseError& e) {
    CHECK(e.line() == 2);
  }
  std::istringstream out_of_range("0 9\n");
  CHECK_THROWS_AS(read_edge_list(out_of_range, 4), ParseError);
}

TEST_CASE("structural constants") {
  SUBCASE("identity") {
    const auto sc = structural_constants(DriftSpec::quadratic(Mat::Identity(2, 2), Vec::Zero(2)));
    CHECK(*sc.kappa == doctest::Approx(1.0));
    CHECK(*sc.lipschitz_L == doctest::Approx(1.0));
    CHECK(*sc.dissipative_c2 == doctest::Approx(0.5));
    CHECK(*sc.dissipative_c1 == doctest::Approx(0.0));
  }
  SUBCASE("2x2 coupled") {
    const auto sc = structural_constants(DriftSpec::quadratic(mat2(1, 0.5, 0.5, 1), vec({1, 1})));
    CHECK(*sc.kappa == doctest::Approx(0.5));
    CHECK(*sc.lipschitz_L == doctest::Approx(1.5));
    CHECK(*sc.dissipative_c2 == doctest::Approx(0.25));
    CHECK(*sc.dissipative_c1 == doctest::Approx(2.0));
  }
  SUBCASE("indefinite Q has no dissipativity constants") {
    const auto sc = structural_constants(DriftSpec::quadratic(mat2(1, 2, 2, 1), Vec::Zero(2)));
    CHECK(*sc.kappa == doctest::Approx(-1.0));
    CHECK_FALSE(sc.dissipative_c2.has_value());
  }
  SUBCASE("custom pass-through") {
    Custom c;
    c.drift = [](std::span<const double> x, std::span<double> out) { out[0] = -x[0]; };
    c.lipschitz = 2.0;
    const auto sc = structural_constants(DriftSpec::custom({1, 1}, c));
    CHECK(*sc.lipschitz_L == 2.0);
    CHECK_FALSE(sc.kappa.has_value());
  }
  SUBCASE("affine pairwise uses the spectral route") {
    const auto spec = DriftSpec::pairwise(SiteKernel::affine(-Mat::Identity(1, 1), Vec::Zero(1)),
                                          PairKernel::affine(-Mat::Identity(1, 1), Mat::Identity(1, 1), Vec::Zero(1)),
                                          mean_field_matrix(3));
    const auto sc = structural_constants(spec);
    // M = -2I + (J - I)/2 has eigenvalues -1 and -2.5.
    CHECK(*sc.kappa == doctest::Approx(1.0));
    CHECK(*sc.lipschitz_L == doctest::Approx(2.5));
  }
}

TEST_CASE("kappa agrees with Rayleigh quotients and a direct eigensolve") {
  const Mat Q = mat2(1, 0.5, 0.5, 1);
  const double kappa = *structural_constants(DriftSpec::quadratic(Q, Vec::Zero(2))).kappa;
  // Closed-form eigenvalue of a symmetric 2x2 matrix.
  const double tr = Q.trace(), det = Q.determinant();
  const double lmin = 0.5 * tr - std::sqrt(0.25 * tr * tr - det);
  CHECK(std::abs(kappa - lmin) <= 1e-10);

  CounterRng rng(99, RngStream::kTest, 0, 0);
  double min_rq = 1e300;
  for (int k = 0; k < 1000; ++k) {
    Vec u = random_vec(rng, 2);
    u.normalize();
    min_rq = std::min(min_rq, u.dot(Q * u));
  }
  CHECK(min_rq >= kappa - 1e-12);
  CHECK(min_rq - kappa <= 1e-4);
}

TEST_CASE("affine representation of pairwise drift") {
  Mat A(3, 3);
  A << 0, 0.25, 0.75, 0.5, 0, 0.5, 0.3, 0.3, 0;
  const auto spec = DriftSpec::pairwise(SiteKernel::affine(-Mat::Identity(1, 1), Vec::Constant(1, 0.2)),
                                        PairKernel::affine(-0.5 * Mat::Identity(1, 1), 2.0 * Mat::Identity(1, 1),
                                                           Vec::Constant(1, -0.1)),
                                        InteractionMatrix(A));
  const auto aff = spec.affine();
  REQUIRE(aff.has_value());
  const Vec x = vec({0.3, -0.7, 1.9});
  CHECK((aff->matrix * x + aff->offset - eval_drift(spec, x)).cwiseAbs().maxCoeff() < 1e-14);
}
