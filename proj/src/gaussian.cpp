#include "mfip/gaussian.hpp"

#include "mfip/errors.hpp"

#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <boost/numeric/odeint.hpp>

#include <cmath>
#include <numbers>

namespace mfip {

namespace {

Eigen::Index idx(std::size_t v) { return static_cast<Eigen::Index>(v); }

constexpr double kSymTol = 1e-10;

void require_psd(const Mat& S, const char* what) {
  if (S.rows() != S.cols()) throw InvalidArgument(std::string(what) + " must be square");
  if (!is_symmetric(S, kSymTol)) throw InvalidArgument(std::string(what) + " must be symmetric");
  if (S.size() == 0) return;
  Eigen::SelfAdjointEigenSolver<Mat> es(S, Eigen::EigenvaluesOnly);
  const double scale = std::max(1.0, S.cwiseAbs().maxCoeff());
  if (es.eigenvalues()(0) < -1e-10 * scale) {
    throw InvalidArgument(std::string(what) + " must be positive semidefinite");
  }
}

// (e^{rt} - 1) / r with the r -> 0 limit t.
double expm1_ratio(double r, double t) {
  const double x = r * t;
  if (std::abs(x) < 1e-12) return t * (1.0 + 0.5 * x);
  return std::expm1(x) / r;
}

Mat symmetrize(const Mat& S) { return 0.5 * (S + S.transpose()); }

// Closed form for symmetric A: in the eigenbasis A = V diag(lambda) V^T,
// S~_ab(t) = e^{(l_a + l_b) t} S~_ab(0) + 2 delta_ab (e^{2 l_a t} - 1) / (2 l_a).
GaussianState ou_symmetric(const Mat& A, const Vec& m0, const Mat& S0, double t) {
  Eigen::SelfAdjointEigenSolver<Mat> es(symmetrize(A));
  if (es.info() != Eigen::Success) throw InternalError("eigendecomposition failed");
  const Mat& V = es.eigenvectors();
  const Vec& lam = es.eigenvalues();
  const Eigen::Index k = lam.size();
  Vec growth(k);
  for (Eigen::Index a = 0; a < k; ++a) growth(a) = std::exp(lam(a) * t);
  GaussianState out;
  out.mean = V * (growth.asDiagonal() * (V.transpose() * m0));
  Mat St = V.transpose() * S0 * V;
  for (Eigen::Index a = 0; a < k; ++a) {
    for (Eigen::Index b = 0; b < k; ++b) St(a, b) *= growth(a) * growth(b);
    St(a, a) += 2.0 * expm1_ratio(2.0 * lam(a), t);
  }
  out.cov = symmetrize(V * St * V.transpose());
  return out;
}

// Dormand-Prince 5(4) with tight tolerances for non-symmetric A.
GaussianState ou_general(const Mat& A, const Vec& m0, const Mat& S0, double t) {
  namespace odeint = boost::numeric::odeint;
  const Eigen::Index k = A.rows();
  using State = std::vector<double>;
  State y(static_cast<std::size_t>(k + k * k));
  Eigen::Map<Vec>(y.data(), k) = m0;
  Eigen::Map<Mat>(y.data() + k, k, k) = S0;
  const Mat AT = A.transpose();
  auto rhs = [&](const State& x, State& dxdt, double) {
    Eigen::Map<const Vec> m(x.data(), k);
    Eigen::Map<const Mat> S(x.data() + k, k, k);
    Eigen::Map<Vec>(dxdt.data(), k).noalias() = A * m;
    Eigen::Map<Mat> dS(dxdt.data() + k, k, k);
    dS.noalias() = A * S;
    dS.noalias() += S * AT;
    dS.diagonal().array() += 2.0;
  };
  auto stepper = odeint::make_controlled(1e-13, 1e-12, odeint::runge_kutta_dopri5<State>());
  odeint::integrate_adaptive(stepper, rhs, y, 0.0, t, std::min(1e-3, t));
  GaussianState out;
  out.mean = Eigen::Map<Vec>(y.data(), k);
  out.cov = symmetrize(Eigen::Map<Mat>(y.data() + k, k, k));
  return out;
}

Mat block_diagonal(const std::vector<Mat>& blocks) {
  std::size_t total = 0;
  for (const auto& b : blocks) total += static_cast<std::size_t>(b.rows());
  Mat out = Mat::Zero(idx(total), idx(total));
  Eigen::Index off = 0;
  for (const auto& b : blocks) {
    out.block(off, off, b.rows(), b.cols()) = b;
    off += b.rows();
  }
  return out;
}

void require_same_dims(const ProductGaussian& a, const ProductGaussian& b) {
  if (a.n() != b.n() || a.d() != b.d()) throw InvalidArgument("product Gaussians have different shapes");
}

void require_valid(const ProductGaussian& g) {
  if (g.means.size() != g.covs.size()) throw InvalidArgument("product Gaussian: means/covs length mismatch");
  for (std::size_t i = 0; i < g.n(); ++i) {
    if (static_cast<std::size_t>(g.means[i].size()) != g.d() || static_cast<std::size_t>(g.covs[i].rows()) != g.d()) {
      throw InvalidArgument("product Gaussian: inconsistent factor dimensions");
    }
  }
}

double bures_sq(const Vec& m1, const Mat& S1, const Vec& m2, const Mat& S2) {
  const Mat r2 = psd_sqrt(S2);
  const Mat cross = psd_sqrt(symmetrize(r2 * S1 * r2));
  const double tr = S1.trace() + S2.trace() - 2.0 * cross.trace();
  return (m1 - m2).squaredNorm() + std::max(0.0, tr);
}

}  // namespace

Mat psd_sqrt(const Mat& S) {
  if (S.size() == 0) return S;
  Eigen::SelfAdjointEigenSolver<Mat> es(symmetrize(S));
  if (es.info() != Eigen::Success) throw InternalError("eigendecomposition failed");
  const double scale = std::max(1.0, S.cwiseAbs().maxCoeff());
  Vec ev = es.eigenvalues();
  if (ev(0) < -1e-10 * scale) throw InvalidArgument("matrix is not positive semidefinite");
  ev = ev.cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

// ---------------------------------------------------------------------------
// ProductGaussian

ProductGaussian ProductGaussian::isotropic(const Vec& stacked_mean, double var, std::size_t d) {
  if (d == 0 || stacked_mean.size() % idx(d) != 0) throw InvalidArgument("mean length must be a multiple of d");
  if (!(var >= 0.0)) throw InvalidArgument("variance must be nonnegative");
  ProductGaussian g;
  const std::size_t n = static_cast<std::size_t>(stacked_mean.size()) / d;
  for (std::size_t i = 0; i < n; ++i) {
    g.means.push_back(stacked_mean.segment(idx(i * d), idx(d)));
    g.covs.push_back(var * Mat::Identity(idx(d), idx(d)));
  }
  return g;
}

ProductGaussian ProductGaussian::marginals_of(const GaussianState& g, std::size_t d) {
  if (d == 0 || g.mean.size() % idx(d) != 0) throw InvalidArgument("dimension must be a multiple of d");
  ProductGaussian out;
  const std::size_t n = static_cast<std::size_t>(g.mean.size()) / d;
  for (std::size_t i = 0; i < n; ++i) {
    out.means.push_back(g.mean.segment(idx(i * d), idx(d)));
    out.covs.push_back(block(g.cov, i, i, d));
  }
  return out;
}

Vec ProductGaussian::stacked_mean() const {
  Vec m(idx(n() * d()));
  for (std::size_t i = 0; i < n(); ++i) m.segment(idx(i * d()), idx(d())) = means[i];
  return m;
}

GaussianState ProductGaussian::joint() const { return {stacked_mean(), block_diagonal(covs)}; }

// ---------------------------------------------------------------------------
// Moment flows

GaussianState ou_moments_exact(const Mat& A, const Vec& m0, const Mat& S0, double t) {
  if (A.rows() != A.cols() || m0.size() != A.rows() || S0.rows() != A.rows()) {
    throw InvalidArgument("ou_moments_exact: dimension mismatch");
  }
  if (!(t >= 0.0)) throw InvalidArgument("ou_moments_exact: t must be >= 0");
  require_psd(S0, "S0");
  if (t == 0.0) return {m0, S0};
  if (is_symmetric(A, 1e-12)) return ou_symmetric(A, m0, S0, t);
  return ou_general(A, m0, S0, t);
}

ProductGaussian ip_moments_exact(const Mat& A, const ProductGaussian& mu0, double t) {
  require_valid(mu0);
  const std::size_t n = mu0.n(), d = mu0.d();
  if (A.rows() != idx(n * d) || A.cols() != idx(n * d)) throw InvalidArgument("ip_moments_exact: dimension mismatch");
  if (!(t >= 0.0)) throw InvalidArgument("ip_moments_exact: t must be >= 0");
  ProductGaussian out;
  const Mat zero = Mat::Zero(A.rows(), A.cols());
  const Vec mean = ou_moments_exact(A, mu0.stacked_mean(), zero, t).mean;
  for (std::size_t i = 0; i < n; ++i) {
    out.means.push_back(mean.segment(idx(i * d), idx(d)));
    const Mat Aii = block(A, i, i, d);
    out.covs.push_back(ou_moments_exact(Aii, Vec::Zero(idx(d)), mu0.covs[i], t).cov);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Distances

double w2_gaussian(const GaussianState& g1, const GaussianState& g2) {
  if (g1.mean.size() != g2.mean.size() || g1.cov.rows() != g1.mean.size() || g2.cov.rows() != g2.mean.size()) {
    throw InvalidArgument("w2_gaussian: dimension mismatch");
  }
  require_psd(g1.cov, "covariance");
  require_psd(g2.cov, "covariance");
  return std::sqrt(bures_sq(g1.mean, g1.cov, g2.mean, g2.cov));
}

double w2_gaussian(const ProductGaussian& g1, const ProductGaussian& g2) {
  require_valid(g1);
  require_valid(g2);
  require_same_dims(g1, g2);
  double sq = 0.0;
  for (std::size_t i = 0; i < g1.n(); ++i) {
    require_psd(g1.covs[i], "covariance");
    require_psd(g2.covs[i], "covariance");
    sq += bures_sq(g1.means[i], g1.covs[i], g2.means[i], g2.covs[i]);
  }
  return std::sqrt(sq);
}

double w2_gaussian(const ProductGaussian& g1, const GaussianState& g2) { return w2_gaussian(g1.joint(), g2); }
double w2_gaussian(const GaussianState& g1, const ProductGaussian& g2) { return w2_gaussian(g1, g2.joint()); }

double kl_gaussian(const GaussianState& g1, const GaussianState& g2) {
  const Eigen::Index k = g1.mean.size();
  if (g2.mean.size() != k || g1.cov.rows() != k || g2.cov.rows() != k) {
    throw InvalidArgument("kl_gaussian: dimension mismatch");
  }
  require_psd(g1.cov, "covariance");
  require_psd(g2.cov, "covariance");
  Eigen::LLT<Mat> c2(g2.cov);
  if (c2.info() != Eigen::Success) throw InvalidArgument("kl_gaussian: reference covariance is singular");
  Eigen::LLT<Mat> c1(g1.cov);
  if (c1.info() != Eigen::Success) return kInfiniteEntropy;
  const Mat L1 = c1.matrixL();
  const Mat L2 = c2.matrixL();
  const double logdet1 = 2.0 * L1.diagonal().array().log().sum();
  const double logdet2 = 2.0 * L2.diagonal().array().log().sum();
  if (!std::isfinite(logdet1)) return kInfiniteEntropy;
  const double tr = c2.solve(g1.cov).trace();
  const Vec dm = g2.mean - g1.mean;
  const double maha = dm.dot(c2.solve(dm));
  return std::max(0.0, 0.5 * (tr - static_cast<double>(k) + maha + logdet2 - logdet1));
}

double kl_gaussian(const ProductGaussian& g1, const ProductGaussian& g2) {
  require_valid(g1);
  require_valid(g2);
  require_same_dims(g1, g2);
  double total = 0.0;
  for (std::size_t i = 0; i < g1.n(); ++i) {
    total += kl_gaussian(GaussianState{g1.means[i], g1.covs[i]}, GaussianState{g2.means[i], g2.covs[i]});
  }
  return total;
}

double kl_gaussian(const ProductGaussian& g1, const GaussianState& g2) { return kl_gaussian(g1.joint(), g2); }

// ---------------------------------------------------------------------------
// Mean-field quantities

GaussianState gibbs_gaussian(const Mat& Q, const Vec& l) {
  Eigen::LLT<Mat> llt(Q);
  if (llt.info() != Eigen::Success) throw InvalidArgument("Q must be positive definite");
  const Mat cov = symmetrize(llt.solve(Mat::Identity(Q.rows(), Q.cols())));
  return {llt.solve(l), cov};
}

double log_partition_quadratic(const Mat& Q, const Vec& l) {
  Eigen::LLT<Mat> llt(Q);
  if (llt.info() != Eigen::Success) throw InvalidArgument("Q must be positive definite");
  const Mat L = llt.matrixL();
  const double logdet = 2.0 * L.diagonal().array().log().sum();
  const double k = static_cast<double>(Q.rows());
  return 0.5 * k * std::log(2.0 * std::numbers::pi) - 0.5 * logdet + 0.5 * l.dot(llt.solve(l));
}

ProductGaussian stationary_mf_gaussian(const Mat& Q, const Vec& l, std::size_t d, MeanFieldSolveInfo* info) {
  if (Q.rows() != Q.cols() || d == 0 || Q.rows() % idx(d) != 0 || l.size() != Q.rows()) {
    throw InvalidArgument("stationary_mf_gaussian: dimension mismatch");
  }
  if (!is_symmetric(Q, 1e-12)) throw InvalidArgument("Q must be symmetric");
  const std::size_t n = static_cast<std::size_t>(Q.rows()) / d;

  std::vector<Eigen::LLT<Mat>> diag;
  std::vector<Mat> inv_blocks;
  for (std::size_t i = 0; i < n; ++i) {
    diag.emplace_back(Mat(block(Q, i, i, d)));
    if (diag.back().info() != Eigen::Success) {
      throw InvalidArgument("diagonal block " + std::to_string(i) + " of Q is not positive definite");
    }
    inv_blocks.push_back(symmetrize(diag.back().solve(Mat::Identity(idx(d), idx(d)))));
  }

  // Block Jacobi iteration matrix -D^{-1}(Q - D).
  Mat D = Mat::Zero(Q.rows(), Q.cols());
  for (std::size_t i = 0; i < n; ++i) block(D, i, i, d) = block(Q, i, i, d);
  Mat J(Q.rows(), Q.cols());
  for (std::size_t i = 0; i < n; ++i) {
    J.middleRows(idx(i * d), idx(d)) = -(inv_blocks[i] * (Q - D).middleRows(idx(i * d), idx(d)));
  }
  Eigen::EigenSolver<Mat> jes(J, false);
  const double rho = jes.eigenvalues().cwiseAbs().maxCoeff();

  MeanFieldSolveInfo local;
  local.jacobi_spectral_radius = rho;
  Vec m = Vec::Zero(Q.rows());
  const double target = 1e-12 * std::max(1.0, l.cwiseAbs().maxCoeff());
  bool converged = false;
  if (rho < 1.0) {
    for (std::size_t it = 0; it < 100000; ++it) {
      const Vec r = l - (Q - D) * m;
      Vec next(m.size());
      for (std::size_t i = 0; i < n; ++i) {
        next.segment(idx(i * d), idx(d)) = diag[i].solve(Vec(r.segment(idx(i * d), idx(d))));
      }
      m = next;
      local.jacobi_iterations = it + 1;
      if ((Q * m - l).cwiseAbs().maxCoeff() <= target) {
        converged = true;
        break;
      }
    }
  }
  if (!converged) {
    Eigen::FullPivLU<Mat> lu(Q);
    if (!lu.isInvertible()) throw InvalidArgument("Q is singular");
    m = lu.solve(l);
    local.used_direct_solve = true;
  }
  local.residual = (Q * m - l).cwiseAbs().maxCoeff();
  if (info) *info = local;

  ProductGaussian out;
  for (std::size_t i = 0; i < n; ++i) {
    out.means.push_back(m.segment(idx(i * d), idx(d)));
    out.covs.push_back(inv_blocks[i]);
  }
  return out;
}

double projected_fisher_gaussian(const ProductGaussian& mu, const Mat& Q, const Vec& l) {
  require_valid(mu);
  const std::size_t n = mu.n(), d = mu.d();
  if (Q.rows() != idx(n * d) || Q.cols() != Q.rows() || l.size() != Q.rows()) {
    throw InvalidArgument("projected_fisher_gaussian: dimension mismatch");
  }
  const Vec grad_resid = Q * mu.stacked_mean() - l;
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    Eigen::LLT<Mat> llt(mu.covs[i]);
    if (llt.info() != Eigen::Success) throw InvalidArgument("factor covariance is singular");
    // Conditional score is (Q_ii - S_i^{-1})(x - m_i) + (Qm - l)_i.
    const Mat M = Mat(block(Q, i, i, d)) - llt.solve(Mat::Identity(idx(d), idx(d)));
    total += (M * mu.covs[i] * M.transpose()).trace();
    total += grad_resid.segment(idx(i * d), idx(d)).squaredNorm();
  }
  return total;
}

double entropy_growth_rate_gaussian(const ProductGaussian& mu, const Mat& A) {
  require_valid(mu);
  const std::size_t n = mu.n(), d = mu.d();
  if (A.rows() != idx(n * d) || A.cols() != A.rows()) {
    throw InvalidArgument("entropy_growth_rate_gaussian: dimension mismatch");
  }
  // b^i - E[b^i | X^i] = sum_{j != i} A_ij (X^j - m_j); the factors are
  // independent and centred, so only the diagonal terms j = j' survive.
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const Mat Aij = block(A, i, j, d);
      total += (Aij * mu.covs[j] * Aij.transpose()).trace();
    }
  }
  return 0.25 * total;
}

double path_entropy_linear_gaussian(const Mat& A, const ProductGaussian& mu0, const GaussianState& rho0, double T) {
  require_valid(mu0);
  if (!(T >= 0.0)) throw InvalidArgument("T must be >= 0");
  const double h0 = kl_gaussian(mu0, rho0);
  if (!std::isfinite(h0)) throw InvalidArgument("H(mu0 | rho0) is infinite");
  if (T == 0.0) return h0;
  auto rate = [&](double t) { return entropy_growth_rate_gaussian(ip_moments_exact(A, mu0, t), A); };
  double err = 0.0;
  const double integral =
      boost::math::quadrature::gauss_kronrod<double, 31>::integrate(rate, 0.0, T, 15, 1e-12, &err);
  return h0 + integral;
}

}  // namespace mfip
