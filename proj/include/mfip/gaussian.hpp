#pragma once

#include "mfip/model.hpp"

#include <cstddef>
#include <limits>
#include <vector>

namespace mfip {

// Gaussian law on R^{nd}.
struct GaussianState {
  Vec mean;
  Mat cov;
};

// Product of n Gaussian factors on R^d.
struct ProductGaussian {
  std::vector<Vec> means;
  std::vector<Mat> covs;

  std::size_t n() const { return means.size(); }
  std::size_t d() const { return means.empty() ? 0 : static_cast<std::size_t>(means.front().size()); }
  Dims dims() const { return {n(), d()}; }

  // n factors N(mean_i, var * I_d), mean given stacked.
  static ProductGaussian isotropic(const Vec& stacked_mean, double var, std::size_t d = 1);
  // Marginal factors of a joint Gaussian (the diagonal blocks).
  static ProductGaussian marginals_of(const GaussianState& g, std::size_t d);

  Vec stacked_mean() const;
  GaussianState joint() const;
};

// Distinguished value returned by kl_gaussian for a singular first argument.
inline constexpr double kInfiniteEntropy = std::numeric_limits<double>::infinity();

// Moments of dY = AY dt + sqrt(2) dB started from N(m0, S0).
GaussianState ou_moments_exact(const Mat& A, const Vec& m0, const Mat& S0, double t);

// Moments of the independent projection of the linear drift x -> Ax.
// Means follow the full matrix; each factor's covariance follows its own
// diagonal block.
ProductGaussian ip_moments_exact(const Mat& A, const ProductGaussian& mu0, double t);

double w2_gaussian(const GaussianState& g1, const GaussianState& g2);
double w2_gaussian(const ProductGaussian& g1, const ProductGaussian& g2);
double w2_gaussian(const ProductGaussian& g1, const GaussianState& g2);
double w2_gaussian(const GaussianState& g1, const ProductGaussian& g2);

double kl_gaussian(const GaussianState& g1, const GaussianState& g2);
double kl_gaussian(const ProductGaussian& g1, const ProductGaussian& g2);
double kl_gaussian(const ProductGaussian& g1, const GaussianState& g2);

struct MeanFieldSolveInfo {
  double jacobi_spectral_radius = 0.0;
  std::size_t jacobi_iterations = 0;
  bool used_direct_solve = false;
  double residual = 0.0;
};

// Gaussian solution of the mean-field equations for f = -1/2 x^T Q x + l.x:
// factor means solve Qm = l and factor covariances are Q_ii^{-1}.
ProductGaussian stationary_mf_gaussian(const Mat& Q, const Vec& l, std::size_t d = 1,
                                       MeanFieldSolveInfo* info = nullptr);

// Projected Fisher information of a product Gaussian relative to
// rho* proportional to exp(-1/2 x^T Q x + l.x).
double projected_fisher_gaussian(const ProductGaussian& mu, const Mat& Q, const Vec& l);

// 1/4 sum_i E|b^i(X) - E[b^i(X) | X^i]|^2 for b(x) = Ax under a product Gaussian.
double entropy_growth_rate_gaussian(const ProductGaussian& mu, const Mat& A);

// Path-space relative entropy of the independent projection against the
// original linear diffusion over [0, T].
double path_entropy_linear_gaussian(const Mat& A, const ProductGaussian& mu0, const GaussianState& rho0,
                                    double T);

// Target law rho* = N(Q^{-1} l, Q^{-1}) of the quadratic potential.
GaussianState gibbs_gaussian(const Mat& Q, const Vec& l);

// log of the normalizer of exp(-1/2 x^T Q x + l.x).
double log_partition_quadratic(const Mat& Q, const Vec& l);

// Symmetric PSD square root; eigenvalues below -1e-10 * scale are rejected.
Mat psd_sqrt(const Mat& S);

}  // namespace mfip
