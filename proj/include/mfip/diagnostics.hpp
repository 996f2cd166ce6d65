#pragma once

#include "mfip/dynamics.hpp"
#include "mfip/model.hpp"

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace mfip {

struct BoundInputs {
  double L = 0.0;       // Lipschitz constant of b
  double c0 = 0.0;      // Poincare constant of mu0
  double eta0 = 0.0;    // LSI constant of rho0
  double kappa = 0.0;   // concavity modulus
  double T = 0.0;       // horizon
  std::optional<double> h0;  // H(mu0 | rho0)
};

struct MetricSample {
  double value = 0.0;
  double std_err = 0.0;
  std::size_t m_used = 0;
  // Set when the value only bounds the target from below (multi-d blocks
  // compared coordinate by coordinate).
  bool lower_bound = false;
};

// W2 between the empirical measures of two scalar samples. Unequal sizes are
// handled exactly through the quantile functions, no resampling.
double empirical_w2_1d(std::span<const double> xs, std::span<const double> ys);

double ks_statistic(std::span<const double> xs, std::span<const double> ys);
// Asymptotic two-sample Kolmogorov p-value with the Stephens correction.
double ks_pvalue(double D, std::size_t nx, std::size_t ny);

// Delete-one-group jackknife standard error from the leave-out estimates.
double jackknife_std_err(std::span<const double> leave_out);

// Average over k-subsets of coordinates of the squared W2 between the
// subset marginals, each approximated by summing squared 1-d distances of the
// scalar components. Exact between product laws with d = 1. std_err is a
// jackknife over particle groups (index k goes to the same group in both
// ensembles, so coupled ensembles keep their pairing) plus the subset
// sampling error when subsets are drawn rather than enumerated.
MetricSample w_k_marginal_distance(const EnsembleState& mu, const EnsembleState& rho, std::size_t k,
                                   std::size_t subsets = 200, std::uint64_t seed = 0);

// Perturbation g = (g^1, ..., g^n) with g^i acting on coordinate i only.
using CoordinateField = std::function<void(std::size_t i, std::span<const double> xi, std::span<double> out)>;

// 1/4 sum_i E|b^i(X) - E[b^i(X) | X^i]|^2 by the swap estimator, corrected
// for the O(1/m) noise of the leave-one-out average. Needs m >= 100.
MetricSample entropy_growth_rate_mc(const EnsembleState& state, const DriftSpec& spec);
// Same with the coordinate drift E[b^i | X^i] + eps g^i(X^i).
MetricSample entropy_growth_rate_mc(const EnsembleState& state, const DriftSpec& spec, const CoordinateField& g,
                                    double eps);
// Perturbed minus unperturbed rate, estimated on the same particles.
MetricSample entropy_growth_gap_mc(const EnsembleState& state, const DriftSpec& spec, const CoordinateField& g,
                                   double eps);

// c_t = c0 e^{2L^2 t} + (e^{2L^2 t} - 1) / L^2, and c0 + 2t at L = 0.
double poincare_constant_bound(double c0, double L, double t);

using TimeFunction = std::function<double(double)>;

// h0 + 1/4 int_0^T c_t G(t) dt, adaptive Gauss-Kronrod.
double proximity_bound(const BoundInputs& in, const TimeFunction& hess_trace);
// Same with G given at snapshot times (trapezoid); times must start at 0 and end at T.
double proximity_bound(const BoundInputs& in, std::span<const double> times, std::span<const double> hess_trace);

// e^{-eta t} h0 + c/2 int_0^t e^{-eta(t-s)} G(s) ds with eta = min(kappa, eta0), c = max(c0, 1/kappa).
double proximity_bound_uniform(const BoundInputs& in, const TimeFunction& hess_trace, double t);

// sum_{i != j} ||A_ij||_F^2 for the linear drift x -> A x.
double hess_trace_linear(const Mat& A_full, std::size_t d);
// Ensemble average of sum_{i != j} ||grad_j b^i||_F^2.
MetricSample hess_trace_mc(const EnsembleState& state, const DriftSpec& spec);

struct ChaosOptions {
  double dt = 1e-3;
  double init_mean = 0.0;
  double init_var = 1.0;
};

struct ChaosRow {
  std::size_t n = 0;
  double trace_ratio = 0.0;  // Tr(AA^T) / n
  double w2_sq = 0.0;        // W_(1)^2 estimate
  double std_err = 0.0;
};

// For each matrix (rows summing to one): simulate m replicas of the
// interacting system with scalar coordinates and an m-particle
// McKean-Vlasov system on the same seed, then compare the coordinate
// marginals at time T. Sharing the seed couples the two runs through their
// initial draws and Brownian increments.
std::vector<ChaosRow> chaos_scaling_experiment(const std::vector<InteractionMatrix>& family, const SiteKernel& K1,
                                               const PairKernel& K2, double T, std::size_t m, std::uint64_t seed,
                                               const ChaosOptions& opts = {});

// Header metric,t,value,stderr,m_used.
void write_metric_header(std::ostream& out);
void write_metric_row(std::ostream& out, const std::string& metric, double t, const MetricSample& s);

}  // namespace mfip
