#pragma once

#include "mfip/gaussian.hpp"
#include "mfip/model.hpp"

#include <cstddef>
#include <functional>
#include <iosfwd>
#include <span>
#include <vector>

namespace mfip {

struct Grid1D {
  double lo = -8.0;
  double hi = 8.0;
  std::size_t npoints = 512;

  Grid1D() = default;
  Grid1D(double lo, double hi, std::size_t npoints);
  double spacing() const { return (hi - lo) / static_cast<double>(npoints - 1); }
  double x(std::size_t k) const { return lo + static_cast<double>(k) * spacing(); }
  Vec points() const;
};

// Log densities are floored here; exp(-690) is near the smallest normal double.
inline constexpr double kLogDensityFloor = -690.0;

struct GridMarginal {
  Grid1D grid;
  Vec log_density;
  double normalization_error = 0.0;  // |trapezoid integral - 1| after normalize()

  GridMarginal() = default;
  GridMarginal(Grid1D grid, Vec log_density);  // normalizes
  static GridMarginal gaussian(const Grid1D& grid, double mean, double var);

  void normalize();
  Vec density() const;
  double integral() const;  // trapezoid
  double mean() const;
  double second_moment() const;
  double variance() const { return second_moment() - mean() * mean(); }
  double entropy() const;  // int p log p
};

struct ProductGridMeasure {
  std::vector<GridMarginal> marginals;

  std::size_t n() const { return marginals.size(); }
  static ProductGridMeasure gaussian(const Grid1D& grid, const Vec& means, const Vec& vars);
};

// f on R^n with d = 1. Quadratic potentials f = -1/2 x^T Q x + l.x are handled
// through moments; anything else is tabulated by tensor trapezoid quadrature,
// which is limited to kMaxTensorDims coordinates.
class Potential {
 public:
  static constexpr std::size_t kMaxTensorDims = 4;

  static Potential quadratic(Mat Q, Vec l);
  // Only QuadraticPotential specs with d = 1.
  static Potential from_drift(const DriftSpec& spec);
  static Potential general(std::size_t n, std::function<double(std::span<const double>)> f);

  std::size_t n() const { return n_; }
  bool is_quadratic() const { return quadratic_; }
  const Mat& Q() const { return Q_; }
  const Vec& l() const { return l_; }
  double operator()(std::span<const double> x) const;

 private:
  std::size_t n_ = 0;
  bool quadratic_ = false;
  Mat Q_;
  Vec l_;
  std::function<double(std::span<const double>)> f_;
};

// E_mu[f(x, X^{-i})] on the grid of marginal i.
Vec conditional_potential(const Potential& f, const ProductGridMeasure& mu, std::size_t i);

// Marginal i replaced by the normalized density proportional to exp(conditional potential).
ProductGridMeasure cavi_step(const Potential& f, const ProductGridMeasure& mu, std::size_t i);

struct CaviResult {
  ProductGridMeasure mu;
  std::vector<double> residuals;     // per sweep: max_i sup |change of log density|
  std::vector<double> free_energies; // after each sweep
  bool converged = false;
  std::size_t sweeps = 0;
};

CaviResult cavi_solve(const Potential& f, ProductGridMeasure mu0, std::size_t max_sweeps, double tol);

// sum_i int mu^i log mu^i - E_mu f.
double free_energy(const Potential& f, const ProductGridMeasure& mu);

// --- one-dimensional quantile representation -------------------------------

// Quantiles at the levels (k + 1/2)/K, k = 0..K-1.
Vec quantile_levels(std::size_t K);
Vec grid_to_quantiles(const GridMarginal& g, std::size_t K);
// Density implied by a strictly increasing quantile vector, tabulated on `grid`.
GridMarginal quantiles_to_grid(const Vec& q, const Grid1D& grid);

// Least-squares projection onto nondecreasing vectors (pool adjacent violators).
Vec isotonic_projection(const Vec& y);

// W2 between the two K-point measures (1/K) sum delta_{q_k}.
double w2_quantiles(const Vec& a, const Vec& b);
// W2 between a grid marginal and N(mean, var), by quantile integration.
double w2_grid_gaussian(const GridMarginal& g, double mean, double var);

struct JKOConfig {
  double tau = 0.05;
  std::size_t inner_iters = 200;  // Newton iterations per block
  double inner_lr = 1.0;          // initial step length of the line search
  std::size_t coord_sweeps = 50;  // block sweeps per step (stops early once blocks settle)
  std::size_t levels = 256;
};

// Product measure as n quantile vectors.
using QuantileProduct = std::vector<Vec>;

struct JKOStepInfo {
  double objective_before = 0.0;
  double objective_after = 0.0;
  std::size_t sweeps = 0;
};

// One product-constrained JKO step in quantile coordinates.
QuantileProduct jko_step_quantiles(const Potential& f, const QuantileProduct& prev, const JKOConfig& cfg,
                                   const Grid1D& grid, JKOStepInfo* info = nullptr);
ProductGridMeasure jko_step_product(const Potential& f, const ProductGridMeasure& prev, const JKOConfig& cfg);

struct JKOTrajectory {
  std::vector<double> times;
  std::vector<ProductGridMeasure> measures;
  std::vector<QuantileProduct> quantiles;
  std::vector<double> free_energy;           // free_energy() of the grid measures
  std::vector<double> discrete_free_energy;  // same functional on the quantile point measures
};

// ceil(t_end / tau) steps; the quantile state is carried between steps.
JKOTrajectory jko_trajectory(const Potential& f, const ProductGridMeasure& mu0, const JKOConfig& cfg,
                             double t_end);

// Entropy plus potential energy of the quantile point measures, with entropy
// from the gaps between consecutive quantiles.
double discrete_free_energy(const Potential& f, const QuantileProduct& q, const Grid1D& grid);

void write_marginals_csv(const ProductGridMeasure& mu, std::ostream& out);
void write_cavi_history_csv(const CaviResult& r, std::ostream& out);

}  // namespace mfip
