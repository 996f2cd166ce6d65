#include "mfip/variational.hpp"

#include "mfip/errors.hpp"

#include <boost/math/distributions/normal.hpp>
#include <boost/math/interpolators/cardinal_cubic_b_spline.hpp>
#include <boost/math/interpolators/cubic_hermite.hpp>

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numbers>
#include <ostream>
#include <string>

namespace mfip {

namespace {

Eigen::Index idx(std::size_t v) { return static_cast<Eigen::Index>(v); }

Vec trapezoid_weights(const Grid1D& g) {
  Vec w = Vec::Constant(idx(g.npoints), g.spacing());
  w(0) *= 0.5;
  w(w.size() - 1) *= 0.5;
  return w;
}

// Quadrature nodes of one marginal: grid points with non-negligible weight.
struct Nodes {
  std::vector<double> x;
  std::vector<double> w;
};

Nodes quadrature_nodes(const GridMarginal& g) {
  const Vec w = trapezoid_weights(g.grid).cwiseProduct(g.density());
  const double cut = 1e-16 * w.maxCoeff();
  Nodes out;
  for (std::size_t k = 0; k < g.grid.npoints; ++k) {
    if (w(idx(k)) > cut) {
      out.x.push_back(g.grid.x(k));
      out.w.push_back(w(idx(k)));
    }
  }
  return out;
}

// Calls fn(point, weight) over the tensor product of `nodes`, with coordinate
// `skip` left for the caller to fill in.
template <class Fn>
void tensor_sum(const std::vector<Nodes>& nodes, std::size_t skip, std::vector<double>& point, Fn&& fn) {
  const std::size_t n = nodes.size();
  std::vector<std::size_t> pos(n, 0);
  for (;;) {
    double w = 1.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == skip) continue;
      point[j] = nodes[j].x[pos[j]];
      w *= nodes[j].w[pos[j]];
    }
    fn(w);
    std::size_t j = 0;
    for (; j < n; ++j) {
      if (j == skip) continue;
      if (++pos[j] < nodes[j].x.size()) break;
      pos[j] = 0;
    }
    if (j == n) return;
  }
}

void require_tensor(const Potential& f, const char* what) {
  if (f.n() > Potential::kMaxTensorDims) {
    throw Unsupported(std::string(what) + ": tensor quadrature is limited to " +
                      std::to_string(Potential::kMaxTensorDims) + " coordinates");
  }
}

void require_match(const Potential& f, std::size_t n) {
  if (f.n() != n) throw InvalidArgument("potential and measure have different numbers of coordinates");
}

// E_mu f for quadratic f given per-coordinate means and second moments.
double quadratic_expectation(const Potential& f, const Vec& m, const Vec& s) {
  const Mat& Q = f.Q();
  double e = f.l().dot(m);
  for (Eigen::Index j = 0; j < Q.rows(); ++j)
    for (Eigen::Index k = 0; k < Q.cols(); ++k) e -= 0.5 * Q(j, k) * (j == k ? s(j) : m(j) * m(k));
  return e;
}

}  // namespace

// ---------------------------------------------------------------------------
// Grids and marginals

Grid1D::Grid1D(double lo_, double hi_, std::size_t npoints_) : lo(lo_), hi(hi_), npoints(npoints_) {
  if (!(lo < hi) || !std::isfinite(lo) || !std::isfinite(hi)) throw InvalidArgument("grid needs lo < hi");
  if (npoints < 16) throw InvalidArgument("grid needs at least 16 points");
}

Vec Grid1D::points() const {
  Vec x(idx(npoints));
  for (std::size_t k = 0; k < npoints; ++k) x(idx(k)) = this->x(k);
  return x;
}

GridMarginal::GridMarginal(Grid1D g, Vec ld) : grid(g), log_density(std::move(ld)) {
  if (static_cast<std::size_t>(log_density.size()) != grid.npoints) {
    throw InvalidArgument("log density length does not match the grid");
  }
  normalize();
}

GridMarginal GridMarginal::gaussian(const Grid1D& grid, double mean, double var) {
  if (!(var > 0)) throw InvalidArgument("variance must be positive");
  const Vec x = grid.points();
  return GridMarginal(grid, (-(x.array() - mean).square() / (2 * var)).matrix());
}

void GridMarginal::normalize() {
  const double top = log_density.maxCoeff();
  if (!std::isfinite(top)) throw InvalidArgument("log density must be finite somewhere and never +inf or NaN");
  if (log_density.hasNaN()) throw InvalidArgument("log density contains NaN");
  log_density.array() -= top;
  const double z = trapezoid_weights(grid).dot(log_density.array().exp().matrix());
  log_density.array() -= std::log(z);
  log_density = log_density.cwiseMax(kLogDensityFloor);
  normalization_error = std::abs(integral() - 1.0);
  if (normalization_error > 1e-6) throw InternalError("normalization failed");
}

Vec GridMarginal::density() const { return log_density.array().exp().matrix(); }

double GridMarginal::integral() const { return trapezoid_weights(grid).dot(density()); }

double GridMarginal::mean() const {
  return trapezoid_weights(grid).dot(density().cwiseProduct(grid.points()));
}

double GridMarginal::second_moment() const {
  return trapezoid_weights(grid).dot(density().cwiseProduct(grid.points().array().square().matrix()));
}

double GridMarginal::entropy() const {
  return trapezoid_weights(grid).dot(density().cwiseProduct(log_density));
}

ProductGridMeasure ProductGridMeasure::gaussian(const Grid1D& grid, const Vec& means, const Vec& vars) {
  if (means.size() != vars.size()) throw InvalidArgument("means and variances differ in length");
  ProductGridMeasure mu;
  for (Eigen::Index i = 0; i < means.size(); ++i) mu.marginals.push_back(GridMarginal::gaussian(grid, means(i), vars(i)));
  return mu;
}

// ---------------------------------------------------------------------------
// Potentials

Potential Potential::quadratic(Mat Q, Vec l) {
  if (Q.rows() != Q.cols() || Q.rows() != l.size() || Q.rows() == 0) {
    throw InvalidArgument("quadratic potential dimension mismatch");
  }
  if (!is_symmetric(Q, 1e-12)) throw InvalidArgument("Q must be symmetric");
  Potential p;
  p.n_ = static_cast<std::size_t>(Q.rows());
  p.quadratic_ = true;
  p.Q_ = std::move(Q);
  p.l_ = std::move(l);
  return p;
}

Potential Potential::from_drift(const DriftSpec& spec) {
  const auto* q = std::get_if<QuadraticPotential>(&spec.form());
  if (!q || spec.dims().d != 1) throw Unsupported("grid solvers need a quadratic potential with d = 1");
  return quadratic(q->Q, q->l);
}

Potential Potential::general(std::size_t n, std::function<double(std::span<const double>)> f) {
  if (n == 0 || !f) throw InvalidArgument("general potential needs n > 0 and a function");
  Potential p;
  p.n_ = n;
  p.f_ = std::move(f);
  return p;
}

double Potential::operator()(std::span<const double> x) const {
  if (x.size() != n_) throw InvalidArgument("potential evaluated at a point of the wrong dimension");
  if (!quadratic_) return f_(x);
  Eigen::Map<const Vec> v(x.data(), idx(n_));
  return -0.5 * v.dot(Q_ * v) + l_.dot(v);
}

// ---------------------------------------------------------------------------
// Mean-field iteration

Vec conditional_potential(const Potential& f, const ProductGridMeasure& mu, std::size_t i) {
  const std::size_t n = mu.n();
  require_match(f, n);
  if (i >= n) throw InvalidArgument("coordinate index out of range");
  const Grid1D& grid = mu.marginals[i].grid;
  const Vec x = grid.points();
  if (f.is_quadratic()) {
    const Mat& Q = f.Q();
    double lin = f.l()(idx(i)), c = 0.0;
    Vec m(idx(n)), s(idx(n));
    for (std::size_t j = 0; j < n; ++j) {
      m(idx(j)) = mu.marginals[j].mean();
      s(idx(j)) = mu.marginals[j].second_moment();
    }
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      lin -= Q(idx(i), idx(j)) * m(idx(j));
      c += f.l()(idx(j)) * m(idx(j));
      for (std::size_t k = 0; k < n; ++k) {
        if (k == i) continue;
        c -= 0.5 * Q(idx(j), idx(k)) * (j == k ? s(idx(j)) : m(idx(j)) * m(idx(k)));
      }
    }
    return (-0.5 * Q(idx(i), idx(i)) * x.array().square() + lin * x.array() + c).matrix();
  }
  require_tensor(f, "conditional_potential");
  std::vector<Nodes> nodes(n);
  for (std::size_t j = 0; j < n; ++j)
    if (j != i) nodes[j] = quadrature_nodes(mu.marginals[j]);
  nodes[i].x.assign(1, 0.0);
  nodes[i].w.assign(1, 1.0);
  Vec out(x.size());
  std::vector<double> point(n);
  for (Eigen::Index a = 0; a < x.size(); ++a) {
    double acc = 0.0, wsum = 0.0;
    tensor_sum(nodes, i, point, [&](double w) {
      point[i] = x(a);
      acc += w * f(point);
      wsum += w;
    });
    out(a) = acc / wsum;
  }
  return out;
}

ProductGridMeasure cavi_step(const Potential& f, const ProductGridMeasure& mu, std::size_t i) {
  ProductGridMeasure out = mu;
  out.marginals[i] = GridMarginal(mu.marginals[i].grid, conditional_potential(f, mu, i));
  return out;
}

CaviResult cavi_solve(const Potential& f, ProductGridMeasure mu0, std::size_t max_sweeps, double tol) {
  require_match(f, mu0.n());
  CaviResult r;
  r.mu = std::move(mu0);
  for (std::size_t sweep = 0; sweep < max_sweeps; ++sweep) {
    double change = 0.0;
    for (std::size_t i = 0; i < r.mu.n(); ++i) {
      const Vec before = r.mu.marginals[i].log_density;
      r.mu = cavi_step(f, r.mu, i);
      change = std::max(change, (r.mu.marginals[i].log_density - before).cwiseAbs().maxCoeff());
    }
    r.sweeps = sweep + 1;
    r.residuals.push_back(change);
    r.free_energies.push_back(free_energy(f, r.mu));
    if (change < tol) {
      r.converged = true;
      break;
    }
  }
  return r;
}

double free_energy(const Potential& f, const ProductGridMeasure& mu) {
  const std::size_t n = mu.n();
  require_match(f, n);
  double h = 0.0;
  for (const auto& g : mu.marginals) h += g.entropy();
  if (f.is_quadratic()) {
    Vec m(idx(n)), s(idx(n));
    for (std::size_t j = 0; j < n; ++j) {
      m(idx(j)) = mu.marginals[j].mean();
      s(idx(j)) = mu.marginals[j].second_moment();
    }
    return h - quadratic_expectation(f, m, s);
  }
  require_tensor(f, "free_energy");
  std::vector<Nodes> nodes(n);
  for (std::size_t j = 0; j < n; ++j) nodes[j] = quadrature_nodes(mu.marginals[j]);
  std::vector<double> point(n);
  double acc = 0.0, wsum = 0.0;
  tensor_sum(nodes, n, point, [&](double w) {
    acc += w * f(point);
    wsum += w;
  });
  return h - acc / wsum;
}

// ---------------------------------------------------------------------------
// Quantiles

Vec quantile_levels(std::size_t K) {
  if (K < 4) throw InvalidArgument("need at least 4 quantile levels");
  Vec u(idx(K));
  for (std::size_t k = 0; k < K; ++k) u(idx(k)) = (static_cast<double>(k) + 0.5) / static_cast<double>(K);
  return u;
}

Vec grid_to_quantiles(const GridMarginal& g, std::size_t K) {
  const Vec u = quantile_levels(K);
  const std::size_t N = g.grid.npoints;
  const double h = g.grid.spacing();
  const Vec& ld = g.log_density;
  // Density log-linear inside each cell: exact cell masses and inverse CDF.
  std::vector<double> F(N, 0.0), slope(N - 1);
  for (std::size_t j = 0; j + 1 < N; ++j) {
    const double s = (ld(idx(j + 1)) - ld(idx(j))) / h;
    slope[j] = s;
    const double z = s * h;
    const double ratio = std::abs(z) < 1e-12 ? 1.0 : std::expm1(z) / z;
    F[j + 1] = F[j] + h * std::exp(ld(idx(j))) * ratio;
  }
  const double total = F[N - 1];
  Vec q(idx(K));
  std::size_t j = 0;
  for (std::size_t k = 0; k < K; ++k) {
    const double target = u(idx(k)) * total;
    while (j + 2 < N && F[j + 1] <= target) ++j;
    const double r = target - F[j];
    const double p = std::exp(ld(idx(j)));
    const double s = slope[j];
    double t = std::abs(s * r / p) < 1e-12 ? r / p : std::log1p(s * r / p) / s;
    if (!std::isfinite(t)) t = h;
    q(idx(k)) = g.grid.x(j) + std::clamp(t, 0.0, h);
  }
  return q;
}

namespace {

// First and second derivatives of the interpolating quadratic through three
// neighbouring points, evaluated at the middle (or end) point.
void quad_derivs(const std::vector<double>& x, const std::vector<double>& y, std::vector<double>& d1,
                 std::vector<double>& d2) {
  const std::size_t n = x.size();
  d1.assign(n, 0.0);
  d2.assign(n, 0.0);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t c = std::clamp<std::size_t>(k, 1, n - 2);
    const double x0 = x[c - 1], x1 = x[c], x2 = x[c + 1];
    const double a0 = y[c - 1] / ((x0 - x1) * (x0 - x2));
    const double a1 = y[c] / ((x1 - x0) * (x1 - x2));
    const double a2 = y[c + 1] / ((x2 - x0) * (x2 - x1));
    const double t = x[k];
    d1[k] = a0 * ((t - x1) + (t - x2)) + a1 * ((t - x0) + (t - x2)) + a2 * ((t - x0) + (t - x1));
    d2[k] = 2 * (a0 + a1 + a2);
  }
}

}  // namespace

GridMarginal quantiles_to_grid(const Vec& q, const Grid1D& grid) {
  const std::size_t K = static_cast<std::size_t>(q.size());
  if (K < 4) throw InvalidArgument("need at least 4 quantiles");
  for (std::size_t k = 0; k + 1 < K; ++k)
    if (!(q(idx(k + 1)) > q(idx(k)))) throw InvalidArgument("quantiles must be strictly increasing");
  // Each gap between consecutive quantiles holds mass 1/K. The cell average
  // of the density, placed at the cell midpoint, is corrected for curvature:
  // avg = p(mid) (1 + gap^2/24 (l'' + l'^2)) with l = log p.
  const std::size_t M = K - 1;
  std::vector<double> xm(M), gap(M), ell(M), d1, d2;
  for (std::size_t k = 0; k < M; ++k) {
    gap[k] = q(idx(k + 1)) - q(idx(k));
    xm[k] = 0.5 * (q(idx(k + 1)) + q(idx(k)));
    ell[k] = -std::log(static_cast<double>(K) * gap[k]);
  }
  const std::vector<double> raw = ell;
  for (int pass = 0; pass < 2; ++pass) {
    quad_derivs(xm, ell, d1, d2);
    for (std::size_t k = 0; k < M; ++k) {
      const double c = 1.0 + gap[k] * gap[k] / 24.0 * (d2[k] + d1[k] * d1[k]);
      if (c > 0.5 && c < 2.0) ell[k] = raw[k] - std::log(c);
    }
  }
  quad_derivs(xm, ell, d1, d2);
  const double left_slope = std::max(d1.front(), 0.0), left_curv = std::min(d2.front(), 0.0);
  const double right_slope = std::min(d1.back(), 0.0), right_curv = std::min(d2.back(), 0.0);
  const double x_first = xm.front(), x_last = xm.back(), l_first = ell.front(), l_last = ell.back();
  boost::math::interpolators::cubic_hermite<std::vector<double>> spline(std::move(xm), std::move(ell), std::move(d1));
  Vec ld(idx(grid.npoints));
  for (std::size_t a = 0; a < grid.npoints; ++a) {
    const double x = grid.x(a);
    if (x < x_first) {
      const double dx = x - x_first;
      ld(idx(a)) = l_first + left_slope * dx + 0.5 * left_curv * dx * dx;
    } else if (x > x_last) {
      const double dx = x - x_last;
      ld(idx(a)) = l_last + right_slope * dx + 0.5 * right_curv * dx * dx;
    } else {
      ld(idx(a)) = spline(x);
    }
  }
  return GridMarginal(grid, ld);
}

Vec isotonic_projection(const Vec& y) {
  const Eigen::Index n = y.size();
  std::vector<double> value;
  std::vector<Eigen::Index> count;
  value.reserve(static_cast<std::size_t>(n));
  count.reserve(static_cast<std::size_t>(n));
  for (Eigen::Index k = 0; k < n; ++k) {
    value.push_back(y(k));
    count.push_back(1);
    while (value.size() > 1 && value[value.size() - 2] > value.back()) {
      const double v = value.back();
      const Eigen::Index c = count.back();
      value.pop_back();
      count.pop_back();
      const auto c0 = static_cast<double>(count.back());
      value.back() = (value.back() * c0 + v * static_cast<double>(c)) / (c0 + static_cast<double>(c));
      count.back() += c;
    }
  }
  Vec out(n);
  Eigen::Index k = 0;
  for (std::size_t b = 0; b < value.size(); ++b)
    for (Eigen::Index c = 0; c < count[b]; ++c) out(k++) = value[b];
  for (Eigen::Index j = 0; j + 1 < n; ++j)
    if (out(j) > out(j + 1)) throw InternalError("isotonic projection lost monotonicity");
  return out;
}

double w2_quantiles(const Vec& a, const Vec& b) {
  if (a.size() != b.size() || a.size() == 0) throw InvalidArgument("quantile vectors differ in length");
  return std::sqrt((a - b).squaredNorm() / static_cast<double>(a.size()));
}

double w2_grid_gaussian(const GridMarginal& g, double mean, double var) {
  if (!(var > 0)) throw InvalidArgument("variance must be positive");
  constexpr std::size_t kLevels = 4096;
  const Vec q = grid_to_quantiles(g, kLevels);
  const Vec u = quantile_levels(kLevels);
  const boost::math::normal_distribution<double> nd(mean, std::sqrt(var));
  double acc = 0.0;
  for (Eigen::Index k = 0; k < q.size(); ++k) {
    const double d = q(k) - boost::math::quantile(nd, u(k));
    acc += d * d;
  }
  return std::sqrt(acc / static_cast<double>(kLevels));
}

// ---------------------------------------------------------------------------
// JKO

namespace {

// Block potential V = -(conditional potential) with first two derivatives.
struct BlockPotential {
  std::function<double(double)> v;
  std::function<double(double)> d1;
  std::function<double(double)> d2;
};

double gap_entropy(const Vec& q) {
  const auto K = static_cast<double>(q.size());
  double s = 0.0;
  for (Eigen::Index k = 0; k + 1 < q.size(); ++k) {
    const double g = q(k + 1) - q(k);
    if (!(g > 0)) return std::numeric_limits<double>::infinity();
    s -= std::log(g);
  }
  return s / K - (K - 1) / K * std::log(K);
}

double block_objective(const Vec& q, const Vec& p, double tau, const BlockPotential& V) {
  const double h = gap_entropy(q);
  if (!std::isfinite(h)) return h;
  double e = 0.0;
  for (Eigen::Index k = 0; k < q.size(); ++k) e += V.v(q(k)) + (q(k) - p(k)) * (q(k) - p(k)) / (2 * tau);
  return h + e / static_cast<double>(q.size());
}

// Newton iterations on the tridiagonal Hessian with an Armijo line search;
// every trial point is projected onto nondecreasing vectors.
Vec block_solve(Vec q, const Vec& p, double tau, const BlockPotential& V, const JKOConfig& cfg) {
  const Eigen::Index K = q.size();
  const double invK = 1.0 / static_cast<double>(K);
  Vec g(K), diag(K), off(K > 1 ? K - 1 : 0), dk(K), lk(K), delta(K);
  double J = block_objective(q, p, tau, V);
  if (!std::isfinite(J)) throw InvalidArgument("initial quantiles must be strictly increasing");
  for (std::size_t it = 0; it < cfg.inner_iters; ++it) {
    for (Eigen::Index k = 0; k < K; ++k) {
      g(k) = V.d1(q(k)) + (q(k) - p(k)) / tau;
      diag(k) = V.d2(q(k)) + 1.0 / tau;
    }
    for (Eigen::Index k = 0; k + 1 < K; ++k) {
      const double inv = 1.0 / (q(k + 1) - q(k));
      g(k) += inv;
      g(k + 1) -= inv;
      diag(k) += inv * inv;
      diag(k + 1) += inv * inv;
      off(k) = -inv * inv;
    }
    g *= invK;
    diag *= invK;
    off *= invK;
    // LDL^T of the shifted tridiagonal matrix; the shift grows until it is PD.
    double shift = 0.0;
    for (;;) {
      bool ok = true;
      for (Eigen::Index k = 0; k < K && ok; ++k) {
        dk(k) = diag(k) + shift - (k > 0 ? lk(k - 1) * off(k - 1) : 0.0);
        ok = dk(k) > 0;
        if (k + 1 < K) lk(k) = off(k) / dk(k);
      }
      if (ok) break;
      shift = shift == 0.0 ? 1e-10 * diag.cwiseAbs().maxCoeff() : 10 * shift;
    }
    for (Eigen::Index k = 0; k < K; ++k) delta(k) = -g(k) - (k > 0 ? lk(k - 1) * delta(k - 1) : 0.0);
    for (Eigen::Index k = 0; k < K; ++k) delta(k) /= dk(k);
    for (Eigen::Index k = K - 2; k >= 0; --k) delta(k) -= lk(k) * delta(k + 1);
    const double decrease = g.dot(delta);
    if (!(decrease < -1e-24)) break;
    double alpha = cfg.inner_lr;
    bool accepted = false;
    for (int ls = 0; ls < 60; ++ls) {
      const Vec trial = isotonic_projection(q + alpha * delta);
      const double Jt = block_objective(trial, p, tau, V);
      if (std::isfinite(Jt) && Jt <= J + 1e-4 * alpha * decrease) {
        q = trial;
        J = Jt;
        accepted = true;
        break;
      }
      alpha *= 0.5;
    }
    if (!accepted) break;
  }
  return q;
}

BlockPotential quadratic_block(const Potential& f, const QuantileProduct& q, std::size_t i) {
  const Mat& Q = f.Q();
  double b = -f.l()(idx(i));
  for (std::size_t j = 0; j < q.size(); ++j)
    if (j != i) b += Q(idx(i), idx(j)) * q[j].mean();
  const double a = Q(idx(i), idx(i));
  return {[a, b](double x) { return 0.5 * a * x * x + b * x; }, [a, b](double x) { return a * x + b; },
          [a](double) { return a; }};
}

BlockPotential tabulated_block(const Potential& f, const QuantileProduct& q, std::size_t i, const Grid1D& grid) {
  ProductGridMeasure mu;
  for (const auto& qi : q) mu.marginals.push_back(quantiles_to_grid(qi, grid));
  const Vec V = -conditional_potential(f, mu, i);
  auto spline = std::make_shared<boost::math::interpolators::cardinal_cubic_b_spline<double>>(V.data(), static_cast<std::size_t>(V.size()),
                                                                               grid.lo, grid.spacing());
  // Outside the grid: second-order Taylor expansion at the nearest end.
  auto edge = [spline, lo = grid.lo, hi = grid.hi](double x, int order) {
    const double b = x < lo ? lo : hi;
    const double dx = x - b;
    const double v = (*spline)(b), d1 = spline->prime(b), d2 = spline->double_prime(b);
    if (order == 0) return v + d1 * dx + 0.5 * d2 * dx * dx;
    if (order == 1) return d1 + d2 * dx;
    return d2;
  };
  auto inside = [lo = grid.lo, hi = grid.hi](double x) { return x >= lo && x <= hi; };
  return {[=](double x) { return inside(x) ? (*spline)(x) : edge(x, 0); },
          [=](double x) { return inside(x) ? spline->prime(x) : edge(x, 1); },
          [=](double x) { return inside(x) ? spline->double_prime(x) : edge(x, 2); }};
}

double quantile_expectation(const Potential& f, const QuantileProduct& q) {
  const std::size_t n = q.size();
  if (f.is_quadratic()) {
    Vec m(idx(n)), s(idx(n));
    for (std::size_t j = 0; j < n; ++j) {
      m(idx(j)) = q[j].mean();
      s(idx(j)) = q[j].squaredNorm() / static_cast<double>(q[j].size());
    }
    return quadratic_expectation(f, m, s);
  }
  double count = 1.0;
  for (const auto& v : q) count *= static_cast<double>(v.size());
  if (count > 1e8) throw Unsupported("point-measure expectation too large for a general potential");
  std::vector<Nodes> nodes(n);
  for (std::size_t j = 0; j < n; ++j) {
    nodes[j].x.assign(q[j].data(), q[j].data() + q[j].size());
    nodes[j].w.assign(static_cast<std::size_t>(q[j].size()), 1.0 / static_cast<double>(q[j].size()));
  }
  std::vector<double> point(n);
  double acc = 0.0;
  tensor_sum(nodes, n, point, [&](double w) { acc += w * f(point); });
  return acc;
}

}  // namespace

double discrete_free_energy(const Potential& f, const QuantileProduct& q, const Grid1D&) {
  require_match(f, q.size());
  double h = 0.0;
  for (const auto& v : q) h += gap_entropy(v);
  return h - quantile_expectation(f, q);
}

QuantileProduct jko_step_quantiles(const Potential& f, const QuantileProduct& prev, const JKOConfig& cfg,
                                   const Grid1D& grid, JKOStepInfo* info) {
  if (!(cfg.tau > 0) || !std::isfinite(cfg.tau)) throw InvalidArgument("tau must be positive");
  if (!(cfg.inner_lr > 0)) throw InvalidArgument("inner_lr must be positive");
  require_match(f, prev.size());
  if (!f.is_quadratic()) require_tensor(f, "jko_step");
  const std::size_t n = prev.size();
  QuantileProduct q = prev;
  auto transport = [&](const QuantileProduct& cur) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += (cur[i] - prev[i]).squaredNorm() / static_cast<double>(cur[i].size());
    return s / (2 * cfg.tau);
  };
  const bool full_objective = f.is_quadratic();
  const double before = full_objective ? discrete_free_energy(f, q, grid) : 0.0;
  std::size_t sweeps = 0;
  for (std::size_t s = 0; s < std::max<std::size_t>(cfg.coord_sweeps, 1); ++s) {
    double change = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const BlockPotential V = f.is_quadratic() ? quadratic_block(f, q, i) : tabulated_block(f, q, i, grid);
      const double start = block_objective(q[i], prev[i], cfg.tau, V);
      Vec next = block_solve(q[i], prev[i], cfg.tau, V, cfg);
      const double end = block_objective(next, prev[i], cfg.tau, V);
      if (end > start + 1e-9) throw InternalError("JKO block step increased its objective");
      change = std::max(change, (next - q[i]).cwiseAbs().maxCoeff());
      q[i] = std::move(next);
    }
    sweeps = s + 1;
    if (change < 1e-12) break;
  }
  if (full_objective) {
    const double after = discrete_free_energy(f, q, grid) + transport(q);
    if (after > before + 1e-9) throw InternalError("JKO step increased the objective");
    if (info) {
      info->objective_before = before;
      info->objective_after = after;
    }
  }
  if (info) info->sweeps = sweeps;
  return q;
}

ProductGridMeasure jko_step_product(const Potential& f, const ProductGridMeasure& prev, const JKOConfig& cfg) {
  require_match(f, prev.n());
  QuantileProduct q;
  for (const auto& g : prev.marginals) q.push_back(grid_to_quantiles(g, cfg.levels));
  const Grid1D grid = prev.marginals.front().grid;
  q = jko_step_quantiles(f, q, cfg, grid);
  ProductGridMeasure out;
  for (std::size_t i = 0; i < q.size(); ++i) out.marginals.push_back(quantiles_to_grid(q[i], prev.marginals[i].grid));
  return out;
}

JKOTrajectory jko_trajectory(const Potential& f, const ProductGridMeasure& mu0, const JKOConfig& cfg, double t_end) {
  require_match(f, mu0.n());
  if (!(cfg.tau > 0)) throw InvalidArgument("tau must be positive");
  if (!(t_end >= 0)) throw InvalidArgument("t_end must be >= 0");
  const Grid1D grid = mu0.marginals.front().grid;
  JKOTrajectory tr;
  QuantileProduct q;
  for (const auto& g : mu0.marginals) q.push_back(grid_to_quantiles(g, cfg.levels));
  tr.times.push_back(0.0);
  tr.measures.push_back(mu0);
  tr.quantiles.push_back(q);
  tr.free_energy.push_back(free_energy(f, mu0));
  tr.discrete_free_energy.push_back(discrete_free_energy(f, q, grid));
  const auto steps = static_cast<std::size_t>(std::ceil(t_end / cfg.tau * (1.0 - 1e-12)));
  for (std::size_t s = 0; s < steps; ++s) {
    q = jko_step_quantiles(f, q, cfg, grid);
    ProductGridMeasure mu;
    for (std::size_t i = 0; i < q.size(); ++i) mu.marginals.push_back(quantiles_to_grid(q[i], mu0.marginals[i].grid));
    tr.times.push_back(static_cast<double>(s + 1) * cfg.tau);
    tr.free_energy.push_back(free_energy(f, mu));
    tr.discrete_free_energy.push_back(discrete_free_energy(f, q, grid));
    tr.measures.push_back(std::move(mu));
    tr.quantiles.push_back(q);
  }
  return tr;
}

void write_marginals_csv(const ProductGridMeasure& mu, std::ostream& out) {
  out << "coord,x,density\n" << std::setprecision(17);
  for (std::size_t i = 0; i < mu.n(); ++i) {
    const auto& g = mu.marginals[i];
    const Vec p = g.density();
    for (std::size_t k = 0; k < g.grid.npoints; ++k) out << i << ',' << g.grid.x(k) << ',' << p(idx(k)) << '\n';
  }
}

void write_cavi_history_csv(const CaviResult& r, std::ostream& out) {
  out << "sweep,residual,free_energy\n" << std::setprecision(17);
  for (std::size_t s = 0; s < r.residuals.size(); ++s)
    out << s + 1 << ',' << r.residuals[s] << ',' << r.free_energies[s] << '\n';
}

}  // namespace mfip
