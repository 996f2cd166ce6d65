#include "mfip/diagnostics.hpp"

#include "mfip/errors.hpp"
#include "mfip/parallel.hpp"
#include "mfip/rng.hpp"

#include <boost/math/quadrature/gauss_kronrod.hpp>

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <map>
#include <numeric>
#include <ostream>

namespace mfip {

namespace {

constexpr std::size_t kChunk = 1024;
constexpr std::size_t kJackknifeGroups = 20;

Eigen::Index idx(std::size_t v) { return static_cast<Eigen::Index>(v); }

// Squared W2 between two sorted samples via the merged quantile functions.
// Breakpoints are compared in integer units of 1/(na*nb), so equal sizes give
// the plain sorted pairing with no rounding in the weights.
double w2sq_sorted(std::span<const double> a, std::span<const double> b) {
  const std::uint64_t na = a.size(), nb = b.size();
  std::uint64_t i = 0, j = 0, prev = 0;
  double acc = 0.0;
  while (i < na && j < nb) {
    const std::uint64_t ea = (i + 1) * nb, eb = (j + 1) * na;
    const std::uint64_t end = std::min(ea, eb);
    const double diff = a[i] - b[j];
    acc += static_cast<double>(end - prev) * diff * diff;
    prev = end;
    if (ea == end) ++i;
    if (eb == end) ++j;
  }
  return acc / (static_cast<double>(na) * static_cast<double>(nb));
}

std::vector<double> sorted_copy(std::span<const double> v) {
  std::vector<double> s(v.begin(), v.end());
  std::sort(s.begin(), s.end());
  return s;
}

std::size_t group_of(std::size_t k, std::size_t m, std::size_t groups) { return k * groups / m; }

struct Labelled {
  std::vector<double> values;
  std::vector<std::uint32_t> groups;
};

Labelled sorted_column(const ParticleArray& Z, Eigen::Index c, std::size_t groups) {
  const std::size_t m = static_cast<std::size_t>(Z.rows());
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
    return Z(idx(x), c) < Z(idx(y), c) || (Z(idx(x), c) == Z(idx(y), c) && x < y);
  });
  Labelled out;
  out.values.reserve(m);
  out.groups.reserve(m);
  for (std::size_t k : order) {
    out.values.push_back(Z(idx(k), c));
    out.groups.push_back(static_cast<std::uint32_t>(group_of(k, m, groups)));
  }
  return out;
}

std::vector<double> without_group(const Labelled& s, std::uint32_t g) {
  std::vector<double> out;
  out.reserve(s.values.size());
  for (std::size_t k = 0; k < s.values.size(); ++k)
    if (s.groups[k] != g) out.push_back(s.values[k]);
  return out;
}

double binomial(std::size_t n, std::size_t k) {
  double r = 1.0;
  for (std::size_t i = 0; i < k; ++i) r = r * static_cast<double>(n - i) / static_cast<double>(i + 1);
  return r;
}

void require_ensemble(const EnsembleState& s, const DriftSpec& spec) {
  if (s.dims() != spec.dims()) throw InvalidArgument("ensemble and drift dimensions differ");
  if (s.m() < 100) throw InvalidArgument("growth-rate estimator needs m >= 100");
}

// Per-particle contributions 1/4 sum_i |b^i - swap^i|^2 (noise-corrected) and,
// when g is set, the perturbed version.
struct GrowthTerms {
  std::vector<double> base;
  std::vector<double> perturbed;
};

GrowthTerms growth_terms(const EnsembleState& s, const DriftSpec& spec, const CoordinateField* g, double eps) {
  require_ensemble(s, spec);
  const std::size_t m = s.m(), n = s.n, d = s.d, nd = n * d;
  const ParticleArray swap = swap_drift(s, spec);
  // Given X^i, the leave-one-out average has conditional variance V/(m-1)
  // and is independent of the particle's own off-coordinates.
  const double shrink = static_cast<double>(m - 1) / static_cast<double>(m);
  GrowthTerms out;
  out.base.resize(m);
  if (g) out.perturbed.resize(m);
  parallel_chunks(m, kChunk, [&](std::size_t lo, std::size_t hi) {
    std::vector<double> b(nd), gi(d);
    for (std::size_t k = lo; k < hi; ++k) {
      const std::span<const double> x(s.particles.row(idx(k)).data(), nd);
      eval_drift(spec, x, b);
      double base = 0.0, pert = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (g) (*g)(i, x.subspan(i * d, d), gi);
        for (std::size_t a = 0; a < d; ++a) {
          const double r = b[i * d + a] - swap(idx(k), idx(i * d + a));
          base += r * r;
          if (g) pert += eps * eps * gi[a] * gi[a] - 2.0 * eps * r * gi[a];
        }
      }
      out.base[k] = 0.25 * shrink * base;
      if (g) out.perturbed[k] = 0.25 * pert;
    }
  });
  return out;
}

MetricSample mean_sample(const std::vector<double>& v) {
  const double m = static_cast<double>(v.size());
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= m;
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  // Delete-one jackknife of a mean: sd / sqrt(m).
  return {mean, std::sqrt(ss / (m - 1.0) / m), v.size(), false};
}

}  // namespace

double empirical_w2_1d(std::span<const double> xs, std::span<const double> ys) {
  if (xs.empty() || ys.empty()) throw InvalidArgument("empirical_w2_1d: empty sample");
  return std::sqrt(w2sq_sorted(sorted_copy(xs), sorted_copy(ys)));
}

double ks_statistic(std::span<const double> xs, std::span<const double> ys) {
  if (xs.empty() || ys.empty()) throw InvalidArgument("ks_statistic: empty sample");
  const auto a = sorted_copy(xs), b = sorted_copy(ys);
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  std::size_t i = 0, j = 0;
  double best = 0.0;
  while (i < a.size() && j < b.size()) {
    const double x = std::min(a[i], b[j]);
    while (i < a.size() && a[i] <= x) ++i;
    while (j < b.size() && b[j] <= x) ++j;
    best = std::max(best, std::abs(static_cast<double>(i) / na - static_cast<double>(j) / nb));
  }
  return best;
}

double ks_pvalue(double D, std::size_t nx, std::size_t ny) {
  const double ne = static_cast<double>(nx) * static_cast<double>(ny) / static_cast<double>(nx + ny);
  const double lam = (std::sqrt(ne) + 0.12 + 0.11 / std::sqrt(ne)) * D;
  if (lam < 0.2) return 1.0;
  double sum = 0.0;
  for (int j = 1; j <= 100; ++j) sum += (j % 2 ? 2.0 : -2.0) * std::exp(-2.0 * j * j * lam * lam);
  return std::clamp(sum, 0.0, 1.0);
}

double jackknife_std_err(std::span<const double> leave_out) {
  const double g = static_cast<double>(leave_out.size());
  if (leave_out.size() < 2) return 0.0;
  const double mean = std::accumulate(leave_out.begin(), leave_out.end(), 0.0) / g;
  double ss = 0.0;
  for (double v : leave_out) ss += (v - mean) * (v - mean);
  return std::sqrt((g - 1.0) / g * ss);
}

MetricSample w_k_marginal_distance(const EnsembleState& mu, const EnsembleState& rho, std::size_t k,
                                   std::size_t subsets, std::uint64_t seed) {
  if (mu.n != rho.n || mu.d != rho.d) throw InvalidArgument("w_k_marginal_distance: ensembles differ in shape");
  const std::size_t n = mu.n, d = mu.d;
  if (k == 0 || k > n) throw InvalidArgument("w_k_marginal_distance: need 1 <= k <= n");
  if (mu.m() == 0 || rho.m() == 0) throw InvalidArgument("w_k_marginal_distance: empty ensemble");
  if (subsets == 0) throw InvalidArgument("w_k_marginal_distance: subsets must be positive");

  const std::size_t groups = std::min({kJackknifeGroups, mu.m(), rho.m()});
  // Per scalar column: squared distance on all particles (row 0) and with
  // each group left out. Columns are independent; blocks are summed after.
  const std::size_t cols = n * d;
  Mat per_col(idx(groups + 1), idx(cols));
  parallel_chunks(cols, 1, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t c = lo; c < hi; ++c) {
      const auto a = sorted_column(mu.particles, idx(c), groups);
      const auto b = sorted_column(rho.particles, idx(c), groups);
      per_col(0, idx(c)) = w2sq_sorted(a.values, b.values);
      for (std::size_t g = 0; g < groups; ++g) {
        const auto gg = static_cast<std::uint32_t>(g);
        per_col(idx(g + 1), idx(c)) = w2sq_sorted(without_group(a, gg), without_group(b, gg));
      }
    }
  });
  Vec full = Vec::Zero(idx(n));
  Mat leave = Mat::Zero(idx(groups), idx(n));
  for (std::size_t c = 0; c < cols; ++c) {
    full(idx(c / d)) += per_col(0, idx(c));
    leave.col(idx(c / d)) += per_col.col(idx(c)).tail(idx(groups));
  }

  // Subset weights: how often each coordinate appears, per subset.
  Vec weight = Vec::Zero(idx(n));
  double subset_var = 0.0;
  const double total = binomial(n, k);
  if (total <= static_cast<double>(subsets)) {
    // Every subset; the unordered average equals the ordered one.
    weight.setConstant(static_cast<double>(k) / static_cast<double>(n));
  } else {
    std::vector<double> vals(subsets);
    std::vector<std::size_t> perm(n);
    for (std::size_t s = 0; s < subsets; ++s) {
      CounterRng rng(seed, RngStream::kSubsets, s, 0);
      std::iota(perm.begin(), perm.end(), std::size_t{0});
      double v = 0.0;
      for (std::size_t t = 0; t < k; ++t) {
        const std::size_t r = t + static_cast<std::size_t>(rng.uniform() * static_cast<double>(n - t));
        std::swap(perm[t], perm[std::min(r, n - 1)]);
        weight(idx(perm[t])) += 1.0 / static_cast<double>(subsets);
        v += full(idx(perm[t]));
      }
      vals[s] = v;
    }
    const double mean = std::accumulate(vals.begin(), vals.end(), 0.0) / static_cast<double>(subsets);
    double ss = 0.0;
    for (double v : vals) ss += (v - mean) * (v - mean);
    if (subsets > 1) subset_var = ss / static_cast<double>(subsets - 1) / static_cast<double>(subsets);
  }

  const Vec leave_vals = leave * weight;
  const double jk = jackknife_std_err(std::span<const double>(leave_vals.data(), groups));
  MetricSample out;
  out.value = full.dot(weight);
  out.std_err = std::sqrt(jk * jk + subset_var);
  out.m_used = std::min(mu.m(), rho.m());
  out.lower_bound = d > 1;
  return out;
}

MetricSample entropy_growth_rate_mc(const EnsembleState& state, const DriftSpec& spec) {
  return mean_sample(growth_terms(state, spec, nullptr, 0.0).base);
}

MetricSample entropy_growth_rate_mc(const EnsembleState& state, const DriftSpec& spec, const CoordinateField& g,
                                    double eps) {
  auto t = growth_terms(state, spec, &g, eps);
  for (std::size_t k = 0; k < t.base.size(); ++k) t.base[k] += t.perturbed[k];
  return mean_sample(t.base);
}

MetricSample entropy_growth_gap_mc(const EnsembleState& state, const DriftSpec& spec, const CoordinateField& g,
                                   double eps) {
  return mean_sample(growth_terms(state, spec, &g, eps).perturbed);
}

double poincare_constant_bound(double c0, double L, double t) {
  if (L == 0.0) return c0 + 2.0 * t;
  const double a = 2.0 * L * L * t;
  return c0 * std::exp(a) + std::expm1(a) / (L * L);
}

double proximity_bound(const BoundInputs& in, const TimeFunction& hess_trace) {
  if (!in.h0) throw InvalidArgument("proximity_bound: h0 is required");
  if (!(in.T >= 0.0) || !(in.L >= 0.0) || !(in.c0 >= 0.0)) throw InvalidArgument("proximity_bound: bad inputs");
  if (in.T == 0.0) return *in.h0;
  auto integrand = [&](double t) { return poincare_constant_bound(in.c0, in.L, t) * hess_trace(t); };
  double err = 0.0;
  const double integral =
      boost::math::quadrature::gauss_kronrod<double, 31>::integrate(integrand, 0.0, in.T, 15, 1e-13, &err);
  return *in.h0 + 0.25 * integral;
}

double proximity_bound(const BoundInputs& in, std::span<const double> times, std::span<const double> hess_trace) {
  if (!in.h0) throw InvalidArgument("proximity_bound: h0 is required");
  if (times.size() != hess_trace.size() || times.size() < 2) throw InvalidArgument("proximity_bound: bad snapshots");
  if (times.front() != 0.0 || std::abs(times.back() - in.T) > 1e-9 * std::max(1.0, in.T))
    throw InvalidArgument("proximity_bound: snapshots must span [0, T]");
  double integral = 0.0;
  for (std::size_t s = 1; s < times.size(); ++s) {
    const double a = poincare_constant_bound(in.c0, in.L, times[s - 1]) * hess_trace[s - 1];
    const double b = poincare_constant_bound(in.c0, in.L, times[s]) * hess_trace[s];
    integral += 0.5 * (times[s] - times[s - 1]) * (a + b);
  }
  return *in.h0 + 0.25 * integral;
}

double proximity_bound_uniform(const BoundInputs& in, const TimeFunction& hess_trace, double t) {
  if (!(in.kappa > 0.0)) throw Unsupported("proximity_bound_uniform: needs kappa > 0");
  if (!(in.eta0 > 0.0)) throw InvalidArgument("proximity_bound_uniform: needs eta0 > 0");
  if (!in.h0) throw InvalidArgument("proximity_bound_uniform: h0 is required");
  if (!(t >= 0.0)) throw InvalidArgument("proximity_bound_uniform: t must be >= 0");
  const double eta = std::min(in.kappa, in.eta0);
  const double c = std::max(in.c0, 1.0 / in.kappa);
  double integral = 0.0;
  if (t > 0.0) {
    // u = t - s; the weight e^{-eta u} is largest at u = 0.
    auto integrand = [&](double u) { return std::exp(-eta * u) * hess_trace(t - u); };
    double err = 0.0;
    integral = boost::math::quadrature::gauss_kronrod<double, 31>::integrate(integrand, 0.0, t, 20, 1e-13, &err);
  }
  return std::exp(-eta * t) * *in.h0 + 0.5 * c * integral;
}

double hess_trace_linear(const Mat& A_full, std::size_t d) {
  if (d == 0 || A_full.rows() != A_full.cols() || A_full.rows() % idx(d) != 0)
    throw InvalidArgument("hess_trace_linear: bad dimensions");
  const std::size_t n = static_cast<std::size_t>(A_full.rows()) / d;
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (i != j) total += block(A_full, i, j, d).squaredNorm();
  return total;
}

MetricSample hess_trace_mc(const EnsembleState& state, const DriftSpec& spec) {
  if (state.dims() != spec.dims()) throw InvalidArgument("hess_trace_mc: dimension mismatch");
  if (state.m() < 2) throw InvalidArgument("hess_trace_mc: need m >= 2");
  std::vector<double> v(state.m());
  parallel_chunks(state.m(), kChunk, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t k = lo; k < hi; ++k) v[k] = cross_hessian_frobenius(spec, state.particles.row(idx(k)).transpose()).sum();
  });
  return mean_sample(v);
}

std::vector<ChaosRow> chaos_scaling_experiment(const std::vector<InteractionMatrix>& family, const SiteKernel& K1,
                                               const PairKernel& K2, double T, std::size_t m, std::uint64_t seed,
                                               const ChaosOptions& opts) {
  for (const auto& A : family)
    if (!A.rows_sum_to_one(1e-10)) throw InvalidArgument("chaos_scaling_experiment: every row of A must sum to 1");
  if (!(opts.init_var > 0.0)) throw InvalidArgument("chaos_scaling_experiment: init_var must be positive");
  SimConfig cfg;
  cfg.dt = opts.dt;
  cfg.t_end = T;
  cfg.record_every = std::numeric_limits<std::size_t>::max();

  // With unit row sums the limit does not depend on A, only on n.
  std::map<std::size_t, EnsembleState> limit;
  std::vector<ChaosRow> rows;
  for (const auto& A : family) {
    const std::size_t n = A.size();
    const auto spec = DriftSpec::pairwise(K1, K2, A);
    const auto init = ProductGaussian::isotropic(Vec::Constant(idx(n), opts.init_mean), opts.init_var);
    if (!limit.count(n)) {
      SimConfig mv = cfg;
      mv.scheme = Scheme::kMcKeanVlasov;
      limit.emplace(n, simulate(spec, mv, init, m, seed).final_state);
    }
    const auto interacting = simulate(spec, cfg, init, m, seed).final_state;
    const auto w = w_k_marginal_distance(interacting, limit.at(n), 1, std::max<std::size_t>(n, 200), seed);
    rows.push_back({n, A.trace_aat() / static_cast<double>(n), w.value, w.std_err});
  }
  return rows;
}

void write_metric_header(std::ostream& out) { out << "metric,t,value,stderr,m_used\n"; }

void write_metric_row(std::ostream& out, const std::string& metric, double t, const MetricSample& s) {
  out << std::setprecision(17) << metric << ',' << t << ',' << s.value << ',' << s.std_err << ',' << s.m_used << '\n';
}

}  // namespace mfip
