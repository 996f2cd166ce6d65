#include "mfip/cli.hpp"

#include "mfip/diagnostics.hpp"
#include "mfip/dynamics.hpp"
#include "mfip/errors.hpp"
#include "mfip/gaussian.hpp"
#include "mfip/rng.hpp"
#include "mfip/variational.hpp"

#include <json.hpp>

#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <sstream>

namespace mfip {

namespace {

using Defaults = std::map<std::string, std::string>;

const Defaults kCommon{{"dt", "0.001"}, {"m", "10000"}, {"d", "1"}};

Defaults with_common(Defaults extra) {
  for (const auto& [k, v] : kCommon) extra.emplace(k, v);
  return extra;
}

const std::map<std::string, std::pair<std::string, Defaults>>& registry() {
  static const std::map<std::string, std::pair<std::string, Defaults>> table{
      {"contraction",
       {"W2 distance of the projected flow to its limit against exp(-kappa t)",
        with_common({{"Q", "1,0.5;0.5,1"}, {"l", "0,0"}, {"mu0_mean", "1,-1"}, {"mu0_var", "1"}, {"n", ""},
                     {"T", "4"}, {"record", "0.25"}, {"ensemble", "1"}, {"m", "100000"},
                     {"tol_bound", "1e-8"}, {"tol_sigma", "3"}})}},
      {"lsi-decay",
       {"projected relative entropy against exp(-2 kappa t)",
        with_common({{"Q", "1,0.5;0.5,1"}, {"l", "0,0"}, {"mu0_mean", "1,-1"}, {"mu0_var", "1"}, {"n", ""},
                     {"T", "4"}, {"record", "0.25"}, {"tol_bound", "1e-8"}})}},
      {"entropy-identity",
       {"dH/dt against minus the projected Fisher information",
        with_common({{"Q", "1,0.5;0.5,1"}, {"l", "0,0"}, {"mu0_mean", "1,-1"}, {"mu0_var", "1"}, {"n", ""},
                     {"times", "0.2,0.4,0.6,0.8,1,1.2,1.4,1.6,1.8,2"}, {"h", "0.0001"}, {"tol_rel", "0.0001"}})}},
      {"entropic-optimality",
       {"Monte Carlo path-entropy growth rate and perturbed coordinate drifts",
        with_common({{"A", "-1,0.5;0.5,-1"}, {"init_mean", "0"}, {"init_var", "1"}, {"eps", "-1,-0.5,0.5,1"},
                     {"perturbations", "10"}, {"m", "100000"}, {"tol_sigma", "3"}})}},
      {"mf-fixed-point",
       {"coordinate ascent on a grid against the Gaussian mean-field solution",
        with_common({{"Q", "1,0.5;0.5,1"}, {"l", "1,1"}, {"n", ""}, {"grid", "-8,8,1024"}, {"sweeps", "50"},
                     {"cavi_tol", "1e-10"}, {"init_mean", "0"}, {"init_var", "1"}, {"tol_moment", "0.002"}})}},
      {"jko-consistency",
       {"product-constrained JKO trajectories against the projected flow as tau shrinks",
        with_common({{"Q", "1,0.5;0.5,1"}, {"l", "0,0"}, {"mu0_mean", "1,-1"}, {"mu0_var", "1"}, {"n", ""},
                     {"tau", "0.2,0.1,0.05"}, {"T", "1"}, {"grid", "-8,8,512"}, {"levels", "256"},
                     {"tol_w2", "0.05"}})}},
      {"row-sum-reduction",
       {"projection on a row-stochastic graph against the McKean-Vlasov particle system",
        with_common({{"n", "16"}, {"matrix", "ring"}, {"T", "1"}, {"init_mean", "0.5"}, {"init_var", "1"},
                     {"tol_ks", "0.02"}})}},
      {"chaos-scaling",
       {"W_(1) distance to the McKean-Vlasov limit for mean-field and ring graphs",
        with_common({{"n", "8,16,32,64"}, {"T", "1"}, {"init_mean", "0"}, {"init_var", "1"}, {"tol_sigma", "2"},
                     {"tol_ring_ratio", "0.5"}})}},
      {"proximity-bounds",
       {"path entropy against the proximity bound on random linear specs",
        with_common({{"specs", "100"}, {"n_max", "5"}, {"kappa_min", "0.2"}, {"T_max", "2"}, {"kappa", "0.5"},
                     {"G", "1"}, {"t_uniform", "50"}, {"tol_rel", "1e-6"}})}},
      {"symmetry-checks",
       {"exchangeable spec: coordinate marginals agree and stay uncorrelated",
        with_common({{"n", "5"}, {"T", "1"}, {"init_mean", "0.5"}, {"init_var", "2"}, {"record", "0.05"},
                     {"tol_pvalue", "0.001"}, {"tol_corr_scale", "5"}})}},
  };
  return table;
}

const Defaults& oracle_defaults() {
  static const Defaults d{{"Q", "1,0.5;0.5,1"}, {"l", "0,0"},      {"mu0_mean", "1,-1"}, {"mu0_var", "1"},
                          {"T", "1"},           {"record", "0.25"}, {"A", "-1,0.5;0.5,-1"},
                          {"init_mean", "0"},   {"init_var", "1"},  {"kappa", "0.5"},     {"G", "1"}};
  return d;
}

Eigen::Index idx(std::size_t v) { return static_cast<Eigen::Index>(v); }

// Output helper: files land in the run directory and are listed in the record.
struct Run {
  const ExperimentConfig& cfg;
  RunRecord& rec;

  std::ofstream open(const std::string& name) {
    std::ofstream out(cfg.output_dir / name, std::ios::binary);
    if (!out) throw InvalidArgument("cannot write " + (cfg.output_dir / name).string());
    out << std::setprecision(17);
    rec.artifacts.push_back(name);
    return out;
  }

  void check(const std::string& name, bool passed, double value, double threshold, std::string detail = {}) {
    rec.assertions.push_back({cfg.experiment + "." + name, passed, value, threshold, std::move(detail)});
  }

  double tol(const std::string& name) const { return cfg.get_double("tol_" + name); }
};

ProductGaussian product_from(const Vec& means, double var) { return ProductGaussian::isotropic(means, var); }

// Projected flow of the quadratic potential, shifted so the linear oracle
// (no offset) applies around the centre Q^{-1} l.
ProductGaussian ip_flow(const Mat& Q, const Vec& l, const ProductGaussian& mu0, double t) {
  const Vec c = Q.ldlt().solve(l);
  ProductGaussian shifted = mu0;
  for (std::size_t i = 0; i < shifted.n(); ++i) shifted.means[i](0) -= c(idx(i));
  auto out = ip_moments_exact(-Q, shifted, t);
  for (std::size_t i = 0; i < out.n(); ++i) out.means[i](0) += c(idx(i));
  return out;
}

double kappa_of(const Mat& Q) { return Eigen::SelfAdjointEigenSolver<Mat>(Q).eigenvalues().minCoeff(); }

std::vector<double> time_grid(double T, double step) {
  if (!(step > 0)) throw InvalidArgument("record spacing must be positive");
  std::vector<double> t;
  const auto count = static_cast<std::size_t>(std::floor(T / step + 1e-9));
  for (std::size_t j = 0; j <= count; ++j) t.push_back(static_cast<double>(j) * step);
  return t;
}

struct QuadraticSetup {
  Mat Q;
  Vec l;
  ProductGaussian mu0;
};

QuadraticSetup quadratic_setup(const ExperimentConfig& cfg) {
  QuadraticSetup s{cfg.get_matrix("Q"), cfg.get_vector("l"), {}};
  s.mu0 = product_from(cfg.get_vector("mu0_mean"), cfg.get_double("mu0_var"));
  if (!(kappa_of(s.Q) > 0)) throw InvalidArgument("Q must be positive definite");
  return s;
}

// W2 between the Gaussian fitted per coordinate to all replicates except
// `skip` (none when skip >= size) and a product target.
double fitted_w2(const std::vector<EnsembleState>& reps, const ProductGaussian& target, std::size_t skip) {
  double total = 0.0;
  for (std::size_t c = 0; c < target.n(); ++c) {
    double s1 = 0, s2 = 0, count = 0;
    for (std::size_t r = 0; r < reps.size(); ++r) {
      if (r == skip) continue;
      const auto col = reps[r].particles.col(idx(c));
      s1 += col.sum();
      s2 += col.squaredNorm();
      count += static_cast<double>(col.size());
    }
    const double mean = s1 / count;
    const double var = std::max(0.0, (s2 - count * mean * mean) / (count - 1));
    const double dm = mean - target.means[c](0);
    const double ds = std::sqrt(var) - std::sqrt(target.covs[c](0, 0));
    total += dm * dm + ds * ds;
  }
  return std::sqrt(total);
}

void contraction(Run& run) {
  const auto& cfg = run.cfg;
  const auto s = quadratic_setup(cfg);
  const double kappa = kappa_of(s.Q);
  const auto mustar = stationary_mf_gaussian(s.Q, s.l);
  const double w0 = w2_gaussian(s.mu0, mustar);
  const auto times = time_grid(cfg.get_double("T"), cfg.get_double("record"));
  const bool ensemble = cfg.get_size("ensemble") != 0;
  const double dt = cfg.get_double("dt");

  // Particles of one swap ensemble interact through its averages, so they are
  // not independent and a jackknife over particles understates the error. The
  // m particles are split into independent replicate ensembles instead and the
  // jackknife runs over replicates.
  constexpr std::size_t kReplicates = 20;
  const std::size_t m = cfg.get_size("m");
  if (ensemble && m < 2 * kReplicates) throw InvalidArgument("contraction ensemble needs m >= 40");
  std::vector<EnsembleState> reps;
  const auto spec = DriftSpec::quadratic(s.Q, s.l);
  if (ensemble)
    for (std::size_t r = 0; r < kReplicates; ++r) {
      const std::size_t size = (r + 1) * m / kReplicates - r * m / kReplicates;
      CounterRng rng(cfg.seed, RngStream::kExperiment, r, 2);
      const std::uint64_t hi = rng(), lo = rng();
      const std::uint64_t seed = r == 0 ? cfg.seed : (hi << 32 | lo);
      reps.push_back(sample_initial(s.mu0, s.mu0.dims(), size, seed));
    }

  auto out = run.open("contraction.csv");
  out << "t,w2_to_mustar,bound,w2_ensemble,stderr\n";
  double worst_ratio = 0.0, worst_sigma = 0.0;
  for (double t : times) {
    const double w = w2_gaussian(ip_flow(s.Q, s.l, s.mu0, t), mustar);
    const double bound = std::exp(-kappa * t) * w0;
    worst_ratio = std::max(worst_ratio, w / bound - 1.0);
    out << t << ',' << w << ',' << bound;
    if (ensemble) {
      for (auto& rep : reps)
        while (rep.t < t - 0.5 * dt) step_independent_projection_swap(rep, spec, dt);
      const double wh = fitted_w2(reps, mustar, kReplicates);
      std::vector<double> leave(kReplicates);
      for (std::size_t r = 0; r < kReplicates; ++r) leave[r] = fitted_w2(reps, mustar, r);
      const double se = jackknife_std_err(leave);
      worst_sigma = std::max(worst_sigma, std::abs(wh - w) / se);
      out << ',' << wh << ',' << se;
    } else {
      out << ",,";
    }
    out << '\n';
  }
  run.check("analytic_bound", worst_ratio <= run.tol("bound"), worst_ratio, run.tol("bound"),
            "max over t of w2 / (exp(-kappa t) w2_0) - 1");
  if (ensemble)
    run.check("ensemble_matches_oracle", worst_sigma <= run.tol("sigma"), worst_sigma, run.tol("sigma"),
              "max over t of |w2_ensemble - w2_exact| / stderr");
}

void lsi_decay(Run& run) {
  const auto& cfg = run.cfg;
  const auto s = quadratic_setup(cfg);
  const double kappa = kappa_of(s.Q);
  const auto rho = gibbs_gaussian(s.Q, s.l);
  const double floor = kl_gaussian(stationary_mf_gaussian(s.Q, s.l), rho);
  const double h0 = kl_gaussian(s.mu0, rho) - floor;
  auto out = run.open("lsi_decay.csv");
  out << "t,projected_entropy,bound\n";
  double worst = -1.0;
  for (double t : time_grid(cfg.get_double("T"), cfg.get_double("record"))) {
    const double h = kl_gaussian(ip_flow(s.Q, s.l, s.mu0, t), rho) - floor;
    const double bound = std::exp(-2.0 * kappa * t) * h0;
    worst = std::max(worst, h - bound * (1.0 + run.tol("bound")));
    out << t << ',' << h << ',' << bound << '\n';
  }
  run.check("decay_bound", worst <= 0.0, worst, 0.0, "max over t of H - bound (1 + tol)");
}

void entropy_identity(Run& run) {
  const auto& cfg = run.cfg;
  const auto s = quadratic_setup(cfg);
  const auto rho = gibbs_gaussian(s.Q, s.l);
  const double h = cfg.get_double("h");
  auto H = [&](double t) { return kl_gaussian(ip_flow(s.Q, s.l, s.mu0, t), rho); };
  auto out = run.open("entropy_identity.csv");
  out << "t,dH_dt,projected_fisher,scaled_residual\n";
  double worst = 0.0;
  for (double t : cfg.get_list("times")) {
    if (t - h < 0) throw InvalidArgument("times must be at least h");
    const double dH = (H(t + h) - H(t - h)) / (2.0 * h);
    const double I = projected_fisher_gaussian(ip_flow(s.Q, s.l, s.mu0, t), s.Q, s.l);
    const double r = std::abs(dH + I) / std::max(1.0, I);
    worst = std::max(worst, r);
    out << t << ',' << dH << ',' << I << ',' << r << '\n';
  }
  run.check("identity", worst <= run.tol("rel"), worst, run.tol("rel"), "max |dH/dt + I| / max(1, I)");
}

void entropic_optimality(Run& run) {
  const auto& cfg = run.cfg;
  const Mat A = cfg.get_matrix("A");
  const std::size_t n = static_cast<std::size_t>(A.rows());
  const double mean = cfg.get_double("init_mean"), var = cfg.get_double("init_var");
  const auto law = product_from(Vec::Constant(idx(n), mean), var);
  const auto spec = DriftSpec::linear(A);
  const auto ens = sample_initial(law, law.dims(), cfg.get_size("m"), cfg.seed);
  const double exact = entropy_growth_rate_gaussian(law, A);
  const auto base = entropy_growth_rate_mc(ens, spec);
  const double sigma = run.tol("sigma");

  auto metrics = run.open("metrics.csv");
  write_metric_header(metrics);
  write_metric_row(metrics, "growth_rate", 0.0, base);
  write_metric_row(metrics, "growth_rate_exact", 0.0, MetricSample{exact, 0.0, 0, false});
  run.check("rate_matches_oracle", std::abs(base.value - exact) <= sigma * base.std_err,
            std::abs(base.value - exact) / base.std_err, sigma, "|rate - exact| / stderr");

  auto out = run.open("entropic_optimality.csv");
  out << "field,eps,rate,gap_mc,gap_exact,stderr\n";
  double worst = std::numeric_limits<double>::infinity();
  for (std::size_t f = 0; f < cfg.get_size("perturbations"); ++f) {
    CounterRng rng(cfg.seed, RngStream::kExperiment, f, 0);
    Vec a(idx(n)), c(idx(n));
    for (std::size_t i = 0; i < n; ++i) {
      a(idx(i)) = rng.normal();
      c(idx(i)) = rng.normal();
    }
    const CoordinateField g = [a, c](std::size_t i, std::span<const double> x, std::span<double> o) {
      o[0] = a(idx(i)) * x[0] + c(idx(i));
    };
    double Eg2 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double ai = a(idx(i)), ci = c(idx(i));
      Eg2 += ai * ai * (var + mean * mean) + 2.0 * ai * ci * mean + ci * ci;
    }
    for (double eps : cfg.get_list("eps")) {
      const double gap = 0.25 * eps * eps * Eg2;
      const auto pert = entropy_growth_rate_mc(ens, spec, g, eps);
      const auto diff = entropy_growth_gap_mc(ens, spec, g, eps);
      worst = std::min(worst, (pert.value - base.value) - (gap - sigma * diff.std_err));
      out << f << ',' << eps << ',' << pert.value << ',' << diff.value << ',' << gap << ',' << diff.std_err << '\n';
    }
  }
  run.check("perturbations_grow", worst >= 0.0, worst, 0.0,
            "min over fields and eps of (rate_eps - rate_0) - (gap - sigma stderr)");
}

Grid1D grid_of(const ExperimentConfig& cfg) {
  const auto g = cfg.get_list("grid");
  return Grid1D(g[0], g[1], static_cast<std::size_t>(g[2]));
}

void mf_fixed_point(Run& run) {
  const auto& cfg = run.cfg;
  const Mat Q = cfg.get_matrix("Q");
  const Vec l = cfg.get_vector("l");
  const std::size_t n = static_cast<std::size_t>(Q.rows());
  const auto grid = grid_of(cfg);
  const auto mu0 = ProductGridMeasure::gaussian(grid, Vec::Constant(idx(n), cfg.get_double("init_mean")),
                                                Vec::Constant(idx(n), cfg.get_double("init_var")));
  const auto r = cavi_solve(Potential::quadratic(Q, l), mu0, cfg.get_size("sweeps"), cfg.get_double("cavi_tol"));
  const auto oracle = stationary_mf_gaussian(Q, l);
  double err = 0.0;
  auto out = run.open("mf_fixed_point.csv");
  out << "coord,mean,variance,mean_exact,variance_exact\n";
  for (std::size_t i = 0; i < n; ++i) {
    const auto& g = r.mu.marginals[i];
    const double me = oracle.means[i](0), ve = oracle.covs[i](0, 0);
    err = std::max({err, std::abs(g.mean() - me), std::abs(g.variance() - ve)});
    out << i << ',' << g.mean() << ',' << g.variance() << ',' << me << ',' << ve << '\n';
  }
  auto marg = run.open("marginals.csv");
  write_marginals_csv(r.mu, marg);
  auto hist = run.open("cavi_history.csv");
  write_cavi_history_csv(r, hist);
  run.check("converged", r.converged, r.residuals.empty() ? 0.0 : r.residuals.back(), cfg.get_double("cavi_tol"),
            std::to_string(r.sweeps) + " sweeps");
  run.check("moments_match_oracle", err <= run.tol("moment"), err, run.tol("moment"),
            "max |moment - exact| over means and variances");
}

void jko_consistency(Run& run) {
  const auto& cfg = run.cfg;
  const auto s = quadratic_setup(cfg);
  const auto grid = grid_of(cfg);
  const double T = cfg.get_double("T");
  const std::size_t n = s.mu0.n();
  Vec vars(idx(n)), means(idx(n));
  for (std::size_t i = 0; i < n; ++i) {
    means(idx(i)) = s.mu0.means[i](0);
    vars(idx(i)) = s.mu0.covs[i](0, 0);
  }
  const auto mu0 = ProductGridMeasure::gaussian(grid, means, vars);
  const auto target = ip_flow(s.Q, s.l, s.mu0, T);
  const auto f = Potential::quadratic(s.Q, s.l);

  auto out = run.open("jko_consistency.csv");
  out << "tau,w2_to_projected_flow\n";
  auto fe = run.open("jko_free_energy.csv");
  fe << "tau,t,free_energy,discrete_free_energy\n";
  std::vector<double> w2s;
  double fe_rise = -std::numeric_limits<double>::infinity();
  for (double tau : cfg.get_list("tau")) {
    JKOConfig jc;
    jc.tau = tau;
    jc.levels = cfg.get_size("levels");
    const auto tr = jko_trajectory(f, mu0, jc, T);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double w = w2_grid_gaussian(tr.measures.back().marginals[i], target.means[i](0), target.covs[i](0, 0));
      total += w * w;
    }
    w2s.push_back(std::sqrt(total));
    out << tau << ',' << w2s.back() << '\n';
    for (std::size_t k = 0; k < tr.times.size(); ++k) {
      fe << tau << ',' << tr.times[k] << ',' << tr.free_energy[k] << ',' << tr.discrete_free_energy[k] << '\n';
      if (k > 0) fe_rise = std::max(fe_rise, tr.discrete_free_energy[k] - tr.discrete_free_energy[k - 1]);
    }
  }
  double worst_ratio = 0.0;
  for (std::size_t k = 1; k < w2s.size(); ++k) worst_ratio = std::max(worst_ratio, w2s[k] / w2s[k - 1]);
  run.check("strictly_decreasing", w2s.size() < 2 || worst_ratio < 1.0, worst_ratio, 1.0,
            "max over consecutive tau of w2 ratio");
  run.check("final_distance", w2s.back() <= run.tol("w2"), w2s.back(), run.tol("w2"), "w2 at the smallest tau");
  run.check("free_energy_monotone", fe_rise <= 1e-9, fe_rise, 1e-9, "largest one-step increase");
}

InteractionMatrix family_matrix(const std::string& family, std::size_t n) {
  if (family == "ring") return random_walk_matrix(ring_adjacency(n));
  if (family == "complete") return random_walk_matrix(complete_adjacency(n));
  if (family == "star") return random_walk_matrix(star_adjacency(n));
  return mean_field_matrix(n);
}

std::vector<double> column(const ParticleArray& Z, Eigen::Index c) {
  std::vector<double> v(static_cast<std::size_t>(Z.rows()));
  for (Eigen::Index k = 0; k < Z.rows(); ++k) v[static_cast<std::size_t>(k)] = Z(k, c);
  return v;
}

void row_sum_reduction(Run& run) {
  const auto& cfg = run.cfg;
  const std::size_t n = cfg.get_size("n"), m = cfg.get_size("m");
  const double mean = cfg.get_double("init_mean"), var = cfg.get_double("init_var");
  const auto K1 = SiteKernel::function([](std::span<const double> x, std::span<double> o) { o[0] = -x[0] + std::sin(x[0]); });
  const auto K2 = PairKernel::affine(-Mat::Identity(1, 1), Mat::Identity(1, 1), Vec::Zero(1));
  const auto spec = DriftSpec::pairwise(K1, K2, family_matrix(cfg.get_string("matrix"), n));
  const auto init = product_from(Vec::Constant(idx(n), mean), var);
  SimConfig sc;
  sc.dt = cfg.get_double("dt");
  sc.t_end = cfg.get_double("T");
  sc.record_every = std::numeric_limits<std::size_t>::max();
  sc.scheme = Scheme::kIndependentProjectionSwap;
  const auto ip = simulate(spec, sc, init, m, cfg.seed).final_state;
  // Same seed: shares initial draws and noise with the projection run.
  sc.scheme = Scheme::kMcKeanVlasov;
  const auto coupled = simulate(spec, sc, init, m, cfg.seed).final_state;
  // Independent single-coordinate particle system.
  const double sd = std::sqrt(var);
  InitialSampler sampler{[mean, sd](CounterRng& rng, std::span<double> x) { x[0] = mean + sd * rng.normal(); }, true};
  const auto mv = simulate_mckean_vlasov(K1, K2, sc, sampler, 1, m, cfg.seed + 1).final_state;

  auto out = run.open("row_sum_reduction.csv");
  out << "coord,ks_coupled\n";
  double worst = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double D = ks_statistic(column(ip.particles, idx(i)), column(coupled.particles, idx(i)));
    worst = std::max(worst, D);
    out << i << ',' << D << '\n';
  }
  const std::vector<double> pooled(ip.particles.data(), ip.particles.data() + ip.particles.size());
  const double Dpool = ks_statistic(pooled, column(mv.particles, 0));
  out << "pooled_vs_independent," << Dpool << '\n';
  run.check("coordinate_marginals", worst <= run.tol("ks"), worst, run.tol("ks"),
            "max over coordinates of KS(projection, coupled McKean-Vlasov)");
  run.check("pooled_marginal", Dpool <= run.tol("ks"), Dpool, run.tol("ks"),
            "KS(all projection coordinates, independent McKean-Vlasov run)");
}

void chaos_scaling(Run& run) {
  const auto& cfg = run.cfg;
  std::vector<std::size_t> ns;
  for (double v : cfg.get_list("n")) {
    if (v < 3 || v != std::floor(v)) throw InvalidArgument("chaos-scaling sizes must be integers >= 3");
    ns.push_back(static_cast<std::size_t>(v));
  }
  std::vector<InteractionMatrix> family;
  for (std::size_t n : ns) family.push_back(mean_field_matrix(n));
  for (std::size_t n : ns) family.push_back(random_walk_matrix(ring_adjacency(n)));
  ChaosOptions opts;
  opts.dt = cfg.get_double("dt");
  opts.init_mean = cfg.get_double("init_mean");
  opts.init_var = cfg.get_double("init_var");
  const auto K1 = SiteKernel::affine(-Mat::Identity(1, 1), Vec::Zero(1));
  const auto K2 = PairKernel::affine(-Mat::Identity(1, 1), Mat::Identity(1, 1), Vec::Zero(1));
  const auto rows = chaos_scaling_experiment(family, K1, K2, cfg.get_double("T"), cfg.get_size("m"), cfg.seed, opts);

  auto out = run.open("chaos_scaling.csv");
  out << "family,n,trace_ratio,w2_sq,stderr\n";
  for (std::size_t k = 0; k < rows.size(); ++k)
    out << (k < ns.size() ? "mean_field" : "ring") << ',' << rows[k].n << ',' << rows[k].trace_ratio << ','
        << rows[k].w2_sq << ',' << rows[k].std_err << '\n';

  const double sigma = run.tol("sigma");
  const std::size_t N = ns.size();
  double mono = -std::numeric_limits<double>::infinity();
  double order = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < N; ++k) {
    const auto &mf = rows[k], &ring = rows[N + k];
    order = std::max(order, mf.w2_sq - ring.w2_sq - sigma * std::hypot(mf.std_err, ring.std_err));
    if (k + 1 < N) {
      const auto& next = rows[k + 1];
      mono = std::max(mono, next.w2_sq - mf.w2_sq - sigma * std::hypot(mf.std_err, next.std_err));
    }
  }
  if (N >= 2)
    run.check("mean_field_decreasing", mono <= 0.0, mono, 0.0,
              "max over consecutive n of w(n') - w(n) - sigma stderr");
  const double ratio = rows[2 * N - 1].w2_sq / rows[N].w2_sq;
  run.check("ring_does_not_vanish", ratio >= run.tol("ring_ratio"), ratio, run.tol("ring_ratio"),
            "ring W_(1)^2 at the largest n over the smallest n");
  run.check("mean_field_below_ring", order <= 0.0, order, 0.0, "max over n of mf - ring - sigma stderr");
}

Mat random_spd(CounterRng& rng, std::size_t n, double min_eig) {
  Mat B(idx(n), idx(n));
  for (auto& x : B.reshaped()) x = rng.normal();
  const Mat S = B * B.transpose() / static_cast<double>(n);
  const double shift = min_eig - Eigen::SelfAdjointEigenSolver<Mat>(S).eigenvalues().minCoeff();
  return S + (shift + rng.uniform()) * Mat::Identity(idx(n), idx(n));
}

nlohmann::ordered_json bound_inputs_json(const BoundInputs& b) {
  nlohmann::ordered_json j;
  j["L"] = b.L;
  j["c0"] = b.c0;
  j["eta0"] = b.eta0;
  j["kappa"] = b.kappa;
  j["T"] = b.T;
  j["h0"] = b.h0 ? nlohmann::ordered_json(*b.h0) : nlohmann::ordered_json(nullptr);
  return j;
}

void proximity_bounds(Run& run) {
  const auto& cfg = run.cfg;
  const std::size_t specs = cfg.get_size("specs"), n_max = cfg.get_size("n_max");
  if (n_max < 2) throw InvalidArgument("n_max must be at least 2");
  const double kappa_min = cfg.get_double("kappa_min"), T_max = cfg.get_double("T_max");
  auto out = run.open("proximity_bounds.csv");
  out << "case,n,T,kappa,L,c0,h0,path_entropy,bound\n";
  nlohmann::ordered_json evals = nlohmann::ordered_json::array();
  double worst = 0.0;
  for (std::size_t s = 0; s < specs; ++s) {
    CounterRng rng(cfg.seed, RngStream::kExperiment, s, 1);
    const std::size_t n = 2 + s % (n_max - 1);
    const Mat Q = random_spd(rng, n, kappa_min);
    const Mat A = -Q;
    ProductGaussian mu0;
    for (std::size_t i = 0; i < n; ++i) {
      mu0.means.push_back(Vec::Constant(1, rng.normal()));
      mu0.covs.push_back(Mat::Constant(1, 1, 0.2 + 2.0 * rng.uniform()));
    }
    GaussianState rho0 = mu0.joint();
    if (s % 2) rho0.cov = random_spd(rng, n, 0.3);
    const Eigen::VectorXd ev = Eigen::SelfAdjointEigenSolver<Mat>(Q).eigenvalues();
    BoundInputs b;
    b.T = T_max * rng.uniform();
    b.L = ev.cwiseAbs().maxCoeff();
    b.kappa = ev.minCoeff();
    for (const auto& c : mu0.covs) b.c0 = std::max(b.c0, c(0, 0));
    b.h0 = kl_gaussian(mu0, rho0);
    const double G = hess_trace_linear(A, 1);
    const double bound = proximity_bound(b, [G](double) { return G; });
    const double path = path_entropy_linear_gaussian(A, mu0, rho0, b.T);
    worst = std::max(worst, path / bound);
    out << s << ',' << n << ',' << b.T << ',' << b.kappa << ',' << b.L << ',' << b.c0 << ',' << *b.h0 << ',' << path
        << ',' << bound << '\n';
    nlohmann::ordered_json e;
    e["case"] = s;
    e["inputs"] = bound_inputs_json(b);
    e["hess_trace"] = G;
    e["bound"] = bound;
    e["path_entropy"] = path;
    evals.push_back(e);
  }
  run.check("bound_dominates_path_entropy", worst <= 1.0, worst, 1.0, "max path_entropy / bound");

  // Stationary limit of the time-uniform bound: c = 1/kappa, eta = kappa.
  BoundInputs u;
  u.kappa = cfg.get_double("kappa");
  u.eta0 = u.kappa;
  u.c0 = 1.0 / u.kappa;
  u.h0 = 1.0;
  const double G = cfg.get_double("G"), t = cfg.get_double("t_uniform");
  const double value = proximity_bound_uniform(u, [G](double) { return G; }, t);
  const double limit = G / (2.0 * u.kappa * u.kappa);
  const double rel = std::abs(value / limit - 1.0);
  nlohmann::ordered_json e;
  e["case"] = "uniform_stationary";
  e["inputs"] = bound_inputs_json(u);
  e["t"] = t;
  e["hess_trace"] = G;
  e["bound"] = value;
  e["limit"] = limit;
  evals.push_back(e);
  run.check("uniform_stationary_limit", rel <= run.tol("rel"), rel, run.tol("rel"),
            "|bound(t) / (G / 2 kappa^2) - 1|");
  auto js = run.open("bounds.json");
  js << evals.dump(2) << '\n';
}

void symmetry_checks(Run& run) {
  const auto& cfg = run.cfg;
  const std::size_t n = cfg.get_size("n"), m = cfg.get_size("m");
  const auto spec = DriftSpec::pairwise(
      SiteKernel::function([](std::span<const double> x, std::span<double> o) { o[0] = -x[0] * x[0] * x[0]; }),
      PairKernel::affine(-Mat::Identity(1, 1), Mat::Identity(1, 1), Vec::Constant(1, 0.5)), mean_field_matrix(n));
  SimConfig sc;
  sc.dt = cfg.get_double("dt");
  sc.t_end = cfg.get_double("T");
  sc.scheme = Scheme::kIndependentProjectionSwap;
  sc.record_every = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(cfg.get_double("record") / sc.dt)));
  const auto r = simulate(spec, sc, product_from(Vec::Constant(idx(n), cfg.get_double("init_mean")),
                                                 cfg.get_double("init_var")),
                          m, cfg.seed);
  auto trace = run.open("symmetry_cross_corr.csv");
  trace << "t,max_cross_corr\n";
  double corr = 0.0;
  for (std::size_t s = 0; s < r.trace.times.size(); ++s) {
    trace << r.trace.times[s] << ',' << r.trace.max_cross_corr[s] << '\n';
    corr = std::max(corr, r.trace.max_cross_corr[s]);
  }
  auto ks = run.open("symmetry_ks.csv");
  ks << "i,j,ks,p_value\n";
  double pmin = 1.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const double D = ks_statistic(column(r.final_state.particles, idx(i)), column(r.final_state.particles, idx(j)));
      const double p = ks_pvalue(D, m, m);
      pmin = std::min(pmin, p);
      ks << i << ',' << j << ',' << D << ',' << p << '\n';
    }
  const double corr_bound = run.tol("corr_scale") / std::sqrt(static_cast<double>(m));
  run.check("marginals_agree", pmin >= run.tol("pvalue"), pmin, run.tol("pvalue"), "min pairwise KS p-value");
  run.check("independence_preserved", corr <= corr_bound, corr, corr_bound, "max cross-correlation over time");
}

const std::map<std::string, std::function<void(Run&)>>& runners() {
  static const std::map<std::string, std::function<void(Run&)>> r{
      {"contraction", contraction},
      {"lsi-decay", lsi_decay},
      {"entropy-identity", entropy_identity},
      {"entropic-optimality", entropic_optimality},
      {"mf-fixed-point", mf_fixed_point},
      {"jko-consistency", jko_consistency},
      {"row-sum-reduction", row_sum_reduction},
      {"chaos-scaling", chaos_scaling},
      {"proximity-bounds", proximity_bounds},
      {"symmetry-checks", symmetry_checks},
  };
  return r;
}

nlohmann::ordered_json product_json(const ProductGaussian& p) {
  nlohmann::ordered_json j;
  std::vector<double> means, vars;
  for (std::size_t i = 0; i < p.n(); ++i) {
    means.push_back(p.means[i](0));
    vars.push_back(p.covs[i](0, 0));
  }
  j["means"] = means;
  j["variances"] = vars;
  return j;
}

}  // namespace

const std::vector<std::string>& experiment_names() {
  static const std::vector<std::string> names{"contraction",       "lsi-decay",      "entropy-identity",
                                              "entropic-optimality", "mf-fixed-point", "jko-consistency",
                                              "row-sum-reduction", "chaos-scaling",  "proximity-bounds",
                                              "symmetry-checks"};
  return names;
}

std::string experiment_summary(const std::string& name) {
  const auto it = registry().find(name);
  return it == registry().end() ? std::string() : it->second.first;
}

const std::map<std::string, std::string>& experiment_defaults(const std::string& name) {
  if (name == "oracle") return oracle_defaults();
  static const Defaults empty;
  const auto it = registry().find(name);
  return it == registry().end() ? empty : it->second.second;
}

RunRecord run_experiment(const ExperimentConfig& cfg) {
  validate_config(cfg);
  const auto start = std::chrono::steady_clock::now();
  std::filesystem::create_directories(cfg.output_dir);
  RunRecord rec;
  rec.config = cfg;
  rec.config_text = cfg.canonical();
  rec.config_hash = cfg.hash();
  rec.version = library_version();
  rec.tolerances = cfg.tolerances();
  Run run{cfg, rec};
  runners().at(cfg.experiment)(run);
  rec.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  rec.artifacts.push_back("run.json");
  std::ofstream out(cfg.output_dir / "run.json", std::ios::binary);
  if (!out) throw InvalidArgument("cannot write run.json in " + cfg.output_dir.string());
  out << rec.to_json();
  return rec;
}

const std::vector<std::string>& oracle_names() {
  static const std::vector<std::string> names{"gibbs",     "mf-fixed-point", "ip-moments",          "contraction",
                                              "lsi-decay", "growth-rate",    "proximity-stationary"};
  return names;
}

std::string run_oracle(const std::string& name, const ExperimentConfig& cfg_in) {
  ExperimentConfig cfg = cfg_in;
  cfg.experiment = "oracle";
  nlohmann::ordered_json j;
  j["oracle"] = name;
  auto quad = [&] {
    QuadraticSetup s{cfg.get_matrix("Q"), cfg.get_vector("l"), {}};
    if (s.Q.rows() != s.Q.cols() || s.l.size() != s.Q.rows()) throw InvalidArgument("Q and l do not match");
    s.mu0 = product_from(cfg.get_vector("mu0_mean"), cfg.get_double("mu0_var"));
    if (static_cast<Eigen::Index>(s.mu0.n()) != s.Q.rows()) throw InvalidArgument("mu0_mean does not match Q");
    if (!(kappa_of(s.Q) > 0)) throw InvalidArgument("Q must be positive definite");
    return s;
  };
  if (name == "gibbs") {
    const auto s = quad();
    const auto g = gibbs_gaussian(s.Q, s.l);
    j["kappa"] = kappa_of(s.Q);
    j["mean"] = std::vector<double>(g.mean.data(), g.mean.data() + g.mean.size());
    std::vector<std::vector<double>> cov;
    for (Eigen::Index r = 0; r < g.cov.rows(); ++r) {
      const Eigen::RowVectorXd row = g.cov.row(r);
      cov.emplace_back(row.data(), row.data() + row.size());
    }
    j["cov"] = cov;
    j["log_partition"] = log_partition_quadratic(s.Q, s.l);
  } else if (name == "mf-fixed-point") {
    const auto s = quad();
    j["solution"] = product_json(stationary_mf_gaussian(s.Q, s.l));
  } else if (name == "ip-moments") {
    const auto s = quad();
    j["t"] = cfg.get_double("T");
    j["law"] = product_json(ip_flow(s.Q, s.l, s.mu0, cfg.get_double("T")));
  } else if (name == "contraction" || name == "lsi-decay") {
    const auto s = quad();
    const double kappa = kappa_of(s.Q);
    const auto mustar = stationary_mf_gaussian(s.Q, s.l);
    const auto rho = gibbs_gaussian(s.Q, s.l);
    const double floor = kl_gaussian(mustar, rho);
    nlohmann::ordered_json rows = nlohmann::ordered_json::array();
    for (double t : time_grid(cfg.get_double("T"), cfg.get_double("record"))) {
      const auto mu = ip_flow(s.Q, s.l, s.mu0, t);
      nlohmann::ordered_json r;
      r["t"] = t;
      if (name == "contraction") {
        r["w2_to_mustar"] = w2_gaussian(mu, mustar);
        r["bound"] = std::exp(-kappa * t) * w2_gaussian(s.mu0, mustar);
      } else {
        r["projected_entropy"] = kl_gaussian(mu, rho) - floor;
        r["bound"] = std::exp(-2.0 * kappa * t) * (kl_gaussian(s.mu0, rho) - floor);
      }
      rows.push_back(r);
    }
    j["kappa"] = kappa;
    j["rows"] = rows;
  } else if (name == "growth-rate") {
    const Mat A = cfg.get_matrix("A");
    if (A.rows() != A.cols()) throw InvalidArgument("A must be square");
    const auto law = product_from(Vec::Constant(A.rows(), cfg.get_double("init_mean")), cfg.get_double("init_var"));
    j["rate"] = entropy_growth_rate_gaussian(law, A);
  } else if (name == "proximity-stationary") {
    const double kappa = cfg.get_double("kappa"), G = cfg.get_double("G");
    if (!(kappa > 0)) throw InvalidArgument("kappa must be positive");
    j["limit"] = G / (2.0 * kappa * kappa);
  } else {
    std::string list;
    for (const auto& n : oracle_names()) list += (list.empty() ? "" : ", ") + n;
    throw InvalidArgument("unknown oracle '" + name + "'; available: " + list);
  }
  return j.dump(2) + "\n";
}

}  // namespace mfip
