#pragma once

#include "mfip/gaussian.hpp"
#include "mfip/model.hpp"
#include "mfip/rng.hpp"

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace mfip {

// Row k is particle k: (Z^{k1}, ..., Z^{kn}) stacked, length n*d.
using ParticleArray = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct EnsembleState {
  std::size_t n = 0;
  std::size_t d = 0;
  ParticleArray particles;
  double t = 0.0;
  std::uint64_t seed = 0;
  std::uint64_t step = 0;  // RNG counter: number of steps taken so far

  std::size_t m() const { return static_cast<std::size_t>(particles.rows()); }
  Dims dims() const { return {n, d}; }
};

enum class Scheme { kFullLangevin, kIndependentProjectionSwap, kMcKeanVlasov };

const char* scheme_name(Scheme s);
Scheme parse_scheme(const std::string& name);

struct SimConfig {
  double dt = 1e-3;
  double t_end = 1.0;
  Scheme scheme = Scheme::kFullLangevin;
  std::size_t record_every = 100;
  bool noise = true;  // test hook: false gives the deterministic Euler map
};

struct MomentTrace {
  std::size_t m = 0;
  std::vector<double> times;
  std::vector<Vec> means;      // n*d per time
  std::vector<Vec> variances;  // n*d per time
  std::vector<double> max_cross_corr;
  std::vector<double> second_moment;
  std::vector<double> second_moment_se;
};

// Draws one particle (n*d entries) from an arbitrary law.
struct InitialSampler {
  std::function<void(CounterRng&, std::span<double>)> sample;
  bool product = false;  // coordinate blocks are independent
};

using InitialLaw = std::variant<ProductGaussian, GaussianState, InitialSampler>;

// i.i.d. draws, particle k from CounterRng(seed, kInitial, 0, k).
EnsembleState sample_initial(const InitialLaw& law, Dims dims, std::size_t m, std::uint64_t seed);

// Euler-Maruyama steps. Each advances state.t by dt and state.step by one.
void step_full_langevin(EnsembleState& state, const DriftSpec& spec, double dt, bool noise = true);
void step_independent_projection_swap(EnsembleState& state, const DriftSpec& spec, double dt,
                                      bool noise = true);
// Coordinate i of each particle interacts only with coordinate i of the other
// particles: K1(Z^{ki}) + r_i (1/(m-1)) sum_{l != k} K2(Z^{ki}, Z^{li}).
void step_mckean_vlasov(EnsembleState& state, const DriftSpec& spec, double dt, bool noise = true);

// Swap-average drift for every particle, m x (n*d), against the current state.
ParticleArray swap_drift(const EnsembleState& state, const DriftSpec& spec);
// Same via the O(m^2) definition, for any spec.
ParticleArray swap_drift_naive(const EnsembleState& state, const DriftSpec& spec);
// Row k of swap_drift.
Vec project_drift(const EnsembleState& state, const DriftSpec& spec, std::size_t k);

void record_moments(const EnsembleState& state, MomentTrace& trace);

struct SimResult {
  EnsembleState final_state;
  MomentTrace trace;
};

// Steps to t_end with nsteps = ceil(t_end/dt) (the last step is shortened to
// land on t_end). Moments are recorded at t=0, every record_every steps and at
// the end.
SimResult simulate(const DriftSpec& spec, const SimConfig& config, const InitialLaw& init, std::size_t m,
                   std::uint64_t seed);

// Standard particle method for the scalar-coordinate McKean-Vlasov equation
// with drift K1(x) + E K2(x, Y). `init` draws one d-dimensional particle.
SimResult simulate_mckean_vlasov(const SiteKernel& K1, const PairKernel& K2, const SimConfig& config,
                                 const InitialSampler& init, std::size_t d, std::size_t m,
                                 std::uint64_t seed);

// CSV with columns t,coord_index,mean,var,stderr. Each snapshot ends with a
// row whose coord_index is "max_cross_corr" and whose mean column holds it.
void write_moment_csv(const MomentTrace& trace, std::ostream& out);

// Little-endian: u64 m, n, d, then m*n*d doubles in particle-major order.
void write_particles_binary(const EnsembleState& state, std::ostream& out);
EnsembleState read_particles_binary(std::istream& in);

}  // namespace mfip
