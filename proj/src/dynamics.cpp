#include "mfip/dynamics.hpp"

#include "mfip/errors.hpp"
#include "mfip/parallel.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <iomanip>
#include <istream>
#include <ostream>

namespace mfip {

namespace {

constexpr std::size_t kChunk = 1024;

Eigen::Index idx(std::size_t v) { return static_cast<Eigen::Index>(v); }

std::size_t chunk_count(std::size_t m) { return (m + kChunk - 1) / kChunk; }

// Column sums with a fixed reduction order.
Vec column_sums(const ParticleArray& Z) {
  const std::size_t m = static_cast<std::size_t>(Z.rows());
  std::vector<Vec> partial(chunk_count(m));
  parallel_chunks(m, kChunk, [&](std::size_t b, std::size_t e) {
    partial[b / kChunk] = Z.middleRows(idx(b), idx(e - b)).colwise().sum().transpose();
  });
  Vec s = Vec::Zero(Z.cols());
  for (const auto& p : partial) s += p;
  return s;
}

// Y^{k,i} = sum_j A_ij X^{k,j}.
ParticleArray block_interaction(const InteractionMatrix& A, const ParticleArray& X, std::size_t d) {
  const std::size_t n = A.size();
  const Mat& W = A.entries();
  ParticleArray Y(X.rows(), X.cols());
  // A constant off the diagonal (mean-field) reduces to (row total - self).
  bool constant = n >= 2;
  const double a = n >= 2 ? W(0, 1) : 0.0;
  for (std::size_t i = 0; i < n && constant; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (i != j && W(idx(i), idx(j)) != a) {
        constant = false;
        break;
      }
  // Sparse graphs (rings, stars) skip the dense product.
  std::size_t nnz = 0;
  for (Eigen::Index e = 0; e < W.size(); ++e) nnz += W.data()[e] != 0.0;
  if (!constant && n >= 16 && 8 * nnz <= n * n) {
    std::vector<std::size_t> start(n + 1, 0), col;
    std::vector<double> val;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j)
        if (W(idx(i), idx(j)) != 0.0) {
          col.push_back(j);
          val.push_back(W(idx(i), idx(j)));
        }
      start[i + 1] = col.size();
    }
    parallel_chunks(static_cast<std::size_t>(X.rows()), kChunk, [&](std::size_t b, std::size_t e) {
      for (std::size_t k = b; k < e; ++k) {
        const double* x = X.row(idx(k)).data();
        double* y = Y.row(idx(k)).data();
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t c = 0; c < d; ++c) y[i * d + c] = 0.0;
          for (std::size_t q = start[i]; q < start[i + 1]; ++q)
            for (std::size_t c = 0; c < d; ++c) y[i * d + c] += val[q] * x[col[q] * d + c];
        }
      }
    });
    return Y;
  }
  if (d == 1) {
    const Mat Wt = W.transpose();
    parallel_chunks(static_cast<std::size_t>(X.rows()), kChunk, [&](std::size_t b, std::size_t e) {
      const auto x = X.middleRows(idx(b), idx(e - b));
      auto y = Y.middleRows(idx(b), idx(e - b));
      if (constant) {
        y = (a * (x.rowwise().sum().replicate(1, idx(n)) - x)).eval();
      } else {
        y.noalias() = x * Wt;
      }
    });
    return Y;
  }
  parallel_chunks(static_cast<std::size_t>(X.rows()), kChunk, [&](std::size_t b, std::size_t e) {
    for (std::size_t k = b; k < e; ++k) {
      using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
      Eigen::Map<const RowMat> xk(X.row(idx(k)).data(), idx(n), idx(d));
      Eigen::Map<RowMat> yk(Y.row(idx(k)).data(), idx(n), idx(d));
      if (constant) {
        const Eigen::RowVectorXd total = xk.colwise().sum();
        for (std::size_t i = 0; i < n; ++i) yk.row(idx(i)) = a * (total - xk.row(idx(i)));
      } else {
        yk.noalias() = W * xk;
      }
    }
  });
  return Y;
}

// out^{k,i} = K1(Z^{ki}) + r_i (wrt_self Z^{ki} + offset), the part of a
// pairwise drift that depends only on the own coordinate.
void site_terms(const Pairwise& p, const ParticleArray& Z, std::size_t n, std::size_t d, const Vec& r,
                ParticleArray& out) {
  const bool k2 = !p.K2.is_zero;
  if (d == 1 && p.K1.is_affine()) {
    // Elementwise: out^{ki} = alpha_i Z^{ki} + beta_i.
    Eigen::RowVectorXd alpha = Eigen::RowVectorXd::Constant(idx(n), (*p.K1.linear)(0, 0));
    Eigen::RowVectorXd beta = Eigen::RowVectorXd::Constant(idx(n), (*p.K1.offset)(0));
    if (k2) {
      alpha += p.K2.affine_form->wrt_self(0, 0) * r.transpose();
      beta += p.K2.affine_form->offset(0) * r.transpose();
    }
    parallel_chunks(static_cast<std::size_t>(Z.rows()), kChunk, [&](std::size_t b, std::size_t e) {
      for (std::size_t k = b; k < e; ++k)
        out.row(idx(k)).array() = Z.row(idx(k)).array() * alpha.array() + beta.array();
    });
    return;
  }
  parallel_chunks(static_cast<std::size_t>(Z.rows()), kChunk, [&](std::size_t b, std::size_t e) {
    const auto rows = idx(e - b);
    for (std::size_t i = 0; i < n; ++i) {
      const auto zi = Z.block(idx(b), idx(i * d), rows, idx(d));
      auto oi = out.block(idx(b), idx(i * d), rows, idx(d));
      if (p.K1.is_affine()) {
        oi.noalias() = zi * p.K1.linear->transpose();
        oi.rowwise() += p.K1.offset->transpose();
      } else {
        for (std::size_t k = b; k < e; ++k) {
          p.K1.eval(std::span<const double>(Z.row(idx(k)).data() + i * d, d),
                    std::span<double>(out.row(idx(k)).data() + i * d, d));
        }
      }
      if (!k2) continue;
      const auto& af = *p.K2.affine_form;
      const double ri = r(idx(i));
      oi.noalias() += ri * (zi * af.wrt_self.transpose());
      oi.rowwise() += ri * af.offset.transpose();
    }
  });
}

// Adds wrt_other * Y^{k,i} blockwise.
void add_other_terms(const Mat& wrt_other, const ParticleArray& Y, std::size_t n, std::size_t d,
                     ParticleArray& out) {
  if (d == 1) {
    out += wrt_other(0, 0) * Y;
    return;
  }
  parallel_chunks(static_cast<std::size_t>(Y.rows()), kChunk, [&](std::size_t b, std::size_t e) {
    for (std::size_t k = b; k < e; ++k)
      for (std::size_t i = 0; i < n; ++i) {
        Eigen::Map<const Vec> y(Y.row(idx(k)).data() + i * d, idx(d));
        Eigen::Map<Vec> o(out.row(idx(k)).data() + i * d, idx(d));
        o += wrt_other * y;
      }
  });
}

// Leave-one-out ensemble means (S - Z^k)/(m-1).
ParticleArray loo_means(const ParticleArray& Z) {
  const Vec S = column_sums(Z);
  const double inv = 1.0 / static_cast<double>(Z.rows() - 1);
  ParticleArray M(Z.rows(), Z.cols());
  parallel_chunks(static_cast<std::size_t>(Z.rows()), kChunk, [&](std::size_t b, std::size_t e) {
    for (std::size_t k = b; k < e; ++k) M.row(idx(k)) = (S.transpose() - Z.row(idx(k))) * inv;
  });
  return M;
}

void require_dims(const EnsembleState& s, const DriftSpec& spec) {
  if (s.dims() != spec.dims() || static_cast<std::size_t>(s.particles.cols()) != spec.dims().total()) {
    throw InvalidArgument("ensemble dimensions do not match the drift");
  }
}

void require_pair(const EnsembleState& s, const char* what) {
  if (s.m() < 2) throw InvalidArgument(std::string(what) + " needs at least 2 particles");
}

// Swap average for coordinate block i of particle k by the definition.
void naive_swap_row(const ParticleArray& Z, const DriftSpec& spec, std::size_t k, std::span<double> out) {
  const std::size_t m = static_cast<std::size_t>(Z.rows());
  const std::size_t n = spec.dims().n, d = spec.dims().d, nd = n * d;
  std::vector<double> x(nd), b(nd);
  std::fill(out.begin(), out.end(), 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t l = 0; l < m; ++l) {
      if (l == k) continue;
      std::copy_n(Z.row(idx(l)).data(), nd, x.begin());
      std::copy_n(Z.row(idx(k)).data() + i * d, d, x.begin() + static_cast<std::ptrdiff_t>(i * d));
      eval_drift(spec, x, b);
      for (std::size_t c = 0; c < d; ++c) out[i * d + c] += b[i * d + c];
    }
  }
  const double inv = 1.0 / static_cast<double>(m - 1);
  for (double& v : out) v *= inv;
}

// Pairwise spec with a general K2: the swap average of sum_j A_ij K2(x^i, x^j)
// averages K2 over the other particles' j-th coordinates.
void pairwise_kernel_swap_row(const Pairwise& p, const ParticleArray& Z, std::size_t n, std::size_t d,
                              std::size_t k, std::span<double> out) {
  const std::size_t m = static_cast<std::size_t>(Z.rows());
  std::vector<double> tmp(d), acc(d);
  const double inv = 1.0 / static_cast<double>(m - 1);
  for (std::size_t i = 0; i < n; ++i) {
    auto zi = std::span<const double>(Z.row(idx(k)).data() + i * d, d);
    auto oi = out.subspan(i * d, d);
    p.K1.eval(zi, oi);
    for (std::size_t j = 0; j < n; ++j) {
      const double a = p.A(i, j);
      if (j == i || a == 0.0) continue;
      std::fill(acc.begin(), acc.end(), 0.0);
      for (std::size_t l = 0; l < m; ++l) {
        if (l == k) continue;
        p.K2.eval(zi, std::span<const double>(Z.row(idx(l)).data() + j * d, d), tmp);
        for (std::size_t c = 0; c < d; ++c) acc[c] += tmp[c];
      }
      for (std::size_t c = 0; c < d; ++c) oi[c] += a * acc[c] * inv;
    }
  }
}

template <class RowFn>
ParticleArray rowwise(const ParticleArray& Z, RowFn&& fn) {
  ParticleArray out(Z.rows(), Z.cols());
  parallel_chunks(static_cast<std::size_t>(Z.rows()), kChunk, [&](std::size_t b, std::size_t e) {
    for (std::size_t k = b; k < e; ++k)
      fn(k, std::span<double>(out.row(idx(k)).data(), static_cast<std::size_t>(Z.cols())));
  });
  return out;
}

ParticleArray full_drift(const EnsembleState& s, const DriftSpec& spec) {
  const ParticleArray& Z = s.particles;
  const std::size_t n = s.n, d = s.d;
  if (const auto* p = std::get_if<Pairwise>(&spec.form())) {
    if (p->K2.is_affine()) {
      ParticleArray out(Z.rows(), Z.cols());
      site_terms(*p, Z, n, d, p->A.row_sums(), out);
      if (!p->K2.is_zero) add_other_terms(p->K2.affine_form->wrt_other, block_interaction(p->A, Z, d), n, d, out);
      return out;
    }
  } else if (auto af = spec.affine()) {
    ParticleArray out(Z.rows(), Z.cols());
    const Mat Mt = af->matrix.transpose();
    parallel_chunks(s.m(), kChunk, [&](std::size_t b, std::size_t e) {
      out.middleRows(idx(b), idx(e - b)).noalias() = Z.middleRows(idx(b), idx(e - b)) * Mt;
      out.middleRows(idx(b), idx(e - b)).rowwise() += af->offset.transpose();
    });
    return out;
  }
  return rowwise(Z, [&](std::size_t k, std::span<double> o) {
    eval_drift(spec, std::span<const double>(Z.row(idx(k)).data(), o.size()), o);
  });
}

ParticleArray mv_drift(const EnsembleState& s, const SiteKernel& K1, const PairKernel& K2, const Vec& r) {
  const ParticleArray& Z = s.particles;
  const std::size_t n = s.n, d = s.d, m = s.m();
  Pairwise local{K1, K2, InteractionMatrix{}, std::nullopt};
  ParticleArray out(Z.rows(), Z.cols());
  if (K2.is_affine()) {
    site_terms(local, Z, n, d, r, out);
    if (K2.is_zero) return out;
    ParticleArray Y = loo_means(Z);
    for (std::size_t i = 0; i < n; ++i) Y.middleCols(idx(i * d), idx(d)) *= r(idx(i));
    add_other_terms(K2.affine_form->wrt_other, Y, n, d, out);
    return out;
  }
  const double inv = 1.0 / static_cast<double>(m - 1);
  return rowwise(Z, [&](std::size_t k, std::span<double> o) {
    std::vector<double> tmp(d), acc(d);
    for (std::size_t i = 0; i < n; ++i) {
      auto zi = std::span<const double>(Z.row(idx(k)).data() + i * d, d);
      auto oi = o.subspan(i * d, d);
      K1.eval(zi, oi);
      std::fill(acc.begin(), acc.end(), 0.0);
      for (std::size_t l = 0; l < m; ++l) {
        if (l == k) continue;
        K2.eval(zi, std::span<const double>(Z.row(idx(l)).data() + i * d, d), tmp);
        for (std::size_t c = 0; c < d; ++c) acc[c] += tmp[c];
      }
      for (std::size_t c = 0; c < d; ++c) oi[c] += r(idx(i)) * acc[c] * inv;
    }
  });
}

// Euler-Maruyama update with the frozen drift; commits only a finite result.
void advance(EnsembleState& s, ParticleArray&& drift, double dt, bool noise) {
  const double sigma = std::sqrt(2.0 * dt);
  const std::size_t nd = static_cast<std::size_t>(s.particles.cols());
  std::vector<char> bad(chunk_count(s.m()), 0);
  parallel_chunks(s.m(), kChunk, [&](std::size_t b, std::size_t e) {
    for (std::size_t k = b; k < e; ++k) {
      double* z = drift.row(idx(k)).data();
      const double* old = s.particles.row(idx(k)).data();
      CounterRng rng(s.seed, RngStream::kStepNoise, s.step, k);
      for (std::size_t c = 0; c < nd; ++c) {
        double v = old[c] + z[c] * dt;
        if (noise) v += sigma * rng.normal();
        z[c] = v;
        if (!std::isfinite(v)) bad[b / kChunk] = 1;
      }
    }
  });
  if (std::find(bad.begin(), bad.end(), 1) != bad.end()) {
    throw BlowUp("non-finite particle state after t = " + std::to_string(s.t), s.t);
  }
  s.particles = std::move(drift);
  s.t += dt;
  s.step += 1;
}

void require_dt(double dt) {
  if (!(dt > 0.0) || !std::isfinite(dt)) throw InvalidArgument("time step must be positive");
}

bool is_product(const InitialLaw& law, std::size_t d) {
  if (std::holds_alternative<ProductGaussian>(law)) return true;
  if (const auto* s = std::get_if<InitialSampler>(&law)) return s->product;
  const auto& g = std::get<GaussianState>(law);
  const std::size_t n = static_cast<std::size_t>(g.cov.rows()) / d;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (i != j && block(g.cov, i, j, d).cwiseAbs().maxCoeff() != 0.0) return false;
  return true;
}

void put_u64(std::ostream& out, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  out.write(b, 8);
}

std::uint64_t get_u64(std::istream& in) {
  unsigned char b[8];
  if (!in.read(reinterpret_cast<char*>(b), 8)) throw InvalidArgument("truncated particle dump");
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

}  // namespace

const char* scheme_name(Scheme s) {
  switch (s) {
    case Scheme::kFullLangevin: return "full_langevin";
    case Scheme::kIndependentProjectionSwap: return "independent_projection_swap";
    case Scheme::kMcKeanVlasov: return "mckean_vlasov_selfconsistent";
  }
  return "?";
}

Scheme parse_scheme(const std::string& name) {
  for (Scheme s : {Scheme::kFullLangevin, Scheme::kIndependentProjectionSwap, Scheme::kMcKeanVlasov})
    if (name == scheme_name(s)) return s;
  throw InvalidArgument("unknown scheme '" + name + "'");
}

EnsembleState sample_initial(const InitialLaw& law, Dims dims, std::size_t m, std::uint64_t seed) {
  const std::size_t n = dims.n, d = dims.d, nd = dims.total();
  EnsembleState s;
  s.n = n;
  s.d = d;
  s.seed = seed;
  s.particles.resize(idx(m), idx(nd));
  std::visit(
      [&](const auto& g) {
        using T = std::decay_t<decltype(g)>;
        if constexpr (std::is_same_v<T, ProductGaussian>) {
          if (g.dims() != dims) throw InvalidArgument("initial law dimensions do not match");
          std::vector<Mat> roots;
          for (const auto& c : g.covs) roots.push_back(psd_sqrt(c));
          parallel_chunks(m, kChunk, [&](std::size_t b, std::size_t e) {
            Vec xi(idx(d));
            for (std::size_t k = b; k < e; ++k) {
              CounterRng rng(seed, RngStream::kInitial, 0, k);
              for (std::size_t i = 0; i < n; ++i) {
                for (auto& v : xi) v = rng.normal();
                s.particles.row(idx(k)).segment(idx(i * d), idx(d)) = (g.means[i] + roots[i] * xi).transpose();
              }
            }
          });
        } else if constexpr (std::is_same_v<T, GaussianState>) {
          if (static_cast<std::size_t>(g.mean.size()) != nd) {
            throw InvalidArgument("initial law dimensions do not match");
          }
          const Mat R = psd_sqrt(g.cov);
          parallel_chunks(m, kChunk, [&](std::size_t b, std::size_t e) {
            Vec xi(idx(nd));
            for (std::size_t k = b; k < e; ++k) {
              CounterRng rng(seed, RngStream::kInitial, 0, k);
              for (auto& v : xi) v = rng.normal();
              s.particles.row(idx(k)) = (g.mean + R * xi).transpose();
            }
          });
        } else {
          if (!g.sample) throw InvalidArgument("initial sampler is empty");
          parallel_chunks(m, kChunk, [&](std::size_t b, std::size_t e) {
            for (std::size_t k = b; k < e; ++k) {
              CounterRng rng(seed, RngStream::kInitial, 0, k);
              g.sample(rng, std::span<double>(s.particles.row(idx(k)).data(), nd));
            }
          });
        }
      },
      law);
  if (!s.particles.allFinite()) throw InvalidArgument("initial sample is not finite");
  return s;
}

void step_full_langevin(EnsembleState& state, const DriftSpec& spec, double dt, bool noise) {
  require_dt(dt);
  require_dims(state, spec);
  advance(state, full_drift(state, spec), dt, noise);
}

ParticleArray swap_drift(const EnsembleState& state, const DriftSpec& spec) {
  require_dims(state, spec);
  require_pair(state, "swap scheme");
  const ParticleArray& Z = state.particles;
  const std::size_t n = state.n, d = state.d;
  if (const auto* p = std::get_if<Pairwise>(&spec.form())) {
    if (p->K2.is_affine()) {
      ParticleArray out(Z.rows(), Z.cols());
      site_terms(*p, Z, n, d, p->A.row_sums(), out);
      if (!p->K2.is_zero) {
        add_other_terms(p->K2.affine_form->wrt_other, block_interaction(p->A, loo_means(Z), d), n, d, out);
      }
      return out;
    }
    return rowwise(Z, [&](std::size_t k, std::span<double> o) { pairwise_kernel_swap_row(*p, Z, n, d, k, o); });
  }
  if (auto af = spec.affine()) {
    // Own block acts on Z^k, the rest on the leave-one-out means.
    Mat D = Mat::Zero(af->matrix.rows(), af->matrix.cols());
    for (std::size_t i = 0; i < n; ++i) block(D, i, i, d) = block(af->matrix, i, i, d);
    const Mat Offt = (af->matrix - D).transpose();
    const Mat Dt = D.transpose();
    const ParticleArray Mbar = loo_means(Z);
    ParticleArray out(Z.rows(), Z.cols());
    parallel_chunks(state.m(), kChunk, [&](std::size_t b, std::size_t e) {
      auto o = out.middleRows(idx(b), idx(e - b));
      o.noalias() = Mbar.middleRows(idx(b), idx(e - b)) * Offt;
      o.noalias() += Z.middleRows(idx(b), idx(e - b)) * Dt;
      o.rowwise() += af->offset.transpose();
    });
    return out;
  }
  return swap_drift_naive(state, spec);
}

ParticleArray swap_drift_naive(const EnsembleState& state, const DriftSpec& spec) {
  require_dims(state, spec);
  require_pair(state, "swap scheme");
  return rowwise(state.particles,
                 [&](std::size_t k, std::span<double> o) { naive_swap_row(state.particles, spec, k, o); });
}

Vec project_drift(const EnsembleState& state, const DriftSpec& spec, std::size_t k) {
  require_dims(state, spec);
  require_pair(state, "drift projection");
  if (k >= state.m()) throw InvalidArgument("particle index out of range");
  Vec out(idx(state.dims().total()));
  std::span<double> o(out.data(), static_cast<std::size_t>(out.size()));
  if (const auto* p = std::get_if<Pairwise>(&spec.form()); p && !p->K2.is_affine()) {
    pairwise_kernel_swap_row(*p, state.particles, state.n, state.d, k, o);
  } else if (spec.affine() || std::holds_alternative<Pairwise>(spec.form())) {
    out = swap_drift(state, spec).row(idx(k)).transpose();
  } else {
    naive_swap_row(state.particles, spec, k, o);
  }
  return out;
}

void step_independent_projection_swap(EnsembleState& state, const DriftSpec& spec, double dt, bool noise) {
  require_dt(dt);
  advance(state, swap_drift(state, spec), dt, noise);
}

void step_mckean_vlasov(EnsembleState& state, const DriftSpec& spec, double dt, bool noise) {
  require_dt(dt);
  require_dims(state, spec);
  require_pair(state, "McKean-Vlasov scheme");
  const auto* p = std::get_if<Pairwise>(&spec.form());
  if (!p) throw Unsupported("the McKean-Vlasov scheme needs a pairwise drift");
  advance(state, mv_drift(state, p->K1, p->K2, p->A.row_sums()), dt, noise);
}

void record_moments(const EnsembleState& state, MomentTrace& trace) {
  const ParticleArray& Z = state.particles;
  const std::size_t m = state.m(), nd = static_cast<std::size_t>(Z.cols()), d = state.d;
  const double md = static_cast<double>(m);
  const Vec mean = column_sums(Z) / md;
  const std::size_t nc = chunk_count(m);
  std::vector<Mat> gram(nc);
  std::vector<double> sq(nc), sq2(nc);
  parallel_chunks(m, kChunk, [&](std::size_t b, std::size_t e) {
    const ParticleArray C = Z.middleRows(idx(b), idx(e - b)).rowwise() - mean.transpose();
    gram[b / kChunk] = C.transpose() * C;
    const Vec norms = Z.middleRows(idx(b), idx(e - b)).rowwise().squaredNorm();
    sq[b / kChunk] = norms.sum();
    sq2[b / kChunk] = norms.squaredNorm();
  });
  Mat G = Mat::Zero(idx(nd), idx(nd));
  double s1 = 0, s2 = 0;
  for (std::size_t c = 0; c < nc; ++c) {
    G += gram[c];
    s1 += sq[c];
    s2 += sq2[c];
  }
  const double denom = m > 1 ? md - 1 : 1.0;
  double max_corr = 0.0;
  for (std::size_t a = 0; a < nd; ++a)
    for (std::size_t b = a + 1; b < nd; ++b) {
      if (d == 0 || a / d == b / d) continue;
      const double v = G(idx(a), idx(a)) * G(idx(b), idx(b));
      if (v > 0) max_corr = std::max(max_corr, std::abs(G(idx(a), idx(b))) / std::sqrt(v));
    }
  const double e2 = s1 / md;
  const double var2 = m > 1 ? std::max(0.0, (s2 - md * e2 * e2) / (md - 1)) : 0.0;
  trace.m = m;
  trace.times.push_back(state.t);
  trace.means.push_back(mean);
  trace.variances.push_back(G.diagonal() / denom);
  trace.max_cross_corr.push_back(max_corr);
  trace.second_moment.push_back(e2);
  trace.second_moment_se.push_back(std::sqrt(var2 / md));
}

namespace {

template <class StepFn>
SimResult run_loop(EnsembleState state, const SimConfig& config, StepFn&& step) {
  if (!(config.dt > 0.0) || !std::isfinite(config.dt)) throw InvalidArgument("dt must be positive");
  if (!(config.t_end >= 0.0) || !std::isfinite(config.t_end)) throw InvalidArgument("t_end must be >= 0");
  if (config.record_every < 1) throw InvalidArgument("record_every must be >= 1");
  SimResult r;
  const double t0 = state.t;
  record_moments(state, r.trace);
  const auto nsteps = config.t_end > 0
                          ? static_cast<std::uint64_t>(std::ceil(config.t_end / config.dt * (1.0 - 1e-12)))
                          : std::uint64_t{0};
  for (std::uint64_t s = 0; s < nsteps; ++s) {
    double h = config.dt;
    if (s + 1 == nsteps) {
      // Shorten the final step, unless it differs from dt only by rounding.
      const double rest = config.t_end - static_cast<double>(s) * config.dt;
      if (rest < config.dt * (1.0 - 1e-9)) h = rest;
    }
    step(state, h);
    state.t = t0 + std::min(config.t_end, static_cast<double>(s + 1) * config.dt);
    if ((s + 1) % config.record_every == 0 || s + 1 == nsteps) record_moments(state, r.trace);
  }
  r.final_state = std::move(state);
  return r;
}

}  // namespace

SimResult simulate(const DriftSpec& spec, const SimConfig& config, const InitialLaw& init, std::size_t m,
                   std::uint64_t seed) {
  const Dims dims = spec.dims();
  if (m < 1) throw InvalidArgument("ensemble size must be positive");
  if (config.scheme != Scheme::kFullLangevin) {
    if (m < 2) throw InvalidArgument("ensemble schemes need m >= 2");
    if (!is_product(init, dims.d)) {
      throw InvalidArgument("the projected dynamics need a product initial law");
    }
  }
  EnsembleState state = sample_initial(init, dims, m, seed);
  switch (config.scheme) {
    case Scheme::kFullLangevin:
      return run_loop(std::move(state), config,
                      [&](EnsembleState& s, double h) { step_full_langevin(s, spec, h, config.noise); });
    case Scheme::kIndependentProjectionSwap:
      return run_loop(std::move(state), config, [&](EnsembleState& s, double h) {
        step_independent_projection_swap(s, spec, h, config.noise);
      });
    case Scheme::kMcKeanVlasov:
      return run_loop(std::move(state), config,
                      [&](EnsembleState& s, double h) { step_mckean_vlasov(s, spec, h, config.noise); });
  }
  throw InternalError("unhandled scheme");
}

SimResult simulate_mckean_vlasov(const SiteKernel& K1, const PairKernel& K2, const SimConfig& config,
                                 const InitialSampler& init, std::size_t d, std::size_t m,
                                 std::uint64_t seed) {
  if (m < 2) throw InvalidArgument("the particle method needs m >= 2");
  EnsembleState state = sample_initial(init, Dims{1, d}, m, seed);
  const Vec r = Vec::Ones(1);
  return run_loop(std::move(state), config, [&](EnsembleState& s, double h) {
    require_dt(h);
    advance(s, mv_drift(s, K1, K2, r), h, config.noise);
  });
}

void write_moment_csv(const MomentTrace& trace, std::ostream& out) {
  out << "t,coord_index,mean,var,stderr\n";
  out << std::setprecision(17);
  const double m = static_cast<double>(trace.m);
  for (std::size_t s = 0; s < trace.times.size(); ++s) {
    for (Eigen::Index c = 0; c < trace.means[s].size(); ++c) {
      out << trace.times[s] << ',' << c << ',' << trace.means[s](c) << ',' << trace.variances[s](c) << ','
          << std::sqrt(trace.variances[s](c) / m) << '\n';
    }
    out << trace.times[s] << ",max_cross_corr," << trace.max_cross_corr[s] << ",,\n";
  }
}

void write_particles_binary(const EnsembleState& state, std::ostream& out) {
  put_u64(out, state.m());
  put_u64(out, state.n);
  put_u64(out, state.d);
  const ParticleArray& Z = state.particles;
  for (Eigen::Index k = 0; k < Z.rows(); ++k)
    for (Eigen::Index c = 0; c < Z.cols(); ++c) put_u64(out, std::bit_cast<std::uint64_t>(Z(k, c)));
}

EnsembleState read_particles_binary(std::istream& in) {
  EnsembleState s;
  const std::uint64_t m = get_u64(in);
  s.n = get_u64(in);
  s.d = get_u64(in);
  s.particles.resize(idx(m), idx(s.n * s.d));
  for (Eigen::Index k = 0; k < s.particles.rows(); ++k)
    for (Eigen::Index c = 0; c < s.particles.cols(); ++c) s.particles(k, c) = std::bit_cast<double>(get_u64(in));
  return s;
}

}  // namespace mfip
