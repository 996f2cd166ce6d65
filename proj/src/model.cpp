#include "mfip/model.hpp"

#include "mfip/errors.hpp"

#include <cmath>
#include <istream>
#include <sstream>
#include <vector>

namespace mfip {

namespace {

Eigen::Index idx(std::size_t v) { return static_cast<Eigen::Index>(v); }

void require_square(const Mat& M, const char* what) {
  if (M.rows() != M.cols()) throw InvalidArgument(std::string(what) + " must be square");
}

// Central finite-difference step for a coordinate of magnitude |v|.
double fd_step(double v) { return 1e-5 * (1.0 + std::abs(v)); }

}  // namespace

bool is_symmetric(const Mat& M, double rel_tol) {
  if (M.rows() != M.cols()) return false;
  const double scale = std::max(1.0, M.cwiseAbs().maxCoeff());
  return (M - M.transpose()).cwiseAbs().maxCoeff() <= rel_tol * scale;
}

// ---------------------------------------------------------------------------
// InteractionMatrix

InteractionMatrix::InteractionMatrix(Mat entries) : entries_(std::move(entries)) {
  require_square(entries_, "interaction matrix");
  for (Eigen::Index i = 0; i < entries_.rows(); ++i) {
    if (entries_(i, i) != 0.0) throw InvalidArgument("interaction matrix must have zero diagonal");
  }
  if (!entries_.allFinite()) throw InvalidArgument("interaction matrix has non-finite entries");
  row_sums_ = entries_.rowwise().sum();
  trace_aat_ = entries_.squaredNorm();
}

bool InteractionMatrix::rows_sum_to_one(double tol) const {
  for (Eigen::Index i = 0; i < row_sums_.size(); ++i) {
    if (std::abs(row_sums_(i) - 1.0) > tol) return false;
  }
  return true;
}

InteractionMatrix mean_field_matrix(std::size_t n) {
  if (n < 2) throw InvalidArgument("mean_field_matrix requires n >= 2");
  Mat A = Mat::Constant(idx(n), idx(n), 1.0 / static_cast<double>(n - 1));
  A.diagonal().setZero();
  return InteractionMatrix(std::move(A));
}

InteractionMatrix random_walk_matrix(const Mat& adjacency) {
  require_square(adjacency, "adjacency matrix");
  const Eigen::Index n = adjacency.rows();
  for (Eigen::Index i = 0; i < n; ++i) {
    if (adjacency(i, i) != 0.0) throw InvalidArgument("adjacency matrix must have zero diagonal");
    for (Eigen::Index j = 0; j < n; ++j) {
      const double a = adjacency(i, j);
      if (a != 0.0 && a != 1.0) throw InvalidArgument("adjacency entries must be 0 or 1");
      if (a != adjacency(j, i)) throw InvalidArgument("adjacency matrix must be symmetric");
    }
  }
  Mat A = Mat::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double degree = adjacency.row(i).sum();
    if (degree < 1.0) {
      throw InvalidArgument("vertex " + std::to_string(i) + " is isolated");
    }
    A.row(i) = adjacency.row(i) / degree;
  }
  return InteractionMatrix(std::move(A));
}

Mat ring_adjacency(std::size_t n) {
  if (n < 3) throw InvalidArgument("ring graph requires n >= 3");
  Mat adj = Mat::Zero(idx(n), idx(n));
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t j = (i + 1) % n;
    adj(idx(i), idx(j)) = adj(idx(j), idx(i)) = 1.0;
  }
  return adj;
}

Mat complete_adjacency(std::size_t n) {
  if (n < 2) throw InvalidArgument("complete graph requires n >= 2");
  Mat adj = Mat::Ones(idx(n), idx(n));
  adj.diagonal().setZero();
  return adj;
}

Mat star_adjacency(std::size_t n) {
  if (n < 2) throw InvalidArgument("star graph requires n >= 2");
  Mat adj = Mat::Zero(idx(n), idx(n));
  for (std::size_t i = 1; i < n; ++i) adj(0, idx(i)) = adj(idx(i), 0) = 1.0;
  return adj;
}

Mat read_edge_list(std::istream& in, std::size_t n) {
  Mat adj = Mat::Zero(idx(n), idx(n));
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream fields(line);
    long long i = -1, j = -1;
    std::string rest;
    if (!(fields >> i >> j) || (fields >> rest)) {
      throw ParseError("expected \"i j\" edge", lineno);
    }
    if (i < 0 || j < 0 || static_cast<std::size_t>(i) >= n || static_cast<std::size_t>(j) >= n) {
      throw ParseError("vertex index out of range", lineno);
    }
    if (i == j) throw ParseError("self-loop", lineno);
    adj(i, j) = adj(j, i) = 1.0;
  }
  return adj;
}

// ---------------------------------------------------------------------------
// Kernels

SiteKernel SiteKernel::affine(Mat linear, Vec offset) {
  require_square(linear, "site kernel matrix");
  if (offset.size() != linear.rows()) throw InvalidArgument("site kernel offset dimension mismatch");
  SiteKernel k;
  k.linear = linear;
  k.offset = offset;
  k.eval = [linear = std::move(linear), offset = std::move(offset)](std::span<const double> x,
                                                                     std::span<double> out) {
    Eigen::Map<const Vec> xv(x.data(), idx(x.size()));
    Eigen::Map<Vec>(out.data(), idx(out.size())) = linear * xv + offset;
  };
  return k;
}

SiteKernel SiteKernel::zero(std::size_t d) { return affine(Mat::Zero(idx(d), idx(d)), Vec::Zero(idx(d))); }

SiteKernel SiteKernel::function(std::function<void(std::span<const double>, std::span<double>)> fn) {
  if (!fn) throw InvalidArgument("site kernel function is empty");
  SiteKernel k;
  k.eval = std::move(fn);
  return k;
}

PairKernel PairKernel::zero() {
  PairKernel k;
  k.is_zero = true;
  k.eval = [](std::span<const double>, std::span<const double>, std::span<double> out) {
    for (double& v : out) v = 0.0;
  };
  k.jacobian_other = [](std::span<const double>, std::span<const double>, std::span<double> out) {
    for (double& v : out) v = 0.0;
  };
  return k;
}

PairKernel PairKernel::affine(Mat wrt_self, Mat wrt_other, Vec offset) {
  require_square(wrt_self, "pair kernel matrix");
  if (wrt_other.rows() != wrt_self.rows() || wrt_other.cols() != wrt_self.cols() ||
      offset.size() != wrt_self.rows()) {
    throw InvalidArgument("pair kernel dimension mismatch");
  }
  PairKernel k;
  k.affine_form = Affine{wrt_self, wrt_other, offset};
  k.eval = [a = *k.affine_form](std::span<const double> x, std::span<const double> y,
                                std::span<double> out) {
    Eigen::Map<const Vec> xv(x.data(), idx(x.size()));
    Eigen::Map<const Vec> yv(y.data(), idx(y.size()));
    Eigen::Map<Vec>(out.data(), idx(out.size())) = a.wrt_self * xv + a.wrt_other * yv + a.offset;
  };
  k.jacobian_other = [my = wrt_other](std::span<const double>, std::span<const double>,
                                      std::span<double> out) {
    const auto d = my.rows();
    for (Eigen::Index r = 0; r < d; ++r)
      for (Eigen::Index c = 0; c < d; ++c) out[static_cast<std::size_t>(r * d + c)] = my(r, c);
  };
  return k;
}

PairKernel PairKernel::function(
    std::function<void(std::span<const double>, std::span<const double>, std::span<double>)> fn) {
  if (!fn) throw InvalidArgument("pair kernel function is empty");
  PairKernel k;
  k.eval = std::move(fn);
  return k;
}

// ---------------------------------------------------------------------------
// DriftSpec

DriftSpec DriftSpec::quadratic(Mat Q, Vec l, std::size_t d) {
  require_square(Q, "Q");
  if (d == 0 || Q.rows() % idx(d) != 0) throw InvalidArgument("Q size must be a multiple of d");
  if (l.size() != Q.rows()) throw InvalidArgument("l dimension mismatch");
  if (!is_symmetric(Q, 1e-12)) throw InvalidArgument("Q must be symmetric");
  const Dims dims{static_cast<std::size_t>(Q.rows()) / d, d};
  return DriftSpec(dims, QuadraticPotential{std::move(Q), std::move(l)});
}

DriftSpec DriftSpec::pairwise(SiteKernel K1, PairKernel K2, InteractionMatrix A, std::size_t d,
                              std::optional<double> declared_lipschitz) {
  if (!K1.eval) throw InvalidArgument("K1 is empty");
  if (!K2.eval) throw InvalidArgument("K2 is empty");
  if (d == 0 || A.size() == 0) throw InvalidArgument("pairwise spec needs n >= 1 and d >= 1");
  if (K1.linear && K1.linear->rows() != idx(d)) throw InvalidArgument("K1 dimension mismatch");
  if (K2.affine_form && K2.affine_form->wrt_self.rows() != idx(d)) {
    throw InvalidArgument("K2 dimension mismatch");
  }
  const Dims dims{A.size(), d};
  return DriftSpec(dims, Pairwise{std::move(K1), std::move(K2), std::move(A), declared_lipschitz});
}

DriftSpec DriftSpec::linear(Mat A_full, std::size_t d) {
  require_square(A_full, "A_full");
  if (d == 0 || A_full.rows() % idx(d) != 0) throw InvalidArgument("A_full size must be a multiple of d");
  const Dims dims{static_cast<std::size_t>(A_full.rows()) / d, d};
  return DriftSpec(dims, Linear{std::move(A_full)});
}

DriftSpec DriftSpec::custom(Dims dims, Custom custom) {
  if (!custom.drift) throw InvalidArgument("custom drift callback is empty");
  if (dims.total() == 0) throw InvalidArgument("custom drift needs positive dimensions");
  if (!(custom.lipschitz >= 0.0) || !std::isfinite(custom.lipschitz)) {
    throw InvalidArgument("custom drift must declare a finite Lipschitz constant");
  }
  return DriftSpec(dims, std::move(custom));
}

std::string DriftSpec::kind() const {
  return std::visit(
      [](const auto& f) -> std::string {
        using T = std::decay_t<decltype(f)>;
        if constexpr (std::is_same_v<T, QuadraticPotential>) return "quadratic";
        else if constexpr (std::is_same_v<T, Pairwise>) return "pairwise";
        else if constexpr (std::is_same_v<T, Linear>) return "linear";
        else return "custom";
      },
      form_);
}

std::optional<AffineDrift> DriftSpec::affine() const {
  const std::size_t n = dims_.n, d = dims_.d;
  if (const auto* q = std::get_if<QuadraticPotential>(&form_)) return AffineDrift{-q->Q, q->l};
  if (const auto* lin = std::get_if<Linear>(&form_)) {
    return AffineDrift{lin->A_full, Vec::Zero(lin->A_full.rows())};
  }
  if (const auto* p = std::get_if<Pairwise>(&form_)) {
    if (!p->K1.is_affine() || !p->K2.is_affine()) return std::nullopt;
    Mat M = Mat::Zero(idx(n * d), idx(n * d));
    Vec c = Vec::Zero(idx(n * d));
    for (std::size_t i = 0; i < n; ++i) {
      block(M, i, i, d) = *p->K1.linear;
      c.segment(idx(i * d), idx(d)) = *p->K1.offset;
      if (p->K2.is_zero) continue;
      const auto& k2 = *p->K2.affine_form;
      const double r = p->A.row_sums()(idx(i));
      block(M, i, i, d) += r * k2.wrt_self;
      c.segment(idx(i * d), idx(d)) += r * k2.offset;
      for (std::size_t j = 0; j < n; ++j) {
        if (j != i) block(M, i, j, d) = p->A(i, j) * k2.wrt_other;
      }
    }
    return AffineDrift{std::move(M), std::move(c)};
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Operations

void eval_drift(const DriftSpec& spec, std::span<const double> x, std::span<double> out) {
  const Dims dims = spec.dims();
  if (x.size() != dims.total() || out.size() != dims.total()) {
    throw InvalidArgument("eval_drift: expected a point of dimension " + std::to_string(dims.total()) +
                          ", got " + std::to_string(x.size()));
  }
  const std::size_t n = dims.n, d = dims.d;
  Eigen::Map<const Vec> xv(x.data(), idx(x.size()));
  Eigen::Map<Vec> ov(out.data(), idx(out.size()));
  std::visit(
      [&](const auto& f) {
        using T = std::decay_t<decltype(f)>;
        if constexpr (std::is_same_v<T, QuadraticPotential>) {
          ov.noalias() = -(f.Q * xv);
          ov += f.l;
        } else if constexpr (std::is_same_v<T, Linear>) {
          ov.noalias() = f.A_full * xv;
        } else if constexpr (std::is_same_v<T, Pairwise>) {
          std::vector<double> tmp(d);
          for (std::size_t i = 0; i < n; ++i) {
            auto xi = x.subspan(i * d, d);
            auto oi = out.subspan(i * d, d);
            f.K1.eval(xi, oi);
            if (f.K2.is_zero) continue;
            for (std::size_t j = 0; j < n; ++j) {
              const double a = f.A(i, j);
              if (j == i || a == 0.0) continue;
              f.K2.eval(xi, x.subspan(j * d, d), tmp);
              for (std::size_t c = 0; c < d; ++c) oi[c] += a * tmp[c];
            }
          }
        } else {
          f.drift(x, out);
        }
      },
      spec.form());
}

Vec eval_drift(const DriftSpec& spec, const Vec& x) {
  Vec out(x.size());
  eval_drift(spec, std::span<const double>(x.data(), static_cast<std::size_t>(x.size())),
             std::span<double>(out.data(), static_cast<std::size_t>(out.size())));
  return out;
}

Mat cross_hessian_frobenius(const DriftSpec& spec, const Vec& x) {
  const Dims dims = spec.dims();
  if (static_cast<std::size_t>(x.size()) != dims.total()) {
    throw InvalidArgument("cross_hessian_frobenius: dimension mismatch");
  }
  const std::size_t n = dims.n, d = dims.d;
  Mat out = Mat::Zero(idx(n), idx(n));
  auto from_matrix = [&](const Mat& G) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (i != j) out(idx(i), idx(j)) = block(G, i, j, d).squaredNorm();
  };
  std::visit(
      [&](const auto& f) {
        using T = std::decay_t<decltype(f)>;
        if constexpr (std::is_same_v<T, QuadraticPotential>) {
          from_matrix(f.Q);
        } else if constexpr (std::is_same_v<T, Linear>) {
          from_matrix(f.A_full);
        } else if constexpr (std::is_same_v<T, Pairwise>) {
          if (f.K2.is_zero) return;
          std::vector<double> jac(d * d), plus(d), minus(d), y(d);
          for (std::size_t i = 0; i < n; ++i) {
            const std::span<const double> xi(x.data() + i * d, d);
            for (std::size_t j = 0; j < n; ++j) {
              const double a = f.A(i, j);
              if (j == i || a == 0.0) continue;
              const std::span<const double> xj(x.data() + j * d, d);
              if (f.K2.jacobian_other) {
                f.K2.jacobian_other(xi, xj, jac);
              } else {
                for (std::size_t c = 0; c < d; ++c) {
                  std::copy(xj.begin(), xj.end(), y.begin());
                  const double h = fd_step(xj[c]);
                  y[c] = xj[c] + h;
                  f.K2.eval(xi, y, plus);
                  y[c] = xj[c] - h;
                  f.K2.eval(xi, y, minus);
                  for (std::size_t r = 0; r < d; ++r) jac[r * d + c] = (plus[r] - minus[r]) / (2.0 * h);
                }
              }
              double s = 0.0;
              for (double v : jac) s += v * v;
              out(idx(i), idx(j)) = a * a * s;
            }
          }
        } else {
          if (!f.allow_finite_differences) {
            throw Unsupported("custom drift without finite-difference permission has no cross-Hessian");
          }
          const std::size_t nd = n * d;
          Mat J(idx(nd), idx(nd));
          Vec xp = x, bp(idx(nd)), bm(idx(nd));
          for (std::size_t c = 0; c < nd; ++c) {
            const double h = fd_step(x(idx(c)));
            xp(idx(c)) = x(idx(c)) + h;
            f.drift({xp.data(), nd}, {bp.data(), nd});
            xp(idx(c)) = x(idx(c)) - h;
            f.drift({xp.data(), nd}, {bm.data(), nd});
            xp(idx(c)) = x(idx(c));
            J.col(idx(c)) = (bp - bm) / (2.0 * h);
          }
          from_matrix(J);
        }
      },
      spec.form());
  return out;
}

namespace {

StructuralConstants affine_constants(const AffineDrift& a) {
  StructuralConstants sc;
  Eigen::JacobiSVD<Mat> svd(a.matrix);
  sc.lipschitz_L = a.matrix.size() == 0 ? 0.0 : svd.singularValues()(0);
  // x . (Mx + c) <= -kappa|x|^2 + |c||x| with kappa = lambda_min(-sym(M)).
  const Mat sym = -0.5 * (a.matrix + a.matrix.transpose());
  Eigen::SelfAdjointEigenSolver<Mat> es(sym, Eigen::EigenvaluesOnly);
  const double kappa = es.eigenvalues()(0);
  sc.kappa = kappa;
  if (kappa > 0.0) {
    sc.dissipative_c2 = kappa / 2.0;
    sc.dissipative_c1 = a.offset.squaredNorm() / (2.0 * kappa);
  }
  return sc;
}

}  // namespace

StructuralConstants structural_constants(const DriftSpec& spec) {
  return std::visit(
      [&](const auto& f) -> StructuralConstants {
        using T = std::decay_t<decltype(f)>;
        if constexpr (std::is_same_v<T, QuadraticPotential>) {
          Eigen::SelfAdjointEigenSolver<Mat> es(f.Q, Eigen::EigenvaluesOnly);
          const Vec& ev = es.eigenvalues();
          StructuralConstants sc;
          sc.kappa = ev(0);
          sc.lipschitz_L = ev.cwiseAbs().maxCoeff();
          if (ev(0) > 0.0) {
            sc.dissipative_c2 = ev(0) / 2.0;
            sc.dissipative_c1 = f.l.squaredNorm() / (2.0 * ev(0));
          }
          return sc;
        } else if constexpr (std::is_same_v<T, Linear>) {
          StructuralConstants sc = affine_constants(AffineDrift{f.A_full, Vec::Zero(f.A_full.rows())});
          if (sc.kappa && *sc.kappa > 0.0) {
            // No offset: x . Ax <= -kappa |x|^2 exactly.
            sc.dissipative_c1 = 0.0;
            sc.dissipative_c2 = *sc.kappa;
          }
          return sc;
        } else if constexpr (std::is_same_v<T, Pairwise>) {
          if (auto a = spec.affine()) {
            StructuralConstants sc = affine_constants(*a);
            if (f.declared_lipschitz) sc.lipschitz_L = f.declared_lipschitz;
            return sc;
          }
          StructuralConstants sc;
          sc.lipschitz_L = f.declared_lipschitz;
          return sc;
        } else {
          StructuralConstants sc;
          sc.lipschitz_L = f.lipschitz;
          sc.kappa = f.declared_kappa;
          sc.dissipative_c1 = f.declared_c1;
          sc.dissipative_c2 = f.declared_c2;
          return sc;
        }
      },
      spec.form());
}

}  // namespace mfip
