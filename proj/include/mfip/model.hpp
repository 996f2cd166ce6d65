#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <variant>

namespace mfip {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

// Particle count n and per-particle dimension d of a state in (R^d)^n.
struct Dims {
  std::size_t n = 0;
  std::size_t d = 0;
  std::size_t total() const { return n * d; }
  bool operator==(const Dims&) const = default;
};

// n x n weight matrix with zero diagonal. Row sums and Tr(AA^T) are cached.
class InteractionMatrix {
 public:
  InteractionMatrix() = default;
  explicit InteractionMatrix(Mat entries);

  std::size_t size() const { return static_cast<std::size_t>(entries_.rows()); }
  const Mat& entries() const { return entries_; }
  double operator()(std::size_t i, std::size_t j) const { return entries_(i, j); }
  const Vec& row_sums() const { return row_sums_; }
  double trace_aat() const { return trace_aat_; }
  bool rows_sum_to_one(double tol = 1e-12) const;

 private:
  Mat entries_;
  Vec row_sums_;
  double trace_aat_ = 0.0;
};

// A_ij = 1/(n-1) off the diagonal.
InteractionMatrix mean_field_matrix(std::size_t n);

// Simple random walk on an undirected graph: A_ij = 1{i~j}/deg(i). The
// adjacency must be symmetric 0/1 with zero diagonal and no isolated vertex.
InteractionMatrix random_walk_matrix(const Mat& adjacency);

Mat ring_adjacency(std::size_t n);
Mat complete_adjacency(std::size_t n);
Mat star_adjacency(std::size_t n);

// Reads an undirected edge list, one "i j" pair per line (0-indexed). Blank
// lines and lines starting with '#' are skipped.
Mat read_edge_list(std::istream& in, std::size_t n);

// Map R^d -> R^d used as the self-interaction K1. When `linear` is set the
// kernel is x -> linear * x + offset and `eval` is derived from it.
struct SiteKernel {
  std::function<void(std::span<const double>, std::span<double>)> eval;
  std::optional<Mat> linear;
  std::optional<Vec> offset;

  static SiteKernel affine(Mat linear, Vec offset);
  static SiteKernel zero(std::size_t d);
  static SiteKernel function(std::function<void(std::span<const double>, std::span<double>)> fn);
  bool is_affine() const { return linear.has_value(); }
};

// Pair interaction K2(x, y) in R^d. Affine kernels have the form
// wrt_self * x + wrt_other * y + offset. An empty kernel is identically zero.
struct PairKernel {
  std::function<void(std::span<const double>, std::span<const double>, std::span<double>)> eval;
  // Optional analytic Jacobian with respect to the second argument, written
  // row-major into a d*d span.
  std::function<void(std::span<const double>, std::span<const double>, std::span<double>)>
      jacobian_other;
  struct Affine {
    Mat wrt_self;
    Mat wrt_other;
    Vec offset;
  };
  std::optional<Affine> affine_form;
  bool is_zero = false;

  static PairKernel zero();
  static PairKernel affine(Mat wrt_self, Mat wrt_other, Vec offset);
  static PairKernel function(
      std::function<void(std::span<const double>, std::span<const double>, std::span<double>)> fn);
  bool is_affine() const { return is_zero || affine_form.has_value(); }
};

// f(x) = -1/2 x^T Q x + l.x, drift b = grad f = -Qx + l.
struct QuadraticPotential {
  Mat Q;
  Vec l;
};

// b^i(x) = K1(x^i) + sum_{j != i} A_ij K2(x^i, x^j).
struct Pairwise {
  SiteKernel K1;
  PairKernel K2;
  InteractionMatrix A;
  std::optional<double> declared_lipschitz;
};

// b(x) = A_full x.
struct Linear {
  Mat A_full;
};

struct Custom {
  std::function<void(std::span<const double>, std::span<double>)> drift;
  double lipschitz = 0.0;
  bool allow_finite_differences = true;
  std::optional<double> declared_kappa;
  std::optional<double> declared_c1;
  std::optional<double> declared_c2;
};

// Affine drift b(x) = matrix * x + offset.
struct AffineDrift {
  Mat matrix;
  Vec offset;
};

class DriftSpec {
 public:
  using Form = std::variant<QuadraticPotential, Pairwise, Linear, Custom>;

  static DriftSpec quadratic(Mat Q, Vec l, std::size_t d = 1);
  static DriftSpec pairwise(SiteKernel K1, PairKernel K2, InteractionMatrix A, std::size_t d = 1,
                            std::optional<double> declared_lipschitz = std::nullopt);
  static DriftSpec linear(Mat A_full, std::size_t d = 1);
  static DriftSpec custom(Dims dims, Custom custom);

  Dims dims() const { return dims_; }
  const Form& form() const { return form_; }
  std::string kind() const;

  // Exact affine representation when the drift is affine in x.
  std::optional<AffineDrift> affine() const;

 private:
  DriftSpec(Dims dims, Form form) : dims_(dims), form_(std::move(form)) {}
  Dims dims_;
  Form form_;
};

struct StructuralConstants {
  std::optional<double> lipschitz_L;
  std::optional<double> kappa;
  std::optional<double> dissipative_c1;
  std::optional<double> dissipative_c2;
};

// Writes (b^1(x), ..., b^n(x)) into out. x and out have length n*d.
void eval_drift(const DriftSpec& spec, std::span<const double> x, std::span<double> out);
Vec eval_drift(const DriftSpec& spec, const Vec& x);

// Entry (i, j), j != i, is ||grad_j b^i(x)||_F^2; the diagonal is zero.
Mat cross_hessian_frobenius(const DriftSpec& spec, const Vec& x);

StructuralConstants structural_constants(const DriftSpec& spec);

// Block (i, j) of a (n*d) x (n*d) matrix.
inline auto block(Mat& M, std::size_t i, std::size_t j, std::size_t d) {
  return M.block(static_cast<Eigen::Index>(i * d), static_cast<Eigen::Index>(j * d),
                 static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d));
}
inline auto block(const Mat& M, std::size_t i, std::size_t j, std::size_t d) {
  return M.block(static_cast<Eigen::Index>(i * d), static_cast<Eigen::Index>(j * d),
                 static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d));
}

// Relative symmetry check used for Q and covariances.
bool is_symmetric(const Mat& M, double rel_tol);

}  // namespace mfip
