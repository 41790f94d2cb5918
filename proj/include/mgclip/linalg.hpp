#ifndef MGCLIP_LINALG_HPP
#define MGCLIP_LINALG_HPP

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace mgclip {

using Index = Eigen::Index;

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Matrix = MatrixX<double>;
using Vector = VectorX<double>;

/// Singular values and pivots at or below this (relative to the largest) count as zero.
inline constexpr double kRankTolerance = 1e-10;

template <typename Scalar>
struct SvdResult {
  MatrixX<Scalar> u;   // m x p, orthonormal columns
  VectorX<Scalar> s;   // p, descending, non-negative
  MatrixX<Scalar> vt;  // p x n
};

template <typename Derived>
void require_finite(const Eigen::DenseBase<Derived>& m, const char* what) {
  if (!m.derived().allFinite()) {
    throw std::invalid_argument(std::string(what) + ": non-finite entries");
  }
}

/// Thin SVD, p = min(rows, cols).
template <typename Derived>
SvdResult<typename Derived::Scalar> svd(const Eigen::MatrixBase<Derived>& m) {
  using Scalar = typename Derived::Scalar;
  if (m.size() == 0) throw std::invalid_argument("svd: empty matrix");
  require_finite(m, "svd");
  Eigen::JacobiSVD<MatrixX<Scalar>> solver(m.derived().eval(),
                                           Eigen::ComputeThinU | Eigen::ComputeThinV);
  return {solver.matrixU(), solver.singularValues(), solver.matrixV().transpose()};
}

/// Number of singular values above kRankTolerance * s[0].
template <typename Scalar>
Index numerical_rank(const VectorX<Scalar>& descending) {
  if (descending.size() == 0 || descending(0) <= Scalar(0)) return 0;
  const Scalar cutoff = Scalar(kRankTolerance) * descending(0);
  Index r = 0;
  while (r < descending.size() && descending(r) > cutoff) ++r;
  return r;
}

/// Orthonormal basis of the column space via column-pivoted Householder QR.
/// Dependent columns are dropped; the result has rank-many columns.
template <typename Derived>
MatrixX<typename Derived::Scalar> qr_basis(const Eigen::MatrixBase<Derived>& m) {
  using Scalar = typename Derived::Scalar;
  if (m.cols() == 0 || m.rows() == 0) throw std::invalid_argument("qr_basis: no columns");
  require_finite(m, "qr_basis");
  Eigen::ColPivHouseholderQR<MatrixX<Scalar>> qr(m.derived().eval());
  const auto& r = qr.matrixR();
  const Index diag = std::min(m.rows(), m.cols());
  const Scalar lead = std::abs(r(0, 0));
  if (!(lead > Scalar(0))) throw std::invalid_argument("zero subspace");
  Index rank = 0;
  while (rank < diag && std::abs(r(rank, rank)) > Scalar(kRankTolerance) * lead) ++rank;
  MatrixX<Scalar> q = qr.householderQ() * MatrixX<Scalar>::Identity(m.rows(), rank);
  return q;
}

/// B * B^T * x, evaluated with sequential sums in index order so results are
/// reproducible bit-for-bit across builds.
template <typename DerivedX, typename DerivedB>
VectorX<typename DerivedX::Scalar> project_onto(const Eigen::MatrixBase<DerivedX>& x,
                                                const Eigen::MatrixBase<DerivedB>& basis) {
  using Scalar = typename DerivedX::Scalar;
  if (x.size() != basis.rows()) throw std::invalid_argument("project_onto: dimension mismatch");
  const Index d = basis.rows();
  const Index k = basis.cols();
  VectorX<Scalar> coeff(k);
  for (Index c = 0; c < k; ++c) {
    Scalar acc = 0;
    for (Index r = 0; r < d; ++r) acc += basis(r, c) * x(r);
    coeff(c) = acc;
  }
  VectorX<Scalar> out(d);
  for (Index r = 0; r < d; ++r) {
    Scalar acc = 0;
    for (Index c = 0; c < k; ++c) acc += basis(r, c) * coeff(c);
    out(r) = acc;
  }
  return out;
}

template <typename DerivedA, typename DerivedB>
typename DerivedA::Scalar dot_sequential(const Eigen::MatrixBase<DerivedA>& a,
                                         const Eigen::MatrixBase<DerivedB>& b) {
  typename DerivedA::Scalar acc = 0;
  for (Index i = 0; i < a.size(); ++i) acc += a(i) * b(i);
  return acc;
}

/// Cosine similarity, clamped to [-1, 1].
template <typename DerivedA, typename DerivedB>
typename DerivedA::Scalar cosine(const Eigen::MatrixBase<DerivedA>& a,
                                 const Eigen::MatrixBase<DerivedB>& b) {
  using Scalar = typename DerivedA::Scalar;
  if (a.size() != b.size()) throw std::invalid_argument("cosine: dimension mismatch");
  const Scalar na = dot_sequential(a, a);
  const Scalar nb = dot_sequential(b, b);
  if (!(na > Scalar(0)) || !(nb > Scalar(0))) throw std::invalid_argument("cosine: zero vector");
  const Scalar c = dot_sequential(a, b) / (std::sqrt(na) * std::sqrt(nb));
  return std::clamp(c, Scalar(-1), Scalar(1));
}

/// Rows scaled to unit L2 norm. Zero rows are rejected.
template <typename Derived>
MatrixX<typename Derived::Scalar> normalize_rows(const Eigen::MatrixBase<Derived>& m) {
  using Scalar = typename Derived::Scalar;
  MatrixX<Scalar> out = m;
  for (Index i = 0; i < out.rows(); ++i) {
    const Scalar n = out.row(i).norm();
    if (!(n > Scalar(0))) throw std::invalid_argument("normalize_rows: zero row");
    out.row(i) /= n;
  }
  return out;
}

/// Row-wise softmax with max subtraction. -inf entries get probability 0.
template <typename Derived>
MatrixX<typename Derived::Scalar> softmax_rows(const Eigen::MatrixBase<Derived>& logits) {
  using Scalar = typename Derived::Scalar;
  MatrixX<Scalar> out(logits.rows(), logits.cols());
  for (Index i = 0; i < logits.rows(); ++i) {
    const Scalar mx = logits.row(i).maxCoeff();
    Scalar total = 0;
    for (Index j = 0; j < logits.cols(); ++j) {
      out(i, j) = std::exp(logits(i, j) - mx);
      total += out(i, j);
    }
    out.row(i) /= total;
  }
  return out;
}

template <typename Derived>
typename Derived::Scalar log_sum_exp(const Eigen::MatrixBase<Derived>& v) {
  using Scalar = typename Derived::Scalar;
  const Scalar mx = v.maxCoeff();
  Scalar total = 0;
  for (Index i = 0; i < v.size(); ++i) total += std::exp(v(i) - mx);
  return mx + std::log(total);
}

/// First index of the maximum; ties go to the lowest index.
template <typename Derived>
Index argmax(const Eigen::MatrixBase<Derived>& v) {
  Index best = 0;
  for (Index i = 1; i < v.size(); ++i) {
    if (v(i) > v(best)) best = i;
  }
  return best;
}

}  // namespace mgclip

#endif  // MGCLIP_LINALG_HPP
