#include "mgclip/subspace.hpp"

#include <cmath>
#include <stdexcept>

namespace mgclip {

const char* to_string(BasisSource s) {
  switch (s) {
    case BasisSource::image_features: return "image_features";
    case BasisSource::text_classifier: return "text_classifier";
    case BasisSource::visual_classifier: return "visual_classifier";
    case BasisSource::combined: return "combined";
  }
  return "?";
}

SubspaceBasis image_basis(const EmbeddingTable& features, double energy) {
  if (features.rows() == 0 || features.dim() == 0) throw std::invalid_argument("image_basis: empty features");
  if (!(energy > 0.0 && energy <= 1.0)) throw std::invalid_argument("image_basis: energy must lie in (0, 1]");
  const auto dec = svd(features.vectors.transpose());
  const Index rank = numerical_rank(dec.s);
  if (rank == 0) throw std::invalid_argument("image_basis: zero features");
  double total = 0.0;
  for (Index i = 0; i < dec.s.size(); ++i) total += dec.s(i) * dec.s(i);
  double partial = 0.0;
  Index k = 0;
  while (k < rank) {
    partial += dec.s(k) * dec.s(k);
    ++k;
    if (partial >= energy * total) break;
  }
  return {dec.u.leftCols(k), BasisProvenance::svd_energy, energy, BasisSource::image_features};
}

SubspaceBasis classifier_basis(const Matrix& weights, BasisSource source) {
  return {qr_basis(weights), BasisProvenance::qr, 1.0, source};
}

SubspaceBasis combined_basis(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) throw std::invalid_argument("combined_basis: dimension mismatch");
  Matrix both(a.rows(), a.cols() + b.cols());
  both << a, b;
  return {qr_basis(both), BasisProvenance::qr, 1.0, BasisSource::combined};
}

double coverage_distance(const SubspaceBasis& source, const SubspaceBasis& target) {
  if (source.ambient_dim() != target.ambient_dim()) {
    throw std::invalid_argument("coverage_distance: dimension mismatch");
  }
  if (source.dim() == 0) throw std::invalid_argument("coverage_distance: empty source basis");
  const Index d = source.ambient_dim();
  double sum = 0.0;
  for (Index c = 0; c < source.dim(); ++c) {
    const Vector x = source.basis.col(c);
    const Vector p = project_onto(x, target.basis);
    double sq = 0.0;
    for (Index r = 0; r < d; ++r) {
      const double diff = x(r) - p(r);
      sq += diff * diff;
    }
    sum += std::sqrt(sq);
  }
  return sum / static_cast<double>(source.dim());
}

double linear_ce_loss(const Matrix& w, const EmbeddingTable& features) {
  if (features.rows() == 0) throw std::invalid_argument("linear_ce_loss: no samples");
  if (w.rows() != features.dim()) throw std::invalid_argument("linear_ce_loss: dimension mismatch");
  const Matrix logits = features.vectors * w;
  double loss = 0.0;
  for (Index i = 0; i < logits.rows(); ++i) {
    const int y = features.labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= w.cols()) throw std::invalid_argument("linear_ce_loss: label without a column");
    loss += log_sum_exp(logits.row(i)) - logits(i, y);
  }
  return loss / static_cast<double>(logits.rows());
}

OrthogonalIrrelevanceReport verify_orthogonal_irrelevance(const Matrix& w, const EmbeddingTable& features) {
  if (w.rows() != features.dim()) throw std::invalid_argument("verify_orthogonal_irrelevance: dimension mismatch");
  const Matrix span = qr_basis(features.vectors.transpose());
  OrthogonalIrrelevanceReport rep;
  rep.w_parallel = span * (span.transpose() * w);
  rep.w_perp = w - rep.w_parallel;
  rep.max_perp_response = (features.vectors * rep.w_perp).cwiseAbs().maxCoeff();
  rep.loss_full = linear_ce_loss(w, features);
  rep.loss_parallel = linear_ce_loss(rep.w_parallel, features);
  rep.passed = rep.max_perp_response < 1e-8 && std::abs(rep.loss_full - rep.loss_parallel) < 1e-10;
  return rep;
}

double misalignment_error(const Matrix& basis, const Matrix& a, const Matrix& w_opt) {
  if (basis.rows() != w_opt.rows() || basis.cols() != a.rows() || a.cols() != w_opt.cols()) {
    throw std::invalid_argument("misalignment_error: shape mismatch");
  }
  return (basis * a - w_opt).squaredNorm();
}

BoundReport verify_misalignment_bound(const Matrix& t, const Matrix& w_opt) {
  if (t.rows() != w_opt.rows()) throw std::invalid_argument("verify_misalignment_bound: dimension mismatch");
  require_finite(w_opt, "verify_misalignment_bound");
  if (w_opt.isZero(0.0)) throw std::invalid_argument("verify_misalignment_bound: zero w_opt");

  const auto dec = svd(w_opt);
  BoundReport rep;
  rep.singular_values = dec.s;
  rep.r_prime = numerical_rank(dec.s);
  const Matrix u = dec.u.leftCols(rep.r_prime);
  const Matrix t_par = u * (u.transpose() * t);

  if (t.cols() > 0 && !t_par.isZero(kRankTolerance * std::max(1.0, t.norm()))) {
    rep.text_basis = qr_basis(t_par);
  } else {
    rep.text_basis.resize(w_opt.rows(), 0);
  }
  rep.r = rep.text_basis.cols();
  const Matrix a_star = rep.text_basis.transpose() * w_opt;
  rep.achieved_error = misalignment_error(rep.text_basis, a_star, w_opt);
  for (Index i = rep.r; i < rep.r_prime; ++i) rep.lower_bound += dec.s(i) * dec.s(i);
  rep.holds = rep.achieved_error >= rep.lower_bound - 1e-8;
  return rep;
}

Matrix fit_linear_classifier(const EmbeddingTable& features, int num_classes, int iterations,
                             double learning_rate) {
  if (num_classes < 1) throw std::invalid_argument("fit_linear_classifier: num_classes must be >= 1");
  if (features.rows() == 0) throw std::invalid_argument("fit_linear_classifier: no samples");
  const Index n = features.rows();
  Matrix onehot = Matrix::Zero(n, num_classes);
  for (Index i = 0; i < n; ++i) {
    const int y = features.labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= num_classes) throw std::invalid_argument("fit_linear_classifier: label out of range");
    onehot(i, y) = 1.0;
  }
  Matrix w = Matrix::Zero(features.dim(), num_classes);
  for (int it = 0; it < iterations; ++it) {
    const Matrix p = softmax_rows(features.vectors * w);
    w -= learning_rate * features.vectors.transpose() * (p - onehot) / static_cast<double>(n);
  }
  return w;
}

}  // namespace mgclip
