#ifndef MGCLIP_SUBSPACE_HPP
#define MGCLIP_SUBSPACE_HPP

#include "mgclip/data.hpp"
#include "mgclip/linalg.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace mgclip {

enum class BasisProvenance { svd_energy, qr };
enum class BasisSource { image_features, text_classifier, visual_classifier, combined };

const char* to_string(BasisSource s);

struct SubspaceBasis {
  Matrix basis;  // ambient_dim x k, orthonormal columns
  BasisProvenance provenance = BasisProvenance::qr;
  double energy = 1.0;  // only meaningful for svd_energy
  BasisSource source = BasisSource::image_features;

  Index dim() const { return basis.cols(); }
  Index ambient_dim() const { return basis.rows(); }
};

inline constexpr double kDefaultEnergy = 0.95;

/// Smallest k with sum_{i<=k} s_i^2 >= energy * sum s_i^2; first k left singular vectors of
/// the feature matrix (features as columns).
SubspaceBasis image_basis(const EmbeddingTable& features, double energy = kDefaultEnergy);

/// QR basis of the columns of `weights` (ambient_dim x C).
SubspaceBasis classifier_basis(const Matrix& weights, BasisSource source);

/// QR basis of [a | b].
SubspaceBasis combined_basis(const Matrix& a, const Matrix& b);

/// Mean norm of the residual of each source basis vector after projection onto the target.
/// Not symmetric in its arguments.
double coverage_distance(const SubspaceBasis& source, const SubspaceBasis& target);

// ---------------------------------------------------------------------------
// Linear-classifier facts on image features

/// Mean softmax cross-entropy of logits w^T x_i. `w` is dim x C; labels index columns.
double linear_ce_loss(const Matrix& w, const EmbeddingTable& features);

struct OrthogonalIrrelevanceReport {
  Matrix w_parallel;
  Matrix w_perp;
  double max_perp_response = 0.0;  // max |w_perp^T x_i|
  double loss_full = 0.0;
  double loss_parallel = 0.0;
  bool passed = false;  // response < 1e-8 and |loss_full - loss_parallel| < 1e-10
};

/// Splits w into span(features) and its complement and checks the complement is inert.
OrthogonalIrrelevanceReport verify_orthogonal_irrelevance(const Matrix& w, const EmbeddingTable& features);

struct BoundReport {
  double achieved_error = 0.0;  // ||T_par - W_opt||_F^2 at A* for the text subspace
  double lower_bound = 0.0;     // sum_{i=r+1}^{r'} s_i^2
  Index r = 0;                  // rank of T_par
  Index r_prime = 0;            // rank of W_opt
  Vector singular_values;       // of W_opt
  Matrix text_basis;            // orthonormal basis of T_par (U_r when T_par spans the top-r directions)
  bool holds = false;           // achieved_error >= lower_bound - 1e-8
};

/// Projects T onto the left singular subspace of W_opt, solves min_A ||U_r A - W_opt||_F^2 with
/// A* = U_r^T W_opt and compares the residual with the tail energy of W_opt.
BoundReport verify_misalignment_bound(const Matrix& t, const Matrix& w_opt);

/// ||basis * a - w_opt||_F^2 for an arbitrary coefficient matrix `a`.
double misalignment_error(const Matrix& basis, const Matrix& a, const Matrix& w_opt);

/// Unconstrained linear classifier by full-batch gradient descent on linear_ce_loss.
/// Starts from zero, so every iterate stays in span(features).
Matrix fit_linear_classifier(const EmbeddingTable& features, int num_classes, int iterations = 500,
                             double learning_rate = 1.0);

}  // namespace mgclip

#endif  // MGCLIP_SUBSPACE_HPP
