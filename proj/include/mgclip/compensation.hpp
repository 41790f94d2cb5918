#ifndef MGCLIP_COMPENSATION_HPP
#define MGCLIP_COMPENSATION_HPP

#include "mgclip/data.hpp"
#include "mgclip/encoder.hpp"

#include <cstdint>
#include <optional>
#include <vector>

namespace mgclip {

inline constexpr double kCosineClassifierScale = 16.0;

/// Cosine classifier in image-feature space. Column j scores class classes[j].
struct CompensationClassifier {
  Matrix weights;            // embed_dim x C, unit columns
  std::vector<int> classes;  // class id of each column
  std::vector<bool> frozen;  // per column
  double scale = kCosineClassifierScale;

  Index num_columns() const { return weights.cols(); }
  /// Column index of `label`, -1 when absent.
  Index column_of(int label) const;

  friend bool operator==(const CompensationClassifier&, const CompensationClassifier&) = default;
};

CompensationClassifier empty_classifier(Index embed_dim, double scale = kCosineClassifierScale);

/// Marks every existing column frozen.
CompensationClassifier freeze_all(CompensationClassifier clf);

/// Appends one column per new class: the normalized mean of that class's features.
CompensationClassifier init_new_classes(CompensationClassifier clf, const EmbeddingTable& features,
                                        const std::vector<int>& new_classes);

struct ClassifierTrainConfig {
  int epochs = 3;
  double learning_rate = 0.05;
  int batch_size = 32;
  std::uint64_t seed = 0;
};

/// Mean cross-entropy over scale * cos(x_i, w_j); gradient w.r.t. the raw weight matrix.
struct ClassifierLoss {
  double loss = 0.0;
  Matrix d_weights;
};
ClassifierLoss cosine_classifier_loss(const Matrix& weights, const std::vector<int>& classes,
                                      const Matrix& features, const std::vector<int>& labels,
                                      double scale);

/// Minibatch SGD on unfrozen columns only; each updated column is re-normalized after
/// every step. Frozen columns are never written.
CompensationClassifier train_classifier(CompensationClassifier clf, const EmbeddingTable& features,
                                        const ClassifierTrainConfig& cfg);

/// Softmax of scale * cos(x, w_j) per row of `features` (n x C, column order of clf).
Matrix visual_scores(const CompensationClassifier& clf, const Matrix& features);

struct EnsembleConfig {
  double beta = 4.0;

  void validate() const;
};

/// text scores over all K classes (masked to `allowed`) plus beta * visual scores placed at
/// each column's class. `allowed` must equal clf.classes as a set. Returns n x K.
Matrix ensemble_scores(const Matrix& image_embeddings, const Matrix& class_text, double logit_scale,
                       const CompensationClassifier& clf, const std::vector<int>& allowed,
                       const EnsembleConfig& cfg);

Matrix ensemble_predict(const DualEncoder& enc, const CompensationClassifier& clf, const Matrix& raw_image,
                        const EmbeddingTable& text, const EnsembleConfig& cfg,
                        const std::optional<std::vector<int>>& allowed = std::nullopt);

/// Row-wise argmax, ties to the lowest class index.
std::vector<int> predict_labels(const Matrix& scores);

}  // namespace mgclip

#endif  // MGCLIP_COMPENSATION_HPP
