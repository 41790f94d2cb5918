#include "mgclip/compensation.hpp"

#include "mgclip/random.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace mgclip {

Index CompensationClassifier::column_of(int label) const {
  const auto it = std::find(classes.begin(), classes.end(), label);
  return it == classes.end() ? -1 : static_cast<Index>(it - classes.begin());
}

CompensationClassifier empty_classifier(Index embed_dim, double scale) {
  if (embed_dim < 1) throw std::invalid_argument("empty_classifier: embed_dim must be >= 1");
  if (!(scale > 0.0)) throw std::invalid_argument("empty_classifier: scale must be > 0");
  CompensationClassifier clf;
  clf.weights.resize(embed_dim, 0);
  clf.scale = scale;
  return clf;
}

CompensationClassifier freeze_all(CompensationClassifier clf) {
  std::fill(clf.frozen.begin(), clf.frozen.end(), true);
  return clf;
}

CompensationClassifier init_new_classes(CompensationClassifier clf, const EmbeddingTable& features,
                                        const std::vector<int>& new_classes) {
  if (features.dim() != clf.weights.rows()) throw std::invalid_argument("init_new_classes: dimension mismatch");
  const Index d = features.dim();
  const Index old_cols = clf.num_columns();
  Matrix grown(d, old_cols + static_cast<Index>(new_classes.size()));
  grown.leftCols(old_cols) = clf.weights;

  for (std::size_t k = 0; k < new_classes.size(); ++k) {
    const int label = new_classes[k];
    if (clf.column_of(label) >= 0 ||
        std::find(new_classes.begin(), new_classes.begin() + static_cast<std::ptrdiff_t>(k), label) !=
            new_classes.begin() + static_cast<std::ptrdiff_t>(k)) {
      throw std::invalid_argument("init_new_classes: class " + std::to_string(label) + " already has a column");
    }
    Vector sum = Vector::Zero(d);
    Index count = 0;
    for (Index i = 0; i < features.rows(); ++i) {
      if (features.labels[static_cast<std::size_t>(i)] != label) continue;
      for (Index r = 0; r < d; ++r) sum(r) += features.vectors(i, r);
      ++count;
    }
    if (count == 0) throw std::invalid_argument("init_new_classes: class " + std::to_string(label) + " has no samples");
    Vector mean(d);
    double sq = 0.0;
    for (Index r = 0; r < d; ++r) {
      mean(r) = sum(r) / static_cast<double>(count);
      sq += mean(r) * mean(r);
    }
    const double norm = std::sqrt(sq);
    if (!(norm > 1e-12)) throw std::invalid_argument("degenerate prototype (zero mean)");
    const Index col = old_cols + static_cast<Index>(k);
    for (Index r = 0; r < d; ++r) grown(r, col) = mean(r) / norm;
    clf.classes.push_back(label);
    clf.frozen.push_back(false);
  }
  clf.weights = std::move(grown);
  return clf;
}

ClassifierLoss cosine_classifier_loss(const Matrix& weights, const std::vector<int>& classes,
                                      const Matrix& features, const std::vector<int>& labels,
                                      double scale) {
  const Index n = features.rows();
  const Index c = weights.cols();
  if (n == 0) throw std::invalid_argument("cosine_classifier_loss: empty batch");
  if (features.cols() != weights.rows()) throw std::invalid_argument("cosine_classifier_loss: dimension mismatch");
  if (static_cast<Index>(classes.size()) != c || static_cast<Index>(labels.size()) != n) {
    throw std::invalid_argument("cosine_classifier_loss: size mismatch");
  }
  const Vector col_norms = weights.colwise().norm().transpose();
  const Matrix w_hat = weights * col_norms.cwiseInverse().asDiagonal();
  const Matrix x_hat = normalize_rows(features);
  const Matrix logits = scale * (x_hat * w_hat);
  Matrix g = softmax_rows(logits);
  double loss = 0.0;
  for (Index i = 0; i < n; ++i) {
    const auto it = std::find(classes.begin(), classes.end(), labels[static_cast<std::size_t>(i)]);
    if (it == classes.end()) throw std::invalid_argument("cosine_classifier_loss: label without a column");
    const auto j = static_cast<Index>(it - classes.begin());
    loss += log_sum_exp(logits.row(i)) - logits(i, j);
    g(i, j) -= 1.0;
  }
  g /= static_cast<double>(n);

  ClassifierLoss out;
  out.loss = loss / static_cast<double>(n);
  const Matrix d_what = scale * x_hat.transpose() * g;  // d x C
  out.d_weights.resize(weights.rows(), c);
  for (Index j = 0; j < c; ++j) {
    const Vector u = w_hat.col(j);
    out.d_weights.col(j) = (d_what.col(j) - u * u.dot(d_what.col(j))) / col_norms(j);
  }
  return out;
}

CompensationClassifier train_classifier(CompensationClassifier clf, const EmbeddingTable& features,
                                        const ClassifierTrainConfig& cfg) {
  if (cfg.epochs < 0) throw std::invalid_argument("train_classifier: epochs must be >= 0");
  if (!(cfg.learning_rate > 0.0)) throw std::invalid_argument("train_classifier: learning_rate must be > 0");
  if (cfg.batch_size < 1) throw std::invalid_argument("train_classifier: batch_size must be >= 1");
  if (std::all_of(clf.frozen.begin(), clf.frozen.end(), [](bool f) { return f; })) {
    throw std::invalid_argument("nothing to train");
  }
  if (features.dim() != clf.weights.rows()) throw std::invalid_argument("train_classifier: dimension mismatch");
  if (cfg.epochs == 0 || features.rows() == 0) return clf;

  const auto n = static_cast<std::size_t>(features.rows());
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  std::vector<Index> order(n);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), Index{0});
    Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t s = 0; s < n; s += bs) {
      const std::size_t e = std::min(n, s + bs);
      Matrix batch(static_cast<Index>(e - s), features.dim());
      std::vector<int> labels;
      for (std::size_t r = s; r < e; ++r) {
        batch.row(static_cast<Index>(r - s)) = features.vectors.row(order[r]);
        labels.push_back(features.labels[static_cast<std::size_t>(order[r])]);
      }
      const ClassifierLoss l = cosine_classifier_loss(clf.weights, clf.classes, batch, labels, clf.scale);
      for (Index j = 0; j < clf.num_columns(); ++j) {
        if (clf.frozen[static_cast<std::size_t>(j)]) continue;
        clf.weights.col(j) -= cfg.learning_rate * l.d_weights.col(j);
        clf.weights.col(j).normalize();
      }
    }
  }
  return clf;
}

Matrix visual_scores(const CompensationClassifier& clf, const Matrix& features) {
  if (features.cols() != clf.weights.rows()) throw std::invalid_argument("visual_scores: dimension mismatch");
  if (clf.num_columns() == 0) throw std::invalid_argument("visual_scores: classifier has no classes");
  const Vector col_norms = clf.weights.colwise().norm().transpose();
  const Matrix w_hat = clf.weights * col_norms.cwiseInverse().asDiagonal();
  return softmax_rows(clf.scale * (normalize_rows(features) * w_hat));
}

void EnsembleConfig::validate() const {
  if (!std::isfinite(beta) || beta < 0.0) throw std::invalid_argument("ensemble: beta must be finite and >= 0");
}

Matrix ensemble_scores(const Matrix& image_embeddings, const Matrix& class_text, double logit_scale,
                       const CompensationClassifier& clf, const std::vector<int>& allowed,
                       const EnsembleConfig& cfg) {
  cfg.validate();
  std::vector<int> a = allowed;
  std::vector<int> b = clf.classes;
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  if (a != b) {
    throw std::invalid_argument("ensemble: class-count mismatch, text head has " + std::to_string(a.size()) +
                                " classes and visual head " + std::to_string(b.size()));
  }
  Matrix out = text_scores(image_embeddings, class_text, logit_scale, allowed);
  const Matrix vis = visual_scores(clf, image_embeddings);
  for (Index j = 0; j < clf.num_columns(); ++j) {
    out.col(clf.classes[static_cast<std::size_t>(j)]) += cfg.beta * vis.col(j);
  }
  return out;
}

Matrix ensemble_predict(const DualEncoder& enc, const CompensationClassifier& clf, const Matrix& raw_image,
                        const EmbeddingTable& text, const EnsembleConfig& cfg,
                        const std::optional<std::vector<int>>& allowed) {
  const Matrix class_text = class_text_matrix(text);
  std::vector<int> classes;
  if (allowed) {
    classes = *allowed;
  } else {
    classes.resize(static_cast<std::size_t>(class_text.rows()));
    std::iota(classes.begin(), classes.end(), 0);
  }
  return ensemble_scores(encode_image(enc, raw_image), class_text, enc.logit_scale, clf, classes, cfg);
}

std::vector<int> predict_labels(const Matrix& scores) {
  std::vector<int> out(static_cast<std::size_t>(scores.rows()));
  for (Index i = 0; i < scores.rows(); ++i) out[static_cast<std::size_t>(i)] = static_cast<int>(argmax(scores.row(i)));
  return out;
}

}  // namespace mgclip
