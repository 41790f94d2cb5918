#ifndef MGCLIP_ENCODER_HPP
#define MGCLIP_ENCODER_HPP

#include "mgclip/data.hpp"
#include "mgclip/linalg.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace mgclip {

/// Low-rank update a * b added to a frozen weight. `b` starts at zero.
struct LowRankAdapter {
  Matrix a;  // d_out x r
  Matrix b;  // r x d_in

  Index rank() const { return a.cols(); }
  Matrix delta() const { return a * b; }
};

struct DenseLayer {
  Matrix weight;  // d_out x d_in
  Vector bias;    // d_out
  std::optional<LowRankAdapter> adapter;

  Matrix effective_weight() const { return adapter ? Matrix(weight + adapter->delta()) : weight; }
};

/// raw -> tanh(hidden) -> linear -> L2 normalize
struct Tower {
  DenseLayer hidden;
  DenseLayer output;

  Index input_dim() const { return hidden.weight.cols(); }
  Index embed_dim() const { return output.weight.rows(); }
};

struct DualEncoder {
  Tower image;
  Tower text;
  double logit_scale = 10.0;
  int pretrain_epochs = 0;  // epochs of contrastive pretraining applied
  int finetune_epochs = 0;  // epochs of task fine-tuning applied

  Index embed_dim() const { return image.embed_dim(); }
  bool has_adapters() const { return image.hidden.adapter.has_value(); }
};

struct EncoderShape {
  int image_input = 32;
  int text_input = 32;
  int embed_dim = 32;
  int hidden_dim = 64;     // 2 x embed_dim by default
  double bias_std = 0.5;   // shared per-tower offset, gives each modality its own cone
};

inline constexpr double kMinLogitScale = 1.0;
inline constexpr double kMaxLogitScale = 100.0;

DualEncoder make_encoder(const EncoderShape& shape, std::uint64_t seed);

/// Attaches a rank-r adapter to every weight matrix; a ~ N(0, 1/r), b = 0.
DualEncoder attach_adapters(DualEncoder enc, int rank, std::uint64_t seed);

/// Same shapes, every parameter zero. Used as a gradient accumulator.
DualEncoder zeros_like(const DualEncoder& enc);

/// Parameters updated by training: base weights, biases and logit_scale before adapters
/// are attached; only the adapter factors afterwards.
std::vector<std::span<double>> trainable_blocks(DualEncoder& enc);
std::vector<std::span<const double>> trainable_blocks(const DualEncoder& enc);

/// L2-normalized embeddings, one row per input row.
Matrix encode_image(const DualEncoder& enc, const Matrix& raw);
Matrix encode_text(const DualEncoder& enc, const Matrix& raw);

EmbeddingTable embed_images(const DualEncoder& enc, const Matrix& raw, std::vector<int> labels);
/// Row k of `raw` is the prompt of class k.
EmbeddingTable embed_texts(const DualEncoder& enc, const Matrix& raw);

/// K x dim matrix whose row k is the text feature of class k.
Matrix class_text_matrix(const EmbeddingTable& text);

// ---------------------------------------------------------------------------
// Losses on embeddings

struct HeadGradient {
  double loss = 0.0;
  Matrix d_image;  // same shape as the image embeddings
  Matrix d_text;   // same shape as the text embeddings
  double d_scale = 0.0;
};

/// Symmetric InfoNCE over in-batch pairs (row i of each side is a pair).
HeadGradient contrastive_head(const Matrix& image, const Matrix& text, double scale);

/// Mean cross-entropy of scale * cos(image_i, text_k) over `active` classes, plus
/// alignment_weight * mean ||image_i - text_{y_i}||^2. Rows of `class_text` outside
/// `active` receive exactly zero gradient.
HeadGradient classification_head(const Matrix& image, const Matrix& class_text,
                                 std::span<const int> labels, std::span<const int> active,
                                 double scale, double alignment_weight);

// ---------------------------------------------------------------------------
// Losses through the encoder. `grad`, when given, must come from zeros_like(enc);
// gradients accumulate into the trainable blocks.

double contrastive_loss(const DualEncoder& enc, const Matrix& raw_image, const Matrix& raw_text,
                        DualEncoder* grad = nullptr);

double classification_loss(const DualEncoder& enc, const Matrix& raw_image,
                           std::span<const int> labels, const Matrix& class_raw_text,
                           std::span<const int> active, double alignment_weight,
                           DualEncoder* grad = nullptr);

// ---------------------------------------------------------------------------
// Training

enum class LossMode { masked_ce, ce_plus_alignment, plain_ce, contrastive_pretrain };

const char* to_string(LossMode mode);
LossMode loss_mode_from_string(const std::string& name);

enum class Optimizer { sgd, adam };

const char* to_string(Optimizer opt);
Optimizer optimizer_from_string(const std::string& name);

struct TrainConfig {
  LossMode loss_mode = LossMode::masked_ce;
  Optimizer optimizer = Optimizer::sgd;
  double learning_rate = 1e-3;
  int epochs = 1;
  int batch_size = 32;
  double alignment_weight = 1.0;
  std::uint64_t seed = 0;
  bool cosine_schedule = false;  // cosine decay over the epochs of one call

  void validate() const;
};

/// Adam moments over the trainable blocks, flattened in trainable_blocks order.
struct OptimizerState {
  std::uint64_t step = 0;
  std::vector<double> m;
  std::vector<double> v;
};

inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEpsilon = 1e-8;

/// Contrastive pretraining on paired rows. Batches hold at most one pair per label so every
/// in-batch negative is a genuine negative. Returns the mean batch loss of every epoch in
/// `epoch_losses` when given. Throws when no batch with two or more pairs can be formed.
DualEncoder pretrain_contrastive(DualEncoder enc, const Matrix& raw_image, const Matrix& raw_text,
                                 const std::vector<int>& labels, const TrainConfig& cfg,
                                 std::vector<double>* epoch_losses = nullptr);

struct TaskData {
  Matrix raw_image;
  std::vector<int> labels;
};

struct ClassScope {
  std::vector<int> current;  // classes of the task being trained
  std::vector<int> seen;     // every class seen so far, current included
};

/// Runs cfg.epochs epochs of adapter-only fine-tuning. With mask_old (or loss mode
/// masked_ce) the cross-entropy covers scope.current only; otherwise scope.seen.
/// Optimizer state starts fresh unless `state` is given, in which case it is carried
/// over, so k one-epoch calls sharing a state equal one k-epoch call.
DualEncoder finetune_task(DualEncoder enc, const TaskData& task, const Matrix& class_raw_text,
                          const ClassScope& scope, const TrainConfig& cfg, bool mask_old,
                          OptimizerState* state = nullptr);

/// Softmax over logit_scale * cosine to each class text. Classes outside `allowed`
/// get a -inf logit (score exactly 0). Returns n x K.
Matrix classify_text(const DualEncoder& enc, const Matrix& raw_image, const EmbeddingTable& text,
                     const std::optional<std::vector<int>>& allowed = std::nullopt);

/// Same as classify_text, from precomputed image embeddings.
Matrix text_scores(const Matrix& image_embeddings, const Matrix& class_text, double logit_scale,
                   const std::optional<std::vector<int>>& allowed);

}  // namespace mgclip

#endif  // MGCLIP_ENCODER_HPP
