#include "mgclip/encoder.hpp"

#include "mgclip/random.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <stdexcept>

namespace mgclip {

namespace {

DenseLayer make_layer(Index out, Index in, double bias_std, Rng& rng) {
  DenseLayer layer;
  layer.weight = gaussian_matrix(out, in, 1.0 / std::sqrt(static_cast<double>(in)), rng);
  layer.bias = gaussian_matrix(out, 1, bias_std, rng).col(0);
  return layer;
}

Tower make_tower(Index in, Index hidden, Index embed, double bias_std, Rng& rng) {
  Tower t;
  t.hidden = make_layer(hidden, in, bias_std, rng);
  t.output = make_layer(embed, hidden, bias_std, rng);
  return t;
}

void attach(DenseLayer& layer, int rank, Rng& rng) {
  LowRankAdapter ad;
  ad.a = gaussian_matrix(layer.weight.rows(), rank, 1.0 / std::sqrt(static_cast<double>(rank)), rng);
  ad.b = Matrix::Zero(rank, layer.weight.cols());
  layer.adapter = std::move(ad);
}

void zero_layer(DenseLayer& layer) {
  layer.weight.setZero();
  layer.bias.setZero();
  if (layer.adapter) {
    layer.adapter->a.setZero();
    layer.adapter->b.setZero();
  }
}

struct TowerCache {
  Matrix input;
  Matrix hidden;  // tanh activations
  Vector norms;   // pre-normalization row norms
  Matrix output;  // normalized embeddings
};

TowerCache forward(const Tower& tower, const Matrix& raw) {
  if (raw.cols() != tower.input_dim()) {
    throw std::invalid_argument("encoder: input has " + std::to_string(raw.cols()) +
                                " columns, expected " + std::to_string(tower.input_dim()));
  }
  TowerCache c;
  c.input = raw;
  Matrix z1 = raw * tower.hidden.effective_weight().transpose();
  z1.rowwise() += tower.hidden.bias.transpose();
  c.hidden = z1.array().tanh().matrix();
  Matrix z2 = c.hidden * tower.output.effective_weight().transpose();
  z2.rowwise() += tower.output.bias.transpose();
  c.norms = z2.rowwise().norm();
  for (Index i = 0; i < z2.rows(); ++i) {
    if (!(c.norms(i) > 0.0)) throw std::runtime_error("encoder: zero embedding");
  }
  c.output = c.norms.cwiseInverse().asDiagonal() * z2;
  return c;
}

void accumulate(const DenseLayer& layer, const Matrix& d_weight, const Vector& d_bias,
                DenseLayer& grad) {
  if (layer.adapter) {
    grad.adapter->a += d_weight * layer.adapter->b.transpose();
    grad.adapter->b += layer.adapter->a.transpose() * d_weight;
  } else {
    grad.weight += d_weight;
    grad.bias += d_bias;
  }
}

void backward(const Tower& tower, const TowerCache& c, const Matrix& d_out, Tower& grad) {
  // Through the normalization: dz = (de - e (e . de)) / |z|
  Matrix dz2 = d_out;
  for (Index i = 0; i < dz2.rows(); ++i) {
    const double proj = c.output.row(i).dot(d_out.row(i));
    dz2.row(i) = (d_out.row(i) - proj * c.output.row(i)) / c.norms(i);
  }
  const Matrix w2 = tower.output.effective_weight();
  accumulate(tower.output, dz2.transpose() * c.hidden, dz2.colwise().sum().transpose(), grad.output);
  const Matrix dh = dz2 * w2;
  const Matrix dz1 = (dh.array() * (1.0 - c.hidden.array().square())).matrix();
  accumulate(tower.hidden, dz1.transpose() * c.input, dz1.colwise().sum().transpose(), grad.hidden);
}

std::vector<int> positions_of(std::span<const int> active, Index num_classes) {
  std::vector<int> pos(static_cast<std::size_t>(num_classes), -1);
  for (std::size_t j = 0; j < active.size(); ++j) {
    const int c = active[j];
    if (c < 0 || c >= num_classes) throw std::invalid_argument("class index out of range");
    if (pos[static_cast<std::size_t>(c)] != -1) throw std::invalid_argument("duplicate active class");
    pos[static_cast<std::size_t>(c)] = static_cast<int>(j);
  }
  return pos;
}

Matrix gather_rows(const Matrix& m, std::span<const Index> rows) {
  Matrix out(static_cast<Index>(rows.size()), m.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) out.row(static_cast<Index>(r)) = m.row(rows[r]);
  return out;
}

void optimizer_step(DualEncoder& enc, const DualEncoder& grad, double lr, Optimizer opt, OptimizerState& state) {
  auto params = trainable_blocks(enc);
  const auto grads = trainable_blocks(grad);
  if (opt == Optimizer::sgd) {
    for (std::size_t b = 0; b < params.size(); ++b) {
      for (std::size_t i = 0; i < params[b].size(); ++i) params[b][i] -= lr * grads[b][i];
    }
    return;
  }
  std::size_t total = 0;
  for (const auto& p : params) total += p.size();
  if (state.m.size() != total) {
    if (state.step != 0) throw std::invalid_argument("optimizer state does not match the trainable parameters");
    state.m.assign(total, 0.0);
    state.v.assign(total, 0.0);
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(state.step));
  std::size_t k = 0;
  for (std::size_t b = 0; b < params.size(); ++b) {
    for (std::size_t i = 0; i < params[b].size(); ++i, ++k) {
      const double g = grads[b][i];
      state.m[k] = kAdamBeta1 * state.m[k] + (1.0 - kAdamBeta1) * g;
      state.v[k] = kAdamBeta2 * state.v[k] + (1.0 - kAdamBeta2) * g * g;
      params[b][i] -= lr * (state.m[k] / c1) / (std::sqrt(state.v[k] / c2) + kAdamEpsilon);
    }
  }
}

double scheduled_lr(const TrainConfig& cfg, std::size_t step, std::size_t total) {
  if (!cfg.cosine_schedule || total == 0) return cfg.learning_rate;
  const double progress = static_cast<double>(step) / static_cast<double>(total);
  return cfg.learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace

DualEncoder make_encoder(const EncoderShape& shape, std::uint64_t seed) {
  if (shape.image_input < 1 || shape.text_input < 1 || shape.embed_dim < 1 || shape.hidden_dim < 1) {
    throw std::invalid_argument("make_encoder: dimensions must be positive");
  }
  Rng rng(derive_seed(seed, "encoder"));
  DualEncoder enc;
  enc.image = make_tower(shape.image_input, shape.hidden_dim, shape.embed_dim, shape.bias_std, rng);
  enc.text = make_tower(shape.text_input, shape.hidden_dim, shape.embed_dim, shape.bias_std, rng);
  return enc;
}

DualEncoder attach_adapters(DualEncoder enc, int rank, std::uint64_t seed) {
  if (rank < 1) throw std::invalid_argument("attach_adapters: rank must be >= 1");
  Rng rng(derive_seed(seed, "adapters"));
  for (Tower* t : {&enc.image, &enc.text}) {
    attach(t->hidden, rank, rng);
    attach(t->output, rank, rng);
  }
  return enc;
}

DualEncoder zeros_like(const DualEncoder& enc) {
  DualEncoder z = enc;
  for (Tower* t : {&z.image, &z.text}) {
    zero_layer(t->hidden);
    zero_layer(t->output);
  }
  z.logit_scale = 0.0;
  return z;
}

namespace {

template <typename Enc, typename Span>
std::vector<Span> blocks_impl(Enc& enc) {
  std::vector<Span> out;
  auto add = [&](auto& m) { out.emplace_back(m.data(), static_cast<std::size_t>(m.size())); };
  for (auto* t : {&enc.image, &enc.text}) {
    for (auto* layer : {&t->hidden, &t->output}) {
      if (enc.has_adapters()) {
        add(layer->adapter->a);
        add(layer->adapter->b);
      } else {
        add(layer->weight);
        add(layer->bias);
      }
    }
  }
  if (!enc.has_adapters()) out.emplace_back(&enc.logit_scale, 1);
  return out;
}

}  // namespace

std::vector<std::span<double>> trainable_blocks(DualEncoder& enc) {
  return blocks_impl<DualEncoder, std::span<double>>(enc);
}

std::vector<std::span<const double>> trainable_blocks(const DualEncoder& enc) {
  return blocks_impl<const DualEncoder, std::span<const double>>(enc);
}

Matrix encode_image(const DualEncoder& enc, const Matrix& raw) { return forward(enc.image, raw).output; }
Matrix encode_text(const DualEncoder& enc, const Matrix& raw) { return forward(enc.text, raw).output; }

EmbeddingTable embed_images(const DualEncoder& enc, const Matrix& raw, std::vector<int> labels) {
  return make_table(Modality::image, encode_image(enc, raw), std::move(labels));
}

EmbeddingTable embed_texts(const DualEncoder& enc, const Matrix& raw) {
  std::vector<int> labels(static_cast<std::size_t>(raw.rows()));
  std::iota(labels.begin(), labels.end(), 0);
  return make_table(Modality::text, encode_text(enc, raw), std::move(labels));
}

Matrix class_text_matrix(const EmbeddingTable& text) {
  const int k = text.num_classes();
  if (k < 1) throw std::invalid_argument("class_text_matrix: empty text table");
  Matrix out(k, text.dim());
  std::vector<bool> filled(static_cast<std::size_t>(k), false);
  for (Index r = 0; r < text.rows(); ++r) {
    const int c = text.labels[static_cast<std::size_t>(r)];
    if (filled[static_cast<std::size_t>(c)]) {
      throw std::invalid_argument("class_text_matrix: class " + std::to_string(c) + " has two rows");
    }
    filled[static_cast<std::size_t>(c)] = true;
    out.row(c) = text.vectors.row(r);
  }
  for (int c = 0; c < k; ++c) {
    if (!filled[static_cast<std::size_t>(c)]) {
      throw std::invalid_argument("class_text_matrix: class " + std::to_string(c) + " has no row");
    }
  }
  return out;
}

HeadGradient contrastive_head(const Matrix& image, const Matrix& text, double scale) {
  const Index n = image.rows();
  if (n < 2) throw std::invalid_argument("contrastive loss undefined for fewer than two pairs");
  if (text.rows() != n || text.cols() != image.cols()) {
    throw std::invalid_argument("contrastive_head: shape mismatch");
  }
  const Matrix cos = image * text.transpose();
  const Matrix logits = scale * cos;
  double loss = 0.0;
  for (Index i = 0; i < n; ++i) {
    loss += log_sum_exp(logits.row(i)) - logits(i, i);
    loss += log_sum_exp(logits.col(i)) - logits(i, i);
  }
  const double inv = 1.0 / (2.0 * static_cast<double>(n));
  const Matrix p_rows = softmax_rows(logits);
  const Matrix p_cols = softmax_rows(logits.transpose()).transpose();
  const Matrix g = (p_rows + p_cols - 2.0 * Matrix::Identity(n, n)) * inv;

  HeadGradient out;
  out.loss = loss * inv;
  out.d_image = scale * g * text;
  out.d_text = scale * g.transpose() * image;
  out.d_scale = (g.array() * cos.array()).sum();
  return out;
}

HeadGradient classification_head(const Matrix& image, const Matrix& class_text,
                                 std::span<const int> labels, std::span<const int> active,
                                 double scale, double alignment_weight) {
  const Index n = image.rows();
  if (n == 0) throw std::invalid_argument("classification_head: empty batch");
  if (static_cast<Index>(labels.size()) != n) throw std::invalid_argument("classification_head: label count");
  if (active.empty()) throw std::invalid_argument("classification_head: no active classes");
  if (class_text.cols() != image.cols()) throw std::invalid_argument("classification_head: dim mismatch");
  const auto pos = positions_of(active, class_text.rows());
  const auto m = static_cast<Index>(active.size());

  Matrix t_active(m, class_text.cols());
  for (Index j = 0; j < m; ++j) t_active.row(j) = class_text.row(active[static_cast<std::size_t>(j)]);
  const Matrix cos = image * t_active.transpose();
  const Matrix logits = scale * cos;
  Matrix g = softmax_rows(logits);
  double loss = 0.0;
  for (Index i = 0; i < n; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= class_text.rows() || pos[static_cast<std::size_t>(y)] < 0) {
      throw std::invalid_argument("classification_head: label " + std::to_string(y) +
                                  " is not an active class");
    }
    const Index p = pos[static_cast<std::size_t>(y)];
    loss += log_sum_exp(logits.row(i)) - logits(i, p);
    g(i, p) -= 1.0;
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  g *= inv_n;

  HeadGradient out;
  out.loss = loss * inv_n;
  out.d_image = scale * g * t_active;
  out.d_text = Matrix::Zero(class_text.rows(), class_text.cols());
  const Matrix dt_active = scale * g.transpose() * image;
  for (Index j = 0; j < m; ++j) out.d_text.row(active[static_cast<std::size_t>(j)]) = dt_active.row(j);
  out.d_scale = (g.array() * cos.array()).sum();

  if (alignment_weight != 0.0) {
    for (Index i = 0; i < n; ++i) {
      const int y = labels[static_cast<std::size_t>(i)];
      const Eigen::RowVectorXd diff = image.row(i) - class_text.row(y);
      out.loss += alignment_weight * diff.squaredNorm() * inv_n;
      out.d_image.row(i) += 2.0 * alignment_weight * inv_n * diff;
      out.d_text.row(y) -= 2.0 * alignment_weight * inv_n * diff;
    }
  }
  return out;
}

double contrastive_loss(const DualEncoder& enc, const Matrix& raw_image, const Matrix& raw_text,
                        DualEncoder* grad) {
  if (raw_image.rows() != raw_text.rows()) throw std::invalid_argument("contrastive_loss: unpaired rows");
  const TowerCache ic = forward(enc.image, raw_image);
  const TowerCache tc = forward(enc.text, raw_text);
  const HeadGradient h = contrastive_head(ic.output, tc.output, enc.logit_scale);
  if (grad) {
    backward(enc.image, ic, h.d_image, grad->image);
    backward(enc.text, tc, h.d_text, grad->text);
    if (!enc.has_adapters()) grad->logit_scale += h.d_scale;
  }
  return h.loss;
}

double classification_loss(const DualEncoder& enc, const Matrix& raw_image,
                           std::span<const int> labels, const Matrix& class_raw_text,
                           std::span<const int> active, double alignment_weight,
                           DualEncoder* grad) {
  const TowerCache ic = forward(enc.image, raw_image);
  const TowerCache tc = forward(enc.text, class_raw_text);
  const HeadGradient h =
      classification_head(ic.output, tc.output, labels, active, enc.logit_scale, alignment_weight);
  if (grad) {
    backward(enc.image, ic, h.d_image, grad->image);
    backward(enc.text, tc, h.d_text, grad->text);
    if (!enc.has_adapters()) grad->logit_scale += h.d_scale;
  }
  return h.loss;
}

const char* to_string(LossMode mode) {
  switch (mode) {
    case LossMode::masked_ce: return "masked_ce";
    case LossMode::ce_plus_alignment: return "ce_plus_alignment";
    case LossMode::plain_ce: return "plain_ce";
    case LossMode::contrastive_pretrain: return "contrastive_pretrain";
  }
  return "?";
}

LossMode loss_mode_from_string(const std::string& name) {
  for (auto m : {LossMode::masked_ce, LossMode::ce_plus_alignment, LossMode::plain_ce,
                 LossMode::contrastive_pretrain}) {
    if (name == to_string(m)) return m;
  }
  throw std::invalid_argument("unknown loss mode '" + name + "'");
}

const char* to_string(Optimizer opt) { return opt == Optimizer::adam ? "adam" : "sgd"; }

Optimizer optimizer_from_string(const std::string& name) {
  if (name == "sgd") return Optimizer::sgd;
  if (name == "adam") return Optimizer::adam;
  throw std::invalid_argument("unknown optimizer '" + name + "'");
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw std::invalid_argument("train: learning_rate must be > 0");
  if (epochs < 0) throw std::invalid_argument("train: epochs must be >= 0");
  if (batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
  if (!std::isfinite(alignment_weight)) throw std::invalid_argument("train: alignment_weight not finite");
}

DualEncoder pretrain_contrastive(DualEncoder enc, const Matrix& raw_image, const Matrix& raw_text,
                                 const std::vector<int>& labels, const TrainConfig& cfg,
                                 std::vector<double>* epoch_losses) {
  cfg.validate();
  if (cfg.loss_mode != LossMode::contrastive_pretrain) {
    throw std::invalid_argument("pretrain_contrastive: loss_mode must be contrastive_pretrain");
  }
  if (raw_image.rows() != raw_text.rows() || static_cast<Index>(labels.size()) != raw_image.rows()) {
    throw std::invalid_argument("pretrain_contrastive: images, texts and labels must align");
  }
  if (cfg.epochs == 0) return enc;
  if (cfg.batch_size < 2) throw std::invalid_argument("contrastive loss undefined for a single pair");

  int max_label = -1;
  for (int l : labels) max_label = std::max(max_label, l);
  std::vector<std::vector<Index>> by_label(static_cast<std::size_t>(max_label + 1));
  for (std::size_t i = 0; i < labels.size(); ++i) by_label[static_cast<std::size_t>(labels[i])].push_back(static_cast<Index>(i));

  OptimizerState state;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(enc.pretrain_epochs)));
    // Round r takes the r-th (shuffled) sample of every label, so no batch repeats a label.
    std::vector<std::vector<Index>> pools = by_label;
    std::size_t rounds = 0;
    for (auto& p : pools) {
      std::shuffle(p.begin(), p.end(), rng);
      rounds = std::max(rounds, p.size());
    }
    std::vector<std::vector<Index>> batches;
    for (std::size_t r = 0; r < rounds; ++r) {
      std::vector<Index> round;
      for (const auto& p : pools) {
        if (r < p.size()) round.push_back(p[r]);
      }
      std::shuffle(round.begin(), round.end(), rng);
      for (std::size_t s = 0; s < round.size(); s += static_cast<std::size_t>(cfg.batch_size)) {
        const std::size_t e = std::min(round.size(), s + static_cast<std::size_t>(cfg.batch_size));
        if (e - s >= 2) batches.emplace_back(round.begin() + static_cast<std::ptrdiff_t>(s),
                                             round.begin() + static_cast<std::ptrdiff_t>(e));
      }
    }
    if (batches.empty()) throw std::invalid_argument("contrastive loss undefined for a single pair");

    double total = 0.0;
    for (std::size_t b = 0; b < batches.size(); ++b) {
      DualEncoder grad = zeros_like(enc);
      total += contrastive_loss(enc, gather_rows(raw_image, batches[b]), gather_rows(raw_text, batches[b]), &grad);
      const std::size_t step = static_cast<std::size_t>(epoch) * batches.size() + b;
      optimizer_step(enc, grad, scheduled_lr(cfg, step, static_cast<std::size_t>(cfg.epochs) * batches.size()),
                     cfg.optimizer, state);
      if (!enc.has_adapters()) enc.logit_scale = std::clamp(enc.logit_scale, kMinLogitScale, kMaxLogitScale);
    }
    if (epoch_losses) epoch_losses->push_back(total / static_cast<double>(batches.size()));
    ++enc.pretrain_epochs;
  }
  return enc;
}

DualEncoder finetune_task(DualEncoder enc, const TaskData& task, const Matrix& class_raw_text,
                          const ClassScope& scope, const TrainConfig& cfg, bool mask_old,
                          OptimizerState* state) {
  cfg.validate();
  OptimizerState local;
  OptimizerState& opt_state = state ? *state : local;
  if (cfg.loss_mode == LossMode::contrastive_pretrain) {
    throw std::invalid_argument("finetune_task: contrastive_pretrain is not a fine-tuning loss");
  }
  if (!enc.has_adapters()) throw std::invalid_argument("finetune_task: attach adapters first");
  if (static_cast<Index>(task.labels.size()) != task.raw_image.rows()) {
    throw std::invalid_argument("finetune_task: label count mismatch");
  }
  const bool masked = mask_old || cfg.loss_mode == LossMode::masked_ce;
  const std::vector<int>& active = masked ? scope.current : scope.seen;
  for (int l : task.labels) {
    if (std::find(active.begin(), active.end(), l) == active.end()) {
      throw std::invalid_argument("finetune_task: label " + std::to_string(l) +
                                  (masked ? " is outside the current task" : " has not been seen"));
    }
  }
  if (cfg.epochs == 0 || task.labels.empty()) return enc;
  const double align = cfg.loss_mode == LossMode::ce_plus_alignment ? cfg.alignment_weight : 0.0;

  const auto n = static_cast<std::size_t>(task.raw_image.rows());
  const std::size_t bs = static_cast<std::size_t>(cfg.batch_size);
  const std::size_t per_epoch = (n + bs - 1) / bs;
  const std::size_t total_steps = per_epoch * static_cast<std::size_t>(cfg.epochs);
  std::vector<Index> order(n);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), Index{0});
    // Keyed on the model's own epoch counter: k single-epoch calls equal one k-epoch call.
    Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(enc.finetune_epochs)));
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t b = 0; b < per_epoch; ++b) {
      const std::span<const Index> rows(order.data() + b * bs, std::min(bs, n - b * bs));
      std::vector<int> labels;
      labels.reserve(rows.size());
      for (Index r : rows) labels.push_back(task.labels[static_cast<std::size_t>(r)]);
      DualEncoder grad = zeros_like(enc);
      classification_loss(enc, gather_rows(task.raw_image, rows), labels, class_raw_text, active, align, &grad);
      optimizer_step(enc, grad, scheduled_lr(cfg, static_cast<std::size_t>(epoch) * per_epoch + b, total_steps),
                     cfg.optimizer, opt_state);
    }
    ++enc.finetune_epochs;
  }
  return enc;
}

Matrix text_scores(const Matrix& image_embeddings, const Matrix& class_text, double logit_scale,
                   const std::optional<std::vector<int>>& allowed) {
  if (image_embeddings.cols() != class_text.cols()) throw std::invalid_argument("text_scores: dim mismatch");
  Matrix logits = logit_scale * (image_embeddings * class_text.transpose());
  if (allowed) {
    if (allowed->empty()) throw std::invalid_argument("classify_text: every class is masked");
    std::vector<bool> keep(static_cast<std::size_t>(class_text.rows()), false);
    for (int c : *allowed) {
      if (c < 0 || c >= class_text.rows()) throw std::invalid_argument("classify_text: mask class out of range");
      keep[static_cast<std::size_t>(c)] = true;
    }
    for (Index j = 0; j < logits.cols(); ++j) {
      if (!keep[static_cast<std::size_t>(j)]) logits.col(j).setConstant(-std::numeric_limits<double>::infinity());
    }
  }
  return softmax_rows(logits);
}

Matrix classify_text(const DualEncoder& enc, const Matrix& raw_image, const EmbeddingTable& text,
                     const std::optional<std::vector<int>>& allowed) {
  return text_scores(encode_image(enc, raw_image), class_text_matrix(text), enc.logit_scale, allowed);
}

}  // namespace mgclip
