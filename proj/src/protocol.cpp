#include "mgclip/protocol.hpp"

#include "mgclip/checkpoint.hpp"
#include "mgclip/random.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace mgclip {

const char* to_string(MethodVariant v) {
  switch (v) {
    case MethodVariant::naive: return "naive";
    case MethodVariant::alignment: return "alignment";
    case MethodVariant::mgp_only: return "mgp_only";
    case MethodVariant::mgc_only: return "mgc_only";
    case MethodVariant::full: return "full";
  }
  return "?";
}

MethodVariant variant_from_string(const std::string& name) {
  for (auto v : {MethodVariant::naive, MethodVariant::alignment, MethodVariant::mgp_only,
                 MethodVariant::mgc_only, MethodVariant::full}) {
    if (name == to_string(v)) return v;
  }
  throw std::invalid_argument("unknown variant '" + name + "'");
}

bool uses_preservation(MethodVariant v) { return v == MethodVariant::mgp_only || v == MethodVariant::full; }
bool uses_compensation(MethodVariant v) { return v == MethodVariant::mgc_only || v == MethodVariant::full; }

void RunConfig::validate() const {
  if (!tables) synthetic.validate();
  if (num_tasks < 1) throw std::invalid_argument("config: num_tasks must be >= 1");
  if (!(holdout_fraction > 0.0 && holdout_fraction < 1.0)) {
    throw std::invalid_argument("config: holdout_fraction must lie in (0, 1)");
  }
  if (!tables && pretrain_classes < 2) throw std::invalid_argument("config: pretrain.classes must be >= 2");
  if (pretrain_samples_per_class < 1) throw std::invalid_argument("config: pretrain.samples_per_class must be >= 1");
  pretrain.validate();
  finetune.validate();
  if (embed_dim < 1 || hidden_dim < 1) throw std::invalid_argument("config: encoder dims must be >= 1");
  if (!(initial_logit_scale >= kMinLogitScale && initial_logit_scale <= kMaxLogitScale)) {
    throw std::invalid_argument("config: pretrain.logit_scale must lie in [1, 100]");
  }
  if (!std::isfinite(bias_std) || bias_std < 0.0) throw std::invalid_argument("config: encoder.bias_std must be >= 0");
  if (adapter_rank < 1) throw std::invalid_argument("config: encoder.adapter_rank must be >= 1");
  if (fixed_epochs < 1) throw std::invalid_argument("config: finetune.fixed_epochs must be >= 1");
  preservation.validate();
  if (classifier.epochs < 0 || classifier.batch_size < 1 || !(classifier.learning_rate > 0.0)) {
    throw std::invalid_argument("config: invalid classifier settings");
  }
  if (!(classifier_scale > 0.0)) throw std::invalid_argument("config: classifier.scale must be > 0");
  ensemble.validate();
  if (!(subspace_energy > 0.0 && subspace_energy <= 1.0)) {
    throw std::invalid_argument("config: subspace.energy must lie in (0, 1]");
  }
}

// ---------------------------------------------------------------------------
// Settings

namespace {

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double parse_double(const std::string& key, const std::string& s) {
  std::size_t pos = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos == 0 || pos != s.size()) throw std::invalid_argument("config: " + key + " expects a number, got '" + s + "'");
  return v;
}

long long parse_integer(const std::string& key, const std::string& s) {
  std::size_t pos = 0;
  long long v = 0;
  try {
    v = std::stoll(s, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos == 0 || pos != s.size()) throw std::invalid_argument("config: " + key + " expects an integer, got '" + s + "'");
  return v;
}

int parse_int(const std::string& key, const std::string& s) {
  const long long v = parse_integer(key, s);
  if (v < std::numeric_limits<int>::min() || v > std::numeric_limits<int>::max()) {
    throw std::invalid_argument("config: " + key + " out of range");
  }
  return static_cast<int>(v);
}

bool parse_bool(const std::string& key, const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw std::invalid_argument("config: " + key + " expects true or false, got '" + s + "'");
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

struct Setting {
  const char* key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

#define MGCLIP_INT(KEY, FIELD)                                                 \
  Setting {                                                                    \
    KEY, [](const RunConfig& c) { return std::to_string(c.FIELD); },           \
        [](RunConfig& c, const std::string& v) { c.FIELD = parse_int(KEY, v); } \
  }
#define MGCLIP_DOUBLE(KEY, FIELD)                                                 \
  Setting {                                                                       \
    KEY, [](const RunConfig& c) { return fmt_double(c.FIELD); },                  \
        [](RunConfig& c, const std::string& v) { c.FIELD = parse_double(KEY, v); } \
  }

const std::vector<Setting>& settings() {
  static const std::vector<Setting> table = {
      {"seed", [](const RunConfig& c) { return std::to_string(c.seed); },
       [](RunConfig& c, const std::string& v) {
         const long long s = parse_integer("seed", v);
         if (s < 0) throw std::invalid_argument("config: seed must be >= 0");
         c.seed = static_cast<std::uint64_t>(s);
       }},
      {"variant", [](const RunConfig& c) { return std::string(to_string(c.variant)); },
       [](RunConfig& c, const std::string& v) { c.variant = variant_from_string(v); }},
      MGCLIP_INT("num_tasks", num_tasks),
      MGCLIP_DOUBLE("holdout_fraction", holdout_fraction),
      MGCLIP_INT("synthetic.num_classes", synthetic.num_classes),
      MGCLIP_INT("synthetic.samples_per_class", synthetic.samples_per_class),
      MGCLIP_INT("synthetic.raw_dim", synthetic.raw_dim),
      MGCLIP_DOUBLE("synthetic.cone_separation", synthetic.cone_separation),
      MGCLIP_DOUBLE("synthetic.intra_class_spread", synthetic.intra_class_spread),
      MGCLIP_DOUBLE("synthetic.input_noise", synthetic.input_noise),
      MGCLIP_DOUBLE("synthetic.class_weight", synthetic.class_weight),
      {"tables.image", [](const RunConfig& c) { return c.tables ? c.tables->image.string() : std::string(); },
       [](RunConfig& c, const std::string& v) {
         if (!c.tables) c.tables.emplace();
         c.tables->image = v;
         if (c.tables->image.empty() && c.tables->text.empty()) c.tables.reset();
       }},
      {"tables.text", [](const RunConfig& c) { return c.tables ? c.tables->text.string() : std::string(); },
       [](RunConfig& c, const std::string& v) {
         if (!c.tables) c.tables.emplace();
         c.tables->text = v;
         if (c.tables->image.empty() && c.tables->text.empty()) c.tables.reset();
       }},
      {"pretrained", [](const RunConfig& c) { return c.pretrained_checkpoint.string(); },
       [](RunConfig& c, const std::string& v) { c.pretrained_checkpoint = v; }},
      MGCLIP_INT("pretrain.classes", pretrain_classes),
      MGCLIP_INT("pretrain.samples_per_class", pretrain_samples_per_class),
      MGCLIP_INT("pretrain.epochs", pretrain.epochs),
      MGCLIP_DOUBLE("pretrain.learning_rate", pretrain.learning_rate),
      MGCLIP_INT("pretrain.batch_size", pretrain.batch_size),
      MGCLIP_DOUBLE("pretrain.logit_scale", initial_logit_scale),
      MGCLIP_INT("encoder.embed_dim", embed_dim),
      MGCLIP_INT("encoder.hidden_dim", hidden_dim),
      MGCLIP_DOUBLE("encoder.bias_std", bias_std),
      MGCLIP_INT("encoder.adapter_rank", adapter_rank),
      {"finetune.optimizer", [](const RunConfig& c) { return std::string(to_string(c.finetune.optimizer)); },
       [](RunConfig& c, const std::string& v) { c.finetune.optimizer = optimizer_from_string(v); }},
      {"finetune.loss_mode", [](const RunConfig& c) { return std::string(to_string(c.finetune.loss_mode)); },
       [](RunConfig& c, const std::string& v) { c.finetune.loss_mode = loss_mode_from_string(v); }},
      MGCLIP_DOUBLE("finetune.learning_rate", finetune.learning_rate),
      MGCLIP_INT("finetune.batch_size", finetune.batch_size),
      MGCLIP_INT("finetune.fixed_epochs", fixed_epochs),
      MGCLIP_DOUBLE("finetune.alignment_weight", finetune.alignment_weight),
      {"finetune.cosine_schedule", [](const RunConfig& c) { return std::string(c.finetune.cosine_schedule ? "true" : "false"); },
       [](RunConfig& c, const std::string& v) { c.finetune.cosine_schedule = parse_bool("finetune.cosine_schedule", v); }},
      MGCLIP_DOUBLE("preservation.alpha", preservation.alpha),
      MGCLIP_INT("preservation.max_probe_epochs", preservation.max_probe_epochs),
      MGCLIP_INT("classifier.epochs", classifier.epochs),
      MGCLIP_DOUBLE("classifier.learning_rate", classifier.learning_rate),
      MGCLIP_INT("classifier.batch_size", classifier.batch_size),
      MGCLIP_DOUBLE("classifier.scale", classifier_scale),
      MGCLIP_DOUBLE("ensemble.beta", ensemble.beta),
      MGCLIP_DOUBLE("subspace.energy", subspace_energy),
  };
  return table;
}

#undef MGCLIP_INT
#undef MGCLIP_DOUBLE

}  // namespace

void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& s : settings()) {
    if (key == s.key) {
      s.set(cfg, value);
      return;
    }
  }
  throw std::invalid_argument("config: unknown key '" + key + "'");
}

RunConfig parse_config(const std::string& text, RunConfig base) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key = value");
    }
    apply_setting(base, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return base;
}

RunConfig load_config(const std::filesystem::path& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return parse_config(os.str(), std::move(base));
}

std::vector<std::pair<std::string, std::string>> config_settings(const RunConfig& cfg) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& s : settings()) out.emplace_back(s.key, s.get(cfg));
  return out;
}

// ---------------------------------------------------------------------------
// Data

namespace {

Matrix gather(const Matrix& m, const std::vector<Index>& rows) {
  Matrix out(static_cast<Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Index>(i)) = m.row(rows[i]);
  return out;
}

std::vector<int> gather(const std::vector<int>& v, const std::vector<Index>& rows) {
  std::vector<int> out;
  out.reserve(rows.size());
  for (Index r : rows) out.push_back(v[static_cast<std::size_t>(r)]);
  return out;
}

std::vector<Index> rows_with_labels(const std::vector<int>& labels, const std::vector<int>& classes) {
  std::vector<Index> rows;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (std::find(classes.begin(), classes.end(), labels[i]) != classes.end()) rows.push_back(static_cast<Index>(i));
  }
  return rows;
}

SyntheticConfig downstream_config(const RunConfig& cfg) {
  SyntheticConfig s = cfg.synthetic;
  s.seed = derive_seed(cfg.seed, "downstream");
  s.world_seed = derive_seed(cfg.seed, "world");
  return s;
}

}  // namespace

Benchmark prepare_benchmark(const RunConfig& cfg) {
  cfg.validate();
  Benchmark b;
  Matrix all_raw;
  std::vector<int> all_labels;
  if (cfg.tables) {
    const EmbeddingTable image = read_table(cfg.tables->image);
    const EmbeddingTable text = read_table(cfg.tables->text);
    if (image.modality != Modality::image || text.modality != Modality::text) {
      throw std::invalid_argument("tables: expected one image table and one text table");
    }
    if (image.dim() != text.dim()) throw std::invalid_argument("tables: image and text dims differ");
    b.num_classes = static_cast<int>(text.rows());
    for (std::size_t k = 0; k < text.labels.size(); ++k) {
      if (text.labels[k] != static_cast<int>(k)) throw std::invalid_argument("tables: text row k must carry label k");
    }
    for (int l : image.labels) {
      if (l >= b.num_classes) throw std::invalid_argument("tables: image label without a text row");
    }
    all_raw = image.vectors;
    all_labels = image.labels;
    b.class_raw_text = text.vectors;
  } else {
    const SyntheticData d = generate_synthetic(downstream_config(cfg));
    b.num_classes = cfg.synthetic.num_classes;
    all_raw = d.raw_image;
    all_labels = d.image.labels;
    b.class_raw_text = d.raw_text;
  }
  if (cfg.num_tasks > b.num_classes) throw std::invalid_argument("config: more tasks than classes");

  const HoldoutSplit h = split_holdout(all_labels, cfg.holdout_fraction, derive_seed(cfg.seed, "holdout"));
  b.train_raw = gather(all_raw, h.train);
  b.train_labels = gather(all_labels, h.train);
  b.test_raw = gather(all_raw, h.test);
  b.test_labels = gather(all_labels, h.test);
  b.split = split_tasks(b.num_classes, cfg.num_tasks, derive_seed(cfg.seed, "tasks"));

  if (cfg.tables) {
    // No separate corpus: pretrain on the training split.
    b.pretrain_image_raw = b.train_raw;
    b.pretrain_labels = b.train_labels;
    b.pretrain_text_raw.resize(b.train_raw.rows(), b.class_raw_text.cols());
    for (Index i = 0; i < b.train_raw.rows(); ++i) {
      b.pretrain_text_raw.row(i) = b.class_raw_text.row(b.train_labels[static_cast<std::size_t>(i)]);
    }
  } else {
    // Generated in chunks of at most raw_dim classes; every chunk shares the world.
    std::vector<Matrix> image_parts;
    std::vector<Matrix> text_parts;
    Index rows = 0;
    for (int done = 0, chunk = 0; done < cfg.pretrain_classes; ++chunk) {
      SyntheticConfig pc = downstream_config(cfg);
      pc.num_classes = std::min(cfg.pretrain_classes - done, cfg.synthetic.raw_dim);
      if (pc.num_classes < 2) pc.num_classes = 2;
      pc.samples_per_class = cfg.pretrain_samples_per_class;
      pc.seed = derive_seed(derive_seed(cfg.seed, "pretrain-corpus"), static_cast<std::uint64_t>(chunk));
      const SyntheticData p = generate_synthetic(pc);
      Matrix paired(p.raw_image.rows(), p.raw_text.cols());
      for (Index i = 0; i < p.raw_image.rows(); ++i) {
        const int label = p.image.labels[static_cast<std::size_t>(i)];
        paired.row(i) = p.raw_text.row(label);
        b.pretrain_labels.push_back(done + label);
      }
      rows += p.raw_image.rows();
      image_parts.push_back(p.raw_image);
      text_parts.push_back(std::move(paired));
      done += pc.num_classes;
    }
    b.pretrain_image_raw.resize(rows, cfg.synthetic.raw_dim);
    b.pretrain_text_raw.resize(rows, cfg.synthetic.raw_dim);
    Index at = 0;
    for (std::size_t k = 0; k < image_parts.size(); ++k) {
      b.pretrain_image_raw.middleRows(at, image_parts[k].rows()) = image_parts[k];
      b.pretrain_text_raw.middleRows(at, text_parts[k].rows()) = text_parts[k];
      at += image_parts[k].rows();
    }
  }
  return b;
}

// ---------------------------------------------------------------------------
// Pretraining

std::string PretrainCache::key(const RunConfig& cfg) {
  std::string k;
  for (const auto& [name, value] : config_settings(cfg)) {
    const bool relevant = name == "seed" || name == "pretrained" || name.rfind("synthetic.", 0) == 0 || name.rfind("tables.", 0) == 0 ||
                          name.rfind("pretrain.", 0) == 0 || name == "holdout_fraction" ||
                          name == "encoder.embed_dim" || name == "encoder.hidden_dim" || name == "encoder.bias_std";
    if (relevant) k += name + "=" + value + "\n";
  }
  return k;
}

const DualEncoder* PretrainCache::find(const std::string& key) const {
  const auto it = entries_.find(key);
  return it == entries_.end() ? nullptr : &it->second;
}

void PretrainCache::insert(const std::string& key, DualEncoder enc) { entries_.insert_or_assign(key, std::move(enc)); }

DualEncoder pretrain_for(const RunConfig& cfg, const Benchmark& bench) {
  EncoderShape shape;
  shape.image_input = static_cast<int>(bench.train_raw.cols());
  shape.text_input = static_cast<int>(bench.class_raw_text.cols());
  shape.embed_dim = cfg.embed_dim;
  shape.hidden_dim = cfg.hidden_dim;
  shape.bias_std = cfg.bias_std;
  DualEncoder enc = make_encoder(shape, derive_seed(cfg.seed, "encoder"));
  enc.logit_scale = cfg.initial_logit_scale;
  TrainConfig pc = cfg.pretrain;
  pc.loss_mode = LossMode::contrastive_pretrain;
  pc.seed = derive_seed(cfg.seed, "pretrain");
  return pretrain_contrastive(std::move(enc), bench.pretrain_image_raw, bench.pretrain_text_raw,
                              bench.pretrain_labels, pc);
}

// ---------------------------------------------------------------------------
// Evaluation

double accuracy(const Matrix& scores, const std::vector<int>& labels) {
  if (scores.rows() == 0) throw std::invalid_argument("accuracy: no samples");
  if (static_cast<Index>(labels.size()) != scores.rows()) throw std::invalid_argument("accuracy: label count mismatch");
  const std::vector<int> pred = predict_labels(scores);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == labels[i] ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(pred.size());
}

double evaluate(const DualEncoder& enc, const CompensationClassifier* clf, const Matrix& test_raw,
                const std::vector<int>& test_labels, const EmbeddingTable& text,
                const std::vector<int>& seen, const EnsembleConfig& ensemble) {
  if (seen.empty()) throw std::invalid_argument("evaluate: no seen classes");
  for (int l : test_labels) {
    if (std::find(seen.begin(), seen.end(), l) == seen.end()) {
      throw std::invalid_argument("evaluate: test label " + std::to_string(l) + " is not a seen class");
    }
  }
  const Matrix image = encode_image(enc, test_raw);
  const Matrix class_text = class_text_matrix(text);
  const Matrix scores = clf ? ensemble_scores(image, class_text, enc.logit_scale, *clf, seen, ensemble)
                            : text_scores(image, class_text, enc.logit_scale, seen);
  return accuracy(scores, test_labels);
}

SubspaceReport analyze_subspaces(const EmbeddingTable& image_features, const Matrix& class_text,
                                 const CompensationClassifier* clf, double energy) {
  SubspaceReport rep;
  const SubspaceBasis bi = image_basis(image_features, energy);
  const SubspaceBasis bt = classifier_basis(class_text.transpose(), BasisSource::text_classifier);
  rep.image_rank = bi.dim();
  rep.text_rank = bt.dim();
  rep.d_text = coverage_distance(bi, bt);
  if (clf && clf->num_columns() > 0) {
    const SubspaceBasis bv = classifier_basis(clf->weights, BasisSource::visual_classifier);
    const SubspaceBasis bc = combined_basis(class_text.transpose(), clf->weights);
    rep.visual_rank = bv.dim();
    rep.combined_rank = bc.dim();
    rep.d_visual = coverage_distance(bi, bv);
    rep.d_combined = coverage_distance(bi, bc);
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Run

RunOutput run(const RunConfig& cfg, PretrainCache* cache) {
  const auto start = std::chrono::steady_clock::now();
  const Benchmark bench = prepare_benchmark(cfg);

  DualEncoder pretrained;
  const std::string key = PretrainCache::key(cfg);
  if (!cfg.pretrained_checkpoint.empty()) {
    pretrained = load_checkpoint(cfg.pretrained_checkpoint).encoder;
    if (pretrained.has_adapters()) throw std::invalid_argument("pretrained checkpoint already carries adapters");
    if (pretrained.image.input_dim() != bench.train_raw.cols() || pretrained.text.input_dim() != bench.class_raw_text.cols() ||
        pretrained.embed_dim() != cfg.embed_dim) {
      throw std::invalid_argument("pretrained checkpoint does not match the data or encoder.embed_dim");
    }
  } else if (const DualEncoder* hit = cache ? cache->find(key) : nullptr) {
    pretrained = *hit;
  } else {
    pretrained = pretrain_for(cfg, bench);
    if (cache) cache->insert(key, pretrained);
  }

  RunResult res;
  std::vector<int> all_classes(static_cast<std::size_t>(bench.num_classes));
  std::iota(all_classes.begin(), all_classes.end(), 0);
  const auto gap_on_test = [&](const DualEncoder& enc) {
    return measure_gap(embed_images(enc, bench.test_raw, bench.test_labels), embed_texts(enc, bench.class_raw_text));
  };
  res.pretrain_gap = gap_on_test(pretrained);
  res.zero_shot_accuracy = evaluate(pretrained, nullptr, bench.test_raw, bench.test_labels,
                                    embed_texts(pretrained, bench.class_raw_text), all_classes, cfg.ensemble);

  DualEncoder enc = attach_adapters(pretrained, cfg.adapter_rank, derive_seed(cfg.seed, "adapters"));
  TrainConfig ft = cfg.finetune;
  ft.seed = derive_seed(cfg.seed, "finetune");
  if (cfg.variant == MethodVariant::alignment) ft.loss_mode = LossMode::ce_plus_alignment;
  const bool mgp = uses_preservation(cfg.variant);
  const bool mgc = uses_compensation(cfg.variant);

  std::optional<CompensationClassifier> clf;
  if (mgc) clf = empty_classifier(cfg.embed_dim, cfg.classifier_scale);
  int epochs = cfg.fixed_epochs;

  for (int t = 0; t < bench.split.num_tasks(); ++t) try {
    const std::vector<int>& current = bench.split.tasks[static_cast<std::size_t>(t)];
    const std::vector<int> seen = bench.split.seen_through(t);
    const std::vector<Index> rows = rows_with_labels(bench.train_labels, current);
    const TaskData task{gather(bench.train_raw, rows), gather(bench.train_labels, rows)};

    if (mgp && t == 0) {
      EpochEstimateResult est = estimate_epochs(enc, task, bench.class_raw_text, current, cfg.preservation, ft);
      epochs = est.estimate.epochs;
      enc = std::move(est.model);
      res.probe = std::move(est.estimate);
    } else {
      TrainConfig c = ft;
      c.epochs = epochs;
      enc = finetune_task(std::move(enc), task, bench.class_raw_text, ClassScope{current, seen}, c, true);
    }
    res.epochs_per_task.push_back(epochs);

    if (clf) {
      const EmbeddingTable features = embed_images(enc, task.raw_image, task.labels);
      ClassifierTrainConfig cc = cfg.classifier;
      cc.seed = derive_seed(derive_seed(cfg.seed, "classifier"), static_cast<std::uint64_t>(t));
      clf = train_classifier(init_new_classes(freeze_all(std::move(*clf)), features, current), features, cc);
    }

    const std::vector<Index> test_rows = rows_with_labels(bench.test_labels, seen);
    res.per_task_accuracy.push_back(evaluate(enc, clf ? &*clf : nullptr, gather(bench.test_raw, test_rows),
                                             gather(bench.test_labels, test_rows),
                                             embed_texts(enc, bench.class_raw_text), seen, cfg.ensemble));
    res.gap_trace.push_back(gap_on_test(enc));
  } catch (const std::exception& e) {
    throw std::runtime_error("task " + std::to_string(t) + ": " + e.what());
  }

  double sum = 0.0;
  for (double a : res.per_task_accuracy) sum += a;
  res.avg = sum / static_cast<double>(res.per_task_accuracy.size());
  res.last = res.per_task_accuracy.back();
  res.subspace = analyze_subspaces(embed_images(enc, bench.train_raw, bench.train_labels),
                                   encode_text(enc, bench.class_raw_text), clf ? &*clf : nullptr,
                                   cfg.subspace_energy);
  res.wall_time_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return {std::move(res), std::move(enc), std::move(clf)};
}

// ---------------------------------------------------------------------------
// Reporting

nlohmann::json to_json(const GapReport& g) {
  return {{"pos", g.pos}, {"neg", g.neg}, {"inter_modality_mean", g.inter_modality_mean},
          {"n_images", g.n_images}, {"n_classes", g.n_classes}};
}

nlohmann::json to_json(const RunResult& r, const RunConfig& cfg) {
  nlohmann::json j;
  nlohmann::json c = nlohmann::json::object();
  for (const auto& [k, v] : config_settings(cfg)) c[k] = v;
  j["config"] = c;
  j["variant"] = to_string(cfg.variant);
  j["per_task_accuracy"] = r.per_task_accuracy;
  j["avg"] = r.avg;
  j["last"] = r.last;
  j["zero_shot_accuracy"] = r.zero_shot_accuracy;
  j["pretrain_gap"] = to_json(r.pretrain_gap);
  j["gap_trace"] = nlohmann::json::array();
  for (const auto& g : r.gap_trace) j["gap_trace"].push_back(to_json(g));
  j["epochs_per_task"] = r.epochs_per_task;
  if (r.probe) {
    nlohmann::json trace = nlohmann::json::array();
    for (const auto& p : r.probe->probe_trace) {
      trace.push_back({{"epoch", p.epoch}, {"neg", p.neg}, {"delta", p.delta}, {"pos", p.pos}});
    }
    j["probe"] = {{"epochs", r.probe->epochs}, {"last_below", r.probe->last_below},
                  {"hit_probe_cap", r.probe->hit_probe_cap}, {"trace", trace}};
  } else {
    j["probe"] = nullptr;
  }
  nlohmann::json s = {{"image_rank", r.subspace.image_rank}, {"text_rank", r.subspace.text_rank},
                      {"d_text", r.subspace.d_text}};
  if (r.subspace.d_visual) {
    s["visual_rank"] = r.subspace.visual_rank;
    s["combined_rank"] = r.subspace.combined_rank;
    s["d_visual"] = *r.subspace.d_visual;
    s["d_combined"] = *r.subspace.d_combined;
  }
  j["subspace"] = s;
  return j;
}

std::string per_task_csv(const RunResult& r) {
  std::ostringstream os;
  os << "task,epochs,accuracy\n";
  char buf[96];
  for (std::size_t t = 0; t < r.per_task_accuracy.size(); ++t) {
    std::snprintf(buf, sizeof buf, "%zu,%d,%.17g\n", t, r.epochs_per_task[t], r.per_task_accuracy[t]);
    os << buf;
  }
  return os.str();
}

std::string gap_trace_csv(const RunResult& r) {
  std::ostringstream os;
  os << "stage," << gap_csv_header() << "\n";
  os << "pretrained," << to_csv_row(r.pretrain_gap) << "\n";
  for (std::size_t t = 0; t < r.gap_trace.size(); ++t) os << "task" << t << "," << to_csv_row(r.gap_trace[t]) << "\n";
  return os.str();
}

SeedSummary summarize(const std::vector<std::uint64_t>& seeds, const std::vector<RunResult>& results) {
  if (results.empty()) throw std::invalid_argument("summarize: no results");
  if (seeds.size() != results.size()) throw std::invalid_argument("summarize: one seed per result");
  SeedSummary s;
  s.seeds = seeds;
  for (const auto& r : results) {
    s.avg.push_back(r.avg);
    s.last.push_back(r.last);
    s.mean_avg += r.avg;
    s.mean_last += r.last;
  }
  s.mean_avg /= static_cast<double>(results.size());
  s.mean_last /= static_cast<double>(results.size());
  return s;
}

nlohmann::json to_json(const SeedSummary& s) {
  return {{"seeds", s.seeds}, {"avg", s.avg}, {"last", s.last}, {"mean_avg", s.mean_avg}, {"mean_last", s.mean_last}};
}

}  // namespace mgclip
