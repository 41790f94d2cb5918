#ifndef MGCLIP_PROTOCOL_HPP
#define MGCLIP_PROTOCOL_HPP

#include "mgclip/compensation.hpp"
#include "mgclip/data.hpp"
#include "mgclip/encoder.hpp"
#include "mgclip/gapmetrics.hpp"
#include "mgclip/preservation.hpp"
#include "mgclip/subspace.hpp"

#include "json.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace mgclip {

enum class MethodVariant { naive, alignment, mgp_only, mgc_only, full };

const char* to_string(MethodVariant v);
MethodVariant variant_from_string(const std::string& name);
bool uses_preservation(MethodVariant v);
bool uses_compensation(MethodVariant v);

struct TablePaths {
  std::filesystem::path image;
  std::filesystem::path text;
};

struct RunConfig {
  std::uint64_t seed = 7;  // every stochastic component derives from this
  MethodVariant variant = MethodVariant::full;

  // Downstream data: synthetic unless table paths are given.
  SyntheticConfig synthetic{.num_classes = 10, .samples_per_class = 100, .raw_dim = 32, .intra_class_spread = 0.8};
  std::optional<TablePaths> tables;
  // When set, the encoder is loaded from this checkpoint instead of being pretrained.
  std::filesystem::path pretrained_checkpoint;
  int num_tasks = 5;
  double holdout_fraction = 0.2;

  // Pretraining corpus: other classes drawn in the same synthetic world.
  int pretrain_classes = 200;
  int pretrain_samples_per_class = 10;
  TrainConfig pretrain{.loss_mode = LossMode::contrastive_pretrain, .learning_rate = 0.5, .epochs = 30,
                       .batch_size = 16};

  double initial_logit_scale = 50.0;

  int embed_dim = 32;
  int hidden_dim = 64;
  double bias_std = 0.5;
  int adapter_rank = 8;

  TrainConfig finetune{.loss_mode = LossMode::masked_ce, .optimizer = Optimizer::adam, .learning_rate = 0.006,
                       .epochs = 10, .batch_size = 16};
  int fixed_epochs = 10;  // per-task budget when preservation is off
  PreservationConfig preservation;
  ClassifierTrainConfig classifier;
  double classifier_scale = kCosineClassifierScale;
  EnsembleConfig ensemble;
  double subspace_energy = kDefaultEnergy;

  void validate() const;
};

/// `key = value` lines; `#` starts a comment. Unknown keys are errors.
void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value);
RunConfig parse_config(const std::string& text, RunConfig base = {});
RunConfig load_config(const std::filesystem::path& path, RunConfig base = {});
/// Every setting as key/value strings, in a fixed order. parse_config of the joined
/// lines reproduces the config.
std::vector<std::pair<std::string, std::string>> config_settings(const RunConfig& cfg);

/// Downstream and pretraining data for one run, already split.
struct Benchmark {
  int num_classes = 0;
  Matrix train_raw;
  std::vector<int> train_labels;
  Matrix test_raw;
  std::vector<int> test_labels;
  Matrix class_raw_text;  // row k: prompt of class k
  Matrix pretrain_image_raw;
  Matrix pretrain_text_raw;  // paired with pretrain_image_raw
  std::vector<int> pretrain_labels;
  TaskSplit split;
};

Benchmark prepare_benchmark(const RunConfig& cfg);

/// Cache of pretrained encoders keyed by the settings that determine pretraining, so
/// variants of one benchmark start from the same model.
class PretrainCache {
 public:
  static std::string key(const RunConfig& cfg);
  const DualEncoder* find(const std::string& key) const;
  void insert(const std::string& key, DualEncoder enc);
  std::size_t size() const { return entries_.size(); }

 private:
  std::map<std::string, DualEncoder> entries_;
};

DualEncoder pretrain_for(const RunConfig& cfg, const Benchmark& bench);

struct SubspaceReport {
  Index image_rank = 0;
  Index text_rank = 0;
  Index visual_rank = 0;
  Index combined_rank = 0;
  double d_text = 0.0;                 // d(B_i, B_t)
  std::optional<double> d_visual;      // d(B_i, B_vc)
  std::optional<double> d_combined;    // d(B_i, B_t+vc)
};

/// Bases of image features, text classifier and (when given) the visual classifier.
SubspaceReport analyze_subspaces(const EmbeddingTable& image_features, const Matrix& class_text,
                                 const CompensationClassifier* clf, double energy);

struct RunResult {
  std::vector<double> per_task_accuracy;
  double avg = 0.0;
  double last = 0.0;
  double zero_shot_accuracy = 0.0;  // pretrained model, all classes
  GapReport pretrain_gap;           // held-out data, all classes
  std::vector<GapReport> gap_trace; // after each task, same data as pretrain_gap
  std::vector<int> epochs_per_task;
  std::optional<EpochEstimate> probe;
  SubspaceReport subspace;
  double wall_time_seconds = 0.0;   // excluded from JSON so equal configs give equal files
};

struct RunOutput {
  RunResult result;
  DualEncoder encoder;
  std::optional<CompensationClassifier> classifier;
};

/// Pretrain (or load / reuse a cached model), then run the task sequence for cfg.variant.
/// Errors raised inside the task loop are rethrown as std::runtime_error prefixed "task <t>: ".
RunOutput run(const RunConfig& cfg, PretrainCache* cache = nullptr);

/// Fraction of rows whose argmax matches the label.
double accuracy(const Matrix& scores, const std::vector<int>& labels);

/// Accuracy over `seen` classes without task identity; ensemble when clf is given.
double evaluate(const DualEncoder& enc, const CompensationClassifier* clf, const Matrix& test_raw,
                const std::vector<int>& test_labels, const EmbeddingTable& text,
                const std::vector<int>& seen, const EnsembleConfig& ensemble);

nlohmann::json to_json(const GapReport& g);
nlohmann::json to_json(const RunResult& r, const RunConfig& cfg);
std::string per_task_csv(const RunResult& r);
std::string gap_trace_csv(const RunResult& r);

/// Mean and per-seed Avg/Last over several results of one variant.
struct SeedSummary {
  std::vector<std::uint64_t> seeds;
  std::vector<double> avg;
  std::vector<double> last;
  double mean_avg = 0.0;
  double mean_last = 0.0;
};
SeedSummary summarize(const std::vector<std::uint64_t>& seeds, const std::vector<RunResult>& results);
nlohmann::json to_json(const SeedSummary& s);

}  // namespace mgclip

#endif  // MGCLIP_PROTOCOL_HPP
