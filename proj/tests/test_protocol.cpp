#include "doctest.h"

#include "fixtures.hpp"
#include "mgclip/checkpoint.hpp"
#include "mgclip/protocol.hpp"

#include <map>
#include <numeric>

using namespace mgclip;

namespace {

RunConfig pinned_config(MethodVariant v, std::uint64_t seed = 7) {
  RunConfig cfg;
  cfg.seed = seed;
  cfg.variant = v;
  return cfg;
}

// Runs of the pinned benchmark, computed once per binary.
const RunOutput& pinned_run(MethodVariant v) {
  static PretrainCache cache;
  static std::map<MethodVariant, RunOutput> runs;
  auto it = runs.find(v);
  if (it == runs.end()) it = runs.emplace(v, run(pinned_config(v), &cache)).first;
  return it->second;
}

Matrix one_hot_scores(const std::vector<int>& pred, int k) {
  Matrix s = Matrix::Zero(static_cast<Index>(pred.size()), k);
  for (std::size_t i = 0; i < pred.size(); ++i) s(static_cast<Index>(i), pred[i]) = 1.0;
  return s;
}

}  // namespace

TEST_CASE("accuracy examples") {
  const std::vector<int> labels{0, 2, 1, 2, 2};
  CHECK(accuracy(one_hot_scores(labels, 3), labels) == 1.0);
  CHECK(accuracy(one_hot_scores({2, 2, 2, 2, 2}, 3), labels) == doctest::Approx(3.0 / 5.0));
  CHECK(accuracy(one_hot_scores({0, 1, 1, 0}, 2), {0, 1, 0, 1}) == 0.5);
  CHECK_THROWS_AS(accuracy(Matrix(0, 2), {}), std::invalid_argument);
}

TEST_CASE("evaluate rejects an empty class set") {
  const auto& p = fixture::pinned();
  CHECK_THROWS_AS(evaluate(p.pretrained, nullptr, p.bench.test_raw, p.bench.test_labels,
                           embed_texts(p.pretrained, p.bench.class_raw_text), {}, {}),
                  std::invalid_argument);
}

TEST_CASE("variant names round trip") {
  for (auto v : {MethodVariant::naive, MethodVariant::alignment, MethodVariant::mgp_only, MethodVariant::mgc_only,
                 MethodVariant::full}) {
    CHECK(variant_from_string(to_string(v)) == v);
  }
  CHECK_THROWS_AS(variant_from_string("mgp"), std::invalid_argument);
  CHECK(uses_preservation(MethodVariant::full));
  CHECK_FALSE(uses_preservation(MethodVariant::mgc_only));
  CHECK(uses_compensation(MethodVariant::mgc_only));
  CHECK_FALSE(uses_compensation(MethodVariant::alignment));
}

TEST_CASE("config text round trip") {
  RunConfig cfg;
  cfg.seed = 123;
  cfg.variant = MethodVariant::mgc_only;
  cfg.finetune.learning_rate = 0.0123456789012345;
  cfg.preservation.alpha = 0.2;
  cfg.ensemble.beta = 2.5;
  cfg.tables = TablePaths{"a.bin", "b.bin"};
  std::string text = "# generated\n";
  for (const auto& [k, v] : config_settings(cfg)) text += k + " = " + v + "\n";
  const RunConfig back = parse_config(text);
  CHECK(config_settings(back) == config_settings(cfg));
  CHECK(back.finetune.learning_rate == cfg.finetune.learning_rate);
}

TEST_CASE("config parsing errors and comments") {
  const RunConfig c = parse_config("seed = 9  # trailing\n\nvariant = naive\nensemble.beta=0.5\n");
  CHECK(c.seed == 9);
  CHECK(c.variant == MethodVariant::naive);
  CHECK(c.ensemble.beta == 0.5);
  CHECK_THROWS_AS(parse_config("no_such_key = 1"), std::invalid_argument);
  CHECK_THROWS_AS(parse_config("seed 9"), std::invalid_argument);
  CHECK_THROWS_AS(parse_config("num_tasks = three"), std::invalid_argument);
  CHECK_THROWS_AS(parse_config("finetune.optimizer = lbfgs"), std::invalid_argument);

  RunConfig bad;
  bad.num_tasks = 11;
  CHECK_THROWS_WITH(prepare_benchmark(bad), "config: more tasks than classes");
  bad = RunConfig{};
  bad.holdout_fraction = 1.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("one task: Avg equals Last") {
  RunConfig cfg = pinned_config(MethodVariant::naive);
  cfg.num_tasks = 1;
  const auto r = run(cfg).result;
  REQUIRE(r.per_task_accuracy.size() == 1);
  CHECK(r.avg == r.last);
  CHECK(r.last == r.per_task_accuracy[0]);
}

TEST_CASE("Avg is the mean of per-task accuracy and Last the final one") {
  const auto& r = pinned_run(MethodVariant::naive).result;
  REQUIRE(r.per_task_accuracy.size() == 5);
  const double mean = std::accumulate(r.per_task_accuracy.begin(), r.per_task_accuracy.end(), 0.0) / 5.0;
  CHECK(std::abs(r.avg - mean) < 1e-12);
  CHECK(r.last == r.per_task_accuracy.back());
  CHECK(r.gap_trace.size() == 5);
}

TEST_CASE("variant wiring") {
  const auto& naive = pinned_run(MethodVariant::naive);
  CHECK(naive.result.epochs_per_task == std::vector<int>(5, 10));
  CHECK_FALSE(naive.result.probe);
  CHECK_FALSE(naive.classifier);
  CHECK_FALSE(naive.result.subspace.d_visual);

  const auto& mgp = pinned_run(MethodVariant::mgp_only);
  REQUIRE(mgp.result.probe);
  CHECK(mgp.result.epochs_per_task == std::vector<int>(5, mgp.result.probe->epochs));
  CHECK_FALSE(mgp.classifier);

  const auto& mgc = pinned_run(MethodVariant::mgc_only);
  CHECK(mgc.result.epochs_per_task == std::vector<int>(5, 10));
  REQUIRE(mgc.classifier);
  CHECK(mgc.classifier->num_columns() == 10);
  CHECK(std::count(mgc.classifier->frozen.begin(), mgc.classifier->frozen.end(), true) == 8);

  const auto& full = pinned_run(MethodVariant::full);
  REQUIRE(full.result.probe);
  REQUIRE(full.classifier);
  CHECK(full.result.subspace.d_combined);
  CHECK(full.result.pretrain_gap == naive.result.pretrain_gap);
  CHECK(full.result.zero_shot_accuracy == naive.result.zero_shot_accuracy);
}

TEST_CASE("naive fine-tuning: neg falls across tasks with at most one inversion") {
  const auto& r = pinned_run(MethodVariant::naive).result;
  std::vector<double> neg{r.pretrain_gap.neg};
  for (const auto& g : r.gap_trace) neg.push_back(g.neg);
  int inversions = 0;
  for (std::size_t i = 0; i + 1 < neg.size(); ++i) inversions += neg[i + 1] >= neg[i];
  CHECK(inversions <= 1);
  CHECK(neg.back() < neg.front());
}

TEST_CASE("full beats naive on Last for the pinned seed") {
  CHECK(pinned_run(MethodVariant::full).result.last > pinned_run(MethodVariant::naive).result.last);
}

TEST_CASE("ensemble Last is at least text-only Last for the same model") {
  const auto& p = fixture::pinned();
  const auto& full = pinned_run(MethodVariant::full);
  std::vector<int> all(10);
  std::iota(all.begin(), all.end(), 0);
  const auto text = embed_texts(full.encoder, p.bench.class_raw_text);
  const double ens = evaluate(full.encoder, &*full.classifier, p.bench.test_raw, p.bench.test_labels, text, all, {});
  const double text_only = evaluate(full.encoder, nullptr, p.bench.test_raw, p.bench.test_labels, text, all, {});
  CHECK(ens == full.result.last);
  CHECK(ens >= text_only);
}

TEST_CASE("identical configs give identical JSON, with and without the pretrain cache") {
  const RunConfig cfg = pinned_config(MethodVariant::full);
  const auto a = to_json(run(cfg).result, cfg).dump();
  const auto b = to_json(run(cfg).result, cfg).dump();
  CHECK(a == b);
  CHECK(a == to_json(pinned_run(MethodVariant::full).result, cfg).dump());
  CHECK(a.find("wall_time") == std::string::npos);
}

TEST_CASE("pretrain cache is keyed by pretraining settings only") {
  RunConfig a = pinned_config(MethodVariant::naive);
  RunConfig b = pinned_config(MethodVariant::full);
  b.ensemble.beta = 1.0;
  b.finetune.learning_rate = 0.01;
  CHECK(PretrainCache::key(a) == PretrainCache::key(b));
  b.seed = 8;
  CHECK(PretrainCache::key(a) != PretrainCache::key(b));
  b = a;
  b.pretrain.epochs = 5;
  CHECK(PretrainCache::key(a) != PretrainCache::key(b));
}

TEST_CASE("seed changes every stochastic component") {
  const auto b7 = prepare_benchmark(pinned_config(MethodVariant::naive, 7));
  const auto b8 = prepare_benchmark(pinned_config(MethodVariant::naive, 8));
  CHECK_FALSE(b7.train_raw == b8.train_raw);
  CHECK_FALSE(b7.pretrain_image_raw == b8.pretrain_image_raw);
  CHECK(b7.split.tasks != b8.split.tasks);
  CHECK(b7.pretrain_labels.size() == 2000);
  CHECK(b7.train_labels.size() == 800);
  CHECK(b7.test_labels.size() == 200);
}

TEST_CASE("runs from a saved pretrained checkpoint match the in-process run") {
  const auto dir = fixture::scratch_dir("protocol_ckpt");
  const auto& p = fixture::pinned();
  save_checkpoint({p.pretrained, std::nullopt, {}}, dir / "pre");
  RunConfig cfg = pinned_config(MethodVariant::mgc_only);
  cfg.pretrained_checkpoint = dir / "pre";
  const auto r = run(cfg).result;
  CHECK(r.per_task_accuracy == pinned_run(MethodVariant::mgc_only).result.per_task_accuracy);

  save_checkpoint({pinned_run(MethodVariant::naive).encoder, std::nullopt, {}}, dir / "adapted");
  cfg.pretrained_checkpoint = dir / "adapted";
  CHECK_THROWS_AS(run(cfg), std::invalid_argument);
}

TEST_CASE("table-path runs and task error context") {
  const auto dir = fixture::scratch_dir("protocol_tables");
  SyntheticConfig sc{.num_classes = 4, .samples_per_class = 12, .raw_dim = 8, .seed = 2};
  const auto d = generate_synthetic(sc);
  write_table(d.image, dir / "img.bin");
  write_table(d.text, dir / "txt.bin");

  RunConfig cfg = pinned_config(MethodVariant::full);
  cfg.num_tasks = 2;
  cfg.tables = TablePaths{dir / "img.bin", dir / "txt.bin"};
  cfg.pretrain.epochs = 5;
  cfg.embed_dim = 8;
  cfg.hidden_dim = 16;
  cfg.adapter_rank = 2;
  const auto r = run(cfg).result;
  CHECK(r.per_task_accuracy.size() == 2);
  CHECK(r.gap_trace.back().n_classes == 4);

  // Singleton tasks, and one sample only for the first task's class: nothing of it is held out,
  // so evaluation of task 0 fails.
  cfg.variant = MethodVariant::naive;
  cfg.num_tasks = 4;
  const int first = split_tasks(4, 4, derive_seed(cfg.seed, "tasks")).tasks[0][0];
  std::vector<Index> keep;
  bool kept = false;
  for (Index i = 0; i < d.image.rows(); ++i) {
    if (d.image.labels[static_cast<std::size_t>(i)] != first || !kept) keep.push_back(i);
    if (d.image.labels[static_cast<std::size_t>(i)] == first) kept = true;
  }
  Matrix v(static_cast<Index>(keep.size()), d.image.dim());
  std::vector<int> labels;
  for (std::size_t i = 0; i < keep.size(); ++i) {
    v.row(static_cast<Index>(i)) = d.image.vectors.row(keep[i]);
    labels.push_back(d.image.labels[static_cast<std::size_t>(keep[i])]);
  }
  write_table(make_table(Modality::image, v, labels), dir / "img.bin");
  CHECK_THROWS_WITH(run(cfg), "task 0: accuracy: no samples");

  cfg.tables = TablePaths{dir / "txt.bin", dir / "img.bin"};
  CHECK_THROWS_AS(run(cfg), std::invalid_argument);
}

TEST_CASE("csv and summary reports") {
  RunResult r;
  r.per_task_accuracy = {0.5, 0.25};
  r.epochs_per_task = {2, 2};
  r.pretrain_gap = {0.5, 0.25, 0.3, 10, 2};
  r.gap_trace = {{0.5, 0.125, 0.3, 10, 2}};
  CHECK(per_task_csv(r) == "task,epochs,accuracy\n0,2,0.5\n1,2,0.25\n");
  CHECK(gap_trace_csv(r) ==
        "stage,pos,neg,inter_modality_mean,n_images,n_classes\n"
        "pretrained,0.5,0.25,0.29999999999999999,10,2\n"
        "task0,0.5,0.125,0.29999999999999999,10,2\n");

  RunResult a, b;
  a.avg = 0.5;
  a.last = 0.25;
  b.avg = 1.0;
  b.last = 0.75;
  const auto s = summarize({7, 8}, {a, b});
  CHECK(s.mean_avg == 0.75);
  CHECK(s.mean_last == 0.5);
  CHECK(to_json(s)["seeds"] == nlohmann::json({7, 8}));
  CHECK_THROWS_AS(summarize({7}, {}), std::invalid_argument);
}
