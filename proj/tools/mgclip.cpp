#include "mgclip/checkpoint.hpp"
#include "mgclip/protocol.hpp"
#include "mgclip/random.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace mgclip;

namespace {

struct ConfigArgs {
  std::string file;
  std::vector<std::string> sets;
};

void add_config_options(CLI::App* app, ConfigArgs& args) {
  app->add_option("-c,--config", args.file, "key = value config file")->check(CLI::ExistingFile);
  app->add_option("-s,--set", args.sets, "override one setting, key=value (repeatable)");
}

RunConfig build_config(const ConfigArgs& args) {
  RunConfig cfg = args.file.empty() ? RunConfig{} : load_config(args.file);
  for (const auto& kv : args.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("--set expects key=value, got '" + kv + "'");
    apply_setting(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  cfg.validate();
  return cfg;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return nlohmann::json::parse(in);
}

std::vector<std::uint64_t> parse_seeds(const std::string& list, std::uint64_t fallback) {
  if (list.empty()) return {fallback};
  std::vector<std::uint64_t> seeds;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) seeds.push_back(std::stoull(item));
  if (seeds.empty()) throw std::invalid_argument("--seeds: empty list");
  return seeds;
}

// ---------------------------------------------------------------------------

int cmd_pretrain(const ConfigArgs& args, const std::string& out) {
  const RunConfig cfg = build_config(args);
  const Benchmark bench = prepare_benchmark(cfg);
  const DualEncoder enc = pretrain_for(cfg, bench);
  Checkpoint ckpt{enc, std::nullopt, {}};
  for (const auto& [k, v] : config_settings(cfg)) ckpt.metadata["config"][k] = v;
  save_checkpoint(ckpt, out);

  const GapReport g = measure_gap(embed_images(enc, bench.test_raw, bench.test_labels), embed_texts(enc, bench.class_raw_text));
  std::vector<int> all(static_cast<std::size_t>(bench.num_classes));
  std::iota(all.begin(), all.end(), 0);
  const double zs = evaluate(enc, nullptr, bench.test_raw, bench.test_labels, embed_texts(enc, bench.class_raw_text),
                             all, cfg.ensemble);
  std::printf("pretrained %d epochs, logit_scale %.4f\n", enc.pretrain_epochs, enc.logit_scale);
  std::printf("held-out pos %.4f neg %.4f, zero-shot accuracy %.4f\n", g.pos, g.neg, zs);
  std::printf("wrote %s.json / .bin\n", out.c_str());
  return 0;
}

void write_run(const fs::path& dir, const RunOutput& out, const RunConfig& cfg) {
  write_text(dir / "result.json", to_json(out.result, cfg).dump(2) + "\n");
  write_text(dir / "per_task.csv", per_task_csv(out.result));
  write_text(dir / "gap_trace.csv", gap_trace_csv(out.result));
  if (out.result.probe) write_text(dir / "probe_trace.csv", to_csv(out.result.probe->probe_trace));
}

int cmd_run_cl(const ConfigArgs& args, const std::string& out_dir, const std::string& seed_list,
               const std::vector<std::string>& variants, const std::string& checkpoint) {
  const RunConfig base = build_config(args);
  const std::vector<std::uint64_t> seeds = parse_seeds(seed_list, base.seed);
  std::vector<MethodVariant> vs;
  for (const auto& v : variants) vs.push_back(variant_from_string(v));
  if (vs.empty()) vs.push_back(base.variant);
  const bool nested = seeds.size() > 1 || vs.size() > 1;

  PretrainCache cache;
  nlohmann::json summary = nlohmann::json::object();
  for (MethodVariant v : vs) {
    std::vector<RunResult> results;
    for (std::uint64_t seed : seeds) {
      RunConfig cfg = base;
      cfg.seed = seed;
      cfg.variant = v;
      const RunOutput out = run(cfg, &cache);
      const fs::path dir = nested ? fs::path(out_dir) / to_string(v) / ("seed" + std::to_string(seed)) : fs::path(out_dir);
      write_run(dir, out, cfg);
      if (!checkpoint.empty()) {
        Checkpoint ckpt{out.encoder, out.classifier, {}};
        for (const auto& [k, val] : config_settings(cfg)) ckpt.metadata["config"][k] = val;
        const std::string stem = nested ? checkpoint + "-" + to_string(v) + "-seed" + std::to_string(seed) : checkpoint;
        save_checkpoint(ckpt, stem);
      }
      std::printf("%-9s seed %-6llu avg %.4f last %.4f epochs/task %d  (%.2fs)\n", to_string(v),
                  static_cast<unsigned long long>(seed), out.result.avg, out.result.last,
                  out.result.epochs_per_task.front(), out.result.wall_time_seconds);
      results.push_back(out.result);
    }
    const SeedSummary s = summarize(seeds, results);
    summary[to_string(v)] = to_json(s);
    if (seeds.size() > 1) {
      std::printf("%-9s mean over %zu seeds: avg %.4f last %.4f\n", to_string(v), seeds.size(), s.mean_avg, s.mean_last);
    }
  }
  if (nested) write_text(fs::path(out_dir) / "summary.json", summary.dump(2) + "\n");
  return 0;
}

int cmd_measure_gap(const std::string& image_path, const std::string& text_path) {
  const GapReport g = measure_gap(read_table(image_path), read_table(text_path));
  std::cout << gap_csv_header() << "\n" << to_csv_row(g) << "\n";
  return 0;
}

int cmd_analyze_subspace(const std::string& image_path, const std::string& text_path, const std::string& checkpoint,
                         double energy, std::uint64_t seed, const std::string& out) {
  const EmbeddingTable image = read_table(image_path);
  const EmbeddingTable text = read_table(text_path);
  if (image.dim() != text.dim()) throw std::invalid_argument("image and text tables differ in dim");
  CompensationClassifier clf;
  std::string clf_source;
  if (!checkpoint.empty()) {
    const Checkpoint ckpt = load_checkpoint(checkpoint);
    if (!ckpt.classifier) throw std::invalid_argument("checkpoint has no compensation classifier");
    clf = *ckpt.classifier;
    clf_source = "checkpoint";
  } else {
    std::vector<int> classes;
    for (int l : image.labels) {
      if (std::find(classes.begin(), classes.end(), l) == classes.end()) classes.push_back(l);
    }
    std::sort(classes.begin(), classes.end());
    ClassifierTrainConfig cc;
    cc.seed = derive_seed(seed, "classifier");
    clf = train_classifier(init_new_classes(empty_classifier(image.dim()), image, classes), image, cc);
    clf_source = "fitted";
  }
  if (clf.weights.rows() != image.dim()) throw std::invalid_argument("classifier dim does not match the tables");
  const SubspaceReport rep = analyze_subspaces(image, class_text_matrix(text), &clf, energy);
  nlohmann::json j = {{"image_rank", rep.image_rank}, {"text_rank", rep.text_rank},
                      {"visual_rank", rep.visual_rank}, {"combined_rank", rep.combined_rank},
                      {"d_text", rep.d_text}, {"d_visual", *rep.d_visual}, {"d_combined", *rep.d_combined},
                      {"energy", energy}, {"visual_classifier", clf_source}};
  if (!out.empty()) write_text(out, j.dump(2) + "\n");
  std::printf("d_text,d_visual,d_combined\n%.17g,%.17g,%.17g\n", rep.d_text, *rep.d_visual, *rep.d_combined);
  return 0;
}

int cmd_verify_bounds(int trials, std::uint64_t seed, const std::string& image_path, const std::string& text_path,
                      const std::string& out) {
  nlohmann::json j;
  if (!image_path.empty()) {
    const EmbeddingTable image = read_table(image_path);
    const EmbeddingTable text = read_table(text_path);
    const Matrix w_opt = fit_linear_classifier(image, static_cast<int>(text.rows()));
    const BoundReport b = verify_misalignment_bound(class_text_matrix(text).transpose(), w_opt);
    Rng rng(derive_seed(seed, "perturb"));
    const Matrix span = qr_basis(image.vectors.transpose());
    Matrix noise = gaussian_matrix(w_opt.rows(), w_opt.cols(), 1.0, rng);
    noise -= span * (span.transpose() * noise);
    const OrthogonalIrrelevanceReport o = verify_orthogonal_irrelevance(w_opt + noise, image);
    j = {{"source", "tables"},
         {"bound", {{"achieved", b.achieved_error}, {"lower_bound", b.lower_bound}, {"r", b.r},
                    {"r_prime", b.r_prime}, {"holds", b.holds}}},
         {"orthogonal_irrelevance", {{"max_perp_response", o.max_perp_response},
                                     {"loss_full", o.loss_full}, {"loss_parallel", o.loss_parallel},
                                     {"passed", o.passed}}}};
  } else {
    Rng rng(seed);
    int bound_ok = 0;
    int irrelevance_ok = 0;
    double worst_gap = 0.0;
    for (int t = 0; t < trials; ++t) {
      std::uniform_int_distribution<int> dim(3, 12);
      const int d = dim(rng);
      const int c = std::uniform_int_distribution<int>(2, d)(rng);
      const int k = std::uniform_int_distribution<int>(1, d)(rng);
      const Matrix w = gaussian_matrix(d, c, 1.0, rng);
      const Matrix tm = gaussian_matrix(d, k, 1.0, rng);
      const BoundReport b = verify_misalignment_bound(tm, w);
      bound_ok += b.holds ? 1 : 0;
      worst_gap = std::min(worst_gap, b.achieved_error - b.lower_bound);

      const int n = std::uniform_int_distribution<int>(1, d - 1)(rng);
      std::vector<int> labels(static_cast<std::size_t>(n));
      for (auto& l : labels) l = std::uniform_int_distribution<int>(0, c - 1)(rng);
      const EmbeddingTable x = make_table(Modality::image, normalize_rows(gaussian_matrix(n, d, 1.0, rng)), labels);
      irrelevance_ok += verify_orthogonal_irrelevance(gaussian_matrix(d, c, 1.0, rng), x).passed ? 1 : 0;
    }
    j = {{"source", "random"}, {"trials", trials}, {"seed", seed}, {"bound_holds", bound_ok},
         {"min_achieved_minus_bound", worst_gap}, {"orthogonal_irrelevance_passed", irrelevance_ok}};
  }
  if (!out.empty()) write_text(out, j.dump(2) + "\n");
  std::cout << j.dump(2) << "\n";
  return 0;
}

int cmd_export_report(const std::vector<std::string>& inputs, const std::string& out_json, const std::string& gap_csv) {
  struct Acc {
    std::vector<std::uint64_t> seeds;
    std::vector<double> avg, last, pos, neg, pre_pos, pre_neg;
  };
  std::map<std::string, Acc> by_variant;
  for (const auto& path : inputs) {
    const nlohmann::json r = read_json(path);
    Acc& a = by_variant[r.at("variant").get<std::string>()];
    a.seeds.push_back(std::stoull(r.at("config").at("seed").get<std::string>()));
    a.avg.push_back(r.at("avg"));
    a.last.push_back(r.at("last"));
    a.pos.push_back(r.at("gap_trace").back().at("pos"));
    a.neg.push_back(r.at("gap_trace").back().at("neg"));
    a.pre_pos.push_back(r.at("pretrain_gap").at("pos"));
    a.pre_neg.push_back(r.at("pretrain_gap").at("neg"));
  }
  const auto mean = [](const std::vector<double>& v) {
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  };
  nlohmann::json j = nlohmann::json::object();
  std::ostringstream csv;
  csv << "variant,runs,pretrain_pos,pretrain_neg,final_pos,final_neg,mean_avg,mean_last\n";
  char buf[256];
  for (const auto& [variant, a] : by_variant) {
    j[variant] = {{"seeds", a.seeds}, {"avg", a.avg}, {"last", a.last},
                  {"mean_avg", mean(a.avg)}, {"mean_last", mean(a.last)},
                  {"mean_final_pos", mean(a.pos)}, {"mean_final_neg", mean(a.neg)}};
    std::snprintf(buf, sizeof buf, "%s,%zu,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f\n", variant.c_str(), a.avg.size(),
                  mean(a.pre_pos), mean(a.pre_neg), mean(a.pos), mean(a.neg), mean(a.avg), mean(a.last));
    csv << buf;
  }
  if (!out_json.empty()) write_text(out_json, j.dump(2) + "\n");
  if (!gap_csv.empty()) write_text(gap_csv, csv.str());
  std::cout << csv.str();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Modality-gap preservation and compensation on toy dual encoders"};
  app.require_subcommand(1);

  ConfigArgs pre_args;
  std::string pre_out = "pretrained";
  auto* pre = app.add_subcommand("pretrain", "contrastively pretrain the toy encoder and save a checkpoint");
  add_config_options(pre, pre_args);
  pre->add_option("-o,--out", pre_out, "checkpoint stem (writes <stem>.json and <stem>.bin)");

  ConfigArgs run_args;
  std::string run_out = "run";
  std::string seeds;
  std::vector<std::string> variants;
  std::string run_ckpt;
  auto* run_cl = app.add_subcommand("run-cl", "run the class-incremental protocol");
  add_config_options(run_cl, run_args);
  run_cl->add_option("-o,--out", run_out, "output directory");
  run_cl->add_option("--seeds", seeds, "comma-separated seeds; overrides the config seed");
  run_cl->add_option("--variant", variants, "method variant(s); overrides the config variant")
      ->check(CLI::IsMember({"naive", "alignment", "mgp_only", "mgc_only", "full"}));
  run_cl->add_option("--checkpoint", run_ckpt, "save the final encoder and classifier under this stem");

  std::string image_path, text_path, ckpt_path, sub_out;
  double energy = kDefaultEnergy;
  std::uint64_t sub_seed = 7;
  auto* sub = app.add_subcommand("analyze-subspace", "coverage distances between feature and classifier subspaces");
  sub->add_option("--image", image_path, "image feature table")->required()->check(CLI::ExistingFile);
  sub->add_option("--text", text_path, "text feature table, row k = class k")->required()->check(CLI::ExistingFile);
  sub->add_option("--checkpoint", ckpt_path, "checkpoint holding the visual classifier (else fitted on the image table)");
  sub->add_option("--energy", energy, "energy kept by the image basis")->check(CLI::Range(1e-9, 1.0));
  sub->add_option("--seed", sub_seed, "seed for the fitted classifier");
  sub->add_option("-o,--out", sub_out, "write JSON here");

  int trials = 100;
  std::uint64_t vb_seed = 7;
  std::string vb_image, vb_text, vb_out;
  auto* vb = app.add_subcommand("verify-bounds", "check the orthogonal-irrelevance and misalignment-bound facts");
  vb->add_option("--trials", trials, "random instances")->check(CLI::PositiveNumber);
  vb->add_option("--seed", vb_seed, "seed for random instances");
  vb->add_option("--image", vb_image, "image feature table (instead of random instances)")->check(CLI::ExistingFile);
  vb->add_option("--text", vb_text, "text feature table")->check(CLI::ExistingFile);
  vb->add_option("-o,--out", vb_out, "write JSON here");

  std::vector<std::string> inputs;
  std::string rep_json, rep_csv;
  auto* rep = app.add_subcommand("export-report", "aggregate result.json files per variant");
  rep->add_option("inputs", inputs, "result.json files")->required()->check(CLI::ExistingFile);
  rep->add_option("--json", rep_json, "write the aggregate JSON here");
  rep->add_option("--gap-csv", rep_csv, "write the per-variant gap/accuracy CSV here");

  std::string mg_image, mg_text;
  auto* mg = app.add_subcommand("measure-gap", "pos/neg/inter-modality mean of a table pair");
  mg->add_option("--image", mg_image, "image feature table")->required()->check(CLI::ExistingFile);
  mg->add_option("--text", mg_text, "text feature table")->required()->check(CLI::ExistingFile);

  CLI11_PARSE(app, argc, argv);

  try {
    if (pre->parsed()) return cmd_pretrain(pre_args, pre_out);
    if (run_cl->parsed()) return cmd_run_cl(run_args, run_out, seeds, variants, run_ckpt);
    if (sub->parsed()) return cmd_analyze_subspace(image_path, text_path, ckpt_path, energy, sub_seed, sub_out);
    if (vb->parsed()) {
      if (vb_image.empty() != vb_text.empty()) throw std::invalid_argument("--image and --text go together");
      return cmd_verify_bounds(trials, vb_seed, vb_image, vb_text, vb_out);
    }
    if (rep->parsed()) return cmd_export_report(inputs, rep_json, rep_csv);
    if (mg->parsed()) return cmd_measure_gap(mg_image, mg_text);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
