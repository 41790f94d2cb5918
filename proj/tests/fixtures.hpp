#ifndef MGCLIP_TESTS_FIXTURES_HPP
#define MGCLIP_TESTS_FIXTURES_HPP

#include "mgclip/protocol.hpp"
#include "mgclip/random.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace fixture {

using namespace mgclip;

inline Matrix unit_rows(Index n, Index d, Rng& rng) {
  Matrix m = gaussian_matrix(n, d, 1.0, rng);
  for (Index i = 0; i < n; ++i) m.row(i).normalize();
  return m;
}

inline std::vector<int> random_labels(Index n, int k, Rng& rng) {
  std::uniform_int_distribution<int> pick(0, k - 1);
  std::vector<int> out(static_cast<std::size_t>(n));
  for (auto& l : out) l = pick(rng);
  return out;
}

// Labels cycling through 0..k-1 so every class has a row when n >= k.
inline std::vector<int> cyclic_labels(Index n, int k) {
  std::vector<int> out(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = static_cast<int>(i % k);
  return out;
}

inline EmbeddingTable class_texts(const Matrix& rows) {
  std::vector<int> labels(static_cast<std::size_t>(rows.rows()));
  for (std::size_t k = 0; k < labels.size(); ++k) labels[k] = static_cast<int>(k);
  return make_table(Modality::text, rows, labels);
}

inline std::vector<Index> rows_with(const std::vector<int>& labels, const std::vector<int>& classes) {
  std::vector<Index> out;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    for (int c : classes) {
      if (labels[i] == c) {
        out.push_back(static_cast<Index>(i));
        break;
      }
    }
  }
  return out;
}

inline TaskData task_data(const Matrix& raw, const std::vector<int>& labels, const std::vector<int>& classes) {
  const auto rows = rows_with(labels, classes);
  TaskData t;
  t.raw_image.resize(static_cast<Index>(rows.size()), raw.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    t.raw_image.row(static_cast<Index>(i)) = raw.row(rows[i]);
    t.labels.push_back(labels[static_cast<std::size_t>(rows[i])]);
  }
  return t;
}

inline bool same_parameters(const DualEncoder& a, const DualEncoder& b) {
  const auto pa = trainable_blocks(a);
  const auto pb = trainable_blocks(b);
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (pa[i].size() != pb[i].size()) return false;
    for (std::size_t j = 0; j < pa[i].size(); ++j) {
      if (pa[i][j] != pb[i][j]) return false;
    }
  }
  return a.image.hidden.weight == b.image.hidden.weight && a.image.output.weight == b.image.output.weight &&
         a.text.hidden.weight == b.text.hidden.weight && a.text.output.weight == b.text.output.weight &&
         a.image.hidden.bias == b.image.hidden.bias && a.text.output.bias == b.text.output.bias &&
         a.logit_scale == b.logit_scale;
}

// The pinned benchmark: default RunConfig (10 classes, 5 tasks, seed 7), pretrained once
// per test binary and shared by every test case that needs it.
struct Pinned {
  RunConfig cfg;
  Benchmark bench;
  DualEncoder pretrained;
  DualEncoder adapted;  // pretrained + zero-initialised adapters, as the protocol builds it
  TrainConfig finetune;

  TaskData task(int t) const {
    return task_data(bench.train_raw, bench.train_labels, bench.split.tasks[static_cast<std::size_t>(t)]);
  }
};

inline const Pinned& pinned() {
  static const Pinned p = [] {
    Pinned out;
    out.bench = prepare_benchmark(out.cfg);
    out.pretrained = pretrain_for(out.cfg, out.bench);
    out.adapted = attach_adapters(out.pretrained, out.cfg.adapter_rank, derive_seed(out.cfg.seed, "adapters"));
    out.finetune = out.cfg.finetune;
    out.finetune.seed = derive_seed(out.cfg.seed, "finetune");
    return out;
  }();
  return p;
}

inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("mgclip_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace fixture

#endif  // MGCLIP_TESTS_FIXTURES_HPP
