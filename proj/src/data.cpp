#include "mgclip/data.hpp"

#include "mgclip/random.hpp"

#include "json.hpp"

#include <algorithm>
#include <bit>
#include <climits>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>

namespace mgclip {

const char* to_string(Modality m) { return m == Modality::image ? "image" : "text"; }

int EmbeddingTable::num_classes() const {
  if (!class_names.empty()) return static_cast<int>(class_names.size());
  int mx = -1;
  for (int l : labels) mx = std::max(mx, l);
  return mx + 1;
}

EmbeddingTable make_table(Modality modality, Matrix vectors, std::vector<int> labels,
                          std::vector<std::string> class_names, double norm_tolerance) {
  if (static_cast<Index>(labels.size()) != vectors.rows()) {
    throw std::invalid_argument("make_table: " + std::to_string(labels.size()) + " labels for " +
                                std::to_string(vectors.rows()) + " rows");
  }
  require_finite(vectors, "make_table");
  for (int l : labels) {
    if (l < 0) throw std::invalid_argument("make_table: negative label");
    if (!class_names.empty() && l >= static_cast<int>(class_names.size())) {
      throw std::invalid_argument("make_table: label beyond class_names");
    }
  }
  for (Index i = 0; i < vectors.rows(); ++i) {
    if (std::abs(vectors.row(i).norm() - 1.0) > norm_tolerance) {
      throw std::invalid_argument("make_table: row " + std::to_string(i) + " is not unit norm");
    }
  }
  return {modality, std::move(vectors), std::move(labels), std::move(class_names)};
}

EmbeddingTable select_classes(const EmbeddingTable& table, const std::vector<int>& classes) {
  std::vector<Index> keep;
  for (Index i = 0; i < table.rows(); ++i) {
    if (std::find(classes.begin(), classes.end(), table.labels[i]) != classes.end()) {
      keep.push_back(i);
    }
  }
  EmbeddingTable out;
  out.modality = table.modality;
  out.class_names = table.class_names;
  out.vectors.resize(static_cast<Index>(keep.size()), table.dim());
  for (std::size_t r = 0; r < keep.size(); ++r) {
    out.vectors.row(static_cast<Index>(r)) = table.vectors.row(keep[r]);
    out.labels.push_back(table.labels[keep[r]]);
  }
  return out;
}

void SyntheticConfig::validate() const {
  if (num_classes < 2) throw std::invalid_argument("synthetic: num_classes must be >= 2");
  if (samples_per_class < 1) throw std::invalid_argument("synthetic: samples_per_class must be >= 1");
  if (raw_dim < num_classes) throw std::invalid_argument("synthetic: raw_dim must be >= num_classes");
  if (!(cone_separation >= 0.0 && cone_separation <= 2.0)) {
    throw std::invalid_argument("synthetic: cone_separation must lie in [0, 2]");
  }
  if (!(intra_class_spread >= 0.0)) throw std::invalid_argument("synthetic: negative spread");
  if (!(input_noise >= 0.0)) throw std::invalid_argument("synthetic: negative input_noise");
  if (!(class_weight >= 0.0 && class_weight < 1.0)) {
    throw std::invalid_argument("synthetic: class_weight must lie in [0, 1)");
  }
}

SyntheticData generate_synthetic(const SyntheticConfig& cfg) {
  cfg.validate();
  const Index dim = cfg.raw_dim;
  const Index k = cfg.num_classes;
  // Two poles plus a class subspace of at least one dimension.
  if (dim < 3) throw std::invalid_argument("synthetic: infeasible geometry, raw_dim must be >= 3");
  Rng world(derive_seed(cfg.world_seed.value_or(cfg.seed), "synthetic-world"));
  const Matrix frame = random_orthogonal(dim, world);
  const double mix_std = 1.0 / std::sqrt(static_cast<double>(dim));
  const Matrix image_mix = gaussian_matrix(dim, dim, mix_std, world);
  const Matrix text_mix = gaussian_matrix(dim, dim, mix_std, world);
  const Vector text_pole = frame.col(0);
  const Vector orth_pole = frame.col(1);
  const auto class_space = frame.rightCols(dim - 2);

  Rng rng(derive_seed(cfg.seed, "synthetic"));
  Matrix class_dirs = gaussian_matrix(dim - 2, k, 1.0, rng);  // class-space coordinates
  for (Index c = 0; c < k; ++c) class_dirs.col(c).normalize();
  const double per_axis = cfg.intra_class_spread / std::sqrt(static_cast<double>(dim - 2));

  const Index n = k * cfg.samples_per_class;
  Matrix directions(n, dim - 2);  // unit, class-space coordinates
  std::vector<int> labels(static_cast<std::size_t>(n));
  for (Index c = 0, row = 0; c < k; ++c) {
    for (int s = 0; s < cfg.samples_per_class; ++s, ++row) {
      const Vector coeff = class_dirs.col(c) + gaussian_matrix(dim - 2, 1, per_axis, rng).col(0);
      directions.row(row) = coeff.normalized().transpose();
      labels[static_cast<std::size_t>(row)] = static_cast<int>(c);
    }
  }

  // Mean cosine between sample directions and class directions; the pole angle is then
  // solved so the inter-modality mean lands on 1 - cone_separation.
  double m = 0.0;
  for (Index i = 0; i < n; ++i)
    for (Index c = 0; c < k; ++c) m += directions.row(i).dot(class_dirs.col(c));
  m /= static_cast<double>(n * k);

  const double target = 1.0 - cfg.cone_separation;
  double w = cfg.class_weight;
  if (m < 1.0) w = std::min(w, cfg.cone_separation / (1.0 - m));
  if (m > -1.0) w = std::min(w, (2.0 - cfg.cone_separation) / (1.0 + m));
  w = std::max(w, 0.0);
  const double pole_cos = std::clamp((target - w * m) / (1.0 - w), -1.0, 1.0);
  const Vector image_pole = pole_cos * text_pole + std::sqrt(1.0 - pole_cos * pole_cos) * orth_pole;
  const double pole_part = std::sqrt(1.0 - w);
  const double class_part = std::sqrt(w);

  Matrix image(n, dim);
  for (Index i = 0; i < n; ++i) {
    image.row(i) = pole_part * image_pole.transpose() +
                   class_part * (class_space * directions.row(i).transpose()).transpose();
  }
  Matrix text(k, dim);
  std::vector<int> text_labels(static_cast<std::size_t>(k));
  for (Index c = 0; c < k; ++c) {
    text.row(c) = pole_part * text_pole.transpose() + class_part * (class_space * class_dirs.col(c)).transpose();
    text_labels[static_cast<std::size_t>(c)] = static_cast<int>(c);
  }
  image = normalize_rows(image);
  text = normalize_rows(text);

  Matrix raw_image = image * image_mix.transpose() + gaussian_matrix(n, dim, cfg.input_noise, rng);
  Matrix raw_text = text * text_mix.transpose() + gaussian_matrix(k, dim, cfg.input_noise, rng);

  SyntheticData out;
  out.image = make_table(Modality::image, std::move(image), std::move(labels));
  out.text = make_table(Modality::text, std::move(text), std::move(text_labels));
  out.raw_image = std::move(raw_image);
  out.raw_text = std::move(raw_text);
  return out;
}

std::vector<int> TaskSplit::seen_through(int t) const {
  std::vector<int> out;
  for (int i = 0; i <= t && i < num_tasks(); ++i) {
    out.insert(out.end(), tasks[static_cast<std::size_t>(i)].begin(),
               tasks[static_cast<std::size_t>(i)].end());
  }
  return out;
}

int TaskSplit::task_of(int label) const {
  for (int i = 0; i < num_tasks(); ++i) {
    const auto& t = tasks[static_cast<std::size_t>(i)];
    if (std::find(t.begin(), t.end(), label) != t.end()) return i;
  }
  return -1;
}

TaskSplit split_tasks(int num_classes, int num_tasks, std::uint64_t seed) {
  if (num_tasks < 1) throw std::invalid_argument("split_tasks: num_tasks must be >= 1");
  if (num_tasks > num_classes) throw std::invalid_argument("split_tasks: more tasks than classes");
  std::vector<int> order(static_cast<std::size_t>(num_classes));
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, "split_tasks"));
  std::shuffle(order.begin(), order.end(), rng);

  TaskSplit split;
  const int base = num_classes / num_tasks;
  const int extra = num_classes % num_tasks;
  auto it = order.begin();
  for (int t = 0; t < num_tasks; ++t) {
    const int size = base + (t < extra ? 1 : 0);
    split.tasks.emplace_back(it, it + size);
    it += size;
  }
  return split;
}

HoldoutSplit split_holdout(const std::vector<int>& labels, double test_fraction,
                           std::uint64_t seed) {
  if (!(test_fraction >= 0.0 && test_fraction < 1.0)) {
    throw std::invalid_argument("split_holdout: fraction must lie in [0, 1)");
  }
  int mx = -1;
  for (int l : labels) mx = std::max(mx, l);
  std::vector<std::vector<Index>> by_class(static_cast<std::size_t>(mx + 1));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    by_class[static_cast<std::size_t>(labels[i])].push_back(static_cast<Index>(i));
  }
  Rng rng(derive_seed(seed, "holdout"));
  HoldoutSplit out;
  for (auto& rows : by_class) {
    std::shuffle(rows.begin(), rows.end(), rng);
    const auto count = static_cast<Index>(rows.size());
    Index n_test = static_cast<Index>(std::lround(test_fraction * static_cast<double>(count)));
    if (test_fraction > 0.0 && count > 1) n_test = std::clamp<Index>(n_test, 1, count - 1);
    out.test.insert(out.test.end(), rows.begin(), rows.begin() + n_test);
    out.train.insert(out.train.end(), rows.begin() + n_test, rows.end());
  }
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.test.begin(), out.test.end());
  return out;
}

// ---------------------------------------------------------------------------
// Binary table format

namespace {

constexpr std::uint8_t kMagic[4] = {'E', 'M', 'B', 'T'};
constexpr std::size_t kHeaderBytes = 4 + 4 + 1 + 8 + 4;

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<std::uint8_t>((value >> (8 * i)) & 0xFF));
  }
}

template <typename T>
T get_le(const std::uint8_t* p) {
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(p[i]) << (8 * i);
  return v;
}

}  // namespace

std::filesystem::path sidecar_path(const std::filesystem::path& table_path) {
  auto p = table_path;
  p.replace_extension(".meta.json");
  return p;
}

std::vector<std::uint8_t> encode_table(const EmbeddingTable& table) {
  require_finite(table.vectors, "encode_table");
  if (static_cast<Index>(table.labels.size()) != table.rows()) {
    throw std::invalid_argument("encode_table: label count mismatch");
  }
  std::vector<std::uint8_t> out;
  out.reserve(kHeaderBytes + static_cast<std::size_t>(table.rows() * (table.dim() + 1) * 4));
  for (std::uint8_t c : kMagic) out.push_back(c);
  put_le<std::uint32_t>(out, kTableFormatVersion);
  out.push_back(static_cast<std::uint8_t>(table.modality));
  put_le<std::uint64_t>(out, static_cast<std::uint64_t>(table.rows()));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(table.dim()));
  for (Index i = 0; i < table.rows(); ++i) {
    for (Index j = 0; j < table.dim(); ++j) {
      put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(static_cast<float>(table.vectors(i, j))));
    }
  }
  for (int l : table.labels) {
    if (l < 0) throw std::invalid_argument("encode_table: negative label");
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(l));
  }
  return out;
}

EmbeddingTable decode_table(const std::vector<std::uint8_t>& bytes) {
  using K = TableFormatError::Kind;
  if (bytes.size() < 4 || !std::equal(std::begin(kMagic), std::end(kMagic), bytes.begin())) {
    throw TableFormatError(K::bad_magic, "bad magic: not an embedding table");
  }
  if (bytes.size() < kHeaderBytes) throw TableFormatError(K::unexpected_end, "unexpected end of data");
  const std::uint8_t* p = bytes.data() + 4;
  const auto version = get_le<std::uint32_t>(p);
  if (version != kTableFormatVersion) {
    throw TableFormatError(K::unsupported_version, "unsupported format version " + std::to_string(version));
  }
  const std::uint8_t tag = p[4];
  if (tag > 1) throw TableFormatError(K::bad_modality, "unknown modality tag " + std::to_string(tag));
  const auto rows = get_le<std::uint64_t>(p + 5);
  const auto dim = get_le<std::uint32_t>(p + 13);
  const std::size_t remaining = bytes.size() - kHeaderBytes;
  if (rows > 0 && dim == 0) throw TableFormatError(K::dimension_mismatch, "zero dimension");
  // Each row needs dim floats plus one label, 4 bytes apiece.
  const std::uint64_t per_row = (static_cast<std::uint64_t>(dim) + 1) * 4;
  if (rows > remaining / per_row) throw TableFormatError(K::unexpected_end, "unexpected end of data");
  const std::uint64_t needed = rows * per_row;
  if (remaining != needed) {
    throw TableFormatError(K::dimension_mismatch, "payload size does not match rows x dim");
  }

  const auto n = static_cast<Index>(rows);
  const auto d = static_cast<Index>(dim);
  Matrix vectors(n, d);
  const std::uint8_t* q = bytes.data() + kHeaderBytes;
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < d; ++j, q += 4) {
      const float f = std::bit_cast<float>(get_le<std::uint32_t>(q));
      if (!std::isfinite(f)) {
        throw TableFormatError(K::non_finite, "non-finite entry at row " + std::to_string(i));
      }
      vectors(i, j) = static_cast<double>(f);
    }
    if (std::abs(vectors.row(i).norm() - 1.0) > kTableNormTolerance) {
      throw TableFormatError(K::non_unit_row, "row " + std::to_string(i) + " is not unit norm");
    }
  }
  std::vector<int> labels(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i, q += 4) {
    const auto l = get_le<std::uint32_t>(q);
    if (l > static_cast<std::uint32_t>(INT_MAX)) {
      throw TableFormatError(K::bad_label, "label out of range at row " + std::to_string(i));
    }
    labels[static_cast<std::size_t>(i)] = static_cast<int>(l);
  }
  EmbeddingTable t;
  t.modality = static_cast<Modality>(tag);
  t.vectors = std::move(vectors);
  t.labels = std::move(labels);
  return t;
}

void write_table(const EmbeddingTable& table, const std::filesystem::path& path) {
  const auto bytes = encode_table(table);
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw TableFormatError(TableFormatError::Kind::io, "cannot open " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw TableFormatError(TableFormatError::Kind::io, "write failed: " + path.string());
  }
  if (!table.class_names.empty()) {
    nlohmann::json meta;
    meta["class_names"] = table.class_names;
    std::ofstream side(sidecar_path(path), std::ios::trunc);
    side << meta.dump(2) << "\n";
  }
}

EmbeddingTable read_table(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw TableFormatError(TableFormatError::Kind::io, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  EmbeddingTable t = decode_table(bytes);

  const auto side = sidecar_path(path);
  if (std::filesystem::exists(side)) {
    std::ifstream s(side);
    nlohmann::json meta;
    try {
      s >> meta;
    } catch (const nlohmann::json::exception& e) {
      throw TableFormatError(TableFormatError::Kind::bad_sidecar, side.string() + ": " + e.what());
    }
    if (meta.contains("class_names")) {
      t.class_names = meta.at("class_names").get<std::vector<std::string>>();
      for (int l : t.labels) {
        if (l >= static_cast<int>(t.class_names.size())) {
          throw TableFormatError(TableFormatError::Kind::bad_sidecar,
                                 "label " + std::to_string(l) + " has no class name");
        }
      }
    }
  }
  return t;
}

}  // namespace mgclip
