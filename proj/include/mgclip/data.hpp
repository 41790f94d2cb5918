#ifndef MGCLIP_DATA_HPP
#define MGCLIP_DATA_HPP

#include "mgclip/linalg.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace mgclip {

enum class Modality : std::uint8_t { image = 0, text = 1 };

const char* to_string(Modality m);

/// Unit-norm feature vectors for one modality, one row per sample.
struct EmbeddingTable {
  Modality modality = Modality::image;
  Matrix vectors;                        // n x dim
  std::vector<int> labels;               // one per row
  std::vector<std::string> class_names;  // optional

  Index rows() const { return vectors.rows(); }
  Index dim() const { return vectors.cols(); }
  /// class_names.size() when names are present, else max(label) + 1.
  int num_classes() const;

  friend bool operator==(const EmbeddingTable&, const EmbeddingTable&) = default;
};

/// Validates shape, finiteness, label range and row norms (within `norm_tolerance`).
EmbeddingTable make_table(Modality modality, Matrix vectors, std::vector<int> labels,
                          std::vector<std::string> class_names = {},
                          double norm_tolerance = 1e-6);

/// Rows whose label is in `classes`, in original order.
EmbeddingTable select_classes(const EmbeddingTable& table, const std::vector<int>& classes);

struct SyntheticConfig {
  int num_classes = 10;
  int samples_per_class = 20;
  int raw_dim = 32;
  double cone_separation = 0.8;     // target inter-modality mean cosine is 1 - cone_separation
  double intra_class_spread = 0.5;  // norm of per-sample deviation from the class direction
  std::uint64_t seed = 7;
  double input_noise = 0.05;        // additive noise on raw inputs
  double class_weight = 0.5;        // share of squared norm spent on class directions (upper bound)
  // Seeds the poles and the raw-input mixing maps. Datasets sharing a world seed but
  // differing in `seed` have different classes in the same embedding geometry.
  std::optional<std::uint64_t> world_seed = std::nullopt;

  void validate() const;
};

struct SyntheticData {
  EmbeddingTable image;  // num_classes * samples_per_class rows
  EmbeddingTable text;   // one row per class, row k has label k
  Matrix raw_image;      // raw encoder inputs, rows aligned with `image`
  Matrix raw_text;       // raw encoder inputs, rows aligned with `text`
};

/// Two-cone paired data: images and texts occupy caps around distinct poles and share
/// random per-class directions. Deterministic in (world_seed, seed).
SyntheticData generate_synthetic(const SyntheticConfig& cfg);

struct TaskSplit {
  std::vector<std::vector<int>> tasks;

  int num_tasks() const { return static_cast<int>(tasks.size()); }
  /// Union of tasks[0..t] in task order.
  std::vector<int> seen_through(int t) const;
  /// Index of the task holding `label`, -1 if absent.
  int task_of(int label) const;
};

/// Shuffled class order cut into near-equal tasks; the first num_classes % num_tasks
/// tasks carry one extra class.
TaskSplit split_tasks(int num_classes, int num_tasks, std::uint64_t seed);

struct HoldoutSplit {
  std::vector<Index> train;
  std::vector<Index> test;
};

/// Per class, round(fraction * count) rows (at least one when count > 1) go to test.
HoldoutSplit split_holdout(const std::vector<int>& labels, double test_fraction,
                           std::uint64_t seed);

class TableFormatError : public std::runtime_error {
 public:
  enum class Kind {
    io,
    bad_magic,
    unsupported_version,
    bad_modality,
    unexpected_end,
    dimension_mismatch,
    non_finite,
    non_unit_row,
    bad_label,
    bad_sidecar,
  };
  TableFormatError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

inline constexpr std::uint32_t kTableFormatVersion = 1;
inline constexpr double kTableNormTolerance = 1e-4;

/// Path of the optional class-name sidecar for a table file: `<stem>.meta.json`.
std::filesystem::path sidecar_path(const std::filesystem::path& table_path);

/// Encodes the table into the binary layout (rows stored as float32).
std::vector<std::uint8_t> encode_table(const EmbeddingTable& table);
EmbeddingTable decode_table(const std::vector<std::uint8_t>& bytes);

/// Writes the table and, when class names are present, its sidecar.
void write_table(const EmbeddingTable& table, const std::filesystem::path& path);
EmbeddingTable read_table(const std::filesystem::path& path);

}  // namespace mgclip

#endif  // MGCLIP_DATA_HPP
