#ifndef MGCLIP_CHECKPOINT_HPP
#define MGCLIP_CHECKPOINT_HPP

#include "mgclip/compensation.hpp"
#include "mgclip/encoder.hpp"

#include "json.hpp"

#include <filesystem>
#include <optional>

namespace mgclip {

/// A checkpoint is `<stem>.json` (manifest: tensor names, shapes, offsets, scalars) plus
/// `<stem>.bin` (little-endian float64, row-major, in manifest order).
struct Checkpoint {
  DualEncoder encoder;
  std::optional<CompensationClassifier> classifier;
  nlohmann::json metadata = nlohmann::json::object();  // free-form, e.g. the run config
};

inline constexpr int kCheckpointVersion = 1;

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& stem);
/// `path` may be the stem or either of the two files.
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace mgclip

#endif  // MGCLIP_CHECKPOINT_HPP
