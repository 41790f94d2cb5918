#ifndef MGCLIP_PRESERVATION_HPP
#define MGCLIP_PRESERVATION_HPP

#include "mgclip/encoder.hpp"
#include "mgclip/gapmetrics.hpp"

#include <functional>
#include <string>
#include <vector>

namespace mgclip {

struct PreservationConfig {
  double alpha = 0.10;        // threshold on the relative drift of neg
  int max_probe_epochs = 20;

  void validate() const;
};

struct ProbeRecord {
  int epoch = 0;
  double neg = 0.0;
  double delta = 0.0;
  double pos = 0.0;

  friend bool operator==(const ProbeRecord&, const ProbeRecord&) = default;
};

struct EpochEstimate {
  int epochs = 1;                       // max(e, 1)
  int last_below = 0;                   // e: last probed epoch with delta < alpha
  bool hit_probe_cap = false;           // delta never reached alpha
  std::vector<ProbeRecord> probe_trace; // epoch 0 (untrained) first

  friend bool operator==(const EpochEstimate&, const EpochEstimate&) = default;
};

struct EpochEstimateResult {
  EpochEstimate estimate;
  DualEncoder model;  // trained exactly estimate.epochs epochs on the first task
};

/// Gap of `enc` on `task` against the text prompts of `classes` (relabelled 0..|classes|-1).
GapReport task_gap(const DualEncoder& enc, const TaskData& task, const Matrix& class_raw_text,
                   const std::vector<int>& classes);

/// Probes the first task one epoch at a time, stopping at the first epoch whose neg drift
/// reaches alpha. The returned model is the snapshot after max(e, 1) epochs.
EpochEstimateResult estimate_epochs(const DualEncoder& enc, const TaskData& first_task,
                                    const Matrix& class_raw_text, const std::vector<int>& task_classes,
                                    const PreservationConfig& cfg, const TrainConfig& train_cfg);

namespace detail {
/// estimate_epochs without validating cfg; lets boundary values such as alpha = 0 through.
EpochEstimateResult probe_epochs(const DualEncoder& enc, const TaskData& first_task,
                                 const Matrix& class_raw_text, const std::vector<int>& task_classes,
                                 const PreservationConfig& cfg, const TrainConfig& train_cfg);
}  // namespace detail

using TaskCallback = std::function<void(std::size_t task_index, const DualEncoder& model)>;

/// Trains each task for exactly `epochs` epochs with the old-class mask; `scopes[i]`
/// gives the class scope of tasks[i].
DualEncoder train_remaining_tasks(DualEncoder enc, const std::vector<TaskData>& tasks,
                                  const std::vector<ClassScope>& scopes, const Matrix& class_raw_text,
                                  int epochs, const TrainConfig& train_cfg,
                                  const TaskCallback& after_task = {});

std::string probe_csv_header();
std::string to_csv(const std::vector<ProbeRecord>& trace);

}  // namespace mgclip

#endif  // MGCLIP_PRESERVATION_HPP
