#include "mgclip/preservation.hpp"

#include <algorithm>
#include <cstdio>
#include <iostream>
#include <sstream>
#include <stdexcept>

namespace mgclip {

void PreservationConfig::validate() const {
  if (!(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument("preservation: alpha must lie in (0, 1)");
  if (max_probe_epochs < 1) throw std::invalid_argument("preservation: max_probe_epochs must be >= 1");
}

GapReport task_gap(const DualEncoder& enc, const TaskData& task, const Matrix& class_raw_text,
                   const std::vector<int>& classes) {
  std::vector<int> local(task.labels.size());
  for (std::size_t i = 0; i < task.labels.size(); ++i) {
    const auto it = std::find(classes.begin(), classes.end(), task.labels[i]);
    if (it == classes.end()) throw std::invalid_argument("task_gap: label outside the task classes");
    local[i] = static_cast<int>(it - classes.begin());
  }
  Matrix prompts(static_cast<Index>(classes.size()), class_raw_text.cols());
  for (std::size_t j = 0; j < classes.size(); ++j) prompts.row(static_cast<Index>(j)) = class_raw_text.row(classes[j]);
  return measure_gap(embed_images(enc, task.raw_image, std::move(local)), embed_texts(enc, prompts));
}

namespace detail {

EpochEstimateResult probe_epochs(const DualEncoder& enc, const TaskData& first_task,
                                 const Matrix& class_raw_text, const std::vector<int>& task_classes,
                                 const PreservationConfig& cfg, const TrainConfig& train_cfg) {
  if (first_task.labels.empty()) throw std::invalid_argument("estimate_epochs: empty first task");
  TrainConfig one = train_cfg;
  one.epochs = 1;
  one.cosine_schedule = false;
  const ClassScope scope{task_classes, task_classes};

  EpochEstimateResult out;
  const GapReport g0 = task_gap(enc, first_task, class_raw_text, task_classes);
  out.estimate.probe_trace.push_back({0, g0.neg, 0.0, g0.pos});

  DualEncoder current = enc;
  OptimizerState opt_state;
  DualEncoder at_e = enc;        // snapshot after `last_below` epochs
  DualEncoder after_first = enc; // snapshot after epoch 1, used when e clamps to 1
  bool crossed = false;
  for (int epoch = 1; epoch <= cfg.max_probe_epochs; ++epoch) {
    current = finetune_task(std::move(current), first_task, class_raw_text, scope, one, true, &opt_state);
    if (epoch == 1) after_first = current;
    const GapReport g = task_gap(current, first_task, class_raw_text, task_classes);
    const double delta = relative_delta(g.neg, g0.neg);
    out.estimate.probe_trace.push_back({epoch, g.neg, delta, g.pos});
    if (delta >= cfg.alpha) {
      crossed = true;
      break;
    }
    out.estimate.last_below = epoch;
    at_e = current;
  }
  out.estimate.hit_probe_cap = !crossed;
  out.estimate.epochs = std::max(out.estimate.last_below, 1);
  out.model = out.estimate.last_below >= 1 ? std::move(at_e) : std::move(after_first);
  return out;
}

}  // namespace detail

EpochEstimateResult estimate_epochs(const DualEncoder& enc, const TaskData& first_task,
                                    const Matrix& class_raw_text, const std::vector<int>& task_classes,
                                    const PreservationConfig& cfg, const TrainConfig& train_cfg) {
  cfg.validate();
  auto result = detail::probe_epochs(enc, first_task, class_raw_text, task_classes, cfg, train_cfg);
  if (result.estimate.hit_probe_cap) {
    std::cerr << "warning: neg drift stayed below alpha=" << cfg.alpha << " for all "
              << cfg.max_probe_epochs << " probe epochs\n";
  }
  return result;
}

DualEncoder train_remaining_tasks(DualEncoder enc, const std::vector<TaskData>& tasks,
                                  const std::vector<ClassScope>& scopes, const Matrix& class_raw_text,
                                  int epochs, const TrainConfig& train_cfg, const TaskCallback& after_task) {
  if (tasks.size() != scopes.size()) throw std::invalid_argument("train_remaining_tasks: one scope per task");
  if (epochs < 1) throw std::invalid_argument("train_remaining_tasks: epochs must be >= 1");
  TrainConfig cfg = train_cfg;
  cfg.epochs = epochs;
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    enc = finetune_task(std::move(enc), tasks[t], class_raw_text, scopes[t], cfg, true);
    if (after_task) after_task(t, enc);
  }
  return enc;
}

std::string probe_csv_header() { return "epoch,neg,delta,pos"; }

std::string to_csv(const std::vector<ProbeRecord>& trace) {
  std::ostringstream os;
  os << probe_csv_header() << "\n";
  char buf[128];
  for (const auto& r : trace) {
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g\n", r.epoch, r.neg, r.delta, r.pos);
    os << buf;
  }
  return os.str();
}

}  // namespace mgclip
