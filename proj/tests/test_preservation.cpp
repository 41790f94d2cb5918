#include "doctest.h"

#include "fixtures.hpp"
#include "mgclip/preservation.hpp"

using namespace mgclip;

namespace {

EpochEstimateResult probe(const PreservationConfig& cfg) {
  const auto& p = fixture::pinned();
  return detail::probe_epochs(p.adapted, p.task(0), p.bench.class_raw_text, p.bench.split.tasks[0], cfg, p.finetune);
}

}  // namespace

TEST_CASE("pinned benchmark: the probe estimates two epochs") {
  const auto& p = fixture::pinned();
  const auto r = estimate_epochs(p.adapted, p.task(0), p.bench.class_raw_text, p.bench.split.tasks[0],
                                 p.cfg.preservation, p.finetune);
  CHECK(r.estimate.epochs == 2);
  CHECK(r.estimate.last_below == 2);
  CHECK_FALSE(r.estimate.hit_probe_cap);
  REQUIRE(r.estimate.probe_trace.size() == 4);
  CHECK(r.model.finetune_epochs == 2);
}

TEST_CASE("probe trace: epochs in order, deltas recomputed exactly, stop at first crossing") {
  const auto r = probe(PreservationConfig{});
  const auto& trace = r.estimate.probe_trace;
  const double neg0 = trace.front().neg;
  CHECK(trace.front().delta == 0.0);
  for (std::size_t i = 0; i < trace.size(); ++i) {
    CHECK(trace[i].epoch == static_cast<int>(i));
    CHECK(trace[i].delta == relative_delta(trace[i].neg, neg0));
  }
  for (std::size_t i = 0; i + 1 < trace.size(); ++i) CHECK(trace[i].delta < 0.10);
  CHECK(trace.back().delta >= 0.10);
  CHECK(r.estimate.last_below == trace.back().epoch - 1);
  CHECK(r.estimate.last_below <= trace.back().epoch);
}

TEST_CASE("epoch-0 trace entry is the gap of the untrained model on task data") {
  const auto& p = fixture::pinned();
  const auto r = probe(PreservationConfig{});
  const auto g = task_gap(p.adapted, p.task(0), p.bench.class_raw_text, p.bench.split.tasks[0]);
  CHECK(r.estimate.probe_trace.front().neg == g.neg);
  CHECK(r.estimate.probe_trace.front().pos == g.pos);
}

TEST_CASE("returned model is the snapshot after the estimated epochs") {
  const auto& p = fixture::pinned();
  const auto r = probe(PreservationConfig{});
  TrainConfig cfg = p.finetune;
  cfg.epochs = r.estimate.epochs;
  const auto& cls = p.bench.split.tasks[0];
  const auto direct = finetune_task(p.adapted, p.task(0), p.bench.class_raw_text, {cls, cls}, cfg, true);
  CHECK(fixture::same_parameters(direct, r.model));
}

TEST_CASE("alpha never reached within the cap gives the cap") {
  const auto r = probe(PreservationConfig{.alpha = 0.99});
  CHECK(r.estimate.epochs == 20);
  CHECK(r.estimate.hit_probe_cap);
  CHECK(r.estimate.probe_trace.size() == 21);
  CHECK(r.model.finetune_epochs == 20);
}

TEST_CASE("alpha 0 clamps to one epoch") {
  const auto r = probe(PreservationConfig{.alpha = 0.0});
  CHECK(r.estimate.last_below == 0);
  CHECK(r.estimate.epochs == 1);
  CHECK(r.model.finetune_epochs == 1);
  CHECK(r.estimate.probe_trace.size() == 2);
}

TEST_CASE("estimate is deterministic") {
  CHECK(probe(PreservationConfig{}).estimate == probe(PreservationConfig{}).estimate);
}

TEST_CASE("config validation rejects alpha outside (0, 1) and a zero cap") {
  CHECK_THROWS_AS(PreservationConfig{.alpha = 0.0}.validate(), std::invalid_argument);
  CHECK_THROWS_AS(PreservationConfig{.alpha = 1.0}.validate(), std::invalid_argument);
  CHECK_THROWS_AS((PreservationConfig{.max_probe_epochs = 0}.validate()), std::invalid_argument);
  const auto& p = fixture::pinned();
  CHECK_THROWS_AS(estimate_epochs(p.adapted, p.task(0), p.bench.class_raw_text, p.bench.split.tasks[0],
                                  PreservationConfig{.alpha = 0.0}, p.finetune),
                  std::invalid_argument);
}

TEST_CASE("train_remaining_tasks: one epoch per task, callback per task") {
  const auto& p = fixture::pinned();
  std::vector<TaskData> tasks;
  std::vector<ClassScope> scopes;
  for (int t = 1; t <= 3; ++t) {
    tasks.push_back(p.task(t));
    scopes.push_back({p.bench.split.tasks[static_cast<std::size_t>(t)], p.bench.split.seen_through(t)});
  }
  std::vector<std::size_t> seen;
  const auto out = train_remaining_tasks(p.adapted, tasks, scopes, p.bench.class_raw_text, 1, p.finetune,
                                         [&](std::size_t i, const DualEncoder& m) {
                                           seen.push_back(i);
                                           CHECK(m.finetune_epochs == static_cast<int>(i) + 1);
                                         });
  CHECK(out.finetune_epochs == p.adapted.finetune_epochs + 3);
  CHECK(seen == std::vector<std::size_t>{0, 1, 2});

  const auto none = train_remaining_tasks(p.adapted, {}, {}, p.bench.class_raw_text, 1, p.finetune);
  CHECK(fixture::same_parameters(none, p.adapted));
  CHECK_THROWS_AS(train_remaining_tasks(p.adapted, tasks, {}, p.bench.class_raw_text, 1, p.finetune),
                  std::invalid_argument);
}

TEST_CASE("after every task at the estimated budget, task-1 neg stays within 3 alpha") {
  const auto& p = fixture::pinned();
  const auto& split = p.bench.split;
  const auto first = probe(PreservationConfig{});
  std::vector<TaskData> tasks;
  std::vector<ClassScope> scopes;
  for (int t = 1; t < split.num_tasks(); ++t) {
    tasks.push_back(p.task(t));
    scopes.push_back({split.tasks[static_cast<std::size_t>(t)], split.seen_through(t)});
  }
  const auto out = train_remaining_tasks(first.model, tasks, scopes, p.bench.class_raw_text, first.estimate.epochs,
                                         p.finetune);
  const double neg0 = first.estimate.probe_trace.front().neg;
  const double neg_final = task_gap(out, p.task(0), p.bench.class_raw_text, split.tasks[0]).neg;
  CHECK(relative_delta(neg_final, neg0) < 3 * 0.10);
}

TEST_CASE("probe csv") {
  const std::vector<ProbeRecord> trace{{0, 0.5, 0.0, 0.7}, {1, 0.25, 0.5, 0.75}};
  CHECK(probe_csv_header() == "epoch,neg,delta,pos");
  CHECK(to_csv(trace) == "epoch,neg,delta,pos\n0,0.5,0,0.69999999999999996\n1,0.25,0.5,0.75\n");
}
