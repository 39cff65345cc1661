// SPDX-License-Identifier: Apache-2.0
#pragma once

// Transfer to a new task, either by re-learning a route for it (dynamic) or
// by training a plain network materialized from a chosen path (fixed path).
// Both run single-worker SIMT on a copy; the pre-trained model is untouched.

#include <algorithm>
#include <string>
#include <vector>

#include "legoflow/error.hpp"
#include "legoflow/model.hpp"
#include "legoflow/simt.hpp"
#include "legoflow/tasks.hpp"

namespace legoflow {

struct FinetuneOptions {
  std::size_t steps = 500;
  std::size_t warmup_steps = 25;
  double base_lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double controller_lr_scale = 1.0;
  double tau_start = 5.0;
  double tau_end = 0.01;
  /// Temperature reaches tau_end after this fraction of the steps.
  double decay_end_fraction = 0.5;
  RoutingMode routing = RoutingMode::soft;
  BnBackward bn_backward = BnBackward::exact;
  std::uint64_t seed = 1;

  SimtConfig simt(RoutingMode mode) const {
    SimtConfig c;
    c.num_workers = 1;
    c.total_steps = steps;
    c.warmup_steps = std::min(warmup_steps, steps);
    c.base_lr = base_lr;
    c.momentum = momentum;
    c.weight_decay = weight_decay;
    c.controller_lr_scale = controller_lr_scale;
    c.tau_start = tau_start;
    c.tau_end = tau_end;
    c.decay_end_fraction = decay_end_fraction;
    c.routing = mode;
    c.bn_backward = bn_backward;
    c.seed = seed;
    c.execution = Execution::sequential;
    return c;
  }

  static FinetuneOptions from(const SimtConfig& c) {
    FinetuneOptions o;
    o.steps = c.total_steps;
    o.warmup_steps = c.warmup_steps;
    o.base_lr = c.base_lr;
    o.momentum = c.momentum;
    o.weight_decay = c.weight_decay;
    o.controller_lr_scale = c.controller_lr_scale;
    o.tau_start = c.tau_start;
    o.tau_end = c.tau_end;
    o.decay_end_fraction = c.decay_end_fraction;
    o.routing = c.routing;
    o.bn_backward = c.bn_backward;
    o.seed = c.seed;
    return o;
  }
};

struct DynamicFinetuneResult {
  MultiTaskModel<float> model;
  Path path;
  std::vector<IterationMetrics> metrics;
  double val_loss = 0.0;
};

struct FixedPathFinetuneResult {
  /// One unit per layer, initialized from the path's units.
  MultiTaskModel<float> model;
  std::vector<IterationMetrics> metrics;
  double val_loss = 0.0;
};

/// Adds the task with a zero controller row to a copy of the model and trains
/// backbone, head and controller together.
inline DynamicFinetuneResult dynamic_finetune(const MultiTaskModel<float>& pretrained, const TaskSpec& task,
                                              const FinetuneOptions& opt) {
  for (const auto& t : pretrained.tasks()) {
    if (t.desc.name == task.name) throw ValueError("new task '" + task.name + "' collides with a pre-training task");
  }
  DynamicFinetuneResult r{pretrained, {}, {}, 0.0};
  const std::size_t idx = r.model.add_task(TaskDescriptor::of(task));
  SimtEngine engine(r.model, {task}, opt.simt(opt.routing));
  engine.run(opt.steps, [&](const IterationMetrics& m) { r.metrics.push_back(m); });
  r.path = r.model.path(idx);
  r.val_loss = split_loss(r.model, task, Split::val);
  return r;
}

/// Materializes the path and trains the resulting plain network on the task.
inline FixedPathFinetuneResult fixed_path_finetune(const MultiTaskModel<float>& pretrained, const Path& path,
                                                   const TaskSpec& task, const FinetuneOptions& opt) {
  const StaticBackbone<float> backbone = pretrained.materialize(path);
  FixedPathFinetuneResult r{MultiTaskModel<float>::from_static(backbone, pretrained.seed()), {}, 0.0};
  r.model.add_task(TaskDescriptor::of(task));
  SimtEngine engine(r.model, {task}, opt.simt(RoutingMode::argmax));
  engine.run(opt.steps, [&](const IterationMetrics& m) { r.metrics.push_back(m); });
  r.val_loss = split_loss(r.model, task, Split::val);
  return r;
}

}  // namespace legoflow
