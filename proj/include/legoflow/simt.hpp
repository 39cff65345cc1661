// SPDX-License-Identifier: Apache-2.0
#pragma once

// Single Iteration Multiple Tasks.
//
// Every iteration each of W virtual workers samples one task and a batch of
// that task, runs a plain single-task forward/backward, and meets the other
// workers only at two kinds of barrier:
//   * one BN reduction per lego layer (cross-task SyncBN), and
//   * one fusion barrier where gradients are averaged per parameter over the
//     workers that used it (task average, divisor N_gpu^p) and SGD runs.
// All shared state is mutated by the coordinator inside barriers, always in
// ascending worker order, so parallel and sequential execution agree bitwise.

#include <algorithm>
#include <atomic>
#include <barrier>
#include <cmath>
#include <exception>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "legoflow/batchnorm.hpp"
#include "legoflow/error.hpp"
#include "legoflow/model.hpp"
#include "legoflow/parameter.hpp"
#include "legoflow/rng.hpp"
#include "legoflow/schedule.hpp"
#include "legoflow/tasks.hpp"

namespace legoflow {

enum class SamplingMode { simt, per_batch };
enum class Execution { sequential, parallel };

inline const char* to_string(SamplingMode m) { return m == SamplingMode::simt ? "simt" : "per_batch"; }

inline SamplingMode sampling_mode_from_string(const std::string& s) {
  if (s == "simt") return SamplingMode::simt;
  if (s == "per_batch") return SamplingMode::per_batch;
  throw ValueError("unknown sampling mode '" + s + "' (expected simt or per_batch)");
}

struct SimtConfig {
  std::size_t num_workers = 4;
  /// Per engine task; empty means each TaskSpec's own sampling_weight.
  std::vector<double> task_sampling_weights;
  /// Per engine task; empty means each TaskSpec's own batch_size.
  std::vector<std::size_t> per_task_batch_size;
  std::size_t total_steps = 1000;
  std::size_t warmup_steps = 50;
  double base_lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  /// Controller logits follow the same schedule, scaled by this factor.
  double controller_lr_scale = 1.0;
  double tau_start = 5.0;
  double tau_end = 0.01;
  double decay_end_fraction = 0.9;
  SamplingMode sampling = SamplingMode::simt;
  bool syncbn = true;
  /// Whether BN backward differentiates the (synchronized) statistics.
  BnBackward bn_backward = BnBackward::exact;
  RoutingMode routing = RoutingMode::soft;
  std::uint64_t seed = 1;
  Execution execution = Execution::parallel;
  /// Upper bound on OS threads; 0 means one per worker.
  std::size_t max_threads = 0;
  /// Diagnostic: every worker reuses worker 0's random stream (same batch,
  /// same noise).
  bool replicate_worker_streams = false;

  LrSchedule lr() const { return LrSchedule{base_lr, warmup_steps, total_steps}; }
  TemperatureSchedule temperature() const { return TemperatureSchedule{tau_start, tau_end, decay_end_fraction, total_steps}; }

  void validate(std::size_t num_tasks) const {
    if (num_workers < 1) throw ConfigError("simt.workers must be >= 1");
    if (num_tasks == 0) throw ConfigError("no tasks to train");
    if (!task_sampling_weights.empty()) {
      if (task_sampling_weights.size() != num_tasks) throw ConfigError("simt.sampling_weights needs one entry per task");
      for (double w : task_sampling_weights)
        if (!(w > 0)) throw ConfigError("simt.sampling_weights must be positive");
    }
    if (!per_task_batch_size.empty() && per_task_batch_size.size() != num_tasks) {
      throw ConfigError("simt.batch_sizes needs one entry per task");
    }
    if (!(decay_end_fraction > 0 && decay_end_fraction <= 1)) throw ConfigError("schedules.decay_end_fraction must be in (0, 1]");
    if (!(tau_start > 0 && tau_end > 0)) throw ConfigError("temperatures must be positive");
    if (!(controller_lr_scale > 0)) throw ConfigError("simt.controller_lr_scale must be positive");
    if (warmup_steps > total_steps) throw ConfigError("schedules.warmup_steps exceeds total steps");
  }
};

/// Categorical draw proportional to positive weights.
inline std::size_t sample_task(std::span<const double> weights, Rng& rng) {
  if (weights.empty()) throw ValueError("sample_task: empty task set");
  return rng.categorical(weights);
}

template <typename T>
struct FusedGradient {
  std::size_t workers = 0;  // N_gpu^p
  BasicTensor<T> grad;
};

template <typename T>
struct FusionReport {
  std::map<std::size_t, FusedGradient<T>> entries;

  GradientMap<T> gradients() const {
    GradientMap<T> g;
    for (const auto& [idx, e] : entries) g.emplace(idx, e.grad);
    return g;
  }

  std::size_t workers_using(std::size_t param) const {
    auto it = entries.find(param);
    return it == entries.end() ? 0 : it->second.workers;
  }

  /// histogram[n] = number of trainable parameters used by exactly n workers.
  template <typename S>
  std::vector<std::size_t> histogram(const ParameterStore<S>& params, std::size_t num_workers) const {
    std::vector<std::size_t> h(num_workers + 1, 0);
    for (std::size_t i = 0; i < params.size(); ++i)
      if (params[i].trainable) ++h[workers_using(i)];
    return h;
  }
};

/// fused[p] = (1 / N_gpu^p) * sum of g_i[p] over the workers i that used p.
/// Workers report gradients only for the parameters they used; sums run in
/// ascending worker order in double precision.
template <typename T>
FusionReport<T> fuse_gradients(std::span<const GradientMap<T>> worker_grads) {
  std::map<std::size_t, std::pair<std::size_t, std::vector<double>>> acc;
  std::map<std::size_t, Shape> shapes;
  for (const GradientMap<T>& grads : worker_grads) {
    for (const auto& [idx, g] : grads) {
      auto [it, fresh] = acc.try_emplace(idx, 0, std::vector<double>(g.size(), 0.0));
      if (fresh) {
        shapes.emplace(idx, g.shape());
      } else if (shapes[idx] != g.shape()) {
        throw DimensionError("workers disagree on the gradient shape of parameter " + std::to_string(idx) + ": " +
                             shape_string(shapes[idx]) + " vs " + shape_string(g.shape()));
      }
      it->second.first += 1;
      auto& sum = it->second.second;
      for (std::size_t i = 0; i < g.size(); ++i) sum[i] += static_cast<double>(g[i]);
    }
  }
  FusionReport<T> report;
  for (auto& [idx, entry] : acc) {
    const double n = static_cast<double>(entry.first);
    BasicTensor<T> fused(shapes[idx]);
    for (std::size_t i = 0; i < fused.size(); ++i) fused[i] = static_cast<T>(entry.second[i] / n);
    report.entries.emplace(idx, FusedGradient<T>{entry.first, std::move(fused)});
  }
  return report;
}

struct WorkerRecord {
  std::size_t worker = 0;
  std::size_t task = 0;  // engine task index
  std::string task_name;
  double loss = 0.0;
  std::size_t batch_size = 0;
};

struct IterationMetrics {
  std::size_t step = 0;
  double lr = 0.0;
  double tau = 0.0;
  std::vector<WorkerRecord> workers;
  std::vector<std::size_t> ngpu_histogram;
  /// Mean over BN layers and features of the spread (max - min) across
  /// workers of the mean each worker normalized with. Zero under SyncBN.
  double bn_mean_deviation = 0.0;
};

class SimtEngine {
 public:
  SimtEngine(MultiTaskModel<float>& model, std::vector<TaskSpec> tasks, SimtConfig config)
      : model_(&model), tasks_(std::move(tasks)), config_(std::move(config)) {
    config_.validate(tasks_.size());
    for (std::size_t i = 0; i < tasks_.size(); ++i) {
      model_tasks_.push_back(model.task_index(tasks_[i].name));
      weights_.push_back(config_.task_sampling_weights.empty() ? tasks_[i].sampling_weight
                                                               : config_.task_sampling_weights[i]);
      if (!(weights_.back() > 0)) throw ConfigError("task '" + tasks_[i].name + "' has a non-positive sampling weight");
      if (!config_.per_task_batch_size.empty()) tasks_[i].batch_size = config_.per_task_batch_size[i];
    }
    for (const TaskBinding& tb : model.tasks())
      for (std::size_t idx : tb.controller) model.params()[idx].lr_scale = config_.controller_lr_scale;
  }

  const SimtConfig& config() const { return config_; }
  const std::vector<TaskSpec>& tasks() const { return tasks_; }
  std::size_t step() const { return step_; }
  void set_step(std::size_t s) { step_ = s; }
  MultiTaskModel<float>& model() { return *model_; }
  const FusionReport<float>& last_fusion() const { return last_fusion_; }

  double lr_at(std::size_t step) const { return lr_schedule(step, config_.lr()); }
  double tau_at(std::size_t step) const { return temperature_schedule(step, config_.temperature()); }

  /// Engine-task index run by each worker at a given step. A pure function of
  /// (seed, step): in simt mode every worker draws independently, in per-batch
  /// mode one draw is shared by all workers.
  std::vector<std::size_t> assignment(std::size_t step) const {
    const std::size_t W = config_.num_workers;
    std::vector<std::size_t> out(W);
    if (config_.sampling == SamplingMode::per_batch) {
      Rng rng(stream_key(config_.seed, kTaskStream, step, W));
      std::fill(out.begin(), out.end(), sample_task(weights_, rng));
      return out;
    }
    for (std::size_t w = 0; w < W; ++w) {
      Rng rng(stream_key(config_.seed, kTaskStream, step, config_.replicate_worker_streams ? 0 : w));
      out[w] = sample_task(weights_, rng);
    }
    return out;
  }

  IterationMetrics run_iteration() {
    const std::size_t s = step_;
    if (s >= config_.total_steps) throw StateError("training already reached total_steps = " + std::to_string(s));
    const std::size_t W = config_.num_workers;
    const std::size_t L = model_->config().layers;
    const std::size_t N = model_->config().units;

    IterationMetrics metrics;
    metrics.step = s;
    metrics.lr = lr_at(s);
    metrics.tau = tau_at(s);
    const std::vector<std::size_t> tasks = assignment(s);

    std::vector<std::optional<WorkerPass<float>>> passes(W);
    std::vector<std::vector<std::optional<BnStats>>> stats(W);
    std::vector<std::vector<std::optional<BnMoments>>> moments(W);
    std::vector<std::vector<std::optional<BnGradSums>>> grad_sums(W);
    std::vector<std::vector<std::optional<BnGradMoments>>> grad_moments(W, std::vector<std::optional<BnGradMoments>>(N));
    std::vector<double> losses(W, 0.0);
    std::vector<std::vector<std::optional<BnMoments>>> aggregate(L, std::vector<std::optional<BnMoments>>(N));
    double deviation_sum = 0.0;
    std::size_t deviation_count = 0;

    // Stages 0..L run the forward pass with a statistics exchange after each
    // of the first L. With the exact BN backward, stages L+1..2L run the
    // backward pass one layer at a time, exchanging gradient sums in between.
    const bool staged_backward = config_.bn_backward == BnBackward::exact;
    const std::size_t num_stages = staged_backward ? 2 * L + 1 : L + 1;

    auto worker_stage = [&](std::size_t w, std::size_t stage) {
      const TaskSpec& task = tasks_[tasks[w]];
      try {
        if (stage == 0) {
          Rng rng(stream_key(config_.seed, kWorkerStream, s, config_.replicate_worker_streams ? 0 : w));
          Batch batch = next_batch(task, Split::train, rng);
          auto plan = RoutingPlan<float>::sample(config_.routing, metrics.tau, L, N, rng);
          passes[w].emplace(*model_, model_tasks_[tasks[w]], std::move(batch.x), std::move(batch.y), std::move(plan),
                            config_.bn_backward);
          passes[w]->begin();
          stats[w] = passes[w]->layer_forward(0);
        } else if (stage < L) {
          passes[w]->layer_normalize(stage - 1, moments[w]);
          stats[w] = passes[w]->layer_forward(stage);
        } else if (stage == L) {
          passes[w]->layer_normalize(L - 1, moments[w]);
          losses[w] = passes[w]->finish(!staged_backward);
          if (staged_backward) {
            passes[w]->start_backward();
            grad_sums[w] = passes[w]->backward_to_layer(L - 1);
          }
        } else {
          const std::size_t l = 2 * L - stage;
          passes[w]->set_layer_gradient_moments(l, grad_moments[w]);
          if (l > 0) {
            grad_sums[w] = passes[w]->backward_to_layer(l - 1);
          } else {
            passes[w]->finish_backward();
          }
        }
      } catch (const NonFiniteError& e) {
        throw NonFiniteError("step " + std::to_string(s) + ", worker " + std::to_string(w) + ", task '" + task.name +
                             "': " + e.what());
      }
    };

    auto reduce_forward = [&](std::size_t l) {
      for (std::size_t k = 0; k < N; ++k) {
        std::vector<BnStats> contrib;
        std::vector<std::size_t> who;
        for (std::size_t w = 0; w < W; ++w) {
          if (stats[w][k]) {
            contrib.push_back(*stats[w][k]);
            who.push_back(w);
          }
        }
        for (std::size_t w = 0; w < W; ++w) {
          if (moments[w].size() != N) moments[w].assign(N, std::nullopt);
          moments[w][k].reset();
        }
        if (contrib.empty()) continue;
        BnMoments global = syncbn_reduce(contrib);
        for (std::size_t i = 0; i < who.size(); ++i) {
          moments[who[i]][k] = config_.syncbn ? global : moments_of(contrib[i]);
        }
        if (who.size() >= 2) {
          double spread = 0.0;
          const std::size_t F = global.mean.size();
          for (std::size_t j = 0; j < F; ++j) {
            double lo = moments[who[0]][k]->mean[j], hi = lo;
            for (std::size_t w : who) {
              lo = std::min(lo, moments[w][k]->mean[j]);
              hi = std::max(hi, moments[w][k]->mean[j]);
            }
            spread += hi - lo;
          }
          deviation_sum += spread / static_cast<double>(F);
          ++deviation_count;
        }
        aggregate[l][k] = std::move(global);
      }
    };

    // Mirrors the forward exchange: workers that normalized a unit with the
    // shared statistics also share the means of dY and dY * xhat.
    auto reduce_backward = [&]() {
      for (std::size_t k = 0; k < N; ++k) {
        std::vector<BnGradSums> contrib;
        std::vector<std::size_t> who;
        for (std::size_t w = 0; w < W; ++w) {
          grad_moments[w][k].reset();
          if (grad_sums[w][k]) {
            contrib.push_back(*grad_sums[w][k]);
            who.push_back(w);
          }
        }
        if (contrib.empty()) continue;
        if (config_.syncbn) {
          const BnGradMoments global = syncbn_grad_reduce(contrib);
          for (std::size_t w : who) grad_moments[w][k] = global;
        } else {
          for (std::size_t i = 0; i < who.size(); ++i)
            grad_moments[who[i]][k] = syncbn_grad_reduce(std::span<const BnGradSums>(&contrib[i], 1));
        }
      }
    };

    auto reduce = [&](std::size_t stage) {
      if (stage < L) {
        reduce_forward(stage);
      } else {
        reduce_backward();
      }
    };

    run_stages(W, num_stages, worker_stage, reduce);

    std::vector<GradientMap<float>> grads(W);
    for (std::size_t w = 0; w < W; ++w) grads[w] = passes[w]->gradients();
    last_fusion_ = fuse_gradients<float>(grads);
    sgd_step(model_->params(), last_fusion_.gradients(),
             SgdOptions{metrics.lr, config_.momentum, config_.weight_decay});
    update_running_stats(aggregate);

    for (std::size_t w = 0; w < W; ++w) {
      const TaskSpec& task = tasks_[tasks[w]];
      metrics.workers.push_back(WorkerRecord{w, tasks[w], task.name, losses[w], task.batch_size});
    }
    metrics.ngpu_histogram = last_fusion_.histogram(model_->params(), W);
    metrics.bn_mean_deviation = deviation_count ? deviation_sum / static_cast<double>(deviation_count) : 0.0;
    ++step_;
    return metrics;
  }

  /// Runs until total_steps (or `steps` more iterations), feeding each
  /// iteration's metrics to the callback.
  void run(std::size_t steps, const std::function<void(const IterationMetrics&)>& on_iteration = {}) {
    for (std::size_t i = 0; i < steps && step_ < config_.total_steps; ++i) {
      IterationMetrics m = run_iteration();
      if (on_iteration) on_iteration(m);
    }
  }

 private:
  /// Runs worker_stage(w, stage) for every worker and stage, calling
  /// reduce(stage) between consecutive stages once all workers are done.
  template <typename Stage, typename Reduce>
  void run_stages(std::size_t W, std::size_t num_stages, Stage& worker_stage, Reduce& reduce) {
    if (config_.execution == Execution::sequential || W == 1) {
      for (std::size_t stage = 0; stage < num_stages; ++stage) {
        for (std::size_t w = 0; w < W; ++w) worker_stage(w, stage);
        if (stage + 1 < num_stages) reduce(stage);
      }
      return;
    }
    const std::size_t threads = std::min(W, config_.max_threads ? config_.max_threads : W);
    std::vector<std::exception_ptr> errors(W);
    std::exception_ptr coordinator_error;
    std::atomic<bool> failed{false};
    std::size_t stage_done = 0;
    auto on_barrier = [&]() noexcept {
      if (stage_done + 1 < num_stages && !failed.load()) {
        try {
          reduce(stage_done);
        } catch (...) {
          coordinator_error = std::current_exception();
          failed.store(true);
        }
      }
      ++stage_done;
    };
    std::barrier sync(static_cast<std::ptrdiff_t>(threads), on_barrier);
    {
      std::vector<std::jthread> pool;
      for (std::size_t t = 0; t < threads; ++t) {
        pool.emplace_back([&, t] {
          for (std::size_t stage = 0; stage < num_stages; ++stage) {
            for (std::size_t w = t; w < W; w += threads) {
              if (failed.load()) break;
              try {
                worker_stage(w, stage);
              } catch (...) {
                errors[w] = std::current_exception();
                failed.store(true);
              }
            }
            sync.arrive_and_wait();
          }
        });
      }
    }
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
    if (coordinator_error) std::rethrow_exception(coordinator_error);
  }

  void update_running_stats(const std::vector<std::vector<std::optional<BnMoments>>>& aggregate) {
    const float m = static_cast<float>(model_->config().bn_momentum);
    auto& params = model_->params();
    for (std::size_t l = 0; l < aggregate.size(); ++l) {
      for (std::size_t k = 0; k < aggregate[l].size(); ++k) {
        if (!aggregate[l][k]) continue;
        const LegoUnit& unit = model_->layers()[l].units[k];
        auto& rm = params[unit.running_mean].value;
        auto& rv = params[unit.running_var].value;
        for (std::size_t j = 0; j < rm.size(); ++j) {
          rm[j] = (1.0f - m) * rm[j] + m * static_cast<float>(aggregate[l][k]->mean[j]);
          rv[j] = (1.0f - m) * rv[j] + m * static_cast<float>(aggregate[l][k]->var[j]);
        }
      }
    }
  }

  MultiTaskModel<float>* model_;
  std::vector<TaskSpec> tasks_;
  SimtConfig config_;
  std::vector<std::size_t> model_tasks_;
  std::vector<double> weights_;
  std::size_t step_ = 0;
  FusionReport<float> last_fusion_;
};

}  // namespace legoflow
