// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "legoflow/autodiff.hpp"
#include "legoflow/batchnorm.hpp"
#include "legoflow/lego.hpp"
#include "legoflow/parameter.hpp"
#include "legoflow/tasks.hpp"

namespace legoflow {

/// Shape of a task as seen by the model (no data).
struct TaskDescriptor {
  std::string name;
  std::size_t input_dim = 0;
  HeadSpec head;
  bool use_adapter = false;
  double loss_weight = 1.0;

  static TaskDescriptor of(const TaskSpec& t) {
    return TaskDescriptor{t.name, t.dataset.input_dim, t.head, t.use_adapter, t.loss_weight};
  }
};

/// Parameters owned by one task: optional input adapter, head, controller rows.
struct TaskBinding {
  TaskDescriptor desc;
  std::optional<std::size_t> adapter_w, adapter_b;
  std::size_t head_w = 0, head_b = 0;
  std::vector<std::size_t> controller;  // one [N] logit row per layer
};

/// Snapshot of a task's routing controller.
struct TaskController {
  std::string task;
  std::vector<std::vector<double>> logits;  // L x N
  double temperature = 1.0;
  RoutingMode mode = RoutingMode::soft;

  std::vector<std::vector<double>> probabilities() const {
    std::vector<std::vector<double>> p;
    for (const auto& row : logits) p.push_back(softmax<double>(row));
    return p;
  }
};

/// Per-layer argmax of the selection probabilities, ties to the lowest index.
inline Path extract_path(const TaskController& controller) {
  Path path;
  for (const auto& row : controller.probabilities()) path.selections.push_back(argmax_index<double>(row));
  return path;
}

/// Shared lego backbone plus per-task adapters, heads and controllers.
template <typename T>
class MultiTaskModel {
 public:
  MultiTaskModel(BackboneConfig config, std::uint64_t seed) : config_(config), seed_(seed) {
    Rng rng(stream_key(seed, kInitStream));
    layers_ = build_backbone(params_, config_, rng);
  }

  /// Registers a task with freshly initialized adapter and head, and a zero
  /// (uniform) controller.
  std::size_t add_task(const TaskDescriptor& desc) {
    for (const auto& t : tasks_)
      if (t.desc.name == desc.name) throw ValueError("task '" + desc.name + "' already exists");
    if (!desc.use_adapter && desc.input_dim != config_.layer_in(0)) {
      throw DimensionError("task '" + desc.name + "' has input width " + std::to_string(desc.input_dim) +
                           " but the backbone expects " + std::to_string(config_.layer_in(0)) + " without an adapter");
    }
    if (!(desc.loss_weight > 0)) throw ValueError("task loss weight must be positive");
    Rng rng(stream_key(seed_, kInitStream, fnv1a(desc.name)));
    TaskBinding b;
    b.desc = desc;
    const std::string prefix = "task." + desc.name;
    const std::size_t d = config_.layer_in(0);
    if (desc.use_adapter) {
      b.adapter_w = params_.add(prefix + ".adapter.w", uniform_init<T>({desc.input_dim, d}, desc.input_dim, rng));
      b.adapter_b = params_.add(prefix + ".adapter.b", uniform_init<T>({d}, desc.input_dim, rng));
    }
    const std::size_t out = desc.head.output_dim(), feat = config_.output_dim();
    b.head_w = params_.add(prefix + ".head.w", uniform_init<T>({feat, out}, feat, rng));
    b.head_b = params_.add(prefix + ".head.b", uniform_init<T>({out}, feat, rng));
    for (std::size_t l = 0; l < config_.layers; ++l) {
      b.controller.push_back(params_.add("controller." + desc.name + ".layer" + std::to_string(l),
                                         BasicTensor<T>({config_.units}, T(0)), true, false));
    }
    tasks_.push_back(std::move(b));
    return tasks_.size() - 1;
  }

  /// Plain (N = 1) model whose single unit per layer is a copy of the static
  /// backbone's unit.
  static MultiTaskModel from_static(const StaticBackbone<T>& backbone, std::uint64_t seed) {
    MultiTaskModel m(backbone.config, seed);
    for (std::size_t l = 0; l < backbone.units.size(); ++l) {
      const LegoUnit& src = backbone.units[l];
      const LegoUnit& dst = m.layers_[l].units[0];
      auto copy = [&](std::size_t from, std::size_t to) { m.params_[to].value = backbone.store[from].value; };
      copy(src.weight, dst.weight);
      copy(src.bias, dst.bias);
      copy(src.gamma, dst.gamma);
      copy(src.beta, dst.beta);
      copy(src.running_mean, dst.running_mean);
      copy(src.running_var, dst.running_var);
    }
    return m;
  }

  const BackboneConfig& config() const { return config_; }
  std::uint64_t seed() const { return seed_; }
  const std::vector<LegoLayer>& layers() const { return layers_; }
  ParameterStore<T>& params() { return params_; }
  const ParameterStore<T>& params() const { return params_; }
  const std::vector<TaskBinding>& tasks() const { return tasks_; }
  std::size_t num_tasks() const { return tasks_.size(); }

  std::size_t task_index(const std::string& name) const {
    for (std::size_t i = 0; i < tasks_.size(); ++i)
      if (tasks_[i].desc.name == name) return i;
    throw ValueError("unknown task '" + name + "'");
  }

  TaskController controller(std::size_t task, double temperature = 1.0, RoutingMode mode = RoutingMode::soft) const {
    TaskController c;
    c.task = tasks_.at(task).desc.name;
    c.temperature = temperature;
    c.mode = mode;
    for (std::size_t idx : tasks_[task].controller) {
      const auto& v = params_[idx].value;
      c.logits.emplace_back(v.data().begin(), v.data().end());
    }
    return c;
  }

  Path path(std::size_t task) const { return extract_path(controller(task)); }

  StaticBackbone<T> materialize(const Path& path) const {
    return materialize_static(layers_, params_, config_, path);
  }

 private:
  BackboneConfig config_;
  std::uint64_t seed_;
  ParameterStore<T> params_;
  std::vector<LegoLayer> layers_;
  std::vector<TaskBinding> tasks_;
};

template <typename T>
Path extract_path(const MultiTaskModel<T>& model, const std::string& task) {
  return model.path(model.task_index(task));
}

/// Temperature and Gumbel noise for one worker's routing in one iteration.
template <typename T>
struct RoutingPlan {
  RoutingMode mode = RoutingMode::soft;
  T temperature = T(1);
  std::vector<std::vector<T>> noise;  // L x N; empty rows mean zero noise

  static RoutingPlan sample(RoutingMode mode, double tau, std::size_t layers, std::size_t units, Rng& rng) {
    RoutingPlan p;
    p.mode = mode;
    p.temperature = static_cast<T>(tau);
    if (mode == RoutingMode::argmax) return p;
    p.noise.assign(layers, std::vector<T>(units));
    for (auto& row : p.noise)
      for (auto& g : row) g = static_cast<T>(rng.gumbel());
    return p;
  }
};

/// One worker's forward/backward for a single-task batch, split into stages
/// so that BN statistics can be exchanged between workers at every layer:
///
///   begin(); for l: stats = layer_forward(l); <reduce>; layer_normalize(l, m);
///   finish();
///
/// With BnBackward::exact and statistics shared across workers, the backward
/// pass is staged the same way, from the last layer down:
///
///   finish(false); start_backward();
///   for l = L-1..0: sums = backward_to_layer(l); <reduce>; set_layer_gradient_moments(l, g);
///   finish_backward();
template <typename T>
class WorkerPass {
 public:
  WorkerPass(const MultiTaskModel<T>& model, std::size_t task, BasicTensor<T> x, Targets<T> y, RoutingPlan<T> plan,
             BnBackward bn_backward = BnBackward::exact)
      : model_(&model),
        task_(task),
        bind_(model.params()),
        x_(std::move(x)),
        y_(std::move(y)),
        plan_(std::move(plan)),
        bn_backward_(bn_backward) {
    if (task >= model.num_tasks()) throw ValueError("WorkerPass: task index out of range");
  }

  void begin() {
    const TaskBinding& tb = model_->tasks()[task_];
    const auto& cfg = model_->config();
    if (x_.rank() != 2 || x_.cols() != tb.desc.input_dim) {
      throw DimensionError("task '" + tb.desc.name + "' expects inputs of width " + std::to_string(tb.desc.input_dim) +
                           ", got " + shape_string(x_.shape()));
    }
    h_ = tape_.constant(x_);
    if (tb.adapter_w) h_ = add_bias(tape_, matmul(tape_, h_, bind(*tb.adapter_w)), bind(*tb.adapter_b));
    weights_.assign(cfg.layers, Var{});
    selected_.assign(cfg.layers, {});
    norm_.assign(cfg.layers, {});
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      if (plan_.mode == RoutingMode::argmax) {
        const auto& logits = model_->params()[tb.controller[l]].value;
        std::vector<T> p = softmax<T>(logits.data());
        selected_[l] = {argmax_index<T>(p)};
        continue;
      }
      std::vector<T> noise = plan_.noise.empty() ? std::vector<T>(cfg.units, T(0)) : plan_.noise.at(l);
      Var u = gumbel_softmax(tape_, bind(tb.controller[l]), std::span<const T>(noise), plan_.temperature);
      if (plan_.mode == RoutingMode::hard) {
        weights_[l] = straight_through(tape_, u);
        selected_[l] = {argmax_index<T>(tape_.value(u).data())};
      } else {
        weights_[l] = u;
        selected_[l].resize(cfg.units);
        for (std::size_t k = 0; k < cfg.units; ++k) selected_[l][k] = k;
      }
    }
  }

  /// Pre-normalization activations of the units this worker evaluates at
  /// layer l; returns their local BN statistics (nullopt for skipped units).
  std::vector<std::optional<BnStats>> layer_forward(std::size_t l) {
    const LegoLayer& layer = model_->layers().at(l);
    pre_bn_.assign(layer.units.size(), Var{});
    std::vector<std::optional<BnStats>> stats(layer.units.size());
    for (std::size_t k : selected_[l]) {
      pre_bn_[k] = unit_linear(tape_, bind_, layer.units[k], h_);
      stats[k] = bn_local_stats(tape_.value(pre_bn_[k]));
    }
    return stats;
  }

  /// Normalizes with the supplied moments and mixes the unit outputs. All
  /// normalization nodes of the layer are recorded before any of their
  /// consumers, so a staged backward can stop right above them.
  void layer_normalize(std::size_t l, std::span<const std::optional<BnMoments>> moments) {
    const LegoLayer& layer = model_->layers().at(l);
    const T eps = static_cast<T>(model_->config().bn_eps);
    auto& norm = norm_.at(l);
    norm.assign(layer.units.size(), NormNode{});
    for (std::size_t k : selected_[l]) {
      if (!moments[k]) throw ValueError("missing BN moments for evaluated unit " + std::to_string(k));
      NormNode& n = norm[k];
      n.in = pre_bn_[k];
      n.moments = *moments[k];
      n.shared = std::make_shared<BnGradMoments>();
      n.out = unit_normalize(tape_, bind_, layer.units[k], pre_bn_[k], n.moments, eps, bn_backward_, n.shared);
    }
    Var out;
    for (std::size_t k : selected_[l]) {
      Var a = unit_output(tape_, layer.units[k], norm[k].out, h_);
      if (plan_.mode != RoutingMode::argmax) a = weighted(tape_, a, weights_[l], k);
      out = out.valid() ? add(tape_, out, a) : a;
    }
    h_ = out;
    layer_outputs_.push_back(h_);
  }

  /// Head, task loss scaled by the task weight, and (optionally) backward.
  T finish(bool run_backward = true) {
    const TaskBinding& tb = model_->tasks()[task_];
    logits_ = add_bias(tape_, matmul(tape_, h_, bind(tb.head_w)), bind(tb.head_b));
    Var loss;
    switch (tb.desc.head.kind) {
      case HeadKind::regressor:
        loss = mse(tape_, logits_, y_.values);
        break;
      case HeadKind::classifier:
        loss = softmax_cross_entropy(tape_, logits_, std::span<const int>(y_.labels));
        break;
      case HeadKind::per_position: {
        const std::size_t rows = tape_.value(logits_).rows() * tb.desc.head.seq_len;
        Var flat = reshape(tape_, logits_, {rows, tb.desc.head.classes});
        loss = softmax_cross_entropy(tape_, flat, std::span<const int>(y_.labels));
        break;
      }
    }
    if (tb.desc.loss_weight != 1.0) loss = scale(tape_, loss, static_cast<T>(tb.desc.loss_weight));
    loss_ = loss;
    const T value = tape_.value(loss)[0];
    if (run_backward) tape_.backward(loss);
    return value;
  }

  void start_backward() { tape_.backward_begin(loss_); }

  /// Runs the backward pass down to the normalization nodes of layer l and
  /// returns, per evaluated unit, the sums the exact BN backward needs.
  std::vector<std::optional<BnGradSums>> backward_to_layer(std::size_t l) {
    const auto& norm = norm_.at(l);
    std::size_t last = 0;
    for (std::size_t k : selected_[l]) last = std::max(last, norm[k].out.id);
    tape_.backward_until(last + 1);
    const T eps = static_cast<T>(model_->config().bn_eps);
    std::vector<std::optional<BnGradSums>> sums(norm.size());
    for (std::size_t k : selected_[l]) {
      const NormNode& n = norm[k];
      const auto& z = tape_.value(n.in);
      BasicTensor<T> xhat(z.shape());
      for (std::size_t j = 0; j < z.cols(); ++j) {
        const T mean = static_cast<T>(n.moments.mean[j]);
        const T inv_std = T(1) / std::sqrt(static_cast<T>(n.moments.var[j]) + eps);
        for (std::size_t i = 0; i < z.rows(); ++i) xhat(i, j) = (z(i, j) - mean) * inv_std;
      }
      const auto& g = tape_.grad_at(n.out.id);
      sums[k] = bn_grad_sums(xhat, g.empty() ? nullptr : g.data().data());
    }
    return sums;
  }

  /// Supplies the reduced gradient moments of layer l's evaluated units.
  void set_layer_gradient_moments(std::size_t l, std::span<const std::optional<BnGradMoments>> g) {
    auto& norm = norm_.at(l);
    for (std::size_t k : selected_[l]) {
      if (!g[k]) throw ValueError("missing BN gradient moments for evaluated unit " + std::to_string(k));
      *norm[k].shared = *g[k];
    }
  }

  void finish_backward() { tape_.backward_until(0); }

  GradientMap<T> gradients() const { return bind_.gradients(tape_); }

  std::size_t task() const { return task_; }
  const std::vector<std::vector<std::size_t>>& selected() const { return selected_; }
  const BasicTensor<T>& output() const { return tape_.value(logits_); }
  const BasicTensor<T>& layer_output(std::size_t l) const { return tape_.value(layer_outputs_.at(l)); }
  std::size_t completed_layers() const { return layer_outputs_.size(); }
  const Tape<T>& tape() const { return tape_; }

 private:
  Var bind(std::size_t idx) { return bind_(tape_, idx); }

  struct NormNode {
    Var in, out;
    BnMoments moments;
    std::shared_ptr<BnGradMoments> shared;
  };

  const MultiTaskModel<T>* model_;
  std::size_t task_;
  Tape<T> tape_;
  ParamBinder<T> bind_;
  BasicTensor<T> x_;
  Targets<T> y_;
  RoutingPlan<T> plan_;
  BnBackward bn_backward_;
  Var h_, logits_, loss_;
  std::vector<Var> weights_;
  std::vector<std::vector<std::size_t>> selected_;
  std::vector<Var> pre_bn_;
  std::vector<std::vector<NormNode>> norm_;
  std::vector<Var> layer_outputs_;
};

template <typename T>
struct ForwardResult {
  T loss = T(0);
  BasicTensor<T> output;
  std::vector<BasicTensor<T>> layer_outputs;
};

/// Single-context forward. Eval defaults: argmax routing, running BN stats.
template <typename T>
ForwardResult<T> evaluate(const MultiTaskModel<T>& model, std::size_t task, const BasicBatch<T>& batch,
                          BnSource source = BnSource::running, RoutingPlan<T> plan = RoutingPlan<T>{RoutingMode::argmax, T(1), {}}) {
  WorkerPass<T> pass(model, task, batch.x, batch.y, std::move(plan));
  pass.begin();
  const auto& layers = model.layers();
  for (std::size_t l = 0; l < layers.size(); ++l) {
    auto stats = pass.layer_forward(l);
    std::vector<std::optional<BnMoments>> m(stats.size());
    for (std::size_t k = 0; k < stats.size(); ++k) {
      if (!stats[k]) continue;
      m[k] = source == BnSource::batch ? moments_of(*stats[k]) : running_moments(model.params(), layers[l].units[k]);
    }
    pass.layer_normalize(l, m);
  }
  ForwardResult<T> r;
  r.loss = pass.finish(false);
  r.output = pass.output();
  for (std::size_t l = 0; l < layers.size(); ++l) r.layer_outputs.push_back(pass.layer_output(l));
  return r;
}

/// Eval-mode loss of a task over a whole split, in one batch.
template <typename T>
double split_loss(const MultiTaskModel<T>& model, const TaskSpec& task, Split split) {
  const std::size_t idx = model.task_index(task.name);
  return static_cast<double>(evaluate(model, idx, full_split(task, split).template cast<T>()).loss);
}

}  // namespace legoflow
