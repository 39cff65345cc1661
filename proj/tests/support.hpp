// SPDX-License-Identifier: Apache-2.0
#pragma once

// Helpers shared by the unit tests and the acceptance runner: central
// finite-difference gradient checks and small model fixtures.

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <vector>

#include "legoflow/legoflow.hpp"

namespace lftest {

using namespace legoflow;

struct GradReport {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;  // coordinates whose perturbation crossed a kink
};

inline double rel_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

using Builder = std::function<Var(Tape<double>&, const std::vector<Var>&)>;

/// Compares d(scalar)/d(inputs) against central differences with step h.
inline GradReport gradcheck(const std::vector<BasicTensor<double>>& inputs, const Builder& build, double h = 1e-3,
                            double floor = 1e-3) {
  auto evaluate = [&](const std::vector<BasicTensor<double>>& in, std::uint64_t* kinks) {
    Tape<double> tape;
    std::vector<Var> leaves;
    for (const auto& t : in) leaves.push_back(tape.variable(t));
    Var out = build(tape, leaves);
    if (kinks) *kinks = tape.kink_signature();
    return tape.value(out)[0];
  };
  Tape<double> tape;
  std::vector<Var> leaves;
  for (const auto& t : inputs) leaves.push_back(tape.variable(t));
  Var out = build(tape, leaves);
  const std::uint64_t base_kinks = tape.kink_signature();
  tape.backward(out);

  GradReport r;
  std::vector<BasicTensor<double>> probe = inputs;
  for (std::size_t a = 0; a < inputs.size(); ++a) {
    const auto analytic = tape.grad(leaves[a]);
    for (std::size_t i = 0; i < inputs[a].size(); ++i) {
      std::uint64_t kp = 0, km = 0;
      probe[a][i] = inputs[a][i] + h;
      const double fp = evaluate(probe, &kp);
      probe[a][i] = inputs[a][i] - h;
      const double fm = evaluate(probe, &km);
      probe[a][i] = inputs[a][i];
      if (kp != base_kinks || km != base_kinks) {
        ++r.skipped;
        continue;
      }
      r.max_rel_error = std::max(r.max_rel_error, rel_error(analytic[i], (fp - fm) / (2 * h), floor));
      ++r.checked;
    }
  }
  return r;
}

using Moments = std::vector<std::vector<std::optional<BnMoments>>>;

struct PassResult {
  double loss = 0.0;
  GradientMap<double> grads;
  std::uint64_t kinks = 0;
};

/// One training-mode pass. With record = true the per-layer batch moments are
/// stored into `moments`; otherwise the stored moments are reused, which
/// freezes BN statistics the way the constant-statistics backward treats them.
inline PassResult run_pass(const MultiTaskModel<double>& model, std::size_t task, const BasicBatch<double>& batch,
                           const RoutingPlan<double>& plan, Moments& moments, bool record, bool backward,
                           BnBackward mode = BnBackward::exact) {
  WorkerPass<double> pass(model, task, batch.x, batch.y, plan, mode);
  pass.begin();
  if (record) moments.assign(model.config().layers, {});
  for (std::size_t l = 0; l < model.config().layers; ++l) {
    auto stats = pass.layer_forward(l);
    if (record) {
      moments[l].assign(stats.size(), std::nullopt);
      for (std::size_t k = 0; k < stats.size(); ++k)
        if (stats[k]) moments[l][k] = moments_of(*stats[k]);
    }
    pass.layer_normalize(l, moments[l]);
  }
  PassResult r;
  r.loss = pass.finish(backward);
  r.kinks = pass.tape().kink_signature();
  if (backward) r.grads = pass.gradients();
  return r;
}

/// Finite-difference check of every trainable parameter of a model for one
/// task, batch and routing plan. With the exact BN backward the perturbed
/// passes recompute batch statistics; with the constant one they reuse the
/// unperturbed statistics.
inline GradReport model_gradcheck(MultiTaskModel<double>& model, std::size_t task, const BasicBatch<double>& batch,
                                  const RoutingPlan<double>& plan, BnBackward mode = BnBackward::exact,
                                  double h = 1e-5, double floor = 1e-3) {
  Moments moments;
  const PassResult base = run_pass(model, task, batch, plan, moments, true, true, mode);
  const bool record = mode == BnBackward::exact;
  GradReport r;
  for (const auto& [idx, g] : base.grads) {
    auto& value = model.params()[idx].value;
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double v = value[i];
      value[i] = v + h;
      const PassResult p = run_pass(model, task, batch, plan, moments, record, false, mode);
      value[i] = v - h;
      const PassResult m = run_pass(model, task, batch, plan, moments, record, false, mode);
      value[i] = v;
      if (p.kinks != base.kinks || m.kinks != base.kinks) {
        ++r.skipped;
        continue;
      }
      r.max_rel_error = std::max(r.max_rel_error, rel_error(g[i], (p.loss - m.loss) / (2 * h), floor));
      ++r.checked;
    }
  }
  return r;
}

inline BasicTensor<double> random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  BasicTensor<double> t(std::move(shape));
  for (auto& v : t.data()) v = scale * rng.normal();
  return t;
}

inline std::size_t trainable_scalars(const ParameterStore<double>& store) {
  std::size_t n = 0;
  for (const auto& p : store)
    if (p.trainable) n += p.value.size();
  return n;
}

struct ToyNetworkReport {
  GradReport report;
  std::size_t params = 0;
};

inline constexpr int kToyNetworks = 5;

/// Gradient check of one of five small networks: plain, residual, input
/// adapter with a wider stem, three-unit classifier, per-position head.
inline ToyNetworkReport toy_network_gradcheck(int which, BnBackward mode = BnBackward::exact, double h = 1e-5) {
  BackboneConfig cfg;
  cfg.dim = 6;
  cfg.layers = 3;
  cfg.units = 2;
  HeadSpec head;
  head.kind = HeadKind::regressor;
  head.outputs = 3;
  bool adapter = false;
  switch (which) {
    case 1: cfg.residual = true; break;
    case 2: adapter = true; cfg.stem_width = 8; break;
    case 3: head = HeadSpec{HeadKind::classifier, 4, 0, 1}; cfg.units = 3; break;
    case 4: head = HeadSpec{HeadKind::per_position, 3, 0, 2}; cfg.layers = 2; break;
    default: break;
  }
  MultiTaskModel<double> model(cfg, 100 + static_cast<std::uint64_t>(which));
  TaskDescriptor d;
  d.name = "t";
  d.input_dim = adapter ? 5 : cfg.layer_in(0);
  d.head = head;
  d.use_adapter = adapter;
  d.loss_weight = which == 0 ? 0.7 : 1.0;
  model.add_task(d);
  Rng rng(200 + static_cast<std::uint64_t>(which));
  // Controllers start at zero; move them so routing weights are not uniform.
  for (std::size_t idx : model.tasks()[0].controller)
    for (auto& v : model.params()[idx].value.data()) v = rng.normal();

  BasicBatch<double> b;
  const std::size_t m = 8;
  b.x = random_tensor({m, d.input_dim}, rng);
  if (head.classification()) {
    for (std::size_t i = 0; i < m * head.seq_len; ++i) b.y.labels.push_back(static_cast<int>(rng.below(head.classes)));
  } else {
    b.y.values = random_tensor({m, head.outputs}, rng);
  }
  auto plan = RoutingPlan<double>::sample(RoutingMode::soft, 0.8, cfg.layers, cfg.units, rng);
  return {model_gradcheck(model, 0, b, plan, mode, h), trainable_scalars(model.params())};
}

/// Small default conflict suite used across tests.
inline std::vector<TaskSpec> small_conflict_suite(std::uint64_t seed, std::size_t train = 256, std::size_t val = 64) {
  ConflictSuiteOptions o;
  o.seed = seed;
  o.train_size = train;
  o.val_size = val;
  return make_conflict_suite(o);
}

}  // namespace lftest
