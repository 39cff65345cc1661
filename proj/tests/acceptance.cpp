// SPDX-License-Identifier: Apache-2.0
// Acceptance runner: one PASS/FAIL line per criterion. Criteria can be
// selected by name on the command line (e.g. `acceptance A1 A9`).

#include <Eigen/Dense>
#include <bit>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "support.hpp"

using namespace legoflow;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int precision = 3) {
  std::ostringstream o;
  o.precision(precision);
  o << v;
  return o.str();
}

bool bitwise_equal(const ParameterStore<float>& a, const ParameterStore<float>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].value.shape() != b[i].value.shape()) return false;
    for (std::size_t j = 0; j < a[i].value.size(); ++j) {
      if (std::bit_cast<std::uint32_t>(a[i].value[j]) != std::bit_cast<std::uint32_t>(b[i].value[j])) return false;
      if (std::bit_cast<std::uint32_t>(a[i].momentum[j]) != std::bit_cast<std::uint32_t>(b[i].momentum[j])) return false;
    }
  }
  return true;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (std::bit_cast<std::uint32_t>(a[i]) != std::bit_cast<std::uint32_t>(b[i])) return false;
  return true;
}

MultiTaskModel<float> model_for(const std::vector<TaskSpec>& tasks, const BackboneConfig& cfg, std::uint64_t seed) {
  MultiTaskModel<float> m(cfg, seed);
  for (const auto& t : tasks) m.add_task(TaskDescriptor::of(t));
  return m;
}

// ---------------------------------------------------------------------------

Outcome gradients() {
  using lftest::gradcheck;
  using lftest::random_tensor;
  Rng rng(1);
  auto reduce = [](Tape<double>& t, Var y) {
    Rng r(99);
    return mse(t, y, random_tensor(t.value(y).shape(), r));
  };
  const std::vector<double> mean{0.1, -0.3, 0.5}, var{1.2, 0.4, 2.0}, noise{0.3, -0.2, 1.1, 0.0};
  const std::vector<int> labels{0, 2, 1, 2};
  std::vector<std::pair<std::string, lftest::GradReport>> ops;
  ops.emplace_back("matmul", gradcheck({random_tensor({4, 5}, rng), random_tensor({5, 3}, rng)},
                                       [&](Tape<double>& t, const std::vector<Var>& v) {
                                         return reduce(t, matmul(t, v[0], v[1]));
                                       }));
  ops.emplace_back("add_bias+add",
                   gradcheck({random_tensor({4, 3}, rng), random_tensor({3}, rng), random_tensor({4, 3}, rng)},
                             [&](Tape<double>& t, const std::vector<Var>& v) {
                               return reduce(t, add(t, add_bias(t, v[0], v[1]), v[2]));
                             }));
  ops.emplace_back("relu", gradcheck({random_tensor({6, 4}, rng)}, [&](Tape<double>& t, const std::vector<Var>& v) {
                     return reduce(t, relu(t, v[0]));
                   }));
  ops.emplace_back("scale+reshape",
                   gradcheck({random_tensor({3, 4}, rng)}, [&](Tape<double>& t, const std::vector<Var>& v) {
                     return reduce(t, reshape(t, scale(t, v[0], 2.5), {6, 2}));
                   }));
  ops.emplace_back("weighted", gradcheck({random_tensor({3, 4}, rng), random_tensor({3}, rng)},
                                         [&](Tape<double>& t, const std::vector<Var>& v) {
                                           return reduce(t, weighted(t, v[0], v[1], 1));
                                         }));
  ops.emplace_back("batchnorm",
                   gradcheck({random_tensor({5, 3}, rng), random_tensor({3}, rng), random_tensor({3}, rng)},
                             [&](Tape<double>& t, const std::vector<Var>& v) {
                               return reduce(t, bn_apply<double>(t, v[0], mean, var, v[1], v[2], 1e-5));
                             }));
  const auto bn_target = random_tensor({5, 3}, rng);
  ops.emplace_back("batchnorm batch statistics",
                   gradcheck({random_tensor({5, 3}, rng, 2.0), random_tensor({3}, rng), random_tensor({3}, rng)},
                             [&](Tape<double>& t, const std::vector<Var>& v) {
                               const BnMoments m = moments_of(bn_local_stats(t.value(v[0])));
                               return mse(t, bn_apply<double>(t, v[0], m.mean, m.var, v[1], v[2], 1e-5, BnBackward::exact),
                                          bn_target);
                             }, 1e-5));
  for (double tau : {5.0, 1.0, 0.3})
    ops.emplace_back("gumbel_softmax tau=" + fmt(tau),
                     gradcheck({random_tensor({4}, rng)}, [&](Tape<double>& t, const std::vector<Var>& v) {
                       return reduce(t, gumbel_softmax<double>(t, v[0], noise, tau));
                     }));
  ops.emplace_back("cross_entropy",
                   gradcheck({random_tensor({4, 3}, rng)}, [&](Tape<double>& t, const std::vector<Var>& v) {
                     return softmax_cross_entropy<double>(t, v[0], labels);
                   }));
  ops.emplace_back("mse", gradcheck({random_tensor({4, 2}, rng)},
                                    [&](Tape<double>& t, const std::vector<Var>& v) { return reduce(t, v[0]); }));
  for (int k = 0; k < lftest::kToyNetworks; ++k)
    for (BnBackward mode : {BnBackward::exact, BnBackward::constant}) {
      const auto r = lftest::toy_network_gradcheck(k, mode);
      if (r.params > 5000) return {false, "toy network " + std::to_string(k) + " has " + std::to_string(r.params) + " params"};
      ops.emplace_back("network" + std::to_string(k) + "/" + to_string(mode), r.report);
    }
  double worst = 0;
  std::string worst_name;
  std::size_t checked = 0;
  for (const auto& [name, r] : ops) {
    checked += r.checked;
    if (r.checked == 0) return {false, name + ": no coordinate checked"};
    if (r.max_rel_error >= worst) {
      worst = r.max_rel_error;
      worst_name = name;
    }
  }
  return {worst < 1e-4, std::to_string(ops.size()) + " checks, " + std::to_string(checked) +
                            " coordinates, max rel err " + fmt(worst) + " (" + worst_name + ")"};
}

Outcome determinism() {
  const auto tasks = make_shape_suite(ShapeSuiteOptions{});
  BackboneConfig cfg;
  cfg.dim = 16;
  cfg.layers = 3;
  SimtConfig c;
  c.num_workers = 4;
  c.total_steps = 100;
  c.warmup_steps = 5;
  c.base_lr = 0.05;
  c.seed = 21;
  auto run = [&](Execution e) {
    auto m = model_for(tasks, cfg, 3);
    SimtConfig cc = c;
    cc.execution = e;
    SimtEngine engine(m, tasks, cc);
    engine.run(c.total_steps);
    return m;
  };
  const auto par = run(Execution::parallel);
  const auto seq = run(Execution::sequential);
  const auto again = run(Execution::parallel);
  const bool a = bitwise_equal(par.params(), seq.params()), b = bitwise_equal(par.params(), again.params());
  return {a && b, std::string("parallel==sequential ") + (a ? "yes" : "no") + ", repeat identical " + (b ? "yes" : "no")};
}

Outcome syncbn_exactness() {
  Rng rng(17);
  double stat_err = 0, fuse_err = 0;
  std::size_t distinguished = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t workers = 2 + rng.below(5), f = 1 + rng.below(6);
    std::vector<BnStats> local;
    std::vector<std::size_t> sizes;
    BasicTensor<double> all;
    for (std::size_t w = 0; w < workers; ++w) {
      // Unequal shares: each worker gets a distinct size.
      const std::size_t m = 1 + 3 * w + rng.below(3);
      auto x = lftest::random_tensor({m, f}, rng, 3.0);
      for (auto& v : x.data()) v += 2.0;
      local.push_back(bn_local_stats(x));
      sizes.push_back(m);
      all = w == 0 ? x : concat_rows(all, x);
    }
    const BnMoments got = syncbn_reduce(local);
    for (std::size_t j = 0; j < f; ++j) {
      double mean = 0, var = 0;
      for (std::size_t i = 0; i < all.rows(); ++i) mean += all(i, j);
      mean /= static_cast<double>(all.rows());
      for (std::size_t i = 0; i < all.rows(); ++i) var += (all(i, j) - mean) * (all(i, j) - mean);
      var /= static_cast<double>(all.rows());
      stat_err = std::max({stat_err, std::abs(got.mean[j] - mean), std::abs(got.var[j] - var)});
    }

    std::vector<GradientMap<double>> g(workers);
    for (std::size_t w = 0; w < workers; ++w) g[w][0] = lftest::random_tensor({4}, rng);
    const auto fused = fuse_gradients<double>(g).entries.at(0).grad;
    double total = 0;
    for (auto s : sizes) total += static_cast<double>(s);
    bool differs = false;
    for (std::size_t i = 0; i < 4; ++i) {
      double task_avg = 0, sample_avg = 0;
      for (std::size_t w = 0; w < workers; ++w) {
        task_avg += g[w][0][i] / static_cast<double>(workers);
        sample_avg += g[w][0][i] * static_cast<double>(sizes[w]) / total;
      }
      fuse_err = std::max(fuse_err, std::abs(fused[i] - task_avg));
      differs |= std::abs(fused[i] - sample_avg) > 1e-9;
    }
    distinguished += differs ? 1 : 0;
  }
  return {stat_err <= 1e-6 && fuse_err <= 1e-7 && distinguished == 50,
          "stat err " + fmt(stat_err) + ", fusion err " + fmt(fuse_err) + ", differs from sample mean in " +
              std::to_string(distinguished) + "/50"};
}

// Pre-trained conflict-suite models, shared by the grouping and transfer
// criteria.
struct Pretrained {
  std::uint64_t seed = 0;
  ExperimentConfig config;
  std::vector<TaskSpec> suite;
  MultiTaskModel<float> model{BackboneConfig{}, 0};
};

std::vector<Pretrained> pretrained_models;

Pretrained pretrain(std::uint64_t seed) {
  Pretrained p;
  p.seed = seed;
  p.config.suite_seed = seed;
  p.config.simt.seed = seed;
  p.config.simt.execution = Execution::sequential;  // one core is enough; results are identical
  p.suite = p.config.make_suite();
  p.model = model_for(p.suite, p.config.model, seed);
  SimtEngine engine(p.model, p.suite, p.config.simt);
  engine.run(p.config.simt.total_steps);
  return p;
}

Outcome grouping() {
  const ExperimentConfig defaults;
  if (defaults.model.layers != 4 || defaults.model.units != 2 || defaults.simt.total_steps != 3000 ||
      defaults.simt.tau_start != 5.0 || defaults.simt.tau_end != 0.01 || defaults.simt.decay_end_fraction != 0.9 ||
      defaults.conflict.num_groups != 2 || defaults.conflict.tasks_per_group != 2)
    return {false, "default experiment does not match the required protocol"};
  std::size_t grouped = 0, stem = 0;
  std::ostringstream paths;
  pretrained_models.clear();
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    Pretrained p = pretrain(seed);
    std::vector<Path> ps;
    for (std::size_t t = 0; t < 4; ++t) ps.push_back(p.model.path(t));
    const std::size_t w0 = path_agreement(ps[0], ps[1]), w1 = path_agreement(ps[2], ps[3]);
    const double cross =
        (path_agreement(ps[0], ps[2]) + path_agreement(ps[0], ps[3]) + path_agreement(ps[1], ps[2]) +
         path_agreement(ps[1], ps[3])) /
        4.0;
    grouped += (w0 >= 3 && w1 >= 3 && cross <= static_cast<double>(std::min(w0, w1))) ? 1 : 0;
    bool shared = true;
    for (const auto& q : ps) shared &= q.selections[0] == ps[0].selections[0];
    stem += shared ? 1 : 0;
    paths << (seed > 1 ? " " : "");
    for (std::size_t t = 0; t < 4; ++t) {
      for (auto s : ps[t].selections) paths << s;
      paths << (t < 3 ? "/" : "");
    }
    pretrained_models.push_back(std::move(p));
  }
  return {grouped >= 8 && stem >= 6, "grouped " + std::to_string(grouped) + "/10, stem shared " +
                                         std::to_string(stem) + "/10; paths " + paths.str()};
}

Outcome baselines() {
  // Update intervals of a weight-0.1 task under per_batch sampling.
  auto tasks = lftest::small_conflict_suite(2, 64, 32);
  auto model = model_for(tasks, BackboneConfig{}, 1);
  SimtConfig c;
  c.sampling = SamplingMode::per_batch;
  c.task_sampling_weights = {0.1, 0.3, 0.3, 0.3};
  c.total_steps = 1000000;
  SimtEngine engine(model, tasks, c);
  std::map<std::size_t, double> hist;
  std::size_t last = 0, intervals = 0;
  bool seen = false;
  for (std::size_t s = 0; s < c.total_steps; ++s) {
    if (engine.assignment(s)[0] != 0) continue;
    if (seen) {
      hist[s - last] += 1;
      ++intervals;
    }
    seen = true;
    last = s;
  }
  const double p = 0.1;
  double worst = 0, mean = 0;
  for (const auto& [k, n] : hist) mean += static_cast<double>(k) * n / static_cast<double>(intervals);
  for (std::size_t k = 1; k <= 60; ++k) {
    const double expected = p * std::pow(1 - p, static_cast<double>(k - 1));
    const double got = hist.contains(k) ? hist[k] / static_cast<double>(intervals) : 0.0;
    worst = std::max(worst, std::abs(got - expected) / p);
  }
  const double mean_err = std::abs(mean - 1 / p) * p;
  const bool geometric = worst <= 0.05 && mean_err <= 0.05;

  // Cross-worker BN-mean deviation on the shifted-domain suite.
  ConflictSuiteOptions o;
  o.shift = 2.0;
  o.train_size = 512;
  o.val_size = 64;
  const auto shifted = make_conflict_suite(o);
  std::map<bool, double> deviation;
  for (bool sync : {true, false}) {
    auto m = model_for(shifted, BackboneConfig{}, 2);
    SimtConfig sc;
    sc.syncbn = sync;
    sc.total_steps = 100;
    sc.warmup_steps = 5;
    sc.execution = Execution::sequential;
    SimtEngine e(m, shifted, sc);
    e.run(sc.total_steps, [&](const IterationMetrics& it) { deviation[sync] += it.bn_mean_deviation / 100.0; });
  }
  const bool separated = deviation[false] > 0 && deviation[false] >= 10 * deviation[true];
  return {geometric && separated, "interval pmf max err " + fmt(worst * 100) + "% of p, mean interval " +
                                      fmt(mean) + " (expect 10); BN-mean deviation off " + fmt(deviation[false]) +
                                      " vs on " + fmt(deviation[true])};
}

Outcome straight_through_checks() {
  Rng rng(3);
  bool one_hot = true;
  for (int i = 0; i < 1000; ++i) {
    const std::vector<double> logits{rng.normal(), rng.normal(), rng.normal(), rng.normal()};
    const auto h = straight_through<double>(gumbel_softmax<double>(logits, 0.5, rng));
    one_hot &= std::count(h.begin(), h.end(), 1.0) == 1 && std::count(h.begin(), h.end(), 0.0) == 3;
  }
  double grad_err = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 2 + rng.below(4);
    auto logits = lftest::random_tensor({n}, rng);
    auto coeff = lftest::random_tensor({n, 1}, rng);
    std::vector<double> noise(n);
    for (auto& g : noise) g = rng.gumbel();
    auto grad = [&](bool hard) {
      Tape<double> t;
      Var a = t.variable(logits);
      Var u = gumbel_softmax<double>(t, a, noise, 0.5);
      Var w = hard ? straight_through(t, u) : u;
      Var loss = matmul(t, reshape(t, w, {1, n}), t.constant(coeff));
      t.backward(reshape(t, loss, {1}));
      return t.grad(a);
    };
    const auto gh = grad(true), gs = grad(false);
    for (std::size_t k = 0; k < n; ++k) grad_err = std::max(grad_err, std::abs(gh[k] - gs[k]));
  }
  const std::vector<double> logits{0.3, -0.5, 1.2, 0.0};
  const auto p = softmax<double>(logits);
  Rng draw_rng(stream_key(7, fnv1a("categorical")));
  std::vector<double> freq(4, 0.0);
  const int draws = 100000;
  for (int i = 0; i < draws; ++i) freq[argmax_index<double>(gumbel_softmax<double>(logits, 0.01, draw_rng))] += 1.0 / draws;
  double freq_err = 0;
  for (std::size_t k = 0; k < 4; ++k) freq_err = std::max(freq_err, std::abs(freq[k] - p[k]));
  return {one_hot && grad_err <= 1e-6 && freq_err <= 0.01, std::string("one-hot ") + (one_hot ? "yes" : "no") +
                                                             ", grad err " + fmt(grad_err) + ", sampling err " +
                                                             fmt(freq_err)};
}

Outcome transfer() {
  if (pretrained_models.size() != 10) {
    pretrained_models.clear();
    for (std::uint64_t seed = 1; seed <= 10; ++seed) pretrained_models.push_back(pretrain(seed));
  }
  std::size_t fixed_ok = 0, dynamic_ok = 0;
  std::ostringstream detail;
  for (const auto& p : pretrained_models) {
    const std::size_t related = p.model.task_index("g0t0"), conflicting = p.model.task_index("g1t0");
    ExperimentConfig cfg = p.config;
    cfg.finetune.shift_seed = 1000 + p.seed;
    const TaskSpec task = cfg.make_finetune_task(p.suite);
    const FinetuneOptions opt = FinetuneOptions::from(cfg.finetune_simt());
    const auto a = fixed_path_finetune(p.model, p.model.path(related), task, opt);
    const auto b = fixed_path_finetune(p.model, p.model.path(conflicting), task, opt);
    const auto d = dynamic_finetune(p.model, task, opt);
    const std::size_t agree = path_agreement(d.path, p.model.path(related));
    fixed_ok += a.val_loss <= 0.9 * b.val_loss ? 1 : 0;
    dynamic_ok += agree + 1 >= p.model.config().layers ? 1 : 0;
    detail << (p.seed > 1 ? " " : "") << fmt(a.val_loss / b.val_loss, 2) << ":" << agree;
  }
  return {fixed_ok >= 8 && dynamic_ok >= 8, "related path better by >=10% in " + std::to_string(fixed_ok) +
                                                "/10, dynamic recovers it in " + std::to_string(dynamic_ok) +
                                                "/10; loss ratio:agreement " + detail.str()};
}

Outcome static_equivalence() {
  auto tasks = lftest::small_conflict_suite(6, 256, 100);
  BackboneConfig cfg;
  cfg.stem_width = 48;
  cfg.residual = true;
  auto model = model_for(tasks, cfg, 6);
  Rng rng(60);
  Batch probe = full_split(tasks[0], Split::val);
  for (auto& v : probe.x.data()) v = static_cast<float>(rng.normal());
  auto gap = [&](std::size_t task) {
    const auto backbone = model.materialize(model.path(task));
    const auto dynamic = evaluate(model, task, probe);
    return static_cast<double>(max_abs_diff(dynamic.layer_outputs.back(), backbone.forward(probe.x)));
  };
  double before = 0, after = 0;
  for (std::size_t t = 0; t < 4; ++t) before = std::max(before, gap(t));
  SimtConfig c;
  c.total_steps = 60;
  c.warmup_steps = 5;
  c.execution = Execution::sequential;
  SimtEngine e(model, tasks, c);
  e.run(c.total_steps);
  for (std::size_t t = 0; t < 4; ++t) after = std::max(after, gap(t));
  return {probe.x.rows() == 100 && before <= 1e-6 && after <= 1e-6,
          "max diff before " + fmt(before) + ", after " + fmt(after) + " on " + std::to_string(probe.x.rows()) + " inputs"};
}

Outcome cka_checks() {
  using Mat = Eigen::MatrixXd;
  Rng rng(8);
  auto random_matrix = [&](Eigen::Index n, Eigen::Index p) {
    Mat m(n, p);
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < p; ++j) m(i, j) = rng.normal();
    return m;
  };
  auto features = [](const Mat& m, std::string label = "x") {
    std::vector<double> data;
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) data.push_back(m(i, j));
    return FeatureMatrix(std::move(label), static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols()),
                         std::move(data));
  };
  const Mat x = random_matrix(60, 7), y = random_matrix(60, 5);
  const double self_err = std::abs(cka(features(x), features(x)) - 1.0);
  Eigen::HouseholderQR<Mat> qr(random_matrix(7, 7));
  const Mat q = qr.householderQ();
  const double base = cka(features(x), features(y));
  const double inv_err = std::max(std::abs(cka(features(x * q), features(y)) - base),
                                  std::abs(cka(features(3.7 * x), features(0.2 * y)) - base));

  const std::size_t n = 256, m = 10;
  const Mat shared = random_matrix(n * m, 8);
  std::vector<Mat> layers{shared, shared * random_matrix(8, 8) + 0.5 * random_matrix(n * m, 8), random_matrix(n * m, 5)};
  std::vector<std::vector<FeatureMatrix>> mb(m);
  for (std::size_t b = 0; b < m; ++b)
    for (std::size_t i = 0; i < layers.size(); ++i)
      mb[b].push_back(features(layers[i].middleRows(static_cast<Eigen::Index>(b * n), n), "l" + std::to_string(i)));
  const SimilarityMatrix s = batched_cka(mb);
  double batched_err = 0;
  for (std::size_t i = 0; i < layers.size(); ++i)
    for (std::size_t j = 0; j < layers.size(); ++j)
      batched_err = std::max(batched_err, std::abs(s(i, j) - cka(features(layers[i]), features(layers[j]))));

  // 2x2 kernels: with K = L = I the centering matrix is idempotent and
  // tr(KHLH) = tr(H) = 1; the kernel pair that gives exactly 0.5 is
  // K = I, L = diag(1, 0).
  const GramMatrix identity{2, {1, 0, 0, 1}}, corner{2, {1, 0, 0, 0}};
  const double hsic_ii = hsic(identity, identity), hsic_half = hsic(identity, corner);
  const bool hand = hsic_ii == 1.0 && hsic_half == 0.5;
  return {self_err <= 1e-6 && inv_err <= 1e-6 && batched_err < 0.05 && hand,
          "self " + fmt(self_err) + ", invariance " + fmt(inv_err) + ", batched vs exact " + fmt(batched_err) +
              ", hsic(I,I) = " + fmt(hsic_ii, 17) + ", hsic(I,diag(1,0)) = " + fmt(hsic_half, 17)};
}

Outcome persistence() {
  const auto tasks = make_shape_suite(ShapeSuiteOptions{});
  BackboneConfig cfg;
  cfg.dim = 16;
  cfg.layers = 3;
  SimtConfig c;
  c.num_workers = 3;
  c.total_steps = 40;
  c.warmup_steps = 3;
  c.base_lr = 0.05;
  c.seed = 12;

  auto full = model_for(tasks, cfg, 8);
  SimtEngine straight(full, tasks, c);
  straight.run(c.total_steps);

  auto part = model_for(tasks, cfg, 8);
  SimtEngine first(part, tasks, c);
  first.run(17);
  const auto file = std::filesystem::temp_directory_path() / ("legoflow_acceptance_" + std::to_string(::getpid()) + ".bin");
  save_checkpoint(file.string(), part, first.step(), c.seed);
  Checkpoint ck = load_checkpoint(file.string());
  std::filesystem::remove(file);

  bool forward_equal = true;
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    const Batch b = full_split(tasks[t], Split::val);
    forward_equal &= bitwise_equal(evaluate(part, t, b).output, evaluate(ck.model, t, b).output);
  }
  SimtEngine second(ck.model, tasks, c);
  second.set_step(ck.step);
  second.run(c.total_steps);
  const bool resumed = bitwise_equal(ck.model.params(), full.params());
  return {forward_equal && resumed, std::string("forward bitwise ") + (forward_equal ? "yes" : "no") +
                                        ", resumed == uninterrupted " + (resumed ? "yes" : "no")};
}

struct Criterion {
  const char* id;
  double limit_seconds;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> criteria{
      {"A1", 30, gradients},          {"A2", 60, determinism},        {"A3", 10, syncbn_exactness},
      {"A4", 600, grouping},          {"A5", 180, baselines},         {"A6", 30, straight_through_checks},
      {"A7", 600, transfer},          {"A8", 10, static_equivalence}, {"A9", 60, cka_checks},
      {"A10", 60, persistence},
  };
  std::set<std::string> only(argv + 1, argv + argc);
  int failed = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && !only.contains(c.id)) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool in_time = secs <= c.limit_seconds;
    const bool pass = o.pass && in_time;
    failed += pass ? 0 : 1;
    std::cout << c.id << " " << (pass ? "PASS" : "FAIL") << "  " << o.detail << " [" << fmt(secs) << " s / "
              << c.limit_seconds << " s" << (in_time ? "" : ", over time") << "]" << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
