// SPDX-License-Identifier: Apache-2.0
#pragma once

// Synthetic multi-task, multi-domain suites.
//
// Every task draws latent inputs z ~ N(0, I), observes them through a
// task-specific domain shift x = scale * z + offset, and labels them through
// a latent map A_g shared by all tasks of the same group g:
//   regressor     y = A_g x + noise
//   classifier    y = argmax(A_g x + noise)
//   per-position  y_p = argmax over classes of (A_g x + noise) block p

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include "legoflow/error.hpp"
#include "legoflow/rng.hpp"
#include "legoflow/tensor.hpp"

namespace legoflow {

enum class HeadKind { classifier, regressor, per_position };

inline const char* to_string(HeadKind k) {
  switch (k) {
    case HeadKind::classifier: return "classifier";
    case HeadKind::regressor: return "regressor";
    case HeadKind::per_position: return "per_position";
  }
  return "?";
}

inline HeadKind head_kind_from_string(const std::string& s) {
  if (s == "classifier") return HeadKind::classifier;
  if (s == "regressor") return HeadKind::regressor;
  if (s == "per_position") return HeadKind::per_position;
  throw ValueError("unknown head kind '" + s + "'");
}

struct HeadSpec {
  HeadKind kind = HeadKind::regressor;
  std::size_t classes = 0;   // classifier / per_position
  std::size_t outputs = 0;   // regressor
  std::size_t seq_len = 1;   // per_position

  std::size_t output_dim() const {
    switch (kind) {
      case HeadKind::classifier: return classes;
      case HeadKind::regressor: return outputs;
      case HeadKind::per_position: return seq_len * classes;
    }
    return 0;
  }
  bool classification() const { return kind != HeadKind::regressor; }
  /// Rows of the latent map needed to produce labels.
  std::size_t map_rows() const { return output_dim(); }
};

enum class Split { train, val };

struct DomainShift {
  std::vector<double> scale;
  std::vector<double> offset;
};

/// Labels (classification, one int per position) or regression targets.
template <typename T>
struct Targets {
  std::vector<int> labels;
  BasicTensor<T> values;

  template <typename U>
  Targets<U> cast() const {
    return Targets<U>{labels, values.empty() ? BasicTensor<U>() : values.template cast<U>()};
  }
};

struct SyntheticDataset {
  std::uint64_t seed = 0;
  std::size_t input_dim = 0;
  std::size_t group = 0;
  std::size_t map_rows = 0;
  std::vector<double> latent_map;  // A_g, map_rows x input_dim, row-major
  DomainShift shift;
  double noise = 0.0;
  std::size_t train_size = 0;
  std::size_t val_size = 0;

  // Materialized pool: train rows first, then val rows.
  Tensor inputs;
  std::vector<int> labels;  // per sample (classifier) or per sample*position
  Tensor values;            // regression targets

  std::size_t size() const { return train_size + val_size; }
  std::size_t split_begin(Split s) const { return s == Split::train ? 0 : train_size; }
  std::size_t split_size(Split s) const { return s == Split::train ? train_size : val_size; }
};

struct TaskSpec {
  std::string name;
  SyntheticDataset dataset;
  HeadSpec head;
  /// Task-owned learned projection from input_dim into the backbone width.
  bool use_adapter = false;
  double loss_weight = 1.0;
  double sampling_weight = 1.0;
  std::size_t batch_size = 32;
};

template <typename T>
struct BasicBatch {
  BasicTensor<T> x;
  Targets<T> y;
  std::vector<std::size_t> indices;

  template <typename U>
  BasicBatch<U> cast() const {
    return BasicBatch<U>{x.template cast<U>(), y.template cast<U>(), indices};
  }
};
using Batch = BasicBatch<float>;

/// Fills inputs and labels of ds from its seed, shift, latent map and noise.
inline void generate(SyntheticDataset& ds, const HeadSpec& head) {
  if (ds.latent_map.size() != ds.map_rows * ds.input_dim) throw DimensionError("latent map size mismatch");
  if (ds.map_rows != head.map_rows()) throw DimensionError("latent map rows do not match head output");
  if (ds.shift.scale.size() != ds.input_dim || ds.shift.offset.size() != ds.input_dim) {
    throw DimensionError("domain shift size mismatch");
  }
  const std::size_t n = ds.size(), d = ds.input_dim, r = ds.map_rows;
  Rng rng(stream_key(ds.seed, kDataStream));
  ds.inputs = Tensor({n, d});
  std::vector<double> x(d), y(r);
  if (head.classification()) {
    ds.labels.assign(n * (head.kind == HeadKind::per_position ? head.seq_len : 1), 0);
    ds.values = Tensor();
  } else {
    ds.labels.clear();
    ds.values = Tensor({n, r});
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      x[j] = ds.shift.scale[j] * rng.normal() + ds.shift.offset[j];
      ds.inputs(i, j) = static_cast<float>(x[j]);
    }
    for (std::size_t k = 0; k < r; ++k) {
      double acc = 0.0;
      for (std::size_t j = 0; j < d; ++j) acc += ds.latent_map[k * d + j] * static_cast<double>(ds.inputs(i, j));
      y[k] = ds.noise > 0.0 ? acc + ds.noise * rng.normal() : acc;
    }
    switch (head.kind) {
      case HeadKind::regressor:
        for (std::size_t k = 0; k < r; ++k) ds.values(i, k) = static_cast<float>(y[k]);
        break;
      case HeadKind::classifier:
        ds.labels[i] = static_cast<int>(std::max_element(y.begin(), y.end()) - y.begin());
        break;
      case HeadKind::per_position:
        for (std::size_t p = 0; p < head.seq_len; ++p) {
          auto first = y.begin() + static_cast<std::ptrdiff_t>(p * head.classes);
          ds.labels[i * head.seq_len + p] =
              static_cast<int>(std::max_element(first, first + static_cast<std::ptrdiff_t>(head.classes)) - first);
        }
        break;
    }
  }
}

/// Gathers rows of the pool into a batch.
inline Batch gather(const TaskSpec& task, std::span<const std::size_t> indices) {
  const SyntheticDataset& ds = task.dataset;
  const std::size_t d = ds.input_dim;
  Batch b;
  b.indices.assign(indices.begin(), indices.end());
  b.x = Tensor({indices.size(), d});
  for (std::size_t i = 0; i < indices.size(); ++i)
    for (std::size_t j = 0; j < d; ++j) b.x(i, j) = ds.inputs(indices[i], j);
  if (task.head.classification()) {
    const std::size_t per = task.head.kind == HeadKind::per_position ? task.head.seq_len : 1;
    b.y.labels.reserve(indices.size() * per);
    for (std::size_t idx : indices)
      for (std::size_t p = 0; p < per; ++p) b.y.labels.push_back(ds.labels[idx * per + p]);
  } else {
    const std::size_t r = ds.map_rows;
    b.y.values = Tensor({indices.size(), r});
    for (std::size_t i = 0; i < indices.size(); ++i)
      for (std::size_t k = 0; k < r; ++k) b.y.values(i, k) = ds.values(indices[i], k);
  }
  return b;
}

/// Random batch of task.batch_size distinct samples from one split.
inline Batch next_batch(const TaskSpec& task, Split split, Rng& rng) {
  const std::size_t n = task.dataset.split_size(split);
  const std::size_t bs = task.batch_size;
  if (bs == 0 || bs > n) throw ValueError("batch size " + std::to_string(bs) + " exceeds split of " + std::to_string(n));
  std::vector<std::size_t> pool(n);
  std::iota(pool.begin(), pool.end(), task.dataset.split_begin(split));
  for (std::size_t i = 0; i < bs; ++i) std::swap(pool[i], pool[i + rng.below(n - i)]);
  pool.resize(bs);
  return gather(task, pool);
}

/// Whole split, in index order.
inline Batch full_split(const TaskSpec& task, Split split) {
  std::vector<std::size_t> idx(task.dataset.split_size(split));
  std::iota(idx.begin(), idx.end(), task.dataset.split_begin(split));
  return gather(task, idx);
}

/// Sequential pass over a split in shuffled order; reshuffles when an epoch
/// runs out.
class EpochStream {
 public:
  EpochStream(const TaskSpec& task, Split split, std::uint64_t seed, std::size_t batch_size = 0)
      : task_(&task), split_(split), rng_(seed), batch_size_(batch_size ? batch_size : task.batch_size) {
    order_.resize(task.dataset.split_size(split));
    if (batch_size_ > order_.size()) throw ValueError("EpochStream: batch larger than split");
    std::iota(order_.begin(), order_.end(), task.dataset.split_begin(split));
    reshuffle();
  }

  Batch next() {
    if (cursor_ + batch_size_ > order_.size()) {
      reshuffle();
      ++epoch_;
    }
    std::span<const std::size_t> idx(order_.data() + cursor_, batch_size_);
    cursor_ += batch_size_;
    return gather(*task_, idx);
  }

  std::size_t epoch() const { return epoch_; }

 private:
  void reshuffle() {
    for (std::size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[rng_.below(i)]);
    cursor_ = 0;
  }

  const TaskSpec* task_;
  Split split_;
  Rng rng_;
  std::size_t batch_size_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  std::size_t epoch_ = 0;
};

// ---------------------------------------------------------------------------
// Suites

struct ConflictSuiteOptions {
  std::size_t num_groups = 2;
  std::size_t tasks_per_group = 2;
  std::size_t input_dim = 32;
  std::size_t outputs = 12;
  std::size_t train_size = 2048;
  std::size_t val_size = 512;
  double noise = 0.05;
  double shift = 1.0;
  std::size_t batch_size = 32;
  /// Give every task its own input projection ahead of the backbone.
  bool use_adapter = false;
  std::uint64_t seed = 1;
};

inline DomainShift random_shift(std::size_t dim, double strength, Rng& rng) {
  DomainShift s;
  s.scale.resize(dim);
  s.offset.resize(dim);
  for (std::size_t j = 0; j < dim; ++j) {
    s.scale[j] = std::exp(0.3 * strength * rng.normal());
    s.offset[j] = strength * rng.normal();
  }
  return s;
}

/// Rows drawn at random and orthonormalized jointly (modified Gram-Schmidt),
/// so maps of different groups span mutually orthogonal subspaces.
inline std::vector<std::vector<double>> orthonormal_rows(std::size_t count, std::size_t dim, Rng& rng) {
  if (count > dim) throw ValueError("cannot draw " + std::to_string(count) + " orthonormal rows in dimension " + std::to_string(dim));
  std::vector<std::vector<double>> rows;
  while (rows.size() < count) {
    std::vector<double> v(dim);
    for (auto& e : v) e = rng.normal();
    for (const auto& q : rows) {
      double dot = 0.0;
      for (std::size_t j = 0; j < dim; ++j) dot += v[j] * q[j];
      for (std::size_t j = 0; j < dim; ++j) v[j] -= dot * q[j];
    }
    double norm = 0.0;
    for (double e : v) norm += e * e;
    norm = std::sqrt(norm);
    if (norm < 1e-6) continue;
    for (auto& e : v) e /= norm;
    rows.push_back(std::move(v));
  }
  return rows;
}

/// num_groups x tasks_per_group regression tasks. Tasks of one group share
/// their latent map and differ in domain shift; the maps of different groups
/// are orthogonal, so no single linear read-out serves two groups.
inline std::vector<TaskSpec> make_conflict_suite(const ConflictSuiteOptions& opt) {
  if (opt.num_groups < 2) throw ValueError("conflict suite needs at least two groups");
  if (opt.tasks_per_group < 1) throw ValueError("conflict suite needs at least one task per group");
  Rng rng(stream_key(opt.seed, fnv1a("conflict-suite")));
  auto rows = orthonormal_rows(opt.num_groups * opt.outputs, opt.input_dim, rng);
  std::vector<TaskSpec> tasks;
  for (std::size_t g = 0; g < opt.num_groups; ++g) {
    std::vector<double> map;
    map.reserve(opt.outputs * opt.input_dim);
    for (std::size_t k = 0; k < opt.outputs; ++k) map.insert(map.end(), rows[g * opt.outputs + k].begin(), rows[g * opt.outputs + k].end());
    for (std::size_t t = 0; t < opt.tasks_per_group; ++t) {
      TaskSpec task;
      task.name = "g" + std::to_string(g) + "t" + std::to_string(t);
      task.head = HeadSpec{HeadKind::regressor, 0, opt.outputs, 1};
      task.batch_size = opt.batch_size;
      task.use_adapter = opt.use_adapter;
      SyntheticDataset& ds = task.dataset;
      ds.seed = stream_key(opt.seed, g, t, fnv1a("dataset"));
      ds.input_dim = opt.input_dim;
      ds.group = g;
      ds.map_rows = opt.outputs;
      ds.latent_map = map;
      ds.shift = random_shift(opt.input_dim, opt.shift, rng);
      ds.noise = opt.noise;
      ds.train_size = opt.train_size;
      ds.val_size = opt.val_size;
      generate(ds, task.head);
      tasks.push_back(std::move(task));
    }
  }
  return tasks;
}

/// A new task drawn from the same latent map as base. With shift_seed == 0 the
/// domain shift and data seed are kept too, giving an identically distributed
/// task under a new name.
inline TaskSpec related_task(const TaskSpec& base, std::string name, std::uint64_t shift_seed = 0, double shift = 1.0) {
  TaskSpec task = base;
  task.name = std::move(name);
  if (shift_seed != 0) {
    Rng rng(stream_key(shift_seed, fnv1a("related-shift")));
    task.dataset.shift = random_shift(task.dataset.input_dim, shift, rng);
    task.dataset.seed = stream_key(shift_seed, fnv1a("related-data"));
    generate(task.dataset, task.head);
  }
  return task;
}

struct ShapeSuiteOptions {
  std::size_t train_size = 1024;
  std::size_t val_size = 256;
  double noise = 0.05;
  std::uint64_t seed = 1;
};

/// Three tasks with input widths 16, 32 and 64, different heads and batch
/// sizes; each owns an adapter into the shared backbone width.
inline std::vector<TaskSpec> make_shape_suite(const ShapeSuiteOptions& opt) {
  struct Proto {
    const char* name;
    std::size_t dim;
    HeadSpec head;
    std::size_t batch;
    double weight;
  };
  const Proto protos[] = {
      {"cls16", 16, HeadSpec{HeadKind::classifier, 4, 0, 1}, 24, 2.0},
      {"reg32", 32, HeadSpec{HeadKind::regressor, 0, 4, 1}, 16, 1.0},
      {"seq64", 64, HeadSpec{HeadKind::per_position, 3, 0, 4}, 8, 1.0},
  };
  Rng rng(stream_key(opt.seed, fnv1a("shape-suite")));
  std::vector<TaskSpec> tasks;
  std::size_t i = 0;
  for (const Proto& p : protos) {
    TaskSpec task;
    task.name = p.name;
    task.head = p.head;
    task.use_adapter = true;
    task.batch_size = p.batch;
    task.sampling_weight = p.weight;
    SyntheticDataset& ds = task.dataset;
    ds.seed = stream_key(opt.seed, i++, fnv1a("dataset"));
    ds.input_dim = p.dim;
    ds.group = 0;
    ds.map_rows = p.head.map_rows();
    ds.latent_map.resize(ds.map_rows * p.dim);
    const double s = 1.0 / std::sqrt(static_cast<double>(p.dim));
    for (auto& v : ds.latent_map) v = s * rng.normal();
    ds.shift = random_shift(p.dim, 0.5, rng);
    ds.noise = opt.noise;
    ds.train_size = opt.train_size;
    ds.val_size = opt.val_size;
    generate(ds, task.head);
    tasks.push_back(std::move(task));
  }
  return tasks;
}

/// Loss of the best constant predictor on a split: target variance for
/// regression, label-marginal entropy for classification.
inline double constant_predictor_loss(const TaskSpec& task, Split split) {
  const SyntheticDataset& ds = task.dataset;
  const std::size_t begin = ds.split_begin(split), n = ds.split_size(split);
  if (!task.head.classification()) {
    const std::size_t r = ds.map_rows;
    double total = 0.0;
    for (std::size_t k = 0; k < r; ++k) {
      double mean = 0.0;
      for (std::size_t i = 0; i < n; ++i) mean += ds.values(begin + i, k);
      mean /= static_cast<double>(n);
      double var = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double d = ds.values(begin + i, k) - mean;
        var += d * d;
      }
      total += var / static_cast<double>(n);
    }
    return total / static_cast<double>(r);
  }
  const std::size_t per = task.head.kind == HeadKind::per_position ? task.head.seq_len : 1;
  double total = 0.0;
  for (std::size_t p = 0; p < per; ++p) {
    std::vector<double> counts(task.head.classes, 0.0);
    for (std::size_t i = 0; i < n; ++i) counts[static_cast<std::size_t>(ds.labels[(begin + i) * per + p])] += 1.0;
    for (double c : counts)
      if (c > 0) total -= (c / n) * std::log(c / n);
  }
  return total / static_cast<double>(per);
}

/// One row per sample: split, index, inputs, then targets.
inline void write_task_csv(const TaskSpec& task, std::ostream& out) {
  const SyntheticDataset& ds = task.dataset;
  out << "split,index";
  for (std::size_t j = 0; j < ds.input_dim; ++j) out << ",x" << j;
  const std::size_t per = task.head.classification()
                              ? (task.head.kind == HeadKind::per_position ? task.head.seq_len : 1)
                              : ds.map_rows;
  for (std::size_t k = 0; k < per; ++k) out << ",y" << k;
  out << "\n";
  for (std::size_t i = 0; i < ds.size(); ++i) {
    out << (i < ds.train_size ? "train" : "val") << "," << i;
    for (std::size_t j = 0; j < ds.input_dim; ++j) out << "," << ds.inputs(i, j);
    for (std::size_t k = 0; k < per; ++k) {
      if (task.head.classification()) out << "," << ds.labels[i * per + k];
      else out << "," << ds.values(i, k);
    }
    out << "\n";
  }
}

}  // namespace legoflow
