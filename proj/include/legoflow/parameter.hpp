// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "legoflow/error.hpp"
#include "legoflow/rng.hpp"
#include "legoflow/tensor.hpp"

namespace legoflow {

template <typename T>
struct Parameter {
  std::string id;
  BasicTensor<T> value;
  BasicTensor<T> momentum;
  bool trainable = true;
  /// Weight decay applies to this parameter (controller logits opt out).
  bool decay = true;
  /// Multiplier on the scheduled learning rate.
  double lr_scale = 1.0;
};

/// Flat, insertion-ordered registry of every parameter and buffer of a model.
template <typename T>
class ParameterStore {
 public:
  std::size_t add(std::string id, BasicTensor<T> value, bool trainable = true, bool decay = true) {
    if (index_.contains(id)) throw ValueError("duplicate parameter id '" + id + "'");
    const std::size_t idx = params_.size();
    index_.emplace(id, idx);
    BasicTensor<T> momentum(value.shape());
    params_.push_back(Parameter<T>{std::move(id), std::move(value), std::move(momentum), trainable, decay});
    return idx;
  }

  std::size_t size() const { return params_.size(); }
  Parameter<T>& operator[](std::size_t i) { return params_[i]; }
  const Parameter<T>& operator[](std::size_t i) const { return params_[i]; }

  std::optional<std::size_t> find(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }
  std::size_t at(const std::string& id) const {
    auto idx = find(id);
    if (!idx) throw ValueError("unknown parameter '" + id + "'");
    return *idx;
  }

  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  std::size_t trainable_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.trainable ? 1 : 0;
    return n;
  }

 private:
  std::vector<Parameter<T>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Gradients keyed by parameter index, iterated in ascending index order.
template <typename T>
using GradientMap = std::map<std::size_t, BasicTensor<T>>;

/// Uniform in +-sqrt(1/fan_in).
template <typename T>
BasicTensor<T> uniform_init(Shape shape, std::size_t fan_in, Rng& rng) {
  BasicTensor<T> t(std::move(shape));
  const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(-bound, bound));
  return t;
}

struct SgdOptions {
  double lr = 0.0;
  double momentum = 0.9;
  double weight_decay = 5e-4;
};

/// Momentum SGD over the parameters that have a fused gradient:
///   v <- momentum * v + g + wd * w;  w <- w - lr * v.
/// Parameters without a gradient keep both value and momentum untouched.
template <typename T>
void sgd_step(ParameterStore<T>& params, const GradientMap<T>& grads, const SgdOptions& opt) {
  const T lr = static_cast<T>(opt.lr);
  const T mu = static_cast<T>(opt.momentum);
  for (const auto& [idx, g] : grads) {
    Parameter<T>& p = params[idx];
    if (!p.trainable) continue;
    if (g.shape() != p.value.shape()) {
      throw DimensionError("gradient for '" + p.id + "' has shape " + shape_string(g.shape()) + ", expected " +
                           shape_string(p.value.shape()));
    }
    const T wd = p.decay ? static_cast<T>(opt.weight_decay) : T(0);
    const T step = p.lr_scale == 1.0 ? lr : static_cast<T>(opt.lr * p.lr_scale);
    for (std::size_t i = 0; i < g.size(); ++i) {
      p.momentum[i] = mu * p.momentum[i] + g[i] + wd * p.value[i];
      p.value[i] -= step * p.momentum[i];
    }
  }
}

}  // namespace legoflow
