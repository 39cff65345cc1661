// SPDX-License-Identifier: Apache-2.0
#pragma once

// Lego layers: L levels of N same-shaped candidate units, mixed per task by
// Gumbel-Softmax routing weights.

#include <cmath>
#include <cstddef>
#include <istream>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "legoflow/autodiff.hpp"
#include "legoflow/batchnorm.hpp"
#include "legoflow/error.hpp"
#include "legoflow/parameter.hpp"
#include "legoflow/rng.hpp"
#include "legoflow/tensor.hpp"

namespace legoflow {

enum class RoutingMode { soft, hard, argmax };

inline const char* to_string(RoutingMode m) {
  switch (m) {
    case RoutingMode::soft: return "soft";
    case RoutingMode::hard: return "hard";
    case RoutingMode::argmax: return "argmax";
  }
  return "?";
}

inline RoutingMode routing_mode_from_string(const std::string& s) {
  if (s == "soft") return RoutingMode::soft;
  if (s == "hard") return RoutingMode::hard;
  if (s == "argmax") return RoutingMode::argmax;
  throw ValueError("unknown routing mode '" + s + "' (expected soft, hard or argmax)");
}

// ---------------------------------------------------------------------------
// Routing primitives on plain vectors

template <typename T>
std::vector<T> softmax(std::span<const T> v) {
  std::vector<T> out(v.size());
  if (v.empty()) return out;
  T mx = v[0];
  for (T e : v) mx = std::max(mx, e);
  T z = 0;
  for (std::size_t k = 0; k < v.size(); ++k) {
    out[k] = std::exp(v[k] - mx);
    z += out[k];
  }
  for (auto& e : out) e /= z;
  return out;
}

/// u[k] = exp((log p[k] + G[k]) / tau) / sum_i exp((log p[i] + G[i]) / tau),
/// with p = softmax(logits) and G the supplied Gumbel noise.
template <typename T>
std::vector<T> gumbel_softmax(std::span<const T> logits, T tau, std::span<const T> noise) {
  Tape<T> tape;
  Var a = tape.constant(BasicTensor<T>({logits.size()}, std::vector<T>(logits.begin(), logits.end())));
  Var u = gumbel_softmax(tape, a, noise, tau);
  const auto& v = tape.value(u);
  return std::vector<T>(v.data().begin(), v.data().end());
}

/// As above with G = -log(-log U), U ~ Unif(0, 1) drawn from rng.
template <typename T>
std::vector<T> gumbel_softmax(std::span<const T> logits, T tau, Rng& rng) {
  std::vector<T> noise(logits.size());
  for (auto& g : noise) g = static_cast<T>(rng.gumbel());
  return gumbel_softmax<T>(logits, tau, noise);
}

/// Forward value of the hard sample trick: one-hot at argmax(u), ties to
/// the lowest index.
template <typename T>
std::vector<T> straight_through(std::span<const T> u) {
  std::vector<T> out(u.size(), T(0));
  out[argmax_index(u)] = T(1);
  return out;
}

// ---------------------------------------------------------------------------
// Units and layers

struct BackboneConfig {
  std::size_t dim = 32;         // width of every layer except the first
  std::size_t stem_width = 0;   // output width of layer 0; 0 means dim
  std::size_t layers = 4;
  std::size_t units = 2;
  bool residual = false;
  double bn_eps = 1e-5;
  double bn_momentum = 0.1;

  std::size_t stem() const { return stem_width ? stem_width : dim; }
  std::size_t layer_in(std::size_t l) const { return l == 0 ? dim : (l == 1 ? stem() : dim); }
  std::size_t layer_out(std::size_t l) const { return l == 0 ? stem() : dim; }
  std::size_t output_dim() const { return layer_out(layers - 1); }
};

/// linear -> BN -> ReLU, plus an identity skip when enabled and shapes allow.
struct LegoUnit {
  std::size_t in_dim = 0;
  std::size_t out_dim = 0;
  bool residual = false;
  std::size_t weight = 0, bias = 0, gamma = 0, beta = 0, running_mean = 0, running_var = 0;
};

struct LegoLayer {
  std::size_t index = 0;
  std::vector<LegoUnit> units;
};

template <typename T>
LegoUnit make_unit(ParameterStore<T>& store, const std::string& prefix, std::size_t in, std::size_t out, bool residual,
                   Rng& rng) {
  LegoUnit u;
  u.in_dim = in;
  u.out_dim = out;
  u.residual = residual && in == out;
  u.weight = store.add(prefix + ".w", uniform_init<T>({in, out}, in, rng));
  u.bias = store.add(prefix + ".b", uniform_init<T>({out}, in, rng));
  u.gamma = store.add(prefix + ".gamma", BasicTensor<T>({out}, T(1)));
  u.beta = store.add(prefix + ".beta", BasicTensor<T>({out}, T(0)));
  u.running_mean = store.add(prefix + ".running_mean", BasicTensor<T>({out}, T(0)), false, false);
  u.running_var = store.add(prefix + ".running_var", BasicTensor<T>({out}, T(1)), false, false);
  return u;
}

template <typename T>
std::vector<LegoLayer> build_backbone(ParameterStore<T>& store, const BackboneConfig& cfg, Rng& rng) {
  if (cfg.layers < 1 || cfg.units < 1) throw ValueError("backbone needs L >= 1 and N >= 1");
  std::vector<LegoLayer> layers;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    LegoLayer layer{l, {}};
    for (std::size_t k = 0; k < cfg.units; ++k) {
      layer.units.push_back(make_unit(store, "backbone.layer" + std::to_string(l) + ".unit" + std::to_string(k),
                                      cfg.layer_in(l), cfg.layer_out(l), cfg.residual, rng));
    }
    layers.push_back(std::move(layer));
  }
  return layers;
}

/// Lazily creates one tape leaf per parameter, so a parameter used several
/// times accumulates into a single gradient.
template <typename T>
class ParamBinder {
 public:
  explicit ParamBinder(const ParameterStore<T>& store) : store_(&store) {}

  Var operator()(Tape<T>& tape, std::size_t idx) {
    auto it = leaves_.find(idx);
    if (it != leaves_.end()) return it->second;
    const Parameter<T>& p = (*store_)[idx];
    Var v = p.trainable ? tape.variable(p.value) : tape.constant(p.value);
    leaves_.emplace(idx, v);
    return v;
  }

  /// Gradients of every trainable parameter bound so far.
  GradientMap<T> gradients(const Tape<T>& tape) const {
    GradientMap<T> out;
    for (const auto& [idx, v] : leaves_)
      if ((*store_)[idx].trainable) out.emplace(idx, tape.grad(v));
    return out;
  }

  const ParameterStore<T>& store() const { return *store_; }

 private:
  const ParameterStore<T>* store_;
  std::map<std::size_t, Var> leaves_;
};

/// Pre-normalization activation z = x W + b.
template <typename T>
Var unit_linear(Tape<T>& tape, ParamBinder<T>& bind, const LegoUnit& unit, Var x) {
  return add_bias(tape, matmul(tape, x, bind(tape, unit.weight)), bind(tape, unit.bias));
}

/// bn(z): the first half of unit_activate, kept separate so that a caller
/// can place all normalization nodes of a layer next to each other.
template <typename T>
Var unit_normalize(Tape<T>& tape, ParamBinder<T>& bind, const LegoUnit& unit, Var z, const BnMoments& m, T eps,
                   BnBackward mode = BnBackward::constant, std::shared_ptr<const BnGradMoments> shared = nullptr) {
  const auto mean = m.mean_as<T>();
  const auto var = m.var_as<T>();
  return bn_apply<T>(tape, z, mean, var, bind(tape, unit.gamma), bind(tape, unit.beta), eps, mode, std::move(shared));
}

/// relu(y) (+ x when residual): the second half of unit_activate.
template <typename T>
Var unit_output(Tape<T>& tape, const LegoUnit& unit, Var y, Var x) {
  Var a = relu(tape, y);
  return unit.residual ? add(tape, a, x) : a;
}

/// relu(bn(z)) (+ x when residual).
template <typename T>
Var unit_activate(Tape<T>& tape, ParamBinder<T>& bind, const LegoUnit& unit, Var z, Var x, const BnMoments& m,
                  T eps) {
  const auto mean = m.mean_as<T>();
  const auto var = m.var_as<T>();
  Var y = relu(tape, bn_apply<T>(tape, z, mean, var, bind(tape, unit.gamma), bind(tape, unit.beta), eps));
  return unit.residual ? add(tape, y, x) : y;
}

template <typename T>
BnMoments running_moments(const ParameterStore<T>& store, const LegoUnit& unit) {
  const auto& rm = store[unit.running_mean].value;
  const auto& rv = store[unit.running_var].value;
  BnMoments m;
  m.mean.assign(rm.data().begin(), rm.data().end());
  m.var.assign(rv.data().begin(), rv.data().end());
  return m;
}

/// Where normalization statistics come from in a single-context forward.
enum class BnSource { batch, running };

/// One lego layer in a single execution context. Soft mode evaluates every
/// unit and mixes them by weights; hard and argmax modes evaluate only the
/// selected unit (hard keeps the weight in the graph so the straight-through
/// gradient reaches the controller).
template <typename T>
Var lego_forward(Tape<T>& tape, ParamBinder<T>& bind, const LegoLayer& layer, Var x, Var weights, RoutingMode mode,
                 BnSource source, T eps) {
  const auto& w = tape.value(weights);
  if (w.size() != layer.units.size()) {
    throw DimensionError("lego_forward: " + std::to_string(w.size()) + " weights for " +
                         std::to_string(layer.units.size()) + " units");
  }
  auto eval_unit = [&](std::size_t k) {
    const LegoUnit& unit = layer.units[k];
    Var z = unit_linear(tape, bind, unit, x);
    const BnMoments m = source == BnSource::batch ? moments_of(bn_local_stats(tape.value(z)))
                                                  : running_moments(bind.store(), unit);
    return unit_activate(tape, bind, unit, z, x, m, eps);
  };
  if (mode == RoutingMode::soft) {
    Var out;
    for (std::size_t k = 0; k < layer.units.size(); ++k) {
      Var term = weighted(tape, eval_unit(k), weights, k);
      out = out.valid() ? add(tape, out, term) : term;
    }
    return out;
  }
  const std::size_t k = argmax_index(w.data());
  Var a = eval_unit(k);
  return mode == RoutingMode::hard ? weighted(tape, a, weights, k) : a;
}

// ---------------------------------------------------------------------------
// Paths

struct Path {
  std::vector<std::size_t> selections;

  std::size_t layers() const { return selections.size(); }
  friend bool operator==(const Path&, const Path&) = default;
};

/// Number of layers on which two paths pick the same unit.
inline std::size_t path_agreement(const Path& a, const Path& b) {
  if (a.layers() != b.layers()) throw DimensionError("paths of different length");
  std::size_t n = 0;
  for (std::size_t l = 0; l < a.layers(); ++l) n += a.selections[l] == b.selections[l] ? 1 : 0;
  return n;
}

/// Text format: a header "L=<layers> N=<units>", then one unit index per line.
inline void write_path(std::ostream& out, const Path& path, std::size_t units) {
  out << "L=" << path.layers() << " N=" << units << "\n";
  for (std::size_t s : path.selections) out << s << "\n";
}

struct PathFile {
  Path path;
  std::size_t units = 0;
};

inline PathFile read_path(std::istream& in) {
  std::string header;
  if (!std::getline(in, header)) throw FormatError("path file: missing header");
  std::size_t layers = 0, units = 0;
  {
    std::istringstream hs(header);
    std::string l_tok, n_tok;
    hs >> l_tok >> n_tok;
    if (l_tok.rfind("L=", 0) != 0 || n_tok.rfind("N=", 0) != 0) throw FormatError("path file: bad header '" + header + "'");
    try {
      layers = std::stoul(l_tok.substr(2));
      units = std::stoul(n_tok.substr(2));
    } catch (const std::exception&) {
      throw FormatError("path file: bad header '" + header + "'");
    }
  }
  PathFile pf;
  pf.units = units;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::size_t v = 0;
    try {
      v = std::stoul(line);
    } catch (const std::exception&) {
      throw FormatError("path file: bad unit index '" + line + "'");
    }
    if (v >= units) throw FormatError("path file: unit index " + line + " outside [0, " + std::to_string(units) + ")");
    pf.path.selections.push_back(v);
  }
  if (pf.path.layers() != layers) {
    throw FormatError("path file: header declares L=" + std::to_string(layers) + " but lists " +
                      std::to_string(pf.path.layers()) + " entries");
  }
  return pf;
}

// ---------------------------------------------------------------------------
// Static backbones

/// Plain sequential network holding its own copy of the units on one path.
template <typename T>
struct StaticBackbone {
  BackboneConfig config;
  ParameterStore<T> store;
  std::vector<LegoUnit> units;

  /// Eval-mode forward with running BN statistics.
  BasicTensor<T> forward(const BasicTensor<T>& x) const {
    Tape<T> tape;
    ParamBinder<T> bind(store);
    Var h = tape.constant(x);
    const T eps = static_cast<T>(config.bn_eps);
    for (const LegoUnit& unit : units) {
      Var z = unit_linear(tape, bind, unit, h);
      h = unit_activate(tape, bind, unit, z, h, running_moments(store, unit), eps);
    }
    return tape.value(h);
  }
};

template <typename T>
StaticBackbone<T> materialize_static(const std::vector<LegoLayer>& layers, const ParameterStore<T>& store,
                                     const BackboneConfig& config, const Path& path) {
  if (path.layers() != layers.size()) {
    throw ValueError("path has " + std::to_string(path.layers()) + " layers, backbone expects L=" +
                     std::to_string(layers.size()));
  }
  StaticBackbone<T> out;
  out.config = config;
  out.config.units = 1;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const std::size_t k = path.selections[l];
    if (k >= layers[l].units.size()) throw ValueError("path selects unit " + std::to_string(k) + " at layer " + std::to_string(l));
    const LegoUnit& src = layers[l].units[k];
    const std::string prefix = "static.layer" + std::to_string(l);
    auto copy = [&](std::size_t idx, const char* name) {
      const Parameter<T>& p = store[idx];
      return out.store.add(prefix + name, p.value, p.trainable, p.decay);
    };
    LegoUnit u = src;
    u.weight = copy(src.weight, ".w");
    u.bias = copy(src.bias, ".b");
    u.gamma = copy(src.gamma, ".gamma");
    u.beta = copy(src.beta, ".beta");
    u.running_mean = copy(src.running_mean, ".running_mean");
    u.running_var = copy(src.running_var, ".running_var");
    out.units.push_back(u);
  }
  return out;
}

}  // namespace legoflow
