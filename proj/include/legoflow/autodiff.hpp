// SPDX-License-Identifier: Apache-2.0
#pragma once

// Reverse-mode differentiation over a linear tape of tensor ops.
//
// Nodes are appended in evaluation order; backward walks them in strict
// reverse append order, so accumulation into every gradient buffer happens
// in a fixed order and repeated runs are bit-identical.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "legoflow/batchnorm.hpp"
#include "legoflow/error.hpp"
#include "legoflow/tensor.hpp"

namespace legoflow {

/// Handle to a node on a Tape.
struct Var {
  static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();
  std::size_t id = npos;
  bool valid() const { return id != npos; }
};

template <typename T>
class Tape {
 public:
  using TensorT = BasicTensor<T>;
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Var constant(TensorT value) { return push(std::move(value), {}, nullptr, false); }

  /// Leaf that receives a gradient.
  Var variable(TensorT value) { return push(std::move(value), {}, nullptr, true); }

  /// Records an op output. The node requires a gradient iff any input does.
  Var record(TensorT value, std::vector<std::size_t> inputs, BackwardFn fn, const char* op) {
    if (!value.all_finite()) throw NonFiniteError(std::string("non-finite output from op '") + op + "'");
    bool needs = false;
    for (std::size_t in : inputs) needs = needs || nodes_.at(in).requires_grad;
    return push(std::move(value), std::move(inputs), needs ? std::move(fn) : nullptr, needs);
  }

  const TensorT& value(Var v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  /// Gradient of the backward root with respect to v; zeros if v was not reached.
  TensorT grad(Var v) const {
    const Node& n = nodes_.at(v.id);
    if (n.grad.empty()) return TensorT(n.value.shape());
    return n.grad;
  }

  /// Seeds d(root)/d(root) = 1 and propagates. A tape supports exactly one
  /// backward pass.
  void backward(Var root) {
    backward_begin(root);
    backward_until(0);
  }

  /// Staged form of backward(): seeds the root, then backward_until(id) runs
  /// the backward functions of all pending nodes with index >= id, newest
  /// first. Lets a caller exchange information between stages.
  void backward_begin(Var root) {
    if (consumed_) throw StateError("backward called twice on the same tape");
    consumed_ = true;
    if (value(root).size() != 1) throw DimensionError("backward root must be a scalar");
    if (!nodes_[root.id].requires_grad) return;
    nodes_[root.id].grad = TensorT(nodes_[root.id].value.shape(), T(1));
    pending_ = root.id + 1;
  }

  void backward_until(std::size_t stop) {
    if (!consumed_) throw StateError("backward_until before backward_begin");
    while (pending_ > stop) {
      const std::size_t i = --pending_;
      Node& n = nodes_[i];
      if (n.backward && !n.grad.empty()) n.backward(*this, i);
    }
    if (pending_ != 0) return;
    for (const Node& n : nodes_) {
      if (!n.grad.empty() && !n.grad.all_finite()) throw NonFiniteError("non-finite gradient in backward pass");
    }
  }

  // --- helpers for op implementations ---------------------------------

  const TensorT& value_at(std::size_t id) const { return nodes_[id].value; }
  const TensorT& grad_at(std::size_t id) const { return nodes_[id].grad; }

  /// Gradient buffer of an input, allocated on first use; nullptr if the
  /// input does not require a gradient.
  T* accumulator(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return nullptr;
    if (n.grad.empty()) n.grad = TensorT(n.value.shape());
    return n.grad.data().data();
  }

  /// Hash of every piecewise-linear branch decision taken so far (ReLU
  /// masks, hard selections). Finite-difference checks use it to skip
  /// perturbations that cross a kink.
  std::uint64_t kink_signature() const { return kinks_; }
  void note_kink(std::uint64_t bits) { kinks_ = (kinks_ ^ bits) * 0x100000001b3ULL + 0x9e37ULL; }

 private:
  struct Node {
    TensorT value;
    TensorT grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
  };

  Var push(TensorT value, std::vector<std::size_t> inputs, BackwardFn fn, bool needs) {
    if (consumed_) throw StateError("cannot record onto a tape after backward");
    nodes_.push_back(Node{std::move(value), TensorT(), std::move(inputs), std::move(fn), needs});
    return Var{nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  bool consumed_ = false;
  std::size_t pending_ = 0;
  std::uint64_t kinks_ = 0xcbf29ce484222325ULL;
};

// ---------------------------------------------------------------------------
// Ops

/// C = A * B for A [m x k], B [k x n].
template <typename T>
Var matmul(Tape<T>& tape, Var a, Var b) {
  const auto& A = tape.value(a);
  const auto& B = tape.value(b);
  if (A.rank() != 2 || B.rank() != 2 || A.cols() != B.rows()) {
    throw DimensionError("matmul: cannot multiply " + shape_string(A.shape()) + " by " + shape_string(B.shape()));
  }
  const std::size_t m = A.rows(), k = A.cols(), n = B.cols();
  BasicTensor<T> C({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = A(i, p);
      for (std::size_t j = 0; j < n; ++j) C(i, j) += aip * B(p, j);
    }
  }
  return tape.record(std::move(C), {a.id, b.id},
                     [a, b, m, k, n](Tape<T>& t, std::size_t self) {
                       const T* dC = t.grad_at(self).data().data();
                       const T* Av = t.value_at(a.id).data().data();
                       const T* Bv = t.value_at(b.id).data().data();
                       if (T* dA = t.accumulator(a.id)) {
                         // dA = dC * B^T
                         for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t p = 0; p < k; ++p) {
                             T s = 0;
                             for (std::size_t j = 0; j < n; ++j) s += dC[i * n + j] * Bv[p * n + j];
                             dA[i * k + p] += s;
                           }
                       }
                       if (T* dB = t.accumulator(b.id)) {
                         // dB = A^T * dC
                         for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t p = 0; p < k; ++p) {
                             const T aip = Av[i * k + p];
                             for (std::size_t j = 0; j < n; ++j) dB[p * n + j] += aip * dC[i * n + j];
                           }
                       }
                     },
                     "matmul");
}

/// x [rows x f] + bias [f], broadcast over rows.
template <typename T>
Var add_bias(Tape<T>& tape, Var x, Var bias) {
  const auto& X = tape.value(x);
  const auto& b = tape.value(bias);
  if (X.rank() != 2 || b.rank() != 1 || b.size() != X.cols()) {
    throw DimensionError("add_bias: " + shape_string(X.shape()) + " + " + shape_string(b.shape()));
  }
  BasicTensor<T> Y = X;
  const std::size_t r = X.rows(), f = X.cols();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < f; ++j) Y(i, j) += b[j];
  return tape.record(std::move(Y), {x.id, bias.id},
                     [x, bias, r, f](Tape<T>& t, std::size_t self) {
                       const T* dY = t.grad_at(self).data().data();
                       if (T* dX = t.accumulator(x.id))
                         for (std::size_t i = 0; i < r * f; ++i) dX[i] += dY[i];
                       if (T* db = t.accumulator(bias.id))
                         for (std::size_t i = 0; i < r; ++i)
                           for (std::size_t j = 0; j < f; ++j) db[j] += dY[i * f + j];
                     },
                     "add_bias");
}

template <typename T>
Var add(Tape<T>& tape, Var a, Var b) {
  const auto& A = tape.value(a);
  const auto& B = tape.value(b);
  if (A.shape() != B.shape()) throw DimensionError("add: " + shape_string(A.shape()) + " vs " + shape_string(B.shape()));
  BasicTensor<T> C = A;
  for (std::size_t i = 0; i < C.size(); ++i) C[i] += B[i];
  const std::size_t n = C.size();
  return tape.record(std::move(C), {a.id, b.id},
                     [a, b, n](Tape<T>& t, std::size_t self) {
                       const T* dC = t.grad_at(self).data().data();
                       if (T* dA = t.accumulator(a.id))
                         for (std::size_t i = 0; i < n; ++i) dA[i] += dC[i];
                       if (T* dB = t.accumulator(b.id))
                         for (std::size_t i = 0; i < n; ++i) dB[i] += dC[i];
                     },
                     "add");
}

template <typename T>
Var relu(Tape<T>& tape, Var x) {
  BasicTensor<T> Y = tape.value(x);
  std::uint64_t bits = 0;
  for (std::size_t i = 0; i < Y.size(); ++i) {
    const bool on = Y[i] > T(0);
    if (!on) Y[i] = T(0);
    bits = bits * 31 + (on ? 1 : 2);
  }
  tape.note_kink(bits);
  const std::size_t n = Y.size();
  return tape.record(std::move(Y), {x.id},
                     [x, n](Tape<T>& t, std::size_t self) {
                       const T* dY = t.grad_at(self).data().data();
                       const T* X = t.value_at(x.id).data().data();
                       if (T* dX = t.accumulator(x.id))
                         for (std::size_t i = 0; i < n; ++i)
                           if (X[i] > T(0)) dX[i] += dY[i];
                     },
                     "relu");
}

/// c * x for a constant scalar c.
template <typename T>
Var scale(Tape<T>& tape, Var x, T c) {
  BasicTensor<T> Y = tape.value(x);
  for (auto& v : Y.data()) v *= c;
  const std::size_t n = Y.size();
  return tape.record(std::move(Y), {x.id},
                     [x, n, c](Tape<T>& t, std::size_t self) {
                       const T* dY = t.grad_at(self).data().data();
                       if (T* dX = t.accumulator(x.id))
                         for (std::size_t i = 0; i < n; ++i) dX[i] += c * dY[i];
                     },
                     "scale");
}

/// w[k] * x, differentiable in both the tensor x and the weight vector w.
template <typename T>
Var weighted(Tape<T>& tape, Var x, Var w, std::size_t k) {
  const auto& W = tape.value(w);
  if (W.rank() != 1 || k >= W.size()) throw DimensionError("weighted: index out of range of weight vector");
  const T wk = W[k];
  BasicTensor<T> Y = tape.value(x);
  for (auto& v : Y.data()) v *= wk;
  const std::size_t n = Y.size();
  return tape.record(std::move(Y), {x.id, w.id},
                     [x, w, k, n](Tape<T>& t, std::size_t self) {
                       const T* dY = t.grad_at(self).data().data();
                       const T* X = t.value_at(x.id).data().data();
                       const T wk = t.value_at(w.id)[k];
                       if (T* dX = t.accumulator(x.id))
                         for (std::size_t i = 0; i < n; ++i) dX[i] += wk * dY[i];
                       if (T* dW = t.accumulator(w.id)) {
                         T s = 0;
                         for (std::size_t i = 0; i < n; ++i) s += dY[i] * X[i];
                         dW[k] += s;
                       }
                     },
                     "weighted");
}

/// y = gamma * (x - mean) / sqrt(var + eps) + beta with externally supplied
/// statistics. With BnBackward::constant the statistics are treated as
/// constants. With BnBackward::exact the backward also differentiates them:
/// dx = gamma / sqrt(var + eps) * (dy - mean(dy) - xhat * mean(dy * xhat)),
/// where the means run over every row normalized with the same statistics.
/// `shared` supplies those means when the rows span several tapes and is
/// filled before the backward pass reaches this node; when absent or empty
/// the means are taken over this tape's batch.
template <typename T>
Var bn_apply(Tape<T>& tape, Var x, std::span<const T> mean, std::span<const T> var, Var gamma, Var beta, T eps,
             BnBackward mode = BnBackward::constant, std::shared_ptr<const BnGradMoments> shared = nullptr) {
  const auto& X = tape.value(x);
  if (X.rank() != 2) throw DimensionError("bn_apply: expected [batch x features]");
  const std::size_t r = X.rows(), f = X.cols();
  if (mean.size() != f || var.size() != f || tape.value(gamma).size() != f || tape.value(beta).size() != f) {
    throw DimensionError("bn_apply: statistics do not match feature count " + std::to_string(f));
  }
  std::vector<T> inv_std(f);
  for (std::size_t j = 0; j < f; ++j) {
    if (var[j] < T(0)) throw ValueError("bn_apply: negative variance");
    inv_std[j] = T(1) / std::sqrt(var[j] + eps);
  }
  const auto& G = tape.value(gamma);
  const auto& Bt = tape.value(beta);
  BasicTensor<T> xhat({r, f});
  BasicTensor<T> Y({r, f});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < f; ++j) {
      xhat(i, j) = (X(i, j) - mean[j]) * inv_std[j];
      Y(i, j) = G[j] * xhat(i, j) + Bt[j];
    }
  return tape.record(std::move(Y), {x.id, gamma.id, beta.id},
                     [x, gamma, beta, r, f, mode, shared = std::move(shared), inv_std = std::move(inv_std),
                      xhat = std::move(xhat)](Tape<T>& t, std::size_t self) {
                       const T* dY = t.grad_at(self).data().data();
                       const auto& G = t.value_at(gamma.id);
                       if (T* dX = t.accumulator(x.id)) {
                         if (mode == BnBackward::constant) {
                           for (std::size_t i = 0; i < r; ++i)
                             for (std::size_t j = 0; j < f; ++j) dX[i * f + j] += dY[i * f + j] * G[j] * inv_std[j];
                         } else {
                           std::vector<T> m1(f), m2(f);
                           if (shared && !shared->mean_dy.empty()) {
                             if (shared->mean_dy.size() != f || shared->mean_dy_xhat.size() != f)
                               throw DimensionError("bn_apply: shared gradient moments do not match feature count");
                             for (std::size_t j = 0; j < f; ++j) {
                               m1[j] = static_cast<T>(shared->mean_dy[j]);
                               m2[j] = static_cast<T>(shared->mean_dy_xhat[j]);
                             }
                           } else {
                             const BnGradSums sums = bn_grad_sums(xhat, dY);
                             const std::span<const BnGradSums> one(&sums, 1);
                             const BnGradMoments local = syncbn_grad_reduce(one);
                             for (std::size_t j = 0; j < f; ++j) {
                               m1[j] = static_cast<T>(local.mean_dy[j]);
                               m2[j] = static_cast<T>(local.mean_dy_xhat[j]);
                             }
                           }
                           for (std::size_t i = 0; i < r; ++i)
                             for (std::size_t j = 0; j < f; ++j)
                               dX[i * f + j] += (dY[i * f + j] - m1[j] - xhat(i, j) * m2[j]) * G[j] * inv_std[j];
                         }
                       }
                       if (T* dG = t.accumulator(gamma.id))
                         for (std::size_t i = 0; i < r; ++i)
                           for (std::size_t j = 0; j < f; ++j) dG[j] += dY[i * f + j] * xhat(i, j);
                       if (T* dB = t.accumulator(beta.id))
                         for (std::size_t i = 0; i < r; ++i)
                           for (std::size_t j = 0; j < f; ++j) dB[j] += dY[i * f + j];
                     },
                     "bn_apply");
}

/// Relaxed categorical sample u = softmax((log softmax(logits) + noise) / tau).
template <typename T>
Var gumbel_softmax(Tape<T>& tape, Var logits, std::span<const T> noise, T tau) {
  if (!(tau > T(0))) throw ValueError("gumbel_softmax: temperature must be positive");
  const auto& a = tape.value(logits);
  const std::size_t n = a.size();
  if (a.rank() != 1 || noise.size() != n) throw DimensionError("gumbel_softmax: logits/noise length mismatch");
  T amax = a[0];
  for (std::size_t k = 1; k < n; ++k) amax = std::max(amax, a[k]);
  T se = 0;
  for (std::size_t k = 0; k < n; ++k) se += std::exp(a[k] - amax);
  const T lse = amax + std::log(se);
  std::vector<T> s(n);
  for (std::size_t k = 0; k < n; ++k) s[k] = (a[k] - lse + noise[k]) / tau;
  T smax = s[0];
  for (std::size_t k = 1; k < n; ++k) smax = std::max(smax, s[k]);
  BasicTensor<T> u({n});
  T z = 0;
  for (std::size_t k = 0; k < n; ++k) {
    u[k] = std::exp(s[k] - smax);
    z += u[k];
  }
  for (std::size_t k = 0; k < n; ++k) u[k] /= z;
  return tape.record(std::move(u), {logits.id},
                     [logits, n, tau](Tape<T>& t, std::size_t self) {
                       // d u / d logits = (diag(u) - u u^T) / tau; the
                       // log-softmax normalizer has zero net effect.
                       const T* du = t.grad_at(self).data().data();
                       const T* u = t.value_at(self).data().data();
                       if (T* da = t.accumulator(logits.id)) {
                         T dot = 0;
                         for (std::size_t k = 0; k < n; ++k) dot += du[k] * u[k];
                         for (std::size_t k = 0; k < n; ++k) da[k] += u[k] * (du[k] - dot) / tau;
                       }
                     },
                     "gumbel_softmax");
}

/// Lowest index attaining the maximum.
template <typename T>
std::size_t argmax_index(std::span<const T> v) {
  if (v.empty()) throw ValueError("argmax of an empty vector");
  std::size_t best = 0;
  for (std::size_t k = 1; k < v.size(); ++k)
    if (v[k] > v[best]) best = k;
  return best;
}

/// Hard sample trick: forward one-hot(argmax u), backward identity.
template <typename T>
Var straight_through(Tape<T>& tape, Var u) {
  const auto& U = tape.value(u);
  const std::size_t n = U.size();
  const std::size_t k = argmax_index<T>(U.data());
  tape.note_kink(k + 1);
  BasicTensor<T> hard(U.shape());
  hard[k] = T(1);
  return tape.record(std::move(hard), {u.id},
                     [u, n](Tape<T>& t, std::size_t self) {
                       const T* dY = t.grad_at(self).data().data();
                       if (T* dU = t.accumulator(u.id))
                         for (std::size_t i = 0; i < n; ++i) dU[i] += dY[i];
                     },
                     "straight_through");
}

template <typename T>
Var reshape(Tape<T>& tape, Var x, Shape shape) {
  BasicTensor<T> Y = tape.value(x).reshaped(std::move(shape));
  const std::size_t n = Y.size();
  return tape.record(std::move(Y), {x.id},
                     [x, n](Tape<T>& t, std::size_t self) {
                       const T* dY = t.grad_at(self).data().data();
                       if (T* dX = t.accumulator(x.id))
                         for (std::size_t i = 0; i < n; ++i) dX[i] += dY[i];
                     },
                     "reshape");
}

/// Mean softmax cross-entropy over rows of logits [m x classes].
template <typename T>
Var softmax_cross_entropy(Tape<T>& tape, Var logits, std::span<const int> labels) {
  const auto& L = tape.value(logits);
  if (L.rank() != 2 || L.rows() != labels.size()) throw DimensionError("cross_entropy: logits/labels mismatch");
  const std::size_t m = L.rows(), c = L.cols();
  BasicTensor<T> probs({m, c});
  T total = 0;
  for (std::size_t i = 0; i < m; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c) {
      throw ValueError("cross_entropy: label " + std::to_string(labels[i]) + " outside [0, " + std::to_string(c) + ")");
    }
    T mx = L(i, 0);
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, L(i, j));
    T z = 0;
    for (std::size_t j = 0; j < c; ++j) {
      probs(i, j) = std::exp(L(i, j) - mx);
      z += probs(i, j);
    }
    for (std::size_t j = 0; j < c; ++j) probs(i, j) /= z;
    total += (mx + std::log(z)) - L(i, static_cast<std::size_t>(labels[i]));
  }
  BasicTensor<T> out({1}, T(total / static_cast<T>(m)));
  std::vector<int> lab(labels.begin(), labels.end());
  return tape.record(std::move(out), {logits.id},
                     [logits, m, c, lab = std::move(lab), probs = std::move(probs)](Tape<T>& t, std::size_t self) {
                       const T g = t.grad_at(self)[0] / static_cast<T>(m);
                       if (T* dL = t.accumulator(logits.id))
                         for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t j = 0; j < c; ++j) {
                             const T onehot = static_cast<std::size_t>(lab[i]) == j ? T(1) : T(0);
                             dL[i * c + j] += g * (probs(i, j) - onehot);
                           }
                     },
                     "softmax_cross_entropy");
}

/// Mean squared error over all elements.
template <typename T>
Var mse(Tape<T>& tape, Var pred, const BasicTensor<T>& target) {
  const auto& P = tape.value(pred);
  if (P.shape() != target.shape()) throw DimensionError("mse: " + shape_string(P.shape()) + " vs " + shape_string(target.shape()));
  const std::size_t n = P.size();
  T total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T d = P[i] - target[i];
    total += d * d;
  }
  BasicTensor<T> out({1}, T(total / static_cast<T>(n)));
  return tape.record(std::move(out), {pred.id},
                     [pred, n, target](Tape<T>& t, std::size_t self) {
                       const T g = T(2) * t.grad_at(self)[0] / static_cast<T>(n);
                       const T* P = t.value_at(pred.id).data().data();
                       if (T* dP = t.accumulator(pred.id))
                         for (std::size_t i = 0; i < n; ++i) dP[i] += g * (P[i] - target[i]);
                     },
                     "mse");
}

}  // namespace legoflow
