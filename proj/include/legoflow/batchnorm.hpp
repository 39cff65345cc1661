// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "legoflow/error.hpp"
#include "legoflow/tensor.hpp"

namespace legoflow {

/// Mergeable per-feature sufficient statistics of one batch.
struct BnStats {
  std::size_t count = 0;
  std::vector<double> sum;
  std::vector<double> sum_sq;

  std::size_t features() const { return sum.size(); }
};

/// Mean and population variance used to normalize a batch.
struct BnMoments {
  std::vector<double> mean;
  std::vector<double> var;

  template <typename T>
  std::vector<T> mean_as() const {
    return std::vector<T>(mean.begin(), mean.end());
  }
  template <typename T>
  std::vector<T> var_as() const {
    return std::vector<T>(var.begin(), var.end());
  }
};

template <typename T>
BnStats bn_local_stats(const BasicTensor<T>& x) {
  if (x.rank() != 2) throw DimensionError("bn_local_stats: expected [batch x features]");
  BnStats s;
  s.count = x.rows();
  s.sum.assign(x.cols(), 0.0);
  s.sum_sq.assign(x.cols(), 0.0);
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) {
      const double v = static_cast<double>(x(i, j));
      s.sum[j] += v;
      s.sum_sq[j] += v * v;
    }
  return s;
}

/// Adds b into a; both must describe the same features.
inline void merge_into(BnStats& a, const BnStats& b) {
  if (a.count == 0) {
    a = b;
    return;
  }
  if (a.features() != b.features()) throw DimensionError("BN statistics over different feature counts");
  a.count += b.count;
  for (std::size_t j = 0; j < a.features(); ++j) {
    a.sum[j] += b.sum[j];
    a.sum_sq[j] += b.sum_sq[j];
  }
}

inline BnMoments moments_of(const BnStats& s) {
  if (s.count == 0) throw ValueError("BN statistics with zero samples");
  BnMoments m;
  const double n = static_cast<double>(s.count);
  m.mean.resize(s.features());
  m.var.resize(s.features());
  for (std::size_t j = 0; j < s.features(); ++j) {
    m.mean[j] = s.sum[j] / n;
    m.var[j] = std::max(0.0, s.sum_sq[j] / n - m.mean[j] * m.mean[j]);
  }
  return m;
}

/// Cross-worker reduction: sample-weighted mean and population variance of
/// all contributing batches, folded in the order given (ascending worker id
/// at every call site).
inline BnMoments syncbn_reduce(std::span<const BnStats> local) {
  if (local.empty()) throw ValueError("syncbn_reduce: no contributing workers");
  BnStats total;
  for (const BnStats& s : local) {
    if (s.count == 0) throw ValueError("syncbn_reduce: worker reported an empty batch");
    merge_into(total, s);
  }
  return moments_of(total);
}

/// How a normalization layer's backward pass treats its statistics.
enum class BnBackward {
  /// Mean and variance are constants; only the affine map is differentiated.
  constant,
  /// Gradients also flow through the mean and variance of every row that
  /// shared them.
  exact,
};

inline const char* to_string(BnBackward b) { return b == BnBackward::exact ? "exact" : "constant"; }

inline BnBackward bn_backward_from_string(const std::string& s) {
  if (s == "exact") return BnBackward::exact;
  if (s == "constant") return BnBackward::constant;
  throw ValueError("unknown BN backward '" + s + "' (expected exact or constant)");
}

/// Per-feature sums of dY and dY * xhat over one worker's rows.
struct BnGradSums {
  std::size_t count = 0;
  std::vector<double> sum_dy;
  std::vector<double> sum_dy_xhat;
};

/// Means of dY and dY * xhat over all rows normalized with the same
/// statistics; the exact backward subtracts them from dY.
struct BnGradMoments {
  std::vector<double> mean_dy;
  std::vector<double> mean_dy_xhat;
};

/// dy may be null when the layer received no gradient.
template <typename T>
BnGradSums bn_grad_sums(const BasicTensor<T>& xhat, const T* dy) {
  if (xhat.rank() != 2) throw DimensionError("bn_grad_sums: expected [batch x features]");
  BnGradSums s;
  s.count = xhat.rows();
  s.sum_dy.assign(xhat.cols(), 0.0);
  s.sum_dy_xhat.assign(xhat.cols(), 0.0);
  if (!dy) return s;
  const std::size_t f = xhat.cols();
  for (std::size_t i = 0; i < xhat.rows(); ++i)
    for (std::size_t j = 0; j < f; ++j) {
      const double g = static_cast<double>(dy[i * f + j]);
      s.sum_dy[j] += g;
      s.sum_dy_xhat[j] += g * static_cast<double>(xhat(i, j));
    }
  return s;
}

/// Folds worker sums in the order given (ascending worker id at every call
/// site) and divides by the total row count.
inline BnGradMoments syncbn_grad_reduce(std::span<const BnGradSums> local) {
  if (local.empty()) throw ValueError("syncbn_grad_reduce: no contributing workers");
  const std::size_t f = local[0].sum_dy.size();
  std::size_t n = 0;
  BnGradMoments m{std::vector<double>(f, 0.0), std::vector<double>(f, 0.0)};
  for (const BnGradSums& s : local) {
    if (s.sum_dy.size() != f || s.sum_dy_xhat.size() != f) throw DimensionError("BN gradient sums over different feature counts");
    n += s.count;
    for (std::size_t j = 0; j < f; ++j) {
      m.mean_dy[j] += s.sum_dy[j];
      m.mean_dy_xhat[j] += s.sum_dy_xhat[j];
    }
  }
  if (n == 0) throw ValueError("syncbn_grad_reduce: zero rows");
  for (std::size_t j = 0; j < f; ++j) {
    m.mean_dy[j] /= static_cast<double>(n);
    m.mean_dy_xhat[j] /= static_cast<double>(n);
  }
  return m;
}

}  // namespace legoflow
