// SPDX-License-Identifier: Apache-2.0
#pragma once

// Linear-kernel CKA between layer activations.

#include <cmath>
#include <cstdio>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "legoflow/error.hpp"
#include "legoflow/model.hpp"
#include "legoflow/tensor.hpp"

namespace legoflow {

/// n examples x p features, stored in double.
struct FeatureMatrix {
  std::string label;
  std::size_t n = 0, p = 0;
  std::vector<double> data;

  FeatureMatrix() = default;
  FeatureMatrix(std::string label_, std::size_t n_, std::size_t p_, std::vector<double> data_)
      : label(std::move(label_)), n(n_), p(p_), data(std::move(data_)) {
    validate();
  }

  template <typename T>
  static FeatureMatrix from_tensor(const BasicTensor<T>& t, std::string label = {}) {
    if (t.rank() != 2) throw DimensionError("feature matrix needs a rank-2 tensor, got " + shape_string(t.shape()));
    return FeatureMatrix(std::move(label), t.rows(), t.cols(), std::vector<double>(t.data().begin(), t.data().end()));
  }

  double operator()(std::size_t i, std::size_t j) const { return data[i * p + j]; }

  void validate() const {
    if (n < 2) throw ValueError("feature matrix '" + label + "' needs n >= 2 examples");
    if (p < 1 || data.size() != n * p) throw DimensionError("feature matrix '" + label + "' has inconsistent size");
    for (double v : data)
      if (!std::isfinite(v)) throw NonFiniteError("feature matrix '" + label + "' has non-finite entries");
  }
};

/// Square n x n kernel matrix.
struct GramMatrix {
  std::size_t n = 0;
  std::vector<double> data;
  double operator()(std::size_t i, std::size_t j) const { return data[i * n + j]; }
  double& operator()(std::size_t i, std::size_t j) { return data[i * n + j]; }
};

/// Linear kernel K = X X^T.
inline GramMatrix gram(const FeatureMatrix& x) {
  GramMatrix k{x.n, std::vector<double>(x.n * x.n, 0.0)};
  for (std::size_t i = 0; i < x.n; ++i) {
    for (std::size_t j = i; j < x.n; ++j) {
      double s = 0.0;
      for (std::size_t f = 0; f < x.p; ++f) s += x(i, f) * x(j, f);
      k(i, j) = s;
      k(j, i) = s;
    }
  }
  return k;
}

/// Biased estimate tr(K H L H) / (n-1)^2 with H = I - 11^T/n.
inline double hsic(const GramMatrix& k, const GramMatrix& l) {
  if (k.n != l.n) throw DimensionError("hsic: kernel sizes differ (" + std::to_string(k.n) + " vs " + std::to_string(l.n) + ")");
  const std::size_t n = k.n;
  if (n < 2) throw ValueError("hsic needs n >= 2");
  // HKH via row and column means, then tr(HKH L) as an elementwise sum.
  std::vector<double> row(n, 0.0), col(n, 0.0);
  double all = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      row[i] += k(i, j);
      col[j] += k(i, j);
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    all += row[i];
    row[i] /= static_cast<double>(n);
    col[i] /= static_cast<double>(n);
  }
  all /= static_cast<double>(n * n);
  double tr = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) tr += (k(i, j) - row[i] - col[j] + all) * l(j, i);
  const double d = static_cast<double>(n - 1);
  return tr / (d * d);
}

namespace detail {

inline std::vector<double> centered(const FeatureMatrix& x) {
  std::vector<double> mean(x.p, 0.0), out(x.data);
  for (std::size_t i = 0; i < x.n; ++i)
    for (std::size_t f = 0; f < x.p; ++f) mean[f] += x(i, f);
  for (double& m : mean) m /= static_cast<double>(x.n);
  for (std::size_t i = 0; i < x.n; ++i)
    for (std::size_t f = 0; f < x.p; ++f) out[i * x.p + f] -= mean[f];
  return out;
}

// For linear kernels HKH = (HX)(HX)^T, so the HSIC is ||Xc^T Yc||_F^2 / (n-1)^2.
inline double linear_hsic_centered(std::span<const double> xc, std::size_t px, std::span<const double> yc, std::size_t py,
                                   std::size_t n) {
  std::vector<double> cross(px * py, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double* xr = xc.data() + i * px;
    const double* yr = yc.data() + i * py;
    for (std::size_t a = 0; a < px; ++a) {
      const double xa = xr[a];
      double* c = cross.data() + a * py;
      for (std::size_t b = 0; b < py; ++b) c[b] += xa * yr[b];
    }
  }
  double s = 0.0;
  for (double v : cross) s += v * v;
  const double d = static_cast<double>(n - 1);
  return s / (d * d);
}

inline void check_self_hsic(double value, const std::string& label) {
  if (!(value > 1e-300) || !std::isfinite(value)) {
    throw ValueError("CKA undefined: features '" + label + "' have zero variance (self-HSIC is 0)");
  }
}

// Self-HSIC that is tiny relative to the raw feature energy counts as zero.
inline double self_hsic(std::span<const double> xc, const FeatureMatrix& x) {
  const double h = linear_hsic_centered(xc, x.p, xc, x.p, x.n);
  double energy = 0.0;
  for (double v : x.data) energy += v * v;
  const double scale = energy / static_cast<double>(x.n - 1);
  if (h <= 1e-24 * scale * scale) check_self_hsic(0.0, x.label);
  check_self_hsic(h, x.label);
  return h;
}

}  // namespace detail

/// HSIC of the linear kernels of two feature matrices (same value as
/// hsic(gram(x), gram(y)), computed in feature space).
inline double linear_hsic(const FeatureMatrix& x, const FeatureMatrix& y) {
  if (x.n != y.n) throw DimensionError("linear_hsic: example counts differ");
  const auto xc = detail::centered(x), yc = detail::centered(y);
  return detail::linear_hsic_centered(xc, x.p, yc, y.p, x.n);
}

inline double cka(const FeatureMatrix& x, const FeatureMatrix& y) {
  if (x.n != y.n) {
    throw DimensionError("cka: example counts differ (" + std::to_string(x.n) + " vs " + std::to_string(y.n) + ")");
  }
  const auto xc = detail::centered(x), yc = detail::centered(y);
  const double xx = detail::self_hsic(xc, x);
  const double yy = detail::self_hsic(yc, y);
  const double xy = detail::linear_hsic_centered(xc, x.p, yc, y.p, x.n);
  return xy / std::sqrt(xx * yy);
}

/// Row labels x column labels grid of similarities.
struct SimilarityMatrix {
  std::vector<std::string> rows, cols;
  std::vector<double> values;

  double operator()(std::size_t i, std::size_t j) const { return values[i * cols.size() + j]; }
  bool square() const { return rows.size() == cols.size(); }
};

/// Batched CKA over a stream of minibatches. minibatches[b][i] is layer i's
/// features on minibatch b. HSIC terms are averaged over minibatches and
/// combined as avg_xy / sqrt(avg_xx * avg_yy).
inline SimilarityMatrix batched_cka(const std::vector<std::vector<FeatureMatrix>>& a,
                                    const std::vector<std::vector<FeatureMatrix>>& b) {
  if (a.size() < 2) throw ValueError("batched CKA needs at least 2 minibatches, got " + std::to_string(a.size()));
  if (a.size() != b.size()) throw DimensionError("batched CKA: both sides need the same number of minibatches");
  const std::size_t ra = a[0].size(), cb = b[0].size();
  if (ra == 0 || cb == 0) throw ValueError("batched CKA: no layers");
  std::vector<double> xy(ra * cb, 0.0), xx(ra, 0.0), yy(cb, 0.0);
  for (std::size_t m = 0; m < a.size(); ++m) {
    if (a[m].size() != ra || b[m].size() != cb) throw DimensionError("batched CKA: layer count changes between minibatches");
    std::vector<std::vector<double>> ac, bc;
    for (const auto& f : a[m]) ac.push_back(detail::centered(f));
    for (const auto& f : b[m]) bc.push_back(detail::centered(f));
    const std::size_t n = a[m][0].n;
    for (std::size_t i = 0; i < ra; ++i) {
      if (a[m][i].n != n) throw DimensionError("batched CKA: example counts differ within a minibatch");
      xx[i] += detail::linear_hsic_centered(ac[i], a[m][i].p, ac[i], a[m][i].p, n);
    }
    for (std::size_t j = 0; j < cb; ++j) {
      if (b[m][j].n != n) throw DimensionError("batched CKA: example counts differ within a minibatch");
      yy[j] += detail::linear_hsic_centered(bc[j], b[m][j].p, bc[j], b[m][j].p, n);
    }
    for (std::size_t i = 0; i < ra; ++i)
      for (std::size_t j = 0; j < cb; ++j)
        xy[i * cb + j] += detail::linear_hsic_centered(ac[i], a[m][i].p, bc[j], b[m][j].p, n);
  }
  const double count = static_cast<double>(a.size());
  SimilarityMatrix s;
  for (const auto& f : a[0]) s.rows.push_back(f.label);
  for (const auto& f : b[0]) s.cols.push_back(f.label);
  s.values.resize(ra * cb);
  for (std::size_t i = 0; i < ra; ++i) detail::check_self_hsic(xx[i], s.rows[i]);
  for (std::size_t j = 0; j < cb; ++j) detail::check_self_hsic(yy[j], s.cols[j]);
  for (std::size_t i = 0; i < ra; ++i)
    for (std::size_t j = 0; j < cb; ++j)
      s.values[i * cb + j] = (xy[i * cb + j] / count) / std::sqrt((xx[i] / count) * (yy[j] / count));
  return s;
}

inline SimilarityMatrix batched_cka(const std::vector<std::vector<FeatureMatrix>>& minibatches) {
  return batched_cka(minibatches, minibatches);
}

/// Size of the largest contiguous run of layers whose off-diagonal mean
/// similarity exceeds the threshold, divided by the number of layers.
inline double block_structure_score(const SimilarityMatrix& s, double threshold = 0.8) {
  if (!s.square()) throw DimensionError("block structure needs a square similarity matrix");
  const std::size_t L = s.rows.size();
  if (L == 0) return 0.0;
  std::size_t best = 0;
  for (std::size_t i = 0; i < L; ++i) {
    for (std::size_t j = i + 1; j < L; ++j) {
      double sum = 0.0;
      std::size_t count = 0;
      for (std::size_t a = i; a <= j; ++a)
        for (std::size_t b = i; b <= j; ++b)
          if (a != b) {
            sum += s(a, b);
            ++count;
          }
      if (sum / static_cast<double>(count) > threshold) best = std::max(best, j - i + 1);
    }
  }
  return static_cast<double>(best) / static_cast<double>(L);
}

/// Activations of every lego layer for one batch (eval mode).
template <typename T>
std::vector<FeatureMatrix> layer_features(const MultiTaskModel<T>& model, std::size_t task, const BasicBatch<T>& batch,
                                          const std::string& prefix = "layer") {
  const ForwardResult<T> r = evaluate(model, task, batch);
  std::vector<FeatureMatrix> out;
  for (std::size_t l = 0; l < r.layer_outputs.size(); ++l) {
    out.push_back(FeatureMatrix::from_tensor(r.layer_outputs[l], prefix + std::to_string(l)));
  }
  return out;
}

inline void write_similarity_csv(std::ostream& os, const SimilarityMatrix& s) {
  os << "layer";
  for (const auto& c : s.cols) os << ',' << c;
  os << '\n';
  char buf[32];
  for (std::size_t i = 0; i < s.rows.size(); ++i) {
    os << s.rows[i];
    for (std::size_t j = 0; j < s.cols.size(); ++j) {
      std::snprintf(buf, sizeof buf, "%.6f", s(i, j));
      os << ',' << buf;
    }
    os << '\n';
  }
}

inline nlohmann::json similarity_summary(const SimilarityMatrix& s, double threshold = 0.8) {
  nlohmann::json j;
  j["threshold"] = threshold;
  j["layers"] = s.rows;
  if (s.rows != s.cols) j["columns"] = s.cols;
  j["block_score"] = s.square() ? nlohmann::json(block_structure_score(s, threshold)) : nlohmann::json(nullptr);
  return j;
}

}  // namespace legoflow
