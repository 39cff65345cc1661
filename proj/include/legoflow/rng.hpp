// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string_view>

#include "legoflow/error.hpp"

namespace legoflow {

inline constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// FNV-1a, used for stable string hashing (std::hash is not portable).
inline constexpr std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Derives an independent stream key from a seed and a tuple of coordinates.
template <typename... Ts>
constexpr std::uint64_t stream_key(std::uint64_t seed, Ts... parts) {
  std::uint64_t h = splitmix64(seed);
  ((h = splitmix64(h ^ static_cast<std::uint64_t>(parts))), ...);
  return h;
}

// Salts separating the independent random streams used by the trainer.
inline constexpr std::uint64_t kTaskStream = 0x7461736bULL;
inline constexpr std::uint64_t kWorkerStream = 0x776f726bULL;
inline constexpr std::uint64_t kInitStream = 0x696e6974ULL;
inline constexpr std::uint64_t kDataStream = 0x64617461ULL;

/// Thin wrapper over mt19937_64 with explicit, portable conversions to
/// floating point (the <random> distributions are implementation-defined).
class Rng {
 public:
  explicit Rng(std::uint64_t key) : engine_(key) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  /// Uniform in (0, 1).
  double uniform_open() {
    return (static_cast<double>(engine_() >> 11) + 0.5) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller; no cached second value.
  double normal() {
    const double u1 = uniform_open();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  /// Standard Gumbel: -log(-log U), U ~ Unif(0, 1).
  double gumbel() { return -std::log(-std::log(uniform_open())); }

  /// Uniform integer in [0, n).
  std::size_t below(std::size_t n) {
    if (n == 0) throw ValueError("Rng::below: empty range");
    return static_cast<std::size_t>(uniform() * static_cast<double>(n));
  }

  /// Index drawn with probability proportional to weights.
  std::size_t categorical(std::span<const double> weights) {
    if (weights.empty()) throw ValueError("categorical: empty weight set");
    double total = 0.0;
    for (double w : weights) {
      if (!(w > 0.0) || !std::isfinite(w)) throw ValueError("categorical: weights must be positive and finite");
      total += w;
    }
    const double r = uniform() * total;
    double acc = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      acc += weights[i];
      if (r < acc) return i;
    }
    return weights.size() - 1;
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace legoflow
