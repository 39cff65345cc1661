// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <string>

#include "legoflow/error.hpp"

namespace legoflow {

/// Linear warmup from 0 to base_lr, then cosine decay to 0 at total_steps.
struct LrSchedule {
  double base_lr = 0.1;
  std::size_t warmup_steps = 0;
  std::size_t total_steps = 1;
};

inline double lr_schedule(std::size_t step, const LrSchedule& s) {
  if (step > s.total_steps) {
    throw ValueError("lr_schedule: step " + std::to_string(step) + " beyond total " + std::to_string(s.total_steps));
  }
  if (step < s.warmup_steps) return s.base_lr * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
  if (s.total_steps <= s.warmup_steps) return step == s.total_steps ? 0.0 : s.base_lr;
  const double progress =
      static_cast<double>(step - s.warmup_steps) / static_cast<double>(s.total_steps - s.warmup_steps);
  return s.base_lr * 0.5 * (1.0 + std::cos(M_PI * progress));
}

/// Gumbel-Softmax temperature: linear from start to end over the first
/// decay_end_fraction of training, then held at end.
struct TemperatureSchedule {
  double start = 5.0;
  double end = 0.01;
  double decay_end_fraction = 0.9;
  std::size_t total_steps = 1;
};

inline double temperature_schedule(std::size_t step, const TemperatureSchedule& s) {
  const double decay_end = s.decay_end_fraction * static_cast<double>(s.total_steps);
  const double t = static_cast<double>(step);
  if (t >= decay_end) return s.end;
  return s.start + (s.end - s.start) * (t / decay_end);
}

}  // namespace legoflow
