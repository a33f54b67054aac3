/*
 * Copyright (c) 2026, The BESS-KGE Authors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// Optimisers and the learning-rate schedule. Updates work on one row (or
// one flat parameter block) at a time so that entity rows can be updated
// lazily by their owning worker.

#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>

#include "bess/common.hpp"

namespace bess {

enum class OptimizerKind { Adam, SGD };
enum class LrDecay { LinearToZero, Constant };

inline std::string_view to_string(OptimizerKind k) { return k == OptimizerKind::Adam ? "adam" : "sgd"; }
inline std::string_view to_string(LrDecay d) { return d == LrDecay::LinearToZero ? "linear" : "constant"; }

inline OptimizerKind parse_optimizer(std::string_view s) {
  if (s == "adam") return OptimizerKind::Adam;
  if (s == "sgd") return OptimizerKind::SGD;
  throw Error("config", "unknown optimizer '" + std::string(s) + "' (expected adam|sgd)");
}

inline LrDecay parse_lr_decay(std::string_view s) {
  if (s == "linear") return LrDecay::LinearToZero;
  if (s == "constant") return LrDecay::Constant;
  throw Error("config", "unknown lr decay '" + std::string(s) + "' (expected linear|constant)");
}

struct TrainSchedule {
  std::uint64_t total_steps = 1000;
  double initial_lr = 1e-3;
  LrDecay decay = LrDecay::LinearToZero;
  OptimizerKind optimizer = OptimizerKind::Adam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t eval_interval = 0;  // 0 disables periodic evaluation

  friend bool operator==(const TrainSchedule&, const TrainSchedule&) = default;

  void validate() const {
    require(total_steps >= 1, "config", "schedule.total_steps must be positive");
    require(initial_lr >= 0.0 && std::isfinite(initial_lr), "config", "schedule.lr must be finite and >= 0");
    require(beta1 >= 0.0 && beta1 < 1.0, "config", "schedule.beta1 must lie in [0, 1)");
    require(beta2 >= 0.0 && beta2 < 1.0, "config", "schedule.beta2 must lie in [0, 1)");
    require(epsilon > 0.0, "config", "schedule.epsilon must be positive");
  }
};

/// Learning rate used for the update of step `step` (0-based).
inline double lr_at(const TrainSchedule& s, std::uint64_t step) {
  require(step <= s.total_steps, "schedule",
          "step " + std::to_string(step) + " is beyond total_steps " + std::to_string(s.total_steps));
  if (s.decay == LrDecay::Constant) return s.initial_lr;
  return s.initial_lr * (1.0 - static_cast<double>(step) / static_cast<double>(s.total_steps));
}

/// Textbook Adam with bias correction. `t` is the 1-based update count of
/// this parameter block (after incrementing).
template <class Real>
void adam_update(std::span<Real> param, std::span<const Real> grad, std::span<Real> m, std::span<Real> v,
                 std::uint64_t t, double lr, double beta1, double beta2, double epsilon) {
  const Real b1 = static_cast<Real>(beta1);
  const Real b2 = static_cast<Real>(beta2);
  const Real c1 = static_cast<Real>(1.0 - std::pow(beta1, static_cast<double>(t)));
  const Real c2 = static_cast<Real>(1.0 - std::pow(beta2, static_cast<double>(t)));
  const Real rate = static_cast<Real>(lr);
  const Real eps = static_cast<Real>(epsilon);
  for (std::size_t k = 0; k < param.size(); ++k) {
    m[k] = b1 * m[k] + (Real{1} - b1) * grad[k];
    v[k] = b2 * v[k] + (Real{1} - b2) * grad[k] * grad[k];
    const Real mhat = m[k] / c1;
    const Real vhat = v[k] / c2;
    param[k] -= rate * mhat / (std::sqrt(vhat) + eps);
  }
}

template <class Real>
void sgd_update(std::span<Real> param, std::span<const Real> grad, double lr) {
  const Real rate = static_cast<Real>(lr);
  for (std::size_t k = 0; k < param.size(); ++k) param[k] -= rate * grad[k];
}

}  // namespace bess
