// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "cwamsn/tensor.hpp"

namespace cwamsn::nd {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Moment buffers for an ordered parameter list. Buffers are created on the
/// first step and must keep matching the parameter shapes afterwards.
class AdamWState {
 public:
  explicit AdamWState(AdamWConfig config = {}) : config_(config) {}

  const AdamWConfig& config() const { return config_; }
  std::uint64_t step() const { return step_; }
  const std::vector<std::vector<float>>& first_moments() const { return m_; }
  const std::vector<std::vector<float>>& second_moments() const { return v_; }

 private:
  friend void adamw_step(std::span<Tensor>, AdamWState&, double, double, std::span<const bool>);
  AdamWConfig config_;
  std::uint64_t step_ = 0;
  std::vector<std::vector<float>> m_;
  std::vector<std::vector<float>> v_;
};

/// One AdamW update using each parameter's current grad (absent grad == 0).
/// Weight decay is decoupled: p <- p * (1 - lr * wd) before the Adam step, and
/// is skipped for parameters whose `decay_mask` entry is false (an empty mask
/// decays everything).
void adamw_step(std::span<Tensor> params, AdamWState& state, double lr, double weight_decay,
                std::span<const bool> decay_mask = {});

}  // namespace cwamsn::nd
