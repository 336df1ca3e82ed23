// SPDX-License-Identifier: Apache-2.0
#include "cwamsn/adamw.hpp"

#include <cmath>
#include <string>

#include "cwamsn/error.hpp"

namespace cwamsn::nd {

void adamw_step(std::span<Tensor> params, AdamWState& state, double lr, double weight_decay,
                std::span<const bool> decay_mask) {
  if (!(lr >= 0.0) || !(weight_decay >= 0.0)) {
    throw ConfigError("adamw_step: lr and weight_decay must be >= 0");
  }
  if (!decay_mask.empty() && decay_mask.size() != params.size()) {
    throw ShapeError("adamw_step: decay mask has " + std::to_string(decay_mask.size()) + " entries for " +
                     std::to_string(params.size()) + " parameters");
  }
  if (state.m_.empty()) {
    for (const auto& p : params) {
      state.m_.emplace_back(p.numel(), 0.0f);
      state.v_.emplace_back(p.numel(), 0.0f);
    }
  }
  if (state.m_.size() != params.size()) {
    throw ShapeError("adamw_step: state tracks " + std::to_string(state.m_.size()) + " parameters, got " +
                     std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.m_[i].size() != params[i].numel()) {
      throw ShapeError("adamw_step: moment buffer " + std::to_string(i) + " does not match parameter shape " +
                       to_string(params[i].shape()));
    }
  }

  const auto& cfg = state.config_;
  state.step_ += 1;
  const double t = static_cast<double>(state.step_);
  const double bias1 = 1.0 - std::pow(cfg.beta1, t);
  const double bias2 = 1.0 - std::pow(cfg.beta2, t);

  for (std::size_t i = 0; i < params.size(); ++i) {
    auto values = params[i].data_mut();
    const auto grad = params[i].grad();
    auto& m = state.m_[i];
    auto& v = state.v_[i];
    const bool decay = decay_mask.empty() || decay_mask[i];
    const double shrink = decay ? 1.0 - lr * weight_decay : 1.0;
    for (std::size_t j = 0; j < values.size(); ++j) {
      const double g = grad.empty() ? 0.0 : grad[j];
      const double mj = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
      const double vj = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
      m[j] = static_cast<float>(mj);
      v[j] = static_cast<float>(vj);
      const double update = (mj / bias1) / (std::sqrt(vj / bias2) + cfg.eps);
      values[j] = static_cast<float>(values[j] * shrink - lr * update);
    }
  }
}

}  // namespace cwamsn::nd
