#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "fedadv/errors.hpp"
#include "fedadv/model.hpp"

namespace fedadv {

struct OptimizerState {
  std::vector<Real> velocity; // empty until the first step
  Real momentum = static_cast<Real>(0.9);
  Real weight_decay = static_cast<Real>(0.0002);
  Real base_lr = static_cast<Real>(0.1);
  std::vector<int> milestones{100, 150};

  void validate() const {
    if (!(momentum >= 0 && momentum < 1)) throw ConfigError("optimizer.momentum must be in [0,1)");
    if (!(weight_decay >= 0)) throw ConfigError("optimizer.weight_decay must be >= 0");
    if (!(base_lr >= 0)) throw ConfigError("optimizer.lr must be >= 0");
    for (std::size_t i = 1; i < milestones.size(); ++i) {
      if (milestones[i] <= milestones[i - 1]) {
        throw ConfigError("optimizer.milestones must be strictly increasing");
      }
    }
  }

  friend bool operator==(const OptimizerState&, const OptimizerState&) = default;
};

// base_lr / 10^(number of milestones <= epoch)
inline Real lr_schedule(int epoch, Real base_lr, const std::vector<int>& milestones) {
  Real lr = base_lr;
  for (int m : milestones) {
    if (epoch >= m) lr /= 10;
  }
  return lr;
}

// v <- momentum * v + (g + decay * p);  p <- p - lr * v
inline void sgd_step(ModelParams& params, const ModelParams& grads, OptimizerState& state,
                     Real lr) {
  if (grads.size() != params.size()) {
    throw DimensionError("sgd_step: gradient has " + std::to_string(grads.size()) +
                         " values, parameters have " + std::to_string(params.size()));
  }
  for (Real g : grads.values) {
    if (!std::isfinite(g)) throw NumericError("sgd_step: non-finite gradient");
  }
  if (state.velocity.empty()) state.velocity.assign(params.size(), Real{0});
  if (state.velocity.size() != params.size()) {
    throw DimensionError("sgd_step: momentum buffer size mismatch");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Real g = grads.values[i] + state.weight_decay * params.values[i];
    state.velocity[i] = state.momentum * state.velocity[i] + g;
    params.values[i] -= lr * state.velocity[i];
  }
}

} // namespace fedadv
