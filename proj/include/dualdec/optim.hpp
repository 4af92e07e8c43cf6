#pragma once

#include <cmath>
#include <vector>

#include "dualdec/common.hpp"
#include "dualdec/tensor.hpp"

namespace dualdec {

enum class LrMode { InverseSqrt, Fixed };

struct OptimizerState {
  int64_t step = 0;  // completed updates
  real peak_lr = 7e-4;
  int64_t warmup_steps = 4000;
  LrMode mode = LrMode::InverseSqrt;
  real beta1 = 0.9;
  real beta2 = 0.98;
  real eps = 1e-9;
  // one accumulator pair per parameter, in registration order
  std::vector<std::vector<real>> m;
  std::vector<std::vector<real>> v;
};

// Linear warmup to peak_lr at warmup_steps, then sqrt(warmup/step) decay;
// continuous and maximal at the joint. Fixed mode ignores the step.
inline real lr_schedule(int64_t step, const OptimizerState& state) {
  if (step <= 0) throw DomainError("lr_schedule: step must be >= 1");
  if (state.mode == LrMode::Fixed) return state.peak_lr;
  const real warm = static_cast<real>(state.warmup_steps);
  const real s = static_cast<real>(step);
  return state.peak_lr * std::min(s / warm, std::sqrt(warm / s));
}

// One Adam update with bias correction over a parameter group. Parameters and
// gradients are taken from the tensors' own storage; gradients are left
// untouched (callers zero them between steps).
inline void adam_step(std::vector<Tensor>& params, OptimizerState& state) {
  if (state.m.empty()) {
    state.m.resize(params.size());
    state.v.resize(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
      state.m[i].assign(params[i].numel(), 0.0);
      state.v[i].assign(params[i].numel(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw DimensionError("adam_step: parameter count changed");

  const int64_t t = state.step + 1;
  const real lr = lr_schedule(t, state);
  const real bc1 = 1.0 - std::pow(state.beta1, static_cast<real>(t));
  const real bc2 = 1.0 - std::pow(state.beta2, static_cast<real>(t));

  for (size_t p = 0; p < params.size(); ++p) {
    auto& param = params[p];
    if (param.numel() != state.m[p].size()) throw DimensionError("adam_step: accumulator shape mismatch");
    if (!param.has_grad()) continue;  // no gradient reached this parameter
    auto& g = param.grad();
    auto& m = state.m[p];
    auto& v = state.v[p];
    auto& data = param.data();
    for (size_t i = 0; i < data.size(); ++i) {
      if (!std::isfinite(g[i])) throw NumericError("adam_step: non-finite gradient");
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
      const real mhat = m[i] / bc1;
      const real vhat = v[i] / bc2;
      data[i] -= lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
  state.step = t;
}

}  // namespace dualdec
