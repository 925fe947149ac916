#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "tomoforge/autograd.hpp"

namespace tomoforge {

/// Warmup then step decay. During warmup the rate follows a shifted
/// exponential peak * (exp(gamma * b / warmup) - 1) / (exp(gamma) - 1), which
/// starts at exactly 0; afterwards it halves every `halve_every` batches
/// counted from the end of warmup.
struct LrSchedule {
  double peak = 3e-4;
  std::int64_t warmup_batches = 5000;
  std::int64_t halve_every = 80000;
  double gamma = 5.0;
};

double lr_at(std::int64_t batch, const LrSchedule& s);

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct OptimizerState {
  AdamHyper hyper;
  std::int64_t step = 0;
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
};

/// One Adam update of every trainable parameter from its accumulated grad.
/// Moments are created on first use and must then keep matching shapes.
template <typename T>
void adam_step(std::span<Parameter<T>* const> params, OptimizerState<T>& state, double lr);

}  // namespace tomoforge
