#include "tomoforge/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace tomoforge {

double lr_at(std::int64_t batch, const LrSchedule& s) {
  if (batch < 0) return 0.0;
  if (batch < s.warmup_batches) {
    const double frac = static_cast<double>(batch) / static_cast<double>(s.warmup_batches);
    return s.peak * std::expm1(s.gamma * frac) / std::expm1(s.gamma);
  }
  const std::int64_t halvings = s.halve_every > 0 ? (batch - s.warmup_batches) / s.halve_every : 0;
  return s.peak * std::pow(0.5, static_cast<double>(halvings));
}

template <typename T>
void adam_step(std::span<Parameter<T>* const> params, OptimizerState<T>& st, double lr) {
  if (st.m.empty()) {
    for (const Parameter<T>* p : params) {
      st.m.emplace_back(p->value.shape());
      st.v.emplace_back(p->value.shape());
    }
  }
  if (st.m.size() != params.size())
    throw std::invalid_argument("adam_step: optimizer state tracks a different parameter list");
  ++st.step;
  const double b1 = st.hyper.beta1, b2 = st.hyper.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(st.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter<T>& p = *params[k];
    if (!p.trainable || p.grad.numel() != p.value.numel()) continue;
    Tensor<T>& m = st.m[k];
    Tensor<T>& v = st.v[k];
    if (m.shape() != p.value.shape())
      throw ShapeError("adam_step: moment shape mismatch for " + p.name);
    for (std::size_t i = 0; i < p.value.numel(); ++i) {
      const double g = p.grad[i];
      const double mi = b1 * m[i] + (1.0 - b1) * g;
      const double vi = b2 * v[i] + (1.0 - b2) * g * g;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double update = lr * (mi / c1) / (std::sqrt(vi / c2) + st.hyper.eps);
      p.value[i] = static_cast<T>(p.value[i] - update);
    }
  }
}

template void adam_step(std::span<Parameter<float>* const>, OptimizerState<float>&, double);
template void adam_step(std::span<Parameter<double>* const>, OptimizerState<double>&, double);

}  // namespace tomoforge
