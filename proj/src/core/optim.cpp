#include "camelu/optim.hpp"

#include <cmath>
#include <numbers>

#include "camelu/error.hpp"

namespace camelu {

AdamState make_adam_state(std::span<const Tensor> params, double beta1, double beta2, double epsilon) {
  AdamState s;
  s.beta1 = beta1;
  s.beta2 = beta2;
  s.epsilon = epsilon;
  for (const Tensor& p : params) {
    s.m.push_back(Tensor::zeros(p.shape()));
    s.v.push_back(Tensor::zeros(p.shape()));
  }
  return s;
}

void adam_step(std::span<Tensor> params, std::span<const Tensor> grads, AdamState& state, double lr) {
  require(params.size() == grads.size() && params.size() == state.m.size() && params.size() == state.v.size(),
          ErrorKind::dimension, "adam_step: parameter, gradient and moment counts differ");
  require(lr >= 0.0 && std::isfinite(lr), ErrorKind::contract, "adam_step: learning rate must be finite and >= 0");
  for (std::size_t i = 0; i < params.size(); ++i) {
    require(params[i].shape() == grads[i].shape() && params[i].shape() == state.m[i].shape(), ErrorKind::dimension,
            "adam_step: shape mismatch for parameter " + std::to_string(i) + ": " +
                shape_string(params[i].shape()) + " vs gradient " + shape_string(grads[i].shape()));
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(state.beta1, t);
  const double bc2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].data();
    auto g = grads[i].data();
    auto m = state.m[i].data();
    auto v = state.v[i].data();
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * g[k];
      v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * g[k] * g[k];
      if (lr == 0.0) continue;
      const double mhat = m[k] / bc1;
      const double vhat = v[k] / bc2;
      p[k] -= lr * mhat / (std::sqrt(vhat) + state.epsilon);
    }
  }
}

void LrSchedule::validate() const {
  require(warmup_steps <= total_steps, ErrorKind::config, "lr schedule: warmup_steps exceeds total_steps");
  require(base_lr >= 0.0 && final_lr >= 0.0, ErrorKind::config, "lr schedule: rates must be non-negative");
  require(final_lr <= base_lr, ErrorKind::config, "lr schedule: final_lr must not exceed base_lr");
}

double lr_at(const LrSchedule& s, std::uint64_t step) {
  if (step > s.total_steps) return s.final_lr;
  if (step <= s.warmup_steps) {
    if (step == s.warmup_steps) return s.base_lr;
    return s.base_lr * static_cast<double>(step + 1) / static_cast<double>(s.warmup_steps + 1);
  }
  if (step == s.total_steps) return s.final_lr;
  const double progress =
      static_cast<double>(step - s.warmup_steps) / static_cast<double>(s.total_steps - s.warmup_steps);
  return s.final_lr + (s.base_lr - s.final_lr) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace camelu
