#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "camelu/tensor.hpp"

namespace camelu {

struct AdamState {
  std::uint64_t step = 0;
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Zero moments shaped like `params`.
AdamState make_adam_state(std::span<const Tensor> params, double beta1 = 0.9, double beta2 = 0.999,
                          double epsilon = 1e-8);

// One bias-corrected Adam update in place. lr == 0 leaves params untouched
// (moments and step still advance); negative lr is rejected.
void adam_step(std::span<Tensor> params, std::span<const Tensor> grads, AdamState& state, double lr);

// Linear warmup to base_lr, then cosine decay to final_lr.
//
//   step <= warmup : base_lr * (step + 1) / (warmup + 1)
//   step >  warmup : final + (base - final) * (1 + cos(pi * (step - warmup) / (total - warmup))) / 2
//   step >  total  : final_lr
//
// The ramp is offset by one so the very first step already has a positive
// rate; it still reaches base_lr exactly at step == warmup_steps.
struct LrSchedule {
  double base_lr = 1e-5;
  double final_lr = 1e-6;
  std::uint64_t warmup_steps = 1500;
  std::uint64_t total_steps = 50000;

  void validate() const;
};

double lr_at(const LrSchedule& schedule, std::uint64_t step);

}  // namespace camelu
