#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "rad2ct/tensor.hpp"

namespace rad2ct {

enum class OptimizerKind { adam, adamw };

OptimizerKind parse_optimizer_kind(std::string_view name);
std::string_view to_string(OptimizerKind kind);

struct OptimizerHyper {
  OptimizerKind kind = OptimizerKind::adam;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // Classic L2 for adam, decoupled shrinkage for adamw.
  double weight_decay = 0.0;
};

struct OptimizerState {
  OptimizerHyper hyper;
  std::uint64_t step = 0;
  std::vector<std::vector<Real>> first_moment;
  std::vector<std::vector<Real>> second_moment;
};

OptimizerState make_optimizer_state(std::span<const Tensor> params, OptimizerHyper hyper);

/// One bias-corrected Adam/AdamW update of every parameter from its gradient buffer.
/// Throws NumericalError (before touching anything) if any gradient is NaN/Inf.
void optimizer_step(std::span<Tensor> params, OptimizerState& state);

void zero_grads(std::span<Tensor> params);

/// Linear warmup 0 -> base_lr over warmup_steps, then half-cosine decay to 0 at total_steps.
double cosine_warmup_lr(std::uint64_t step, std::uint64_t warmup_steps, std::uint64_t total_steps, double base_lr);

}  // namespace rad2ct
