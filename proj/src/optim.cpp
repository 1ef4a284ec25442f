#include "rad2ct/optim.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "rad2ct/error.hpp"

namespace rad2ct {

OptimizerKind parse_optimizer_kind(std::string_view name) {
  if (name == "adam") return OptimizerKind::adam;
  if (name == "adamw") return OptimizerKind::adamw;
  throw UsageError("unknown optimizer '" + std::string(name) + "' (expected adam or adamw)");
}

std::string_view to_string(OptimizerKind kind) { return kind == OptimizerKind::adam ? "adam" : "adamw"; }

OptimizerState make_optimizer_state(std::span<const Tensor> params, OptimizerHyper hyper) {
  OptimizerState state;
  state.hyper = hyper;
  for (const auto& p : params) {
    state.first_moment.emplace_back(p.size(), Real(0));
    state.second_moment.emplace_back(p.size(), Real(0));
  }
  return state;
}

void optimizer_step(std::span<Tensor> params, OptimizerState& state) {
  if (params.size() != state.first_moment.size()) {
    throw DimensionError("optimizer_step: " + std::to_string(params.size()) + " parameters but state tracks " +
                         std::to_string(state.first_moment.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].size() != state.first_moment[i].size()) {
      throw DimensionError("optimizer_step: parameter " + std::to_string(i) + " has shape " +
                           to_string(params[i].shape()) + ", state size " + std::to_string(state.first_moment[i].size()));
    }
    for (Real g : params[i].grad()) {
      if (!std::isfinite(g)) throw NumericalError("optimizer_step: non-finite gradient in parameter " + std::to_string(i));
    }
  }
  const auto& h = state.hyper;
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const Real lr = static_cast<Real>(h.learning_rate);
  const Real b1 = static_cast<Real>(h.beta1), b2 = static_cast<Real>(h.beta2);
  const Real c1 = static_cast<Real>(1.0 - std::pow(h.beta1, t));
  const Real c2 = static_cast<Real>(1.0 - std::pow(h.beta2, t));
  const Real eps = static_cast<Real>(h.eps);
  const Real wd = static_cast<Real>(h.weight_decay);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].mutable_values();
    auto g = params[i].grad();
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    if (g.empty()) continue;
    for (std::size_t j = 0; j < p.size(); ++j) {
      Real grad = g[j];
      if (h.kind == OptimizerKind::adamw) {
        p[j] -= lr * wd * p[j];
      } else if (wd != 0) {
        grad += wd * p[j];
      }
      m[j] = b1 * m[j] + (Real(1) - b1) * grad;
      v[j] = b2 * v[j] + (Real(1) - b2) * grad * grad;
      const Real m_hat = m[j] / c1;
      const Real v_hat = v[j] / c2;
      p[j] -= lr * m_hat / (std::sqrt(v_hat) + eps);
    }
  }
}

void zero_grads(std::span<Tensor> params) {
  for (auto& p : params) p.zero_grad();
}

double cosine_warmup_lr(std::uint64_t step, std::uint64_t warmup_steps, std::uint64_t total_steps, double base_lr) {
  if (warmup_steps >= total_steps) {
    throw UsageError("cosine_warmup_lr: warmup_steps (" + std::to_string(warmup_steps) + ") must be < total_steps (" +
                     std::to_string(total_steps) + ")");
  }
  if (step > total_steps) {
    throw UsageError("cosine_warmup_lr: step " + std::to_string(step) + " beyond total_steps " +
                     std::to_string(total_steps));
  }
  if (base_lr < 0) throw UsageError("cosine_warmup_lr: negative base learning rate");
  if (step < warmup_steps) return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  const double progress =
      static_cast<double>(step - warmup_steps) / static_cast<double>(total_steps - warmup_steps);
  return std::max(0.0, base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress)));
}

}  // namespace rad2ct
