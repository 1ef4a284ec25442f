#pragma once

// Central finite-difference oracle for gradient tests. Independent of the backward
// closures: it only ever evaluates the forward function.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "rad2ct/tensor.hpp"

namespace rad2ct::testing {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

/// Compares backward() gradients of `loss_fn` w.r.t. every element of `inputs`
/// against (f(x+h) - f(x-h)) / 2h. Relative error uses an absolute floor.
inline GradCheckResult gradcheck(const std::function<Tensor()>& loss_fn, std::vector<Tensor> inputs,
                                 double step = 1e-6, double floor = 1e-6, std::size_t max_per_tensor = 0) {
  for (auto& t : inputs) t.zero_grad();
  loss_fn().backward();
  std::vector<std::vector<Real>> analytic;
  for (auto& t : inputs) analytic.emplace_back(t.grad().begin(), t.grad().end());

  GradCheckResult result;
  NoGradGuard no_grad;
  std::mt19937_64 pick(12345);
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto values = inputs[k].mutable_values();
    std::vector<std::size_t> idx(values.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (max_per_tensor > 0 && idx.size() > max_per_tensor) {
      std::shuffle(idx.begin(), idx.end(), pick);
      idx.resize(max_per_tensor);
    }
    for (std::size_t i : idx) {
      const Real saved = values[i];
      values[i] = saved + static_cast<Real>(step);
      const double up = loss_fn().item();
      values[i] = saved - static_cast<Real>(step);
      const double down = loss_fn().item();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic[k][i];
      const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      result.max_rel_error = std::max(result.max_rel_error, err);
      ++result.checked;
    }
  }
  return result;
}

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, bool requires_grad = true, double lo = -1.0,
                            double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<Real> v(numel(shape));
  for (auto& x : v) x = static_cast<Real>(u(rng));
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

}  // namespace rad2ct::testing
