#pragma once

#include <functional>

#include "odrt/tensor.hpp"

namespace odrt {

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

// Compares the tape gradient of scalar f at x against central differences.
// Relative error per coordinate is |a - n| / max(|a|, |n|, floor); the floor
// keeps coordinates with vanishing gradient from dividing by round-off.
// `x` is perturbed in place and restored.
GradCheckResult check_gradients_detail(const std::function<Tensor(const Tensor&)>& f, Tensor x,
                                       double step = 1e-5, double floor = 1e-6);

double check_gradients(const std::function<Tensor(const Tensor&)>& f, Tensor x, double step = 1e-5);

}  // namespace odrt
