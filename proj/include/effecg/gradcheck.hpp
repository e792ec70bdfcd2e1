#pragma once

#include <functional>
#include <vector>

#include "effecg/tensor.hpp"

namespace effecg {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
  // location of the worst coordinate
  std::size_t worst_leaf = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

/// Relative error with the max(|a|, |b|, 1e-8) denominator.
double relative_error(double analytic, double numeric);

/// Compare reverse-mode gradients of the scalar `f(x)` against central
/// differences (f(x + eps e_i) - f(x - eps e_i)) / 2 eps, coordinate by
/// coordinate. `x` is copied; the caller's tensor is left untouched.
GradCheckResult grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                           double eps = 1e-5);

/// Same check over several leaves at once. `f` must rebuild its graph from the
/// current values of `leaves` on every call; leaves are perturbed in place and
/// restored afterwards.
GradCheckResult grad_check(const std::function<Tensor()>& f, std::vector<Tensor> leaves,
                           double eps = 1e-5);

}  // namespace effecg
