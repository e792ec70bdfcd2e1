#include "effecg/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace effecg {

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

GradCheckResult grad_check(const std::function<Tensor()>& f, std::vector<Tensor> leaves,
                           double eps) {
  for (auto& leaf : leaves) {
    if (!leaf.is_leaf()) throw std::invalid_argument("grad_check perturbs leaf tensors only");
    leaf.set_requires_grad(true);
    leaf.zero_grad();
  }
  Tensor loss = f();
  backward(loss);
  std::vector<Tensor> analytic;
  analytic.reserve(leaves.size());
  for (const auto& leaf : leaves) analytic.push_back(leaf.grad());

  GradCheckResult result;
  for (std::size_t l = 0; l < leaves.size(); ++l) {
    auto values = leaves[l].mutable_values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double orig = values[i];
      values[i] = orig + eps;
      const double up = f().item();
      values[i] = orig - eps;
      const double down = f().item();
      values[i] = orig;
      const double numeric = (up - down) / (2.0 * eps);
      const double err = relative_error(analytic[l].at(i), numeric);
      if (err > result.max_rel_error || result.coordinates == 0) {
        result.max_rel_error = err;
        result.worst_leaf = l;
        result.worst_index = i;
        result.worst_analytic = analytic[l].at(i);
        result.worst_numeric = numeric;
      }
      ++result.coordinates;
    }
    leaves[l].zero_grad();
  }
  return result;
}

GradCheckResult grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                           double eps) {
  Tensor leaf = x.detach();
  return grad_check([&] { return f(leaf); }, {leaf}, eps);
}

}  // namespace effecg
