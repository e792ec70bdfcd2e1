#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "effecg/ops.hpp"
#include "effecg/tensor.hpp"

namespace effecg::testing {

inline Tensor random_tensor(std::mt19937_64& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v));
}

/// Scalar probe sum(w * y) with fixed random weights, so that every output
/// coordinate contributes a distinct amount to the checked gradient.
inline Tensor probe(const Tensor& y, const Tensor& weights) { return sum(mul(y, weights)); }

inline std::size_t pick(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

}  // namespace effecg::testing
