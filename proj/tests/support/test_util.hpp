#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "mudpt/numerics/ops.hpp"
#include "mudpt/numerics/random.hpp"
#include "mudpt/numerics/tensor.hpp"

namespace mudpt::testing {

inline Tensor random_tensor(Shape shape, std::uint64_t seed, double stddev = 1.0, bool requires_grad = false) {
  Rng rng(seed);
  auto values = rng.normal_vector(shape_size(shape), stddev);
  return requires_grad ? Tensor::parameter(std::move(shape), std::move(values))
                       : Tensor(std::move(shape), std::move(values));
}

// Test-local central-difference oracle; deliberately independent of
// mudpt::grad_check. Returns the max relative error over all coordinates of
// all inputs, with the same 1e-8 floor in the denominator.
inline double max_fd_error(const std::function<Tensor()>& f, std::vector<Tensor> inputs, double eps = 1e-5) {
  for (Tensor& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  backward(f());
  std::vector<std::vector<double>> analytic;
  for (Tensor& t : inputs) analytic.push_back(t.grad());
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto v = inputs[k].mutable_values();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double saved = v[i];
      v[i] = saved + eps;
      const double up = f().item();
      v[i] = saved - eps;
      const double down = f().item();
      v[i] = saved;
      const double numeric = (up - down) / (2 * eps);
      const double a = analytic[k][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

// Reduces any tensor to a scalar with fixed random weights so every output
// coordinate influences the result differently.
inline Tensor weighted_sum(const Tensor& t, std::uint64_t seed) {
  const Tensor w = random_tensor(t.shape(), seed);
  return ops::sum(ops::mul(t, w));
}

}  // namespace mudpt::testing
