#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "mudpt/numerics/tensor.hpp"

namespace mudpt {

/// Plain SGD schedule: no momentum, no weight decay, no warmup or decay.
struct SgdSchedule {
  double learning_rate = 2.5e-3;
  std::size_t epochs = 10;
  std::size_t batch_size = 4;
  /// Stops after this many steps when nonzero.
  std::size_t max_steps = 0;

  void validate() const;
};

/// Returns param - lr * grad.
Tensor sgd_step(const Tensor& param, const Tensor& grad, double lr);

/// Applies an SGD update in place to every tensor using its accumulated
/// gradient, then clears the gradients.
void sgd_update(std::span<Tensor> params, double lr);

/// Adam, used only for contrastive pretraining of the backbone.
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(std::span<Tensor> params);

 private:
  double lr_, beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

}  // namespace mudpt
