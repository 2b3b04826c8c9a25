#include "mudpt/numerics/optim.hpp"

#include <cmath>

#include "mudpt/errors.hpp"

namespace mudpt {

void SgdSchedule::validate() const {
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    throw ConfigError("schedule: learning_rate must be a finite nonnegative number");
  }
  if (epochs == 0) throw ConfigError("schedule: epochs must be positive");
  if (batch_size == 0) throw ConfigError("schedule: batch_size must be positive");
}

Tensor sgd_step(const Tensor& param, const Tensor& grad, double lr) {
  if (param.shape() != grad.shape()) {
    throw ShapeError("sgd_step: param " + shape_string(param.shape()) + " vs grad " + shape_string(grad.shape()));
  }
  std::vector<double> out(param.values().begin(), param.values().end());
  auto g = grad.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= lr * g[i];
  return Tensor(param.shape(), std::move(out));
}

void sgd_update(std::span<Tensor> params, double lr) {
  for (Tensor& p : params) {
    if (!p.has_grad()) continue;
    const std::vector<double> g = p.grad();
    auto v = p.mutable_values();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] -= lr * g[i];
    p.zero_grad();
  }
}

void Adam::step(std::span<Tensor> params) {
  if (m_.empty()) {
    for (const Tensor& p : params) {
      m_.emplace_back(p.size(), 0.0);
      v_.emplace_back(p.size(), 0.0);
    }
  }
  if (m_.size() != params.size()) throw InternalError("Adam: parameter set changed between steps");
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& p = params[k];
    if (!p.has_grad()) continue;
    const std::vector<double> g = p.grad();
    auto v = p.mutable_values();
    for (std::size_t i = 0; i < v.size(); ++i) {
      m_[k][i] = beta1_ * m_[k][i] + (1.0 - beta1_) * g[i];
      v_[k][i] = beta2_ * v_[k][i] + (1.0 - beta2_) * g[i] * g[i];
      v[i] -= lr_ * (m_[k][i] / c1) / (std::sqrt(v_[k][i] / c2) + eps_);
    }
    p.zero_grad();
  }
}

}  // namespace mudpt
