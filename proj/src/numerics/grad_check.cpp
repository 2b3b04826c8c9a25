#include "mudpt/numerics/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "mudpt/errors.hpp"
#include "mudpt/numerics/random.hpp"

namespace mudpt {

namespace {

double checked_loss(const std::function<Tensor()>& loss_fn, const std::string& where) {
  const Tensor loss = loss_fn();
  if (loss.size() != 1) throw ShapeError("grad_check: loss must be scalar, got " + shape_string(loss.shape()));
  const double v = loss.item();
  if (!std::isfinite(v)) throw NumericError("grad_check: non-finite loss at " + where);
  return v;
}

}  // namespace

GradCheckResult grad_check(const std::function<Tensor()>& loss_fn, std::span<NamedTensor> params,
                           const GradCheckOptions& options) {
  if (!(options.eps >= 1e-6 && options.eps <= 1e-3)) {
    throw InvalidInputError("grad_check: eps must lie in [1e-6, 1e-3]");
  }

  // Restores requires_grad flags on every exit path.
  struct FlagGuard {
    std::span<NamedTensor> params;
    std::vector<bool> flags;
    ~FlagGuard() {
      for (std::size_t k = 0; k < params.size(); ++k) params[k].tensor.set_requires_grad(flags[k]);
    }
  } guard{params, {}};
  for (NamedTensor& p : params) {
    guard.flags.push_back(p.tensor.requires_grad());
    p.tensor.set_requires_grad(true);
    p.tensor.zero_grad();
  }
  const Tensor loss = loss_fn();
  if (!all_finite(loss.values())) throw NumericError("grad_check: non-finite loss at the unperturbed point");
  backward(loss);
  std::vector<std::vector<double>> analytic;
  for (NamedTensor& p : params) {
    analytic.push_back(p.tensor.grad());
    p.tensor.zero_grad();
    p.tensor.set_requires_grad(false);
  }

  GradCheckResult result;
  Rng rng(options.seed);
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& t = params[k].tensor;
    std::vector<std::size_t> coords(t.size());
    std::iota(coords.begin(), coords.end(), 0);
    if (coords.size() > options.max_coords_per_tensor) {
      rng.shuffle(coords.begin(), coords.end());
      coords.resize(options.max_coords_per_tensor);
      std::sort(coords.begin(), coords.end());
    }
    auto values = t.mutable_values();
    for (std::size_t idx : coords) {
      const std::string where = params[k].name + "[" + std::to_string(idx) + "]";
      const double saved = values[idx];
      values[idx] = saved + options.eps;
      const double plus = checked_loss(loss_fn, where);
      values[idx] = saved - options.eps;
      const double minus = checked_loss(loss_fn, where);
      values[idx] = saved;

      const double numeric = (plus - minus) / (2.0 * options.eps);
      const double a = analytic[k][idx];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      const double rel = std::abs(a - numeric) / denom;
      ++result.coordinates;
      if (result.worst_tensor.empty() || rel > result.max_rel_error) {
        result.max_rel_error = rel;
        result.worst_tensor = params[k].name;
        result.worst_index = idx;
        result.worst_analytic = a;
        result.worst_numeric = numeric;
      }
    }
  }
  return result;
}

}  // namespace mudpt
