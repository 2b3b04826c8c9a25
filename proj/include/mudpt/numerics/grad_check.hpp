#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>

#include "mudpt/numerics/tensor.hpp"

namespace mudpt {

struct GradCheckOptions {
  double eps = 1e-4;
  /// Coordinates sampled per tensor; tensors at or below this size are checked exhaustively.
  std::size_t max_coords_per_tensor = 256;
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
  std::string worst_tensor;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

/// Compares the reverse-mode gradient of `loss_fn` against central
/// differences on (a seeded sample of) every coordinate of `params`.
/// The relative error of one coordinate is
///   |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
///
/// `loss_fn` is called once with gradients enabled and then repeatedly with
/// every param's requires_grad switched off, so the probes build no tape.
/// Param values and flags are restored before returning.
GradCheckResult grad_check(const std::function<Tensor()>& loss_fn, std::span<NamedTensor> params,
                           const GradCheckOptions& options = {});

}  // namespace mudpt
