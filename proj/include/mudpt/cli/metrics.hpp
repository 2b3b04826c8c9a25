#pragma once

#include <cstddef>
#include <span>

namespace mudpt {

/// Rounds half away from zero to 2 decimals, the precision every reported
/// percentage carries.
double round2(double value);

/// 100 * matches / total, rounded to 2 decimals. Lengths must match and be non-zero.
double accuracy(std::span<const std::size_t> predictions, std::span<const std::size_t> labels);

/// 2 b n / (b + n), rounded to 2 decimals. Both inputs must be positive.
double harmonic_mean(double base, double fresh);

/// Arithmetic mean of `values` at full precision; callers round for reporting.
/// Needs at least one value.
double arith_mean(std::span<const double> values);

}  // namespace mudpt
