#include "mudpt/cli/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "mudpt/errors.hpp"

namespace mudpt {

double round2(double value) {
  // Inputs are decimal percentages; the nudge puts binary near-ties such as
  // 1.005 (stored as 1.00499...) on the side a decimal reader expects.
  const double scaled = value * 100.0;
  return std::round(scaled + std::copysign(1e-9 * std::max(1.0, std::abs(scaled)), scaled)) / 100.0;
}

double accuracy(std::span<const std::size_t> predictions, std::span<const std::size_t> labels) {
  if (predictions.size() != labels.size()) {
    throw InvalidInputError("accuracy: " + std::to_string(predictions.size()) + " predictions for " +
                            std::to_string(labels.size()) + " labels");
  }
  if (labels.empty()) throw InvalidInputError("accuracy: no examples");
  std::size_t matches = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) matches += predictions[i] == labels[i];
  return round2(100.0 * static_cast<double>(matches) / static_cast<double>(labels.size()));
}

double harmonic_mean(double base, double fresh) {
  if (!(base > 0.0) || !(fresh > 0.0)) throw InvalidInputError("harmonic_mean: inputs must be positive");
  return round2(2.0 * base * fresh / (base + fresh));
}

double arith_mean(std::span<const double> values) {
  if (values.empty()) throw InvalidInputError("arith_mean: no values");
  return std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
}

}  // namespace mudpt
