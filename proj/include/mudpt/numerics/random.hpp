#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace mudpt {

/// Derives an independent child seed from a root seed and a task label, so
/// every consumer of randomness gets its own stream regardless of call order.
std::uint64_t derive_seed(std::uint64_t root, std::string_view label);
std::uint64_t derive_seed(std::uint64_t root, std::string_view label, std::uint64_t index);

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double normal(double mean = 0.0, double stddev = 1.0);
  std::vector<double> normal_vector(std::size_t n, double stddev);
  /// Uniform integer in [0, bound).
  std::size_t uniform_index(std::size_t bound);

  template <typename It>
  void shuffle(It first, It last) {
    // Fisher-Yates on our own draws; std::shuffle's sequence is library-specific.
    const auto n = static_cast<std::size_t>(last - first);
    for (std::size_t i = n; i > 1; --i) {
      const std::size_t j = uniform_index(i);
      std::iter_swap(first + static_cast<std::ptrdiff_t>(i - 1), first + static_cast<std::ptrdiff_t>(j));
    }
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace mudpt
