#pragma once

#include <cstddef>
#include <span>

// Dense kernels behind the tensor ops. Each kernel has a serial reference
// implementation and an OpenMP one; `gemm` dispatches between them. The
// parallel versions split work over output rows only, so every output element
// is accumulated in the same order and results are bitwise identical.
namespace mudpt::kernels {

enum class Transpose { kNo, kYes };

struct GemmShape {
  std::size_t m;  // rows of op(A) and C
  std::size_t n;  // cols of op(B) and C
  std::size_t k;  // shared dimension
};

/// C += op(A) * op(B), all row-major. A is m x k (or k x m when transposed),
/// B is k x n (or n x k when transposed).
void gemm_serial(GemmShape s, Transpose ta, Transpose tb, std::span<const double> a, std::span<const double> b,
                 std::span<double> c);
void gemm_parallel(GemmShape s, Transpose ta, Transpose tb, std::span<const double> a, std::span<const double> b,
                   std::span<double> c);
void gemm(GemmShape s, Transpose ta, Transpose tb, std::span<const double> a, std::span<const double> b,
          std::span<double> c);

/// Row-wise softmax over a rows x cols block.
void softmax_rows_serial(std::size_t rows, std::size_t cols, std::span<const double> in, std::span<double> out);
void softmax_rows_parallel(std::size_t rows, std::size_t cols, std::span<const double> in, std::span<double> out);

/// Multiply-add count above which `gemm` uses the OpenMP kernel. Nested
/// parallel regions always fall back to serial.
inline constexpr std::size_t kParallelGemmThreshold = 64 * 64 * 64;

/// Number of OpenMP threads available (1 when built without OpenMP).
int max_threads();

}  // namespace mudpt::kernels
