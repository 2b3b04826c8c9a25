#include "mudpt/numerics/kernels.hpp"

#include <algorithm>
#include <cmath>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace mudpt::kernels {

namespace {

inline double a_at(Transpose t, std::span<const double> a, std::size_t m, std::size_t k, std::size_t i,
                   std::size_t p) {
  return t == Transpose::kNo ? a[i * k + p] : a[p * m + i];
}

inline double b_at(Transpose t, std::span<const double> b, std::size_t k, std::size_t n, std::size_t p,
                   std::size_t j) {
  return t == Transpose::kNo ? b[p * n + j] : b[j * k + p];
}

// Computes rows [row_begin, row_end) of C. The i-p-j order keeps the inner
// loop contiguous in C and (untransposed) B.
void gemm_rows(GemmShape s, Transpose ta, Transpose tb, std::span<const double> a, std::span<const double> b,
               std::span<double> c, std::size_t row_begin, std::size_t row_end) {
  const auto [m, n, k] = s;
  for (std::size_t i = row_begin; i < row_end; ++i) {
    double* crow = c.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a_at(ta, a, m, k, i, p);
      if (av == 0.0) continue;
      if (tb == Transpose::kNo) {
        const double* brow = b.data() + p * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      } else {
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * b_at(tb, b, k, n, p, j);
      }
    }
  }
}

void softmax_row(std::size_t cols, const double* in, double* out) {
  double mx = in[0];
  for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, in[j]);
  double sum = 0.0;
  for (std::size_t j = 0; j < cols; ++j) {
    out[j] = std::exp(in[j] - mx);
    sum += out[j];
  }
  for (std::size_t j = 0; j < cols; ++j) out[j] /= sum;
}

bool in_parallel() {
#ifdef _OPENMP
  return omp_in_parallel() != 0;
#else
  return true;
#endif
}

}  // namespace

void gemm_serial(GemmShape s, Transpose ta, Transpose tb, std::span<const double> a, std::span<const double> b,
                 std::span<double> c) {
  // Reference: textbook triple loop, one dot product per output element.
  const auto [m, n, k] = s;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += a_at(ta, a, m, k, i, p) * b_at(tb, b, k, n, p, j);
      c[i * n + j] += acc;
    }
  }
}

void gemm_parallel(GemmShape s, Transpose ta, Transpose tb, std::span<const double> a, std::span<const double> b,
                   std::span<double> c) {
  const auto m = static_cast<long long>(s.m);
#pragma omp parallel for schedule(static)
  for (long long i = 0; i < m; ++i) {
    gemm_rows(s, ta, tb, a, b, c, static_cast<std::size_t>(i), static_cast<std::size_t>(i) + 1);
  }
}

void gemm(GemmShape s, Transpose ta, Transpose tb, std::span<const double> a, std::span<const double> b,
          std::span<double> c) {
  if (s.m * s.n * s.k >= kParallelGemmThreshold && s.m > 1 && !in_parallel()) {
    gemm_parallel(s, ta, tb, a, b, c);
  } else {
    gemm_rows(s, ta, tb, a, b, c, 0, s.m);
  }
}

void softmax_rows_serial(std::size_t rows, std::size_t cols, std::span<const double> in, std::span<double> out) {
  for (std::size_t r = 0; r < rows; ++r) softmax_row(cols, in.data() + r * cols, out.data() + r * cols);
}

void softmax_rows_parallel(std::size_t rows, std::size_t cols, std::span<const double> in, std::span<double> out) {
  const auto n = static_cast<long long>(rows);
#pragma omp parallel for schedule(static)
  for (long long r = 0; r < n; ++r) {
    softmax_row(cols, in.data() + r * cols, out.data() + r * cols);
  }
}

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

}  // namespace mudpt::kernels
