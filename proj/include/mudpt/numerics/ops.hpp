#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "mudpt/numerics/tensor.hpp"

// Differentiable operations. Unless noted, matrix ops treat a tensor as
// rows() x cols() (see Tensor), and every op raises ShapeError on mismatch.
namespace mudpt::ops {

Tensor matmul(const Tensor& a, const Tensor& b);
/// a * b^T without materializing the transpose.
Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
/// Multiplies every entry by the single value held in `s`.
Tensor scale_by(const Tensor& a, const Tensor& s);
/// Adds a length-cols() row to every row of `a`.
Tensor add_row(const Tensor& a, const Tensor& row);
Tensor exp(const Tensor& a);

/// tanh approximation of GELU.
Tensor gelu(const Tensor& a);

inline constexpr double kLayerNormEps = 1e-5;
/// Normalizes each row to zero mean / unit variance, then applies gamma, beta.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = kLayerNormEps);

/// Row-wise softmax. Empty input is rejected with InvalidInputError.
Tensor softmax(const Tensor& x);
Tensor log_softmax(const Tensor& x);

Tensor concat_rows(std::span<const Tensor> parts);
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count);
Tensor concat_cols(std::span<const Tensor> parts);
Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t count);

/// x[index] along the leading axis (rank drops by one).
Tensor select(const Tensor& x, std::size_t index);
/// Stacks equally shaped tensors along a new leading axis.
Tensor stack(std::span<const Tensor> parts);
Tensor reshape(const Tensor& x, Shape shape);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

/// Scales each row to unit Euclidean norm. A zero row raises NumericError.
Tensor l2_normalize_rows(const Tensor& x);

/// Mean over rows of -log softmax(logits)[row, label].
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);

}  // namespace mudpt::ops

namespace mudpt {

/// Projections of one multi-head attention block. All four matrices are
/// width x width; head h owns columns [h*head_width, (h+1)*head_width).
struct AttentionParams {
  Tensor query;
  Tensor key;
  Tensor value;
  Tensor output;
  std::size_t heads = 1;

  std::size_t width() const { return query.dim(0); }
  std::size_t head_width() const { return width() / heads; }
  void validate() const;
};

/// Scaled dot-product attention with scale 1/sqrt(head_width). Returns one
/// row per query row.
Tensor multi_head_attention(const Tensor& queries, const Tensor& keys, const Tensor& values,
                            const AttentionParams& params);

}  // namespace mudpt
