#include "mudpt/numerics/ops.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mudpt/errors.hpp"
#include "support/test_util.hpp"

namespace mudpt {
namespace {

using testing::max_fd_error;
using testing::random_tensor;
using testing::weighted_sum;

Tensor row(std::vector<double> v) {
  const std::size_t n = v.size();
  return Tensor({n}, std::move(v));
}

// ---- softmax ---------------------------------------------------------------

TEST(SoftmaxTest, SymmetricPair) {
  Tensor p = ops::softmax(row({0.0, 0.0}));
  EXPECT_DOUBLE_EQ(p.at(0), 0.5);
  EXPECT_DOUBLE_EQ(p.at(1), 0.5);
}

TEST(SoftmaxTest, LogTwoGivesTwoThirds) {
  Tensor p = ops::softmax(row({std::log(2.0), 0.0}));
  EXPECT_NEAR(p.at(0), 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(p.at(1), 1.0 / 3.0, 1e-15);
}

TEST(SoftmaxTest, MatchesHighPrecisionOracle) {
  // 50-digit evaluation of exp(i) / (e + e^2 + e^3).
  Tensor p = ops::softmax(row({1.0, 2.0, 3.0}));
  EXPECT_NEAR(p.at(0), 0.0900305731703804579980221, 1e-12);
  EXPECT_NEAR(p.at(1), 0.2447284710547976524729596, 1e-12);
  EXPECT_NEAR(p.at(2), 0.6652409557748218895290183, 1e-12);
}

TEST(SoftmaxTest, EmptyInputRejected) { EXPECT_THROW(ops::softmax(Tensor()), InvalidInputError); }

TEST(SoftmaxTest, SumsToOneAndShiftInvariant) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Tensor v = random_tensor({1 + seed % 9}, seed, 5.0);
    Tensor p = ops::softmax(v);
    const auto pv = p.values();
    EXPECT_NEAR(std::accumulate(pv.begin(), pv.end(), 0.0), 1.0, 1e-9);
    for (double x : pv) EXPECT_GE(x, 0.0);

    std::vector<double> shifted(v.values().begin(), v.values().end());
    for (double& x : shifted) x += 123.25;
    Tensor q = ops::softmax(Tensor(v.shape(), shifted));
    for (std::size_t i = 0; i < pv.size(); ++i) EXPECT_NEAR(q.at(i), pv[i], 1e-12);
  }
}

TEST(SoftmaxTest, ArgmaxInvariantUnderPositiveScaling) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Tensor v = random_tensor({6}, seed);
    const auto argmax = [](std::span<const double> xs) {
      return std::distance(xs.begin(), std::max_element(xs.begin(), xs.end()));
    };
    const auto base = argmax(ops::softmax(v).values());
    for (double s : {0.01, 0.5, 3.0, 100.0}) EXPECT_EQ(argmax(ops::softmax(ops::scale(v, s)).values()), base);
  }
}

TEST(SoftmaxTest, ExtremeLogitsStayFinite) {
  Tensor p = ops::softmax(row({1e300, -1e300, 0.0}));
  EXPECT_TRUE(all_finite(p.values()));
  EXPECT_DOUBLE_EQ(p.at(0), 1.0);
}

// ---- layer_norm ------------------------------------------------------------

TEST(LayerNormTest, ConstantVectorMapsToZero) {
  Tensor y = ops::layer_norm(row({4.2, 4.2}), Tensor({2}, 1.0), Tensor({2}, 0.0));
  EXPECT_DOUBLE_EQ(y.at(0), 0.0);
  EXPECT_DOUBLE_EQ(y.at(1), 0.0);
}

TEST(LayerNormTest, AlreadyNormalizedUpToEps) {
  Tensor y = ops::layer_norm(row({1.0, -1.0}), Tensor({2}, 1.0), Tensor({2}, 0.0));
  EXPECT_NEAR(y.at(0), 1.0, 1e-5);
  EXPECT_NEAR(y.at(1), -1.0, 1e-5);
}

TEST(LayerNormTest, MatchesDirectFormula) {
  const std::vector<double> x{1.0, 2.0, 3.0};
  const double mu = (1.0 + 2.0 + 3.0) / 3.0;
  double var = 0.0;
  for (double v : x) var += (v - mu) * (v - mu);
  var /= 3.0;
  Tensor y = ops::layer_norm(row(x), Tensor({3}, 2.0), Tensor({3}, 1.0), 1e-5);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(y.at(i), 2.0 * (x[i] - mu) / std::sqrt(var + 1e-5) + 1.0, 1e-12);
}

TEST(LayerNormTest, UnitAffineGivesZeroMeanUnitVariance) {
  Tensor x = random_tensor({5, 16}, 7, 3.0);
  Tensor y = ops::layer_norm(x, Tensor({16}, 1.0), Tensor({16}, 0.0));
  for (std::size_t r = 0; r < 5; ++r) {
    double mu = 0.0, var = 0.0;
    for (std::size_t c = 0; c < 16; ++c) mu += y.at(r, c);
    mu /= 16;
    for (std::size_t c = 0; c < 16; ++c) var += (y.at(r, c) - mu) * (y.at(r, c) - mu);
    var /= 16;
    EXPECT_NEAR(mu, 0.0, 1e-12);
    EXPECT_NEAR(var, 1.0, 1e-5);
  }
}

TEST(LayerNormTest, LengthMismatchIsShapeError) {
  EXPECT_THROW(ops::layer_norm(row({1, 2, 3}), Tensor({2}, 1.0), Tensor({3}, 0.0)), ShapeError);
}

// ---- attention -------------------------------------------------------------

Tensor identity(std::size_t n) {
  Tensor t({n, n});
  for (std::size_t i = 0; i < n; ++i) t.mutable_values()[i * n + i] = 1.0;
  return t;
}

AttentionParams identity_attention(std::size_t width, std::size_t heads) {
  return {identity(width), identity(width), identity(width), identity(width), heads};
}

TEST(AttentionTest, SingleKeyReturnsValue) {
  Tensor q = random_tensor({1, 4}, 1);
  Tensor k = random_tensor({1, 4}, 2);
  Tensor v = random_tensor({1, 4}, 3);
  Tensor out = multi_head_attention(q, k, v, identity_attention(4, 2));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(out.at(i), v.at(i), 1e-15);
}

TEST(AttentionTest, ZeroOutputProjectionAnnihilates) {
  AttentionParams p = identity_attention(4, 2);
  p.output = Tensor({4, 4}, 0.0);
  Tensor out = multi_head_attention(random_tensor({3, 4}, 1), random_tensor({5, 4}, 2), random_tensor({5, 4}, 3), p);
  EXPECT_EQ(out.rows(), 3u);
  for (double x : out.values()) EXPECT_EQ(x, 0.0);
}

TEST(AttentionTest, MatchesHandWorkedTwoByTwo) {
  // Scores, softmax and the value mix were evaluated by hand at 50 digits.
  AttentionParams p{Tensor({2, 2}, {1.0, 0.5, 0.0, 1.0}), Tensor({2, 2}, {1.0, 0.0, 0.5, 1.0}),
                    Tensor({2, 2}, {2.0, 0.0, 0.0, 1.0}), Tensor({2, 2}, {1.0, 1.0, 0.0, 1.0}), 1};
  Tensor q({2, 2}, {1.0, 0.0, 0.5, -1.0});
  Tensor k({2, 2}, {1.0, 1.0, 0.0, 2.0});
  Tensor v({2, 2}, {1.0, 2.0, 3.0, -1.0});
  Tensor out = multi_head_attention(q, k, v, p);
  EXPECT_NEAR(out.at(0, 0), 4.0, 1e-10);
  EXPECT_NEAR(out.at(0, 1), 4.5, 1e-10);
  EXPECT_NEAR(out.at(1, 0), 3.32095380269337229753282, 1e-10);
  EXPECT_NEAR(out.at(1, 1), 4.330238450673343074383205, 1e-10);
}

TEST(AttentionTest, OutputShapeFollowsQueries) {
  AttentionParams p{random_tensor({8, 8}, 1), random_tensor({8, 8}, 2), random_tensor({8, 8}, 3),
                    random_tensor({8, 8}, 4), 4};
  Tensor out = multi_head_attention(random_tensor({3, 8}, 5), random_tensor({6, 8}, 6), random_tensor({6, 8}, 7), p);
  EXPECT_EQ(out.shape(), (Shape{3, 8}));
}

TEST(AttentionTest, WidthOrHeadMismatchIsShapeError) {
  AttentionParams p = identity_attention(4, 3);
  EXPECT_THROW(multi_head_attention(Tensor({1, 4}), Tensor({1, 4}), Tensor({1, 4}), p), ShapeError);
  AttentionParams ok = identity_attention(4, 2);
  EXPECT_THROW(multi_head_attention(Tensor({1, 5}), Tensor({1, 4}), Tensor({1, 4}), ok), ShapeError);
  EXPECT_THROW(multi_head_attention(Tensor({1, 4}), Tensor({2, 4}), Tensor({3, 4}), ok), ShapeError);
}

TEST(AttentionTest, JointKeyValuePermutationLeavesOutputUnchanged) {
  AttentionParams p{random_tensor({6, 6}, 11), random_tensor({6, 6}, 12), random_tensor({6, 6}, 13),
                    random_tensor({6, 6}, 14), 2};
  Tensor q = random_tensor({3, 6}, 1);
  Tensor k = random_tensor({5, 6}, 2);
  Tensor v = random_tensor({5, 6}, 3);
  const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
  std::vector<double> kp, vp;
  for (std::size_t r : perm) {
    for (std::size_t c = 0; c < 6; ++c) {
      kp.push_back(k.at(r, c));
      vp.push_back(v.at(r, c));
    }
  }
  Tensor a = multi_head_attention(q, k, v, p);
  Tensor b = multi_head_attention(q, Tensor({5, 6}, kp), Tensor({5, 6}, vp), p);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a.at(i), b.at(i), 1e-12);
}

// ---- autodiff --------------------------------------------------------------

class OpGradientTest : public ::testing::TestWithParam<std::uint64_t> {};

TEST_P(OpGradientTest, MatchesCentralDifferences) {
  const std::uint64_t s = GetParam() * 100;
  Tensor a = random_tensor({3, 4}, s + 1);
  Tensor b = random_tensor({4, 2}, s + 2);
  Tensor c = random_tensor({3, 4}, s + 3);
  Tensor r = random_tensor({4}, s + 4);
  Tensor d = random_tensor({2, 4}, s + 5);
  Tensor sc = random_tensor({1}, s + 6);
  constexpr double kTol = 1e-5;

  EXPECT_LT(max_fd_error([&] { return weighted_sum(ops::matmul(a, b), 1); }, {a, b}), kTol);
  EXPECT_LT(max_fd_error([&] { return weighted_sum(ops::matmul_nt(a, d), 2); }, {a, d}), kTol);
  EXPECT_LT(max_fd_error([&] { return weighted_sum(ops::transpose(a), 3); }, {a}), kTol);
  EXPECT_LT(max_fd_error([&] { return weighted_sum(ops::add(a, c), 4); }, {a, c}), kTol);
  EXPECT_LT(max_fd_error([&] { return weighted_sum(ops::sub(a, c), 5); }, {a, c}), kTol);
  EXPECT_LT(max_fd_error([&] { return weighted_sum(ops::mul(a, c), 6); }, {a, c}), kTol);
  EXPECT_LT(max_fd_error([&] { return weighted_sum(ops::scale_by(a, sc), 7); }, {a, sc}), kTol);
  EXPECT_LT(max_fd_error([&] { return weighted_sum(ops::add_row(a, r), 8); }, {a, r}), kTol);
  EXPECT_LT(max_fd_error([&] { return weighted_sum(ops::exp(a), 9); }, {a}), kTol);
  EXPECT_LT(max_fd_error([&] { return weighted_sum(ops::gelu(a), 10); }, {a}), kTol);
  Tensor gamma = random_tensor({4}, s + 7);
  EXPECT_LT(max_fd_error([&] { return weighted_sum(ops::layer_norm(a, gamma, r), 11); }, {a, gamma, r}), kTol);
  EXPECT_LT(max_fd_error([&] { return weighted_sum(ops::softmax(a), 12); }, {a}), kTol);
  EXPECT_LT(max_fd_error([&] { return weighted_sum(ops::log_softmax(a), 13); }, {a}), kTol);
  EXPECT_LT(max_fd_error(
                [&] {
                  const std::vector<Tensor> parts{a, d};
                  return weighted_sum(ops::concat_rows(parts), 14);
                },
                {a, d}),
            kTol);
  EXPECT_LT(max_fd_error([&] { return weighted_sum(ops::slice_rows(a, 1, 2), 15); }, {a}), kTol);
  EXPECT_LT(max_fd_error(
                [&] {
                  const std::vector<Tensor> parts{a, c};
                  return weighted_sum(ops::concat_cols(parts), 16);
                },
                {a, c}),
            kTol);
  EXPECT_LT(max_fd_error([&] { return weighted_sum(ops::slice_cols(a, 1, 2), 17); }, {a}), kTol);
  EXPECT_LT(max_fd_error(
                [&] {
                  const std::vector<Tensor> parts{a, c};
                  return weighted_sum(ops::select(ops::stack(parts), 1), 18);
                },
                {a, c}),
            kTol);
  EXPECT_LT(max_fd_error([&] { return weighted_sum(ops::reshape(a, {2, 6}), 19); }, {a}), kTol);
  EXPECT_LT(max_fd_error([&] { return ops::mean(ops::mul(a, a)); }, {a}), kTol);
  EXPECT_LT(max_fd_error([&] { return weighted_sum(ops::l2_normalize_rows(a), 20); }, {a}), kTol);
  const std::vector<int> labels{1, 3, 0};
  EXPECT_LT(max_fd_error([&] { return ops::cross_entropy(a, labels); }, {a}), kTol);

  AttentionParams p{random_tensor({4, 4}, s + 20), random_tensor({4, 4}, s + 21), random_tensor({4, 4}, s + 22),
                    random_tensor({4, 4}, s + 23), 2};
  EXPECT_LT(max_fd_error([&] { return weighted_sum(multi_head_attention(a, d, d, p), 21); },
                         {a, d, p.query, p.key, p.value, p.output}),
            kTol);
}

INSTANTIATE_TEST_SUITE_P(Seeds, OpGradientTest, ::testing::Range<std::uint64_t>(0, 5));

TEST(CrossEntropyTest, UniformLogitsGiveLogM) {
  Tensor logits({2, 5}, 0.3);
  const std::vector<int> labels{0, 4};
  EXPECT_NEAR(ops::cross_entropy(logits, labels).item(), std::log(5.0), 1e-15);
}

TEST(CrossEntropyTest, EmptyBatchAndBadLabelsRejected) {
  EXPECT_THROW(ops::cross_entropy(Tensor({1, 3}), std::vector<int>{}), InvalidInputError);
  EXPECT_THROW(ops::cross_entropy(Tensor({1, 3}), std::vector<int>{3}), InvalidInputError);
}

TEST(NormalizeTest, ZeroRowIsNumericError) {
  EXPECT_THROW(ops::l2_normalize_rows(Tensor({2, 3}, 0.0)), NumericError);
}

TEST(FinitenessTest, OpsOnFiniteInputsStayFinite) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Tensor a = random_tensor({4, 4}, seed, 30.0);
    EXPECT_TRUE(all_finite(ops::softmax(a).values()));
    EXPECT_TRUE(all_finite(ops::log_softmax(a).values()));
    EXPECT_TRUE(all_finite(ops::gelu(a).values()));
    EXPECT_TRUE(all_finite(ops::layer_norm(a, Tensor({4}, 1.0), Tensor({4}, 0.0)).values()));
    EXPECT_TRUE(all_finite(ops::cross_entropy(a, std::vector<int>{0, 1, 2, 3}).values()));
  }
}

}  // namespace
}  // namespace mudpt
