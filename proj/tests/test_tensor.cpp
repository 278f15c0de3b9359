#include <gtest/gtest.h>

#include <cmath>

#include "support/oracles.hpp"

using namespace m3p;
using m3p::testing::random_tensor;

TEST(Tensor, RejectsMismatchedShapes) {
  EXPECT_THROW(Tensor<float>({2, 3}, std::vector<float>(5)), ShapeError);
  EXPECT_THROW(Tensor<float>::zeros({2, 0}), ShapeError);
  auto a = Tensor<float>::zeros({2, 3}), b = Tensor<float>::zeros({4, 5});
  EXPECT_THROW(matmul(a, b), ShapeError);
  EXPECT_THROW(add(a, b), ShapeError);
}

TEST(Tensor, CopiesShareStorageCloneDoesNot) {
  auto a = Tensor<float>::zeros({3});
  auto b = a;
  auto c = a.clone();
  a.mutable_data()[0] = 5.f;
  EXPECT_EQ(b[0], 5.f);
  EXPECT_EQ(c[0], 0.f);
}

TEST(Autograd, MatmulMatchesNaiveProductAndGradient) {
  CounterRng rng(3);
  auto a = random_tensor({3, 4}, rng), b = random_tensor({4, 2}, rng);
  const auto c = matmul(a, b);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 2; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < 4; ++k) s += a[i * 4 + k] * b[k * 2 + j];
      EXPECT_NEAR(c[i * 2 + j], s, 1e-12);
    }
  backward(sum(c));
  // d sum(AB) / dA[i][k] = sum_j B[k][j]
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(a.grad()[i * 4 + k], b[k * 2] + b[k * 2 + 1], 1e-12);
}

TEST(Autograd, GradientsAccumulateAcrossUses) {
  auto x = Tensor<double>({2}, {1.5, -2.0}, true);
  backward(sum(add(mul(x, x), x)));  // d/dx (x^2 + x) = 2x + 1
  EXPECT_DOUBLE_EQ(x.grad()[0], 4.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], -3.0);
}

TEST(Autograd, SecondBackwardThroughSameGraphThrows) {
  auto x = Tensor<double>({2}, {1.0, 2.0}, true);
  const auto y = sum(mul(x, x));
  backward(y);
  EXPECT_THROW(backward(y), AutogradError);
}

TEST(Autograd, NonScalarLossThrows) {
  auto x = Tensor<double>({2}, {1.0, 2.0}, true);
  EXPECT_THROW(backward(mul(x, x)), AutogradError);
}

TEST(Autograd, NoGradGuardRecordsNothing) {
  auto x = Tensor<double>({2}, {1.0, 2.0}, true);
  Tensor<double> y;
  {
    NoGradGuard g;
    y = sum(mul(x, x));
  }
  EXPECT_FALSE(y.requires_grad());
  EXPECT_TRUE(grad_enabled());
}

TEST(Ops, SoftmaxRowsSumToOne) {
  CounterRng rng(1);
  const auto x = random_tensor({4, 7}, rng, false, 10.0);
  const auto y = softmax(x, -1);
  for (std::size_t r = 0; r < 4; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < 7; ++c) s += y[r * 7 + c];
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Ops, LayerNormNormalisesRows) {
  CounterRng rng(2);
  const auto x = random_tensor({3, 16}, rng, false, 5.0);
  const auto y = layer_norm(x, Tensor<double>::ones({16}), Tensor<double>::zeros({16}));
  for (std::size_t r = 0; r < 3; ++r) {
    double mu = 0, var = 0;
    for (std::size_t c = 0; c < 16; ++c) mu += y[r * 16 + c];
    mu /= 16;
    for (std::size_t c = 0; c < 16; ++c) var += (y[r * 16 + c] - mu) * (y[r * 16 + c] - mu);
    EXPECT_NEAR(mu, 0.0, 1e-12);
    EXPECT_NEAR(var / 16, 1.0, 1e-4);
  }
}

TEST(Ops, CrossEntropyIgnoresPadAndMatchesLogSoftmax) {
  const auto logits = Tensor<double>({2, 3}, {1.0, 2.0, 3.0, 0.0, 0.0, 0.0});
  const double lse = std::log(std::exp(1.0) + std::exp(2.0) + std::exp(3.0));
  EXPECT_NEAR(cross_entropy_label_smoothed(logits, {2, 0}, 0.0, 0).item(), lse - 3.0, 1e-12);
  // smoothing mixes in the mean negative log-probability
  const double uniform = (3 * lse - 6.0) / 3;
  EXPECT_NEAR(cross_entropy_label_smoothed(logits, {2, 0}, 0.1, 0).item(), 0.9 * (lse - 3.0) + 0.1 * uniform, 1e-12);
  EXPECT_EQ(cross_entropy_label_smoothed(logits, {0, 0}, 0.1, 0).item(), 0.0);
}

TEST(Ops, MaskAttentionBlocksFutureAndPadding) {
  const auto s = Tensor<double>::zeros({1, 1, 3, 3});
  const auto p = softmax(mask_attention(s, {1, 1, 0}, true), -1);
  const double expect[9] = {1, 0, 0, 0.5, 0.5, 0, 0.5, 0.5, 0};
  for (std::size_t i = 0; i < 9; ++i) EXPECT_NEAR(p[i], expect[i], 1e-12);
}
