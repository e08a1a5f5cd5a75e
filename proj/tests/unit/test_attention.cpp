#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "sgan/attention.hpp"
#include "support/oracles.hpp"

using namespace sgan;
using sgan::testing::random_tensor;
using sgan::testing::randomize;

TEST(PositionAttention, MatchesScalarOracleOnEveryEntry) {
  std::mt19937_64 rng(3);
  nn::Rng init(4);
  PositionAttention<double> pam(3, default_pam_scales(), init);
  randomize(pam.parameters(), rng);
  const auto f = random_tensor({1, 3, 32, 32}, rng);
  const auto out = pam(Var<double>(f)).value();
  const auto ref = sgan::testing::pam_oracle(f, 0, pam);
  ASSERT_EQ(out.size(), ref.out.size());
  for (std::size_t i = 0; i < out.size(); ++i) ASSERT_NEAR(out[i], ref.out[i], 1e-10) << i;
}

TEST(PositionAttention, ZeroInputWithoutBiasGivesHalfGateAndZeroOutput) {
  nn::Rng init(1);
  PositionAttention<double> pam(4, default_pam_scales(), init);
  for (auto& p : pam.parameters())
    if (p.name.ends_with("bias")) p.var.mutable_value().fill(0);
  const Var<double> f(Tensor<double>::zeros({1, 4, 16, 16}));
  const auto m = pam.attention_map(f).value();
  for (double v : m.vec()) EXPECT_DOUBLE_EQ(v, 0.5);
  const auto out = pam(f).value();
  for (double v : out.vec()) EXPECT_EQ(v, 0.0);
}

TEST(PositionAttention, MapShapeAndOpenUnitRange) {
  std::mt19937_64 rng(5);
  nn::Rng init(6);
  PositionAttention<double> pam(8, default_pam_scales(), init);
  randomize(pam.parameters(), rng, 2.0);
  const auto m = pam.attention_map(Var<double>(random_tensor({2, 8, 32, 16}, rng, -5, 5))).value();
  EXPECT_EQ(m.shape(), (Shape{2, 1, 32, 16}));
  for (double v : m.vec()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
}

TEST(PositionAttention, RejectsMapsTooSmallForCoarsestBranch) {
  nn::Rng init(1);
  PositionAttention<double> pam(2, default_pam_scales(), init);
  EXPECT_THROW(pam(Var<double>(Tensor<double>::zeros({1, 2, 8, 32}))), AttentionError);
  EXPECT_NO_THROW(pam(Var<double>(Tensor<double>::zeros({1, 2, 16, 16}))));
}

TEST(PositionAttention, RejectsNonFiniteInput) {
  nn::Rng init(1);
  PositionAttention<double> pam(2, default_pam_scales(), init);
  auto t = Tensor<double>::zeros({1, 2, 16, 16});
  t[7] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(pam(Var<double>(t)), AttentionError);
}

TEST(ChannelAttention, MatchesScalarOracle) {
  std::mt19937_64 rng(7);
  const auto f = random_tensor({1, 4, 8, 8}, rng);
  const auto out = cam_forward(Var<double>(f)).value();
  const auto x = channel_attention_matrix(Var<double>(f)).value();
  const auto ref = sgan::testing::cam_oracle(f, 0);
  for (std::size_t i = 0; i < out.size(); ++i) ASSERT_NEAR(out[i], ref.out[i], 1e-10);
  for (std::size_t i = 0; i < x.size(); ++i) ASSERT_NEAR(x[i], ref.x[i], 1e-12);
}

TEST(ChannelAttention, SingleChannelDoublesInput) {
  std::mt19937_64 rng(8);
  const auto f = random_tensor({1, 1, 5, 5}, rng);
  const auto out = cam_forward(Var<double>(f)).value();
  for (std::size_t i = 0; i < f.size(); ++i) EXPECT_NEAR(out[i], 2 * f[i], 1e-12);
}

TEST(ChannelAttention, IdenticalChannelsGiveUniformRows) {
  std::mt19937_64 rng(9);
  const auto one = random_tensor({1, 1, 4, 4}, rng);
  Tensor<double> f(Shape{1, 3, 4, 4});
  for (int c = 0; c < 3; ++c)
    for (int p = 0; p < 16; ++p) f[c * 16 + p] = one[p];
  const auto x = channel_attention_matrix(Var<double>(f)).value();
  for (double v : x.vec()) EXPECT_NEAR(v, 1.0 / 3, 1e-12);
  const auto out = cam_forward(Var<double>(f)).value();
  for (std::size_t i = 0; i < out.size(); ++i) EXPECT_NEAR(out[i], 2 * f[i], 1e-12);
}

TEST(ChannelAttention, RowsAreDistributionsEvenForLargeActivations) {
  std::mt19937_64 rng(10);
  const auto f = random_tensor({2, 6, 8, 8}, rng, -40, 40);
  const auto x = channel_attention_matrix(Var<double>(f)).value();
  ASSERT_TRUE(x.all_finite());
  for (int r = 0; r < 12; ++r) {
    double s = 0;
    for (int c = 0; c < 6; ++c) {
      EXPECT_GE(x[r * 6 + c], 0.0);
      s += x[r * 6 + c];
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(ChannelAttention, SoftmaxIgnoresPerRowShift) {
  std::mt19937_64 rng(11);
  const auto logits = random_tensor({1, 5, 5}, rng, -3, 3);
  auto shifted = logits;
  for (int r = 0; r < 5; ++r)
    for (int c = 0; c < 5; ++c) shifted[r * 5 + c] += 100.0 * (r + 1);
  const auto a = ops::softmax_lastdim(Var<double>(logits)).value();
  const auto b = ops::softmax_lastdim(Var<double>(shifted)).value();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(ChannelAttention, RejectsNonFiniteInput) {
  auto t = Tensor<double>::zeros({1, 2, 4, 4});
  t[3] = std::numeric_limits<double>::infinity();
  EXPECT_THROW(cam_forward(Var<double>(t)), AttentionError);
}

TEST(DualAttention, EqualsSumOfIndependentBranchOracles) {
  std::mt19937_64 rng(12);
  nn::Rng init(13);
  DualAttention<double> dual(3, true, true, default_pam_scales(), init);
  randomize(dual.parameters(), rng);
  const auto f = random_tensor({1, 3, 16, 16}, rng);
  const auto out = dual(Var<double>(f)).value();
  const auto pam = sgan::testing::pam_oracle(f, 0, dual.pam());
  const auto cam = sgan::testing::cam_oracle(f, 0);
  const auto p = sgan::testing::conv1x1_oracle(pam.out, 3, 256, dual.proj_pam());
  const auto c = sgan::testing::conv1x1_oracle(cam.out, 3, 256, dual.proj_cam());
  for (std::size_t i = 0; i < out.size(); ++i) ASSERT_NEAR(out[i], p[i] + c[i], 1e-9);
}

TEST(DualAttention, ZeroProjectionsGiveZero) {
  std::mt19937_64 rng(14);
  nn::Rng init(15);
  DualAttention<double> dual(4, true, true, default_pam_scales(), init);
  for (auto* conv : {&dual.proj_pam(), &dual.proj_cam()}) {
    conv->weight.mutable_value().fill(0);
    conv->bias.mutable_value().fill(0);
  }
  const auto out = dual(Var<double>(random_tensor({1, 4, 16, 16}, rng))).value();
  for (double v : out.vec()) EXPECT_EQ(v, 0.0);
}

TEST(DualAttention, SingleBranchVariantsAndShape) {
  std::mt19937_64 rng(16);
  nn::Rng init(17);
  const auto f = Var<double>(random_tensor({2, 4, 16, 16}, rng));
  DualAttention<double> pam_only(4, true, false, default_pam_scales(), init);
  DualAttention<double> cam_only(4, false, true, default_pam_scales(), init);
  EXPECT_EQ(pam_only(f).shape(), f.shape());
  EXPECT_EQ(cam_only(f).shape(), f.shape());
  EXPECT_THROW(DualAttention<double>(4, false, false, default_pam_scales(), init), AttentionError);
}
