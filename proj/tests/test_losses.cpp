#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "dfq/gradcheck.hpp"
#include "dfq/losses.hpp"
#include "grad_cases.hpp"
#include "support.hpp"

namespace dfq {
namespace {

using test::random_tensor;

const std::vector<int> kLabels{1, 3, 0, 3};

TEST(Losses, CrossEntropyGradientIsPMinusOne) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Tensor<double> z = random_tensor<double>({4, 6}, seed, 3.0);
    z.set_requires_grad(true);
    Tape<double> tape;
    tape.backward(ce_loss(tape, z, kLabels));
    const Array<double> p = softmax_rows<double>(z.data(), 4, 6);
    for (Index n = 0; n < 4; ++n) {
      const Index i = n * 6 + kLabels[static_cast<std::size_t>(n)];
      EXPECT_NEAR(z.grad()[i] * 4.0, p[i] - 1.0, 1e-12);
    }
  }
}

TEST(Losses, AbsGradientIsConstant) {
  Tensor<double> z = random_tensor<double>({4, 6}, 3, 50.0);
  z.set_requires_grad(true);
  Tape<double> tape;
  tape.backward(abs_loss(tape, z, kLabels));
  for (Index n = 0; n < 4; ++n) {
    for (Index k = 0; k < 6; ++k) {
      const double expected = k == kLabels[static_cast<std::size_t>(n)] ? -0.25 : 0.0;
      EXPECT_EQ(z.grad()[n * 6 + k], expected);
    }
  }
}

TEST(Losses, AbsValueIsNegatedMeanTargetLogit) {
  Tape<double> tape;
  const auto z = random_tensor<double>({4, 6}, 4);
  double expected = 0.0;
  for (Index n = 0; n < 4; ++n) expected -= z.data()[n * 6 + kLabels[static_cast<std::size_t>(n)]] / 4.0;
  EXPECT_NEAR(abs_loss(tape, z, kLabels).item(), expected, 1e-15);
}

TEST(Losses, MaeMseAgainstDirectFormula) {
  const auto z = random_tensor<double>({4, 6}, 9, 2.0);
  const Array<double> p = softmax_rows<double>(z.data(), 4, 6);
  double mae = 0.0, mse = 0.0;
  for (Index n = 0; n < 4; ++n) {
    for (Index k = 0; k < 6; ++k) {
      const double d = p[n * 6 + k] - (k == kLabels[static_cast<std::size_t>(n)] ? 1.0 : 0.0);
      mae += std::abs(d);
      mse += d * d;
    }
  }
  Tape<double> tape;
  EXPECT_NEAR(mae_loss(tape, z, kLabels).item(), mae / 24.0, 1e-14);
  EXPECT_NEAR(mse_loss(tape, z, kLabels).item(), mse / 24.0, 1e-14);
}

TEST(Losses, PerfectPredictionLimits) {
  Tensor<double> z({1, 3}, 0.0);
  z.mutable_data()[1] = 60.0;
  const std::vector<int> y{1};
  Tape<double> tape;
  EXPECT_LT(ce_loss(tape, z, y).item(), 1e-20);
  EXPECT_LT(mse_loss(tape, z, y).item(), 1e-40);
  EXPECT_EQ(abs_loss(tape, z, y).item(), -60.0);
}

TEST(Losses, BnsIsZeroAtStoredStatistics) {
  std::vector<BNStats> stored(2);
  stored[0] = {Eigen::ArrayXf::Constant(3, 0.5f), Eigen::ArrayXf::Constant(3, 2.0f)};
  stored[1] = {Eigen::ArrayXf::Constant(2, -1.0f), Eigen::ArrayXf::Constant(2, 0.25f)};
  std::vector<BatchStats<double>> batch;
  for (const BNStats& s : stored) {
    batch.push_back({Tensor<double>({s.mean.size()}, s.mean.cast<double>()), Tensor<double>({s.std.size()}, s.std.cast<double>())});
  }
  Tape<double> tape;
  EXPECT_EQ(bns_loss(tape, batch, stored).item(), 0.0);

  // One unit of mean error in one channel and a 0.5 std error in another.
  batch[0].mean.mutable_data()[1] += 1.0;
  batch[1].std.mutable_data()[0] += 0.5;
  EXPECT_NEAR(bns_loss(tape, batch, stored).item(), 1.25, 1e-12);
}

TEST(Losses, BnsRejectsLayerCountMismatch) {
  std::vector<BNStats> stored(1, BNStats{Eigen::ArrayXf::Zero(2), Eigen::ArrayXf::Ones(2)});
  Tape<double> tape;
  EXPECT_THROW(bns_loss(tape, std::vector<BatchStats<double>>{}, stored), ContractError);
}

TEST(Losses, DistillationEqualsScaledSoftCrossEntropy) {
  const auto s = random_tensor<double>({3, 5}, 1, 2.0);
  const auto t = random_tensor<double>({3, 5}, 2, 2.0);
  Tape<double> tape;
  const double T = 4.0;
  const auto target = softmax(tape, scale(tape, t, 1.0 / T));
  const double expected = T * T * soft_cross_entropy(tape, scale(tape, s, 1.0 / T), target).item();
  EXPECT_NEAR(distillation_loss(tape, s, t, T).item(), expected, 1e-12);
}

TEST(Losses, OneHot) {
  const auto h = one_hot<float>(std::vector<int>{2, 0}, 3);
  EXPECT_EQ(h.shape(), (Shape{2, 3}));
  EXPECT_TRUE((h.data() == (Eigen::ArrayXf(6) << 0, 0, 1, 1, 0, 0).finished()).all());
}

TEST(Losses, GradientsMatchCentralDifferences) {
  for (const test::GradCase& c : test::loss_grad_cases()) {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      EXPECT_LE(finite_diff_check<double>(c.fn, random_tensor<double>(c.shape, seed, c.scale), c.eps), 1e-4) << c.name;
    }
  }
}

}  // namespace
}  // namespace dfq
