#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "dfq/gradcheck.hpp"
#include "dfq/ops.hpp"
#include "grad_cases.hpp"
#include "support.hpp"

namespace dfq {
namespace {

using test::project;
using test::random_tensor;

constexpr double kTol = 1e-4;

Tensor<double> make(Shape shape, std::vector<double> values) {
  return Tensor<double>(std::move(shape), Eigen::Map<Array<double>>(values.data(), static_cast<Index>(values.size())));
}

TEST(Ops, ElementwiseForward) {
  Tape<double> tape;
  const auto a = make({3}, {1, -2, 3});
  const auto b = make({3}, {4, 5, -6});
  EXPECT_TRUE((add(tape, a, b).data() == make({3}, {5, 3, -3}).data()).all());
  EXPECT_TRUE((sub(tape, a, b).data() == make({3}, {-3, -7, 9}).data()).all());
  EXPECT_TRUE((mul(tape, a, b).data() == make({3}, {4, -10, -18}).data()).all());
  EXPECT_TRUE((relu(tape, a).data() == make({3}, {1, 0, 3}).data()).all());
  EXPECT_TRUE((abs(tape, a).data() == make({3}, {1, 2, 3}).data()).all());
  EXPECT_DOUBLE_EQ(sum(tape, a).item(), 2.0);
  EXPECT_DOUBLE_EQ(mean(tape, a).item(), 2.0 / 3.0);
  EXPECT_TRUE(tape.empty());
}

TEST(Ops, ShapeMismatchThrows) {
  Tape<double> tape;
  EXPECT_THROW(add(tape, Tensor<double>({2}), Tensor<double>({3})), ShapeError);
  EXPECT_THROW(matmul(tape, Tensor<double>({2, 3}), Tensor<double>({2, 3})), ShapeError);
}

TEST(Ops, MatmulExample) {
  Tape<double> tape;
  const auto c = matmul(tape, make({2, 2}, {1, 2, 3, 4}), make({2, 2}, {5, 6, 7, 8}));
  EXPECT_TRUE((c.data() == make({2, 2}, {19, 22, 43, 50}).data()).all());
}

TEST(Ops, LinearExample) {
  Tape<double> tape;
  // x[1,2] . W[3,2]^T + b
  const auto y = linear(tape, make({1, 2}, {1, 2}), make({3, 2}, {1, 0, 0, 1, 1, 1}), make({3}, {0.5, 0, -1}));
  EXPECT_TRUE((y.data() == make({1, 3}, {1.5, 2, 2}).data()).all());
}

TEST(Ops, Conv2dExample) {
  Tape<double> tape;
  const auto x = make({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  const auto w = make({1, 1, 2, 2}, {1, 1, 1, 1});
  const auto y = conv2d(tape, x, w, Tensor<double>{});
  EXPECT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
  EXPECT_TRUE((y.data() == make({4}, {12, 16, 24, 28}).data()).all());

  // Zero padding 1, stride 2 with a centered 3x3 identity kernel returns the strided input.
  const auto id = make({1, 1, 3, 3}, {0, 0, 0, 0, 1, 0, 0, 0, 0});
  const auto s = conv2d(tape, x, id, Tensor<double>{}, {.stride = 2, .padding = 1});
  EXPECT_EQ(s.shape(), (Shape{1, 1, 2, 2}));
  EXPECT_TRUE((s.data() == make({4}, {1, 3, 7, 9}).data()).all());
}

TEST(Ops, PoolExamples) {
  Tape<double> tape;
  const auto x = make({1, 1, 2, 4}, {1, 2, 3, 4, 5, 6, 7, 8});
  const auto a = avg_pool2d(tape, x, {.kernel = 2, .stride = 2});
  const auto m = max_pool2d(tape, x, {.kernel = 2, .stride = 2});
  EXPECT_TRUE((a.data() == make({2}, {3.5, 5.5}).data()).all());
  EXPECT_TRUE((m.data() == make({2}, {6, 8}).data()).all());
}

TEST(Ops, ChannelStatistics) {
  Tape<double> tape;
  // Two samples, two channels, two pixels.
  const auto x = make({2, 2, 1, 2}, {1, 3, 10, 10, 5, 7, 10, 10});
  const auto m = channel_mean(tape, x);
  const auto s = channel_std(tape, x);
  EXPECT_DOUBLE_EQ(m.data()[0], 4.0);
  EXPECT_DOUBLE_EQ(m.data()[1], 10.0);
  EXPECT_DOUBLE_EQ(s.data()[0], std::sqrt(5.0));  // biased: mean of {9,1,1,9}
  EXPECT_DOUBLE_EQ(s.data()[1], 0.0);
}

TEST(Ops, SoftmaxRowsSumToOneAndShiftInvariant) {
  const auto x = random_tensor<double>({4, 7}, 5, 3.0);
  Tape<double> tape;
  const auto p = softmax(tape, x);
  for (Index r = 0; r < 4; ++r) EXPECT_NEAR(p.data().segment(r * 7, 7).sum(), 1.0, 1e-12);
  const auto q = softmax(tape, add_scalar(tape, x, 100.0));
  EXPECT_LT((p.data() - q.data()).abs().maxCoeff(), 1e-12);
}

TEST(Ops, CrossEntropyExample) {
  Tape<double> tape;
  const std::vector<int> y{0};
  // Uniform logits over K classes give ln K.
  EXPECT_NEAR(cross_entropy(tape, Tensor<double>({1, 5}, 0.3), y).item(), std::log(5.0), 1e-12);
  EXPECT_THROW(cross_entropy(tape, Tensor<double>({1, 5}), std::vector<int>{5}), ContractError);
}

class OpGradient : public ::testing::TestWithParam<test::GradCase> {};

TEST_P(OpGradient, MatchesCentralDifferences) {
  const test::GradCase& c = GetParam();
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const auto x = random_tensor<double>(c.shape, seed, c.scale);
    EXPECT_LE(finite_diff_check<double>(c.fn, x, c.eps), kTol) << c.name << " seed " << seed;
  }
}

std::vector<test::GradCase> all_grad_cases() {
  auto cases = test::kernel_grad_cases();
  for (auto& c : test::model_grad_cases()) cases.push_back(std::move(c));
  return cases;
}

INSTANTIATE_TEST_SUITE_P(
    Kernels, OpGradient, ::testing::ValuesIn(all_grad_cases()),
    [](const ::testing::TestParamInfo<test::GradCase>& info) { return std::string(info.param.name); });

TEST(Ops, BackwardIsLinearInTheRoot) {
  const auto x0 = random_tensor<double>({2, 2, 4, 4}, 3);
  const auto w = random_tensor<double>({3, 2, 3, 3}, 4);
  auto grad_of = [&](double k) {
    Tensor<double> x = x0.detach();
    x.set_requires_grad(true);
    Tape<double> tape;
    tape.backward(scale(tape, project(tape, relu(tape, conv2d(tape, x, w, Tensor<double>{}, {.padding = 1}))), k));
    return Array<double>(x.grad());
  };
  const Array<double> g1 = grad_of(1.0), g3 = grad_of(3.0);
  EXPECT_LT((g3 - 3.0 * g1).abs().maxCoeff(), 1e-12);
}

TEST(Ops, GradientsAccumulateAcrossUses) {
  Tensor<double> x = make({2}, {1.5, -2.0});
  x.set_requires_grad(true);
  Tape<double> tape;
  tape.backward(sum(tape, add(tape, x, x)));
  EXPECT_TRUE((x.grad() == 2.0).all());
}

TEST(Ops, ForwardIsDeterministic) {
  const auto x = random_tensor<float>({4, 3, 8, 8}, 1);
  const auto w = random_tensor<float>({5, 3, 3, 3}, 2);
  Tape<float> t1, t2;
  const auto a = conv2d(t1, x, w, Tensor<float>{}, {.stride = 2, .padding = 1});
  const auto b = conv2d(t2, x, w, Tensor<float>{}, {.stride = 2, .padding = 1});
  EXPECT_TRUE((a.data() == b.data()).all());
}

TEST(Ops, BackwardNeedsScalarRoot) {
  Tensor<double> x({3}, 1.0);
  x.set_requires_grad(true);
  Tape<double> tape;
  EXPECT_THROW(tape.backward(relu(tape, x)), ContractError);
}

TEST(GradCheck, DetectsAWrongGradient) {
  // A deliberately broken backward rule must be caught.
  auto broken = [](Tape<double>& tape, const Tensor<double>& x) {
    Tensor<double> y({1}, x.data().square().sum());
    if (Tape<double>::any_requires_grad({&x})) {
      tape.record(y, [x](const Array<double>& g) { x.accumulate_grad(g[0] * x.data()); });  // should be 2x
    }
    return y;
  };
  EXPECT_GT(finite_diff_check<double>(broken, random_tensor<double>({4}, 1), 1e-6), 0.4);
}

TEST(GradCheck, NonFiniteIsAFailure) {
  auto nan_fn = [](Tape<double>& tape, const Tensor<double>& x) {
    return sum(tape, pow(tape, scale(tape, x, -1.0), 0.5));  // sqrt of negatives
  };
  EXPECT_TRUE(std::isinf(finite_diff_check<double>(nan_fn, Tensor<double>({2}, 1.0), 1e-6)));
}

}  // namespace
}  // namespace dfq
