#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "dfq/gradcheck.hpp"
#include "dfq/quantizer.hpp"
#include "dfq/zoo.hpp"
#include "support.hpp"

namespace dfq {
namespace {

TEST(Quantizer, DeltaExamples) {
  EXPECT_EQ(compute_delta(0.0, 15.0, 4), 1.0);
  EXPECT_EQ(compute_delta(-1.0, 2.0, 2), 1.0);
  EXPECT_EQ(compute_delta(0.0, 255.0, 8), 1.0);
  EXPECT_EQ(QuantParams(0.0, 15.0, 4).max_code(), 15);
  EXPECT_THROW(QuantParams(1.0, 1.0, 4), ContractError);
  EXPECT_THROW(QuantParams(2.0, 1.0, 4), ContractError);
  EXPECT_THROW(QuantParams(0.0, 1.0, 1), ContractError);
  EXPECT_THROW(QuantParams(0.0, 1.0, 9), ContractError);
}

TEST(Quantizer, RoundsHalfAwayFromZeroAndClamps) {
  const QuantParams p(0.0, 15.0, 4);
  Eigen::ArrayXd x(7);
  x << 0.5, 1.5, 2.5, 14.49, -3.0, 40.0, 7.0;
  const Eigen::ArrayXi q = quantize<double>(x, p);
  Eigen::ArrayXi expected(7);
  expected << 1, 2, 3, 14, 0, 15, 7;
  EXPECT_TRUE((q == expected).all());
  EXPECT_TRUE((dequantize<double>(q, p) == q.cast<double>()).all());
}

TEST(Quantizer, NegativeLowerBound) {
  const QuantParams p(-1.5, 1.5, 2);  // delta 1: levels -1.5, -0.5, 0.5, 1.5
  Eigen::ArrayXf x(4);
  x << -1.0f, -0.2f, 0.9f, 1.2f;
  Eigen::ArrayXf expected(4);
  expected << -0.5f, -0.5f, 0.5f, 1.5f;
  EXPECT_TRUE((fake_quant_values<float>(x, p) == expected).all());
}

TEST(Quantizer, DequantizeRejectsForeignCodes) {
  const QuantParams p(0.0, 1.0, 3);
  Eigen::ArrayXi bad(2);
  bad << 3, 8;
  EXPECT_THROW(dequantize<float>(bad, p), ContractError);
  bad << -1, 0;
  EXPECT_THROW(dequantize<float>(bad, p), ContractError);
}

TEST(Quantizer, RandomizedInvariants) {
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> lo(-10.0, 10.0), width(1e-3, 20.0), unit(0.0, 1.0);
  std::uniform_int_distribution<int> bits(kMinBits, kMaxBits);
  for (int trial = 0; trial < 2000; ++trial) {
    const double l = lo(rng), u = l + width(rng);
    const QuantParams p(l, u, bits(rng));
    Eigen::ArrayXd x(8);
    for (Index i = 0; i < 6; ++i) x[i] = l + (u - l) * unit(rng);
    x[6] = l - 5.0 * unit(rng);
    x[7] = u + 5.0 * unit(rng);
    const Eigen::ArrayXi q = quantize<double>(x, p);
    EXPECT_TRUE((q >= 0).all() && (q <= p.max_code()).all());
    const Eigen::ArrayXd d = dequantize<double>(q, p);
    for (Index i = 0; i < 6; ++i) EXPECT_LE(std::abs(d[i] - x[i]), p.delta() / 2 * (1 + 1e-9));
    EXPECT_EQ(q[6], 0);
    EXPECT_EQ(q[7], p.max_code());
    // Quantization is idempotent on the grid.
    EXPECT_TRUE((quantize<double>(d, p) == q).all());
  }
}

TEST(Quantizer, FakeQuantIsMonotone) {
  const QuantParams p(-0.7, 2.3, 3);
  Eigen::ArrayXf x = Eigen::ArrayXf::LinSpaced(500, -2.0f, 4.0f);
  const Eigen::ArrayXf y = fake_quant_values<float>(x, p);
  for (Index i = 1; i < y.size(); ++i) EXPECT_LE(y[i - 1], y[i]);
}

TEST(Quantizer, StraightThroughGradient) {
  const QuantParams p(0.0, 1.0, 2);
  Tensor<double> x({5}, Array<double>((Array<double>(5) << -0.5, 0.0, 0.4, 1.0, 1.7).finished()));
  x.set_requires_grad(true);
  Tape<double> tape;
  tape.backward(sum(tape, fake_quant(tape, x, p)));
  Array<double> expected(5);
  expected << 0, 1, 1, 1, 0;
  EXPECT_TRUE((x.grad() == expected).all());
}

TEST(QuantModel, WeightRangesAreTensorMinMax) {
  const ModelGraph m = test::small_model();
  const QuantModel qm = quantize_weights(m, 4);
  ASSERT_EQ(qm.weight_quant.size(), 3u);
  for (const auto& [layer, p] : qm.weight_quant) {
    const Layer& l = m.layers[static_cast<std::size_t>(layer)];
    EXPECT_EQ(p.l(), static_cast<double>(l.weight.minCoeff()));
    EXPECT_EQ(p.u(), static_cast<double>(l.weight.maxCoeff()));
    EXPECT_EQ(p.bits(), 4);
  }
  EXPECT_FALSE(qm.calibrated());
  EXPECT_THROW(qm.require_calibrated(), ContractError);
}

TEST(QuantModel, ConstantWeightTensorIsWidened) {
  ModelGraph m = test::small_model();
  m.layers[0].weight.setConstant(0.25f);
  const QuantModel qm = quantize_weights(m, 4);
  EXPECT_GT(qm.weight_quant.at(0).u(), qm.weight_quant.at(0).l());
}

TEST(QuantModel, ActivationSites) {
  EXPECT_EQ(activation_sites(test::small_model()), (std::vector<int>{2, 5}));
  const ModelGraph tiny = tiny_block_net(10, 0);
  EXPECT_EQ(activation_sites(tiny).size(), 4u);
  const ModelGraph res = mini_resnet(10, 0);
  for (int s : activation_sites(res)) EXPECT_EQ(res.layers[static_cast<std::size_t>(s)].kind, LayerKind::Relu);
}

TEST(QuantModel, UncalibratedForwardIsRejected) {
  const ModelGraph m = test::small_model();
  const QuantModel qm = quantize_weights(m, 4);
  const auto x = test::random_tensor<float>({2, 3, 8, 8}, 1);
  Tape<float> tape;
  try {
    quantized_forward(tape, qm, x);
    FAIL() << "expected ContractError";
  } catch (const ContractError& e) {
    EXPECT_NE(std::string(e.what()).find("uncalibrated"), std::string::npos);
  }
}

TEST(QuantModel, DisabledQuantizationMatchesFullPrecision) {
  const ModelGraph m = test::small_model();
  const auto x = test::random_tensor<float>({3, 3, 8, 8}, 2);
  Tape<float> t1, t2;
  const auto fp = model_forward(t1, m, x).logits;
  const auto q = quantized_forward(t2, unquantized(m), x).logits;
  EXPECT_TRUE((fp.data() == q.data()).all());
}

TEST(QuantModel, EightBitIsCloseToFullPrecision) {
  const ModelGraph m = test::small_model();
  QuantModel qm = quantize_weights(m, 8);
  for (int s : activation_sites(m)) qm.act_quant[s] = QuantParams(0.0, 20.0, 8);
  const auto x = test::random_tensor<float>({4, 3, 8, 8}, 3);
  Tape<float> t1, t2;
  const auto fp = model_forward(t1, m, x).logits;
  const auto q = quantized_forward(t2, qm, x).logits;
  EXPECT_LT((fp.data() - q.data()).abs().maxCoeff(), 0.1f);
  EXPECT_GT((fp.data() - q.data()).abs().maxCoeff(), 0.0f);
}

TEST(QuantModel, WeightsAreFakeQuantizedInForward) {
  // A linear model with two-level weights reproduces the hand-computed product.
  ModelGraph m;
  m.class_count = 2;
  m.input_shape = {1, 1, 2};
  m.layers.push_back(Layer::flatten());
  m.layers.push_back(Layer::linear(2, 2, false));
  m.layers[1].weight << 0.0f, 0.3f, 0.9f, 1.5f;  // l=0, u=1.5, 2 bits: delta 0.5
  m.validate();
  const QuantModel qm = quantize_weights(m, 2);
  Tensor<float> x({1, 1, 1, 2}, 1.0f);
  Tape<float> tape;
  const auto y = quantized_forward(tape, qm, x).logits;
  // Quantized weights: 0, 0.5, 1.0, 1.5.
  EXPECT_FLOAT_EQ(y.data()[0], 0.5f);
  EXPECT_FLOAT_EQ(y.data()[1], 2.5f);
}

TEST(QuantModel, StraightThroughGradientInForward) {
  const ModelGraph m = test::small_model();
  QuantModel qm = quantize_weights(m, 8);
  for (int s : activation_sites(m)) qm.act_quant[s] = QuantParams(0.0, 1e6, 8);
  // Huge range: activation fake-quant is a no-op in value, but STE still passes gradients.
  const Parameters<float> params = bind_parameters<float>(m, true);
  Tape<float> tape;
  const auto out = quantized_forward(tape, qm, params, test::random_tensor<float>({2, 3, 8, 8}, 1));
  tape.backward(sum(tape, out.logits));
  EXPECT_TRUE(params.weight[0].has_grad());
  EXPECT_GT(params.weight[0].grad().abs().sum(), 0.0f);
}

}  // namespace
}  // namespace dfq
