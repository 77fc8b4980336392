#pragma once

#include <random>

#include "dfq/model.hpp"
#include "dfq/ops.hpp"
#include "dfq/tensor.hpp"

namespace dfq::test {

template <typename S>
Tensor<S> random_tensor(Shape shape, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, scale);
  Array<S> data(shape_numel(shape));
  for (Index i = 0; i < data.size(); ++i) data[i] = static_cast<S>(dist(rng));
  return Tensor<S>(std::move(shape), std::move(data));
}

// Reduces any tensor to a scalar through a fixed random projection, so a
// finite-difference check sees every output element.
template <typename S>
Tensor<S> project(Tape<S>& tape, const Tensor<S>& y, std::uint64_t seed = 99) {
  return sum(tape, mul(tape, y, random_tensor<S>(y.shape(), seed)));
}

inline void fill_random(Eigen::ArrayXf& a, std::mt19937_64& rng, double scale) {
  std::normal_distribution<double> dist(0.0, scale);
  for (Index i = 0; i < a.size(); ++i) a[i] = static_cast<float>(dist(rng));
}

// conv(3->4) -> BN -> ReLU -> conv(4->6, stride 2) -> BN -> ReLU -> avgpool -> linear.
// Input 3x8x8, `classes` outputs, random weights and non-trivial BN stats.
inline ModelGraph small_model(int classes = 5, std::uint64_t seed = 7) {
  ModelGraph m;
  m.class_count = classes;
  m.input_shape = {3, 8, 8};
  m.layers.push_back(Layer::conv2d(3, 4, 3, 1, 1));
  m.layers.push_back(Layer::batchnorm2d(4));
  m.layers.push_back(Layer::relu());
  m.layers.push_back(Layer::conv2d(4, 6, 3, 2, 1));
  m.layers.push_back(Layer::batchnorm2d(6));
  m.layers.push_back(Layer::relu());
  m.layers.push_back(Layer::avgpool(4, 4));
  m.layers.push_back(Layer::flatten());
  m.layers.push_back(Layer::linear(6, classes));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.5, 1.5);
  for (Layer& l : m.layers) {
    if (l.kind == LayerKind::Conv2d || l.kind == LayerKind::Linear) {
      fill_random(l.weight, rng, 0.5);
      if (l.has_bias) fill_random(l.bias, rng, 0.1);
    } else if (l.kind == LayerKind::BatchNorm2d) {
      fill_random(l.stats.mean, rng, 0.3);
      for (Index c = 0; c < l.stats.std.size(); ++c) l.stats.std[c] = static_cast<float>(unit(rng));
      for (Index c = 0; c < l.weight.size(); ++c) l.weight[c] = static_cast<float>(unit(rng));
      fill_random(l.bias, rng, 0.2);
    }
  }
  m.validate();
  return m;
}

// conv -> ReLU -> avgpool -> linear: exactly one activation site.
inline ModelGraph single_site_model(int classes = 4, std::uint64_t seed = 3) {
  ModelGraph m;
  m.class_count = classes;
  m.input_shape = {2, 4, 4};
  m.layers.push_back(Layer::conv2d(2, 5, 3, 1, 1, true));
  m.layers.push_back(Layer::relu());
  m.layers.push_back(Layer::avgpool(4, 4));
  m.layers.push_back(Layer::flatten());
  m.layers.push_back(Layer::linear(5, classes));
  std::mt19937_64 rng(seed);
  for (Layer& l : m.layers) {
    if (l.has_weights()) fill_random(l.weight, rng, 0.7);
    if (l.bias.size() != 0) fill_random(l.bias, rng, 0.2);
  }
  m.validate();
  return m;
}

}  // namespace dfq::test
