#include "dfq/zoo.hpp"

#include <cmath>
#include <random>

#include "dfq/error.hpp"

namespace dfq {

namespace {

void init_weights(ModelGraph& model, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (Layer& l : model.layers) {
    if (l.kind == LayerKind::Conv2d) {
      // He initialization for ReLU networks.
      const double fan_in = static_cast<double>(l.in_channels) * l.kernel * l.kernel;
      std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
      for (Index i = 0; i < l.weight.size(); ++i) l.weight[i] = static_cast<float>(dist(rng));
    } else if (l.kind == LayerKind::Linear) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(l.in_channels));
      std::uniform_real_distribution<double> dist(-bound, bound);
      for (Index i = 0; i < l.weight.size(); ++i) l.weight[i] = static_cast<float>(dist(rng));
      for (Index i = 0; i < l.bias.size(); ++i) l.bias[i] = static_cast<float>(dist(rng));
    }
  }
}

void block(ModelGraph& m, int in, int out, int stride) {
  m.layers.push_back(Layer::conv2d(in, out, 3, stride, 1));
  m.layers.push_back(Layer::batchnorm2d(out));
  m.layers.push_back(Layer::relu());
}

// conv-bn-relu-conv-bn (+ shortcut) -relu
void residual_block(ModelGraph& m, int channels) {
  const int shortcut = static_cast<int>(m.layers.size()) - 1;
  block(m, channels, channels, 1);
  m.layers.push_back(Layer::conv2d(channels, channels, 3, 1, 1));
  m.layers.push_back(Layer::batchnorm2d(channels));
  m.layers.push_back(Layer::residual_add(shortcut));
  m.layers.push_back(Layer::relu());
}

}  // namespace

ModelGraph tiny_block_net(int classes, std::uint64_t seed) {
  ModelGraph m;
  m.class_count = classes;
  m.input_shape = {3, 32, 32};
  block(m, 3, 16, 2);   // 16x16
  block(m, 16, 32, 2);  // 8x8
  block(m, 32, 48, 2);  // 4x4
  block(m, 48, 64, 1);
  m.layers.push_back(Layer::avgpool(4, 4));
  m.layers.push_back(Layer::flatten());
  m.layers.push_back(Layer::linear(64, classes));
  init_weights(m, seed);
  m.validate();
  return m;
}

ModelGraph mini_resnet(int classes, std::uint64_t seed) {
  ModelGraph m;
  m.class_count = classes;
  m.input_shape = {3, 32, 32};
  block(m, 3, 16, 2);  // 16x16
  residual_block(m, 16);
  block(m, 16, 32, 2);  // 8x8
  residual_block(m, 32);
  m.layers.push_back(Layer::avgpool(8, 8));
  m.layers.push_back(Layer::flatten());
  m.layers.push_back(Layer::linear(32, classes));
  init_weights(m, seed);
  m.validate();
  return m;
}

ModelGraph make_zoo_model(const std::string& name, int classes, std::uint64_t seed) {
  if (name == "tiny" || name == "tinyblocknet") return tiny_block_net(classes, seed);
  if (name == "resnet" || name == "miniresnet") return mini_resnet(classes, seed);
  throw ContractError("unknown zoo model '" + name + "' (expected tiny or resnet)");
}

}  // namespace dfq
