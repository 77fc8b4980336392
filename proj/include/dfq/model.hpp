#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "dfq/tensor.hpp"

namespace dfq {

enum class LayerKind : std::uint32_t {
  Conv2d = 1,
  BatchNorm2d = 2,
  Relu = 3,
  AvgPool = 4,
  MaxPool = 5,
  Linear = 6,
  ResidualAdd = 7,
  Flatten = 8,
};

const char* layer_kind_name(LayerKind kind);

// Stored batch-normalization statistics. `std` is the running standard
// deviation (sqrt of the running variance, without eps).
struct BNStats {
  Eigen::ArrayXf mean;
  Eigen::ArrayXf std;
};

// One entry of the ordered layer list. Each layer consumes the previous
// layer's output; ResidualAdd additionally adds the output of `skip_from`.
//
//   Conv2d       in_channels, out_channels, kernel, stride, padding, has_bias
//   BatchNorm2d  out_channels, eps; weight = gamma, bias = beta, stats
//   AvgPool/MaxPool  kernel, stride
//   Linear       in_channels (features in), out_channels (features out), has_bias
//   ResidualAdd  skip_from
struct Layer {
  LayerKind kind = LayerKind::Relu;
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 0;
  int stride = 1;
  int padding = 0;
  int skip_from = -1;
  bool has_bias = false;
  float eps = 1e-5f;
  Eigen::ArrayXf weight;
  Eigen::ArrayXf bias;
  BNStats stats;

  Shape weight_shape() const;
  bool has_weights() const noexcept { return weight.size() != 0; }

  static Layer conv2d(int in, int out, int kernel, int stride, int padding, bool bias = false);
  static Layer batchnorm2d(int channels, float eps = 1e-5f);
  static Layer relu();
  static Layer avgpool(int kernel, int stride);
  static Layer maxpool(int kernel, int stride);
  static Layer linear(int in, int out, bool bias = true);
  static Layer residual_add(int skip_from);
  static Layer flatten();
};

struct ModelGraph {
  std::vector<Layer> layers;
  int class_count = 0;
  std::array<int, 3> input_shape{};  // channels, height, width

  // Throws ShapeError/ContractError when the layer chain is inconsistent.
  void validate() const;
  // Output shape of every layer for a given batch extent.
  std::vector<Shape> output_shapes(Index batch) const;
  std::vector<int> batchnorm_layers() const;
  std::vector<BNStats> batchnorm_stats() const;
  std::size_t parameter_count() const;
  std::string layer_name(int index) const;
};

// Bitwise equality of structure, weights and statistics.
bool identical(const ModelGraph& a, const ModelGraph& b);

enum class BNMode { EvalStats, TrainStats };

// Per-BN-layer statistics of the BN input for the current batch.
template <typename S>
struct BatchStats {
  Tensor<S> mean;
  Tensor<S> std;
};

// Leaf tensors bound to a model's weights for one forward pass; index = layer.
template <typename S>
struct Parameters {
  std::vector<Tensor<S>> weight;
  std::vector<Tensor<S>> bias;
};

template <typename S>
Parameters<S> bind_parameters(const ModelGraph& model, bool requires_grad);

// Optional interception points used by the quantized forward.
template <typename S>
struct ForwardHooks {
  std::function<Tensor<S>(Tape<S>&, int layer, const Tensor<S>& weight)> weight;
  std::function<Tensor<S>(Tape<S>&, int layer, const Tensor<S>& output)> activation;
};

struct ForwardOptions {
  BNMode mode = BNMode::EvalStats;
  std::vector<int> probes;
  // Report BN-input batch statistics in eval mode too (always on in train mode).
  bool collect_bn_stats = false;
  // Replacement stats for eval mode, one entry per BN layer in network order.
  const std::vector<BNStats>* bn_override = nullptr;
};

template <typename S>
struct ForwardResult {
  Tensor<S> logits;
  // Layer output before any activation hook is applied.
  std::map<int, Tensor<S>> probes;
  std::vector<BatchStats<S>> bn_stats;
};

template <typename S>
ForwardResult<S> model_forward(Tape<S>& tape, const ModelGraph& model, const Parameters<S>& params,
                               const Tensor<S>& batch, const ForwardOptions& opts = {},
                               const ForwardHooks<S>* hooks = nullptr);

// Convenience overload binding the model's weights as constants.
template <typename S>
ForwardResult<S> model_forward(Tape<S>& tape, const ModelGraph& model, const Tensor<S>& batch,
                               const ForwardOptions& opts = {});

// Gradient-free eval-stats logits, for inference in chunks.
Tensor<float> predict_logits(const ModelGraph& model, const Tensor<float>& batch);

}  // namespace dfq
