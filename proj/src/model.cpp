#include "dfq/model.hpp"

#include <cstring>

#include "dfq/ops.hpp"

namespace dfq {

const char* layer_kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::Conv2d: return "conv2d";
    case LayerKind::BatchNorm2d: return "batchnorm2d";
    case LayerKind::Relu: return "relu";
    case LayerKind::AvgPool: return "avgpool";
    case LayerKind::MaxPool: return "maxpool";
    case LayerKind::Linear: return "linear";
    case LayerKind::ResidualAdd: return "residual-add";
    case LayerKind::Flatten: return "flatten";
  }
  return "unknown";
}

Shape Layer::weight_shape() const {
  switch (kind) {
    case LayerKind::Conv2d: return {out_channels, in_channels, kernel, kernel};
    case LayerKind::Linear: return {out_channels, in_channels};
    case LayerKind::BatchNorm2d: return {out_channels};
    default: return {};
  }
}

Layer Layer::conv2d(int in, int out, int k, int stride, int padding, bool bias) {
  Layer l;
  l.kind = LayerKind::Conv2d;
  l.in_channels = in;
  l.out_channels = out;
  l.kernel = k;
  l.stride = stride;
  l.padding = padding;
  l.has_bias = bias;
  l.weight = Eigen::ArrayXf::Zero(static_cast<Index>(out) * in * k * k);
  if (bias) l.bias = Eigen::ArrayXf::Zero(out);
  return l;
}

Layer Layer::batchnorm2d(int channels, float eps) {
  Layer l;
  l.kind = LayerKind::BatchNorm2d;
  l.in_channels = channels;
  l.out_channels = channels;
  l.eps = eps;
  l.has_bias = true;
  l.weight = Eigen::ArrayXf::Ones(channels);
  l.bias = Eigen::ArrayXf::Zero(channels);
  l.stats.mean = Eigen::ArrayXf::Zero(channels);
  l.stats.std = Eigen::ArrayXf::Ones(channels);
  return l;
}

Layer Layer::relu() {
  Layer l;
  l.kind = LayerKind::Relu;
  return l;
}

Layer Layer::avgpool(int kernel, int stride) {
  Layer l;
  l.kind = LayerKind::AvgPool;
  l.kernel = kernel;
  l.stride = stride;
  return l;
}

Layer Layer::maxpool(int kernel, int stride) {
  Layer l = avgpool(kernel, stride);
  l.kind = LayerKind::MaxPool;
  return l;
}

Layer Layer::linear(int in, int out, bool bias) {
  Layer l;
  l.kind = LayerKind::Linear;
  l.in_channels = in;
  l.out_channels = out;
  l.has_bias = bias;
  l.weight = Eigen::ArrayXf::Zero(static_cast<Index>(out) * in);
  if (bias) l.bias = Eigen::ArrayXf::Zero(out);
  return l;
}

Layer Layer::residual_add(int skip_from) {
  Layer l;
  l.kind = LayerKind::ResidualAdd;
  l.skip_from = skip_from;
  return l;
}

Layer Layer::flatten() {
  Layer l;
  l.kind = LayerKind::Flatten;
  return l;
}

std::string ModelGraph::layer_name(int index) const {
  return std::string(layer_kind_name(layers.at(static_cast<std::size_t>(index)).kind)) + "." + std::to_string(index);
}

std::vector<Shape> ModelGraph::output_shapes(Index batch) const {
  std::vector<Shape> shapes;
  shapes.reserve(layers.size());
  Shape cur{batch, input_shape[0], input_shape[1], input_shape[2]};
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const Layer& l = layers[i];
    const std::string where = "layer " + std::to_string(i) + " (" + layer_kind_name(l.kind) + "): ";
    switch (l.kind) {
      case LayerKind::Conv2d: {
        if (cur.size() != 4 || cur[1] != l.in_channels) {
          throw ShapeError(where + "input " + shape_string(cur) + " vs in_channels " + std::to_string(l.in_channels));
        }
        const Index oh = (cur[2] + 2 * l.padding - l.kernel) / l.stride + 1;
        const Index ow = (cur[3] + 2 * l.padding - l.kernel) / l.stride + 1;
        if (l.kernel <= 0 || l.stride <= 0 || oh <= 0 || ow <= 0) throw ShapeError(where + "kernel does not fit");
        cur = {batch, l.out_channels, oh, ow};
        break;
      }
      case LayerKind::BatchNorm2d:
        if (cur.size() < 2 || cur[1] != l.out_channels) {
          throw ShapeError(where + "input " + shape_string(cur) + " vs channels " + std::to_string(l.out_channels));
        }
        break;
      case LayerKind::Relu:
        break;
      case LayerKind::AvgPool:
      case LayerKind::MaxPool: {
        if (cur.size() != 4 || l.kernel <= 0 || l.stride <= 0 || l.kernel > cur[2] || l.kernel > cur[3]) {
          throw ShapeError(where + "pool kernel does not fit " + shape_string(cur));
        }
        cur = {batch, cur[1], (cur[2] - l.kernel) / l.stride + 1, (cur[3] - l.kernel) / l.stride + 1};
        break;
      }
      case LayerKind::Linear:
        if (cur.size() != 2 || cur[1] != l.in_channels) {
          throw ShapeError(where + "input " + shape_string(cur) + " vs in_features " + std::to_string(l.in_channels));
        }
        cur = {batch, l.out_channels};
        break;
      case LayerKind::ResidualAdd:
        if (l.skip_from < 0 || static_cast<std::size_t>(l.skip_from) >= i) {
          throw ShapeError(where + "skip_from " + std::to_string(l.skip_from) + " must precede the layer");
        }
        if (shapes[static_cast<std::size_t>(l.skip_from)] != cur) {
          throw ShapeError(where + "shortcut shape " + shape_string(shapes[static_cast<std::size_t>(l.skip_from)]) +
                           " vs " + shape_string(cur));
        }
        break;
      case LayerKind::Flatten:
        cur = {batch, shape_numel(cur) / batch};
        break;
      default:
        throw ShapeError(where + "unknown layer kind");
    }
    shapes.push_back(cur);
  }
  return shapes;
}

void ModelGraph::validate() const {
  if (class_count < 1) throw ContractError("model class_count must be positive");
  if (layers.empty()) throw ContractError("model has no layers");
  for (int e : input_shape) {
    if (e <= 0) throw ShapeError("model input shape must be positive");
  }
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const Layer& l = layers[i];
    const Shape ws = l.weight_shape();
    if (!ws.empty() && l.weight.size() != shape_numel(ws)) {
      throw ShapeError(layer_name(static_cast<int>(i)) + ": weight length " + std::to_string(l.weight.size()) +
                       " vs declared " + shape_string(ws));
    }
    if (l.has_bias && l.bias.size() != l.out_channels) {
      throw ShapeError(layer_name(static_cast<int>(i)) + ": bias length mismatch");
    }
    if (l.kind == LayerKind::BatchNorm2d) {
      if (l.stats.mean.size() != l.out_channels || l.stats.std.size() != l.out_channels) {
        throw ShapeError(layer_name(static_cast<int>(i)) + ": BN statistics length mismatch");
      }
      if (!(l.stats.std > 0.0f).all()) throw ContractError(layer_name(static_cast<int>(i)) + ": BN std must be > 0");
    }
    if (l.kind == LayerKind::Relu) {
      // Conv -> BN -> ReLU blocks; ReLU may also close a residual join.
      const bool ok = i > 0 && (layers[i - 1].kind == LayerKind::BatchNorm2d || layers[i - 1].kind == LayerKind::Conv2d ||
                                layers[i - 1].kind == LayerKind::ResidualAdd);
      if (!ok) throw ContractError(layer_name(static_cast<int>(i)) + ": relu must follow conv2d, batchnorm2d or residual-add");
    }
  }
  const std::vector<Shape> shapes = output_shapes(1);
  if (shapes.back().size() != 2 || shapes.back()[1] != class_count) {
    throw ShapeError("model output " + shape_string(shapes.back()) + " does not produce " +
                     std::to_string(class_count) + " logits");
  }
}

std::vector<int> ModelGraph::batchnorm_layers() const {
  std::vector<int> out;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].kind == LayerKind::BatchNorm2d) out.push_back(static_cast<int>(i));
  }
  return out;
}

std::vector<BNStats> ModelGraph::batchnorm_stats() const {
  std::vector<BNStats> out;
  for (const Layer& l : layers) {
    if (l.kind == LayerKind::BatchNorm2d) out.push_back(l.stats);
  }
  return out;
}

std::size_t ModelGraph::parameter_count() const {
  std::size_t n = 0;
  for (const Layer& l : layers) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
  return n;
}

namespace {

bool same_bits(const Eigen::ArrayXf& a, const Eigen::ArrayXf& b) {
  return a.size() == b.size() &&
         (a.size() == 0 || std::memcmp(a.data(), b.data(), sizeof(float) * static_cast<std::size_t>(a.size())) == 0);
}

}  // namespace

bool identical(const ModelGraph& a, const ModelGraph& b) {
  if (a.class_count != b.class_count || a.input_shape != b.input_shape || a.layers.size() != b.layers.size()) {
    return false;
  }
  for (std::size_t i = 0; i < a.layers.size(); ++i) {
    const Layer& x = a.layers[i];
    const Layer& y = b.layers[i];
    if (x.kind != y.kind || x.in_channels != y.in_channels || x.out_channels != y.out_channels ||
        x.kernel != y.kernel || x.stride != y.stride || x.padding != y.padding || x.skip_from != y.skip_from ||
        x.has_bias != y.has_bias || std::memcmp(&x.eps, &y.eps, sizeof(float)) != 0) {
      return false;
    }
    if (!same_bits(x.weight, y.weight) || !same_bits(x.bias, y.bias) || !same_bits(x.stats.mean, y.stats.mean) ||
        !same_bits(x.stats.std, y.stats.std)) {
      return false;
    }
  }
  return true;
}

template <typename S>
Parameters<S> bind_parameters(const ModelGraph& model, bool requires_grad) {
  Parameters<S> p;
  p.weight.resize(model.layers.size());
  p.bias.resize(model.layers.size());
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const Layer& l = model.layers[i];
    if (l.has_weights()) {
      p.weight[i] = Tensor<S>(l.weight_shape(), l.weight.template cast<S>());
      p.weight[i].set_requires_grad(requires_grad);
    }
    if (l.has_bias) {
      p.bias[i] = Tensor<S>(Shape{l.out_channels}, l.bias.template cast<S>());
      p.bias[i].set_requires_grad(requires_grad);
    }
  }
  return p;
}

namespace {

template <typename S>
Tensor<S> batchnorm_forward(Tape<S>& tape, const Layer& layer, const Tensor<S>& x, const Tensor<S>& gamma,
                            const Tensor<S>& beta, const BNStats& stored, const ForwardOptions& opts,
                            std::vector<BatchStats<S>>& stats_out) {
  const Index c = layer.out_channels;
  const S eps = static_cast<S>(layer.eps);
  if (opts.mode == BNMode::TrainStats) {
    if (x.dim(0) < 2) throw ContractError("train-stats batch normalization needs a batch of at least 2");
    Tensor<S> mu = channel_mean(tape, x);
    Tensor<S> sd = channel_std(tape, x);
    Tensor<S> inv = pow(tape, add_scalar(tape, mul(tape, sd, sd), eps), S(-0.5));
    stats_out.push_back({mu, sd});
    return channel_affine(tape, x, mu, mul(tape, inv, gamma), beta);
  }
  if (opts.collect_bn_stats) {
    stats_out.push_back({channel_mean(tape, x), channel_std(tape, x)});
  }
  Array<S> sd = stored.std.template cast<S>();
  Tensor<S> inv(Shape{c}, Array<S>((sd * sd + eps).rsqrt()));
  Tensor<S> mu(Shape{c}, stored.mean.template cast<S>());
  return channel_affine(tape, x, mu, mul(tape, inv, gamma), beta);
}

}  // namespace

template <typename S>
ForwardResult<S> model_forward(Tape<S>& tape, const ModelGraph& model, const Parameters<S>& params,
                               const Tensor<S>& batch, const ForwardOptions& opts, const ForwardHooks<S>* hooks) {
  const auto& in = model.input_shape;
  if (batch.rank() != 4 || batch.dim(1) != in[0] || batch.dim(2) != in[1] || batch.dim(3) != in[2]) {
    throw ShapeError("model_forward: batch shape " + shape_string(batch.shape()) + " vs input [N," +
                     std::to_string(in[0]) + "," + std::to_string(in[1]) + "," + std::to_string(in[2]) + "]");
  }
  if (opts.mode == BNMode::TrainStats && batch.dim(0) < 2) {
    throw ContractError("train-stats forward needs a batch of at least 2 (batch std undefined)");
  }
  const std::size_t bn_count = model.batchnorm_layers().size();
  if (opts.bn_override != nullptr && opts.bn_override->size() != bn_count) {
    throw ContractError("bn_override has " + std::to_string(opts.bn_override->size()) + " entries, model has " +
                        std::to_string(bn_count) + " BN layers");
  }

  ForwardResult<S> result;
  std::vector<Tensor<S>> outputs;
  outputs.reserve(model.layers.size());
  Tensor<S> cur = batch;
  std::size_t bn_index = 0;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const Layer& l = model.layers[i];
    const int id = static_cast<int>(i);
    auto weight = [&]() {
      const Tensor<S>& w = params.weight[i];
      return (hooks && hooks->weight) ? hooks->weight(tape, id, w) : w;
    };
    switch (l.kind) {
      case LayerKind::Conv2d:
        cur = conv2d(tape, cur, weight(), params.bias[i], Conv2dOptions{l.stride, l.padding});
        break;
      case LayerKind::BatchNorm2d: {
        const BNStats& stored = opts.bn_override ? (*opts.bn_override)[bn_index] : l.stats;
        cur = batchnorm_forward(tape, l, cur, params.weight[i], params.bias[i], stored, opts, result.bn_stats);
        ++bn_index;
        break;
      }
      case LayerKind::Relu:
        cur = relu(tape, cur);
        break;
      case LayerKind::AvgPool:
        cur = avg_pool2d(tape, cur, Pool2dOptions{l.kernel, l.stride});
        break;
      case LayerKind::MaxPool:
        cur = max_pool2d(tape, cur, Pool2dOptions{l.kernel, l.stride});
        break;
      case LayerKind::Linear:
        cur = linear(tape, cur, weight(), params.bias[i]);
        break;
      case LayerKind::ResidualAdd:
        cur = add(tape, cur, outputs.at(static_cast<std::size_t>(l.skip_from)));
        break;
      case LayerKind::Flatten:
        cur = reshape(tape, cur, Shape{cur.dim(0), cur.numel() / cur.dim(0)});
        break;
    }
    for (int p : opts.probes) {
      if (p == id) result.probes[id] = cur;
    }
    if (hooks && hooks->activation) cur = hooks->activation(tape, id, cur);
    outputs.push_back(cur);
  }
  result.logits = cur;
  return result;
}

template <typename S>
ForwardResult<S> model_forward(Tape<S>& tape, const ModelGraph& model, const Tensor<S>& batch,
                               const ForwardOptions& opts) {
  return model_forward(tape, model, bind_parameters<S>(model, false), batch, opts, static_cast<const ForwardHooks<S>*>(nullptr));
}

Tensor<float> predict_logits(const ModelGraph& model, const Tensor<float>& batch) {
  Tape<float> tape;
  return model_forward(tape, model, batch).logits;
}

template Parameters<float> bind_parameters<float>(const ModelGraph&, bool);
template Parameters<double> bind_parameters<double>(const ModelGraph&, bool);
template ForwardResult<float> model_forward(Tape<float>&, const ModelGraph&, const Parameters<float>&,
                                            const Tensor<float>&, const ForwardOptions&, const ForwardHooks<float>*);
template ForwardResult<double> model_forward(Tape<double>&, const ModelGraph&, const Parameters<double>&,
                                             const Tensor<double>&, const ForwardOptions&,
                                             const ForwardHooks<double>*);
template ForwardResult<float> model_forward(Tape<float>&, const ModelGraph&, const Tensor<float>&,
                                            const ForwardOptions&);
template ForwardResult<double> model_forward(Tape<double>&, const ModelGraph&, const Tensor<double>&,
                                             const ForwardOptions&);

}  // namespace dfq
