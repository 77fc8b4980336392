#include "dfq/train.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>

#include "dfq/losses.hpp"
#include "dfq/ops.hpp"
#include "dfq/optim.hpp"

namespace dfq {

double evaluate_accuracy(const ModelGraph& model, const Dataset& data, Index chunk) {
  if (data.size() == 0) throw ContractError("evaluate: empty dataset");
  Index correct = 0;
  for (Index begin = 0; begin < data.size(); begin += chunk) {
    const Index n = std::min(chunk, data.size() - begin);
    const Tensor<float> logits = predict_logits(model, data.batch(begin, n));
    const Index k = logits.dim(1);
    for (Index r = 0; r < n; ++r) {
      Index best = 0;
      logits.data().segment(r * k, k).maxCoeff(&best);
      if (best == data.labels[static_cast<std::size_t>(begin + r)]) ++correct;
    }
  }
  return 100.0 * static_cast<double>(correct) / static_cast<double>(data.size());
}

TrainResult train_fp(const ModelGraph& model, const Dataset& train, const Dataset* validation,
                     const TrainConfig& cfg) {
  model.validate();
  if (cfg.epochs < 0) throw ContractError("train_fp: epochs must be >= 0");
  if (train.size() < 2) throw ContractError("train_fp: need at least two training samples");
  if (train.sample_shape != model.input_shape || train.class_count != model.class_count) {
    throw ShapeError("train_fp: dataset shape/classes do not match the model");
  }

  TrainResult result;
  result.model = model;
  ModelGraph& m = result.model;
  const Index batch = std::min<Index>(cfg.batch_size, train.size());
  const Index steps_per_epoch = train.size() / batch;
  const long total_steps = static_cast<long>(steps_per_epoch) * cfg.epochs;

  std::mt19937_64 rng(cfg.seed);
  std::vector<Index> order(static_cast<std::size_t>(train.size()));
  Sgd sgd(cfg.lr, cfg.momentum, cfg.weight_decay);
  const std::vector<int> bn_layers = m.batchnorm_layers();
  ForwardOptions fwd;
  fwd.mode = BNMode::TrainStats;

  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), Index{0});
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    for (Index s = 0; s < steps_per_epoch; ++s, ++step) {
      std::span<const Index> idx(order.data() + s * batch, static_cast<std::size_t>(batch));
      std::vector<int> labels(idx.size());
      for (std::size_t i = 0; i < idx.size(); ++i) labels[i] = train.labels[static_cast<std::size_t>(idx[i])];

      Parameters<float> params = bind_parameters<float>(m, true);
      Tape<float> tape;
      ForwardResult<float> out = model_forward(tape, m, params, train.gather(idx), fwd);
      Tensor<float> loss = ce_loss(tape, out.logits, labels);
      if (!std::isfinite(loss.item())) {
        throw NumericalError("train_fp: loss diverged at step " + std::to_string(step), step);
      }
      loss_sum += loss.item();
      tape.backward(loss);

      sgd.set_lr(cfg.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total_steps))));
      for (std::size_t i = 0; i < m.layers.size(); ++i) {
        Layer& l = m.layers[i];
        const bool decay = l.kind != LayerKind::BatchNorm2d;
        if (params.weight[i].defined() && params.weight[i].has_grad()) {
          sgd.update(2 * i, l.weight, params.weight[i].grad(), decay);
        }
        if (params.bias[i].defined() && params.bias[i].has_grad()) {
          sgd.update(2 * i + 1, l.bias, params.bias[i].grad(), false);
        }
      }

      const double mom = cfg.bn_momentum;
      for (std::size_t b = 0; b < bn_layers.size(); ++b) {
        Layer& l = m.layers[static_cast<std::size_t>(bn_layers[b])];
        const BatchStats<float>& st = out.bn_stats[b];
        const Shape s_in = m.output_shapes(batch)[static_cast<std::size_t>(bn_layers[b])];
        const double count = static_cast<double>(shape_numel(s_in) / s_in[1]);
        const Eigen::ArrayXd batch_var = st.std.data().cast<double>().square() * (count / (count - 1.0));
        const Eigen::ArrayXd var = (1.0 - mom) * l.stats.std.cast<double>().square() + mom * batch_var;
        l.stats.mean = ((1.0 - mom) * l.stats.mean.cast<double>() + mom * st.mean.data().cast<double>()).cast<float>();
        l.stats.std = var.sqrt().cast<float>();
      }
    }
    result.epoch_loss.push_back(steps_per_epoch > 0 ? loss_sum / static_cast<double>(steps_per_epoch) : 0.0);
  }

  result.train_accuracy = evaluate_accuracy(m, train);
  if (validation != nullptr) result.val_accuracy = evaluate_accuracy(m, *validation);
  return result;
}

}  // namespace dfq
