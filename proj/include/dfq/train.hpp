#pragma once

#include <cstdint>
#include <vector>

#include "dfq/dataset.hpp"
#include "dfq/model.hpp"

namespace dfq {

struct TrainConfig {
  int epochs = 12;
  double lr = 0.05;
  int batch_size = 64;
  double momentum = 0.9;
  double weight_decay = 5e-3;
  // Exponential running-statistics momentum for BN layers.
  double bn_momentum = 0.1;
  std::uint64_t seed = 1;
};

struct TrainResult {
  ModelGraph model;
  std::vector<double> epoch_loss;
  double train_accuracy = 0.0;
  double val_accuracy = 0.0;
};

// Minibatch SGD with momentum and a cosine learning-rate schedule on cross
// entropy. BN layers normalize with batch statistics and keep EMA running
// statistics. Deterministic for a given seed. epochs == 0 returns the model
// unchanged. Throws NumericalError naming the step if the loss diverges.
TrainResult train_fp(const ModelGraph& model, const Dataset& train, const Dataset* validation,
                     const TrainConfig& cfg);

// Top-1 accuracy in percent of the full-precision model (eval-stats BN).
double evaluate_accuracy(const ModelGraph& model, const Dataset& data, Index chunk = 250);

}  // namespace dfq
