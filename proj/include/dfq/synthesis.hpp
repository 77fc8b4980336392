#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dfq/dataset.hpp"
#include "dfq/model.hpp"
#include "dfq/tensor.hpp"

namespace dfq {

enum class SynthLoss { Abs, Ce, Mae, Mse, AbsBns, Bns };
enum class LabelPolicy { RoundRobin, UniformRandom };
enum class SynthOptimizer { GradientDescent, Adam };

const char* synth_loss_name(SynthLoss loss);
SynthLoss parse_synth_loss(const std::string& name);
const char* label_policy_name(LabelPolicy policy);
LabelPolicy parse_label_policy(const std::string& name);
const char* synth_optimizer_name(SynthOptimizer opt);
SynthOptimizer parse_synth_optimizer(const std::string& name);

// Gradient descent applies lr per image: the step on each image is lr times
// the gradient of its own share of the objective (batch-mean loss times N).
struct SynthesisConfig {
  int batch_size = 64;
  int iterations = 200;
  double lr = 0.2;
  SynthLoss loss = SynthLoss::Abs;
  LabelPolicy labels = LabelPolicy::RoundRobin;
  SynthOptimizer optimizer = SynthOptimizer::GradientDescent;
  // A BNS run whose final loss exceeds this fraction of the initial loss warns.
  double bns_warn_ratio = 0.1;
  std::uint64_t seed = 0;

  // abs, lr 0.2, 200 iterations, gradient descent.
  static SynthesisConfig aac_defaults();
  // bns, lr 0.5, 500 iterations, Adam.
  static SynthesisConfig bns_defaults();
  void validate() const;
};

// Images produced by input-space optimization against a model. Only the
// synthesis functions can create one, which keeps real data out of every
// API that takes a SyntheticBatch.
class SyntheticBatch {
 public:
  const Tensor<float>& images() const noexcept { return images_; }
  // Target classes for logit-driven losses; empty for pure BNS batches.
  std::span<const int> labels() const noexcept { return labels_; }
  bool has_labels() const noexcept { return !labels_.empty(); }
  SynthLoss source() const noexcept { return source_; }
  Index size() const { return images_.dim(0); }

 private:
  SyntheticBatch(Tensor<float> images, std::vector<int> labels, SynthLoss source)
      : images_(std::move(images)), labels_(std::move(labels)), source_(source) {}

  friend struct SynthesisAccess;

  Tensor<float> images_;
  std::vector<int> labels_;
  SynthLoss source_;
};

struct SynthesisResult {
  SyntheticBatch batch;
  // Objective value at iterations 0..iterations (iterations + 1 entries).
  std::vector<double> trajectory;
  // Target logit M_y(x), batch mean, same indexing (empty without labels).
  std::vector<double> target_logit;
  // Mean |p_y - 1| over the batch, same indexing (empty without labels).
  std::vector<double> target_grad;
};

// Gaussian-initialized images driven by a logit loss (abs, ce, mae, mse, abs+bns).
SynthesisResult generate_aac_batch(const ModelGraph& fp, const SynthesisConfig& cfg);
// Gaussian-initialized images matched to the stored BN statistics.
SynthesisResult generate_bns_batch(const ModelGraph& fp, const SynthesisConfig& cfg);
// Dispatches on cfg.loss.
SynthesisResult generate_batch(const ModelGraph& fp, const SynthesisConfig& cfg);

// `count` batches with seeds cfg.seed, cfg.seed + 1, ...
std::vector<SyntheticBatch> generate_pool(const ModelGraph& fp, const SynthesisConfig& cfg, int count);

// Untouched standard-gaussian images with round-robin labels.
SyntheticBatch gaussian_batch(const ModelGraph& fp, int batch_size, std::uint64_t seed);

// Teacher cross-entropy of `fp` on the batch (eval-stats).
double evaluate_synthesis_quality(const ModelGraph& fp, const Tensor<float>& images, std::span<const int> labels);
double evaluate_synthesis_quality(const ModelGraph& fp, const SyntheticBatch& batch);

// One "iteration loss" line per entry.
void write_trajectory(const std::filesystem::path& path, std::span<const double> trajectory);

// Packs batches into the raw-binary dataset layout; BNS images get label 0.
Dataset to_dataset(std::span<const SyntheticBatch> batches, int class_count);

}  // namespace dfq
