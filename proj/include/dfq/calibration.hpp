#pragma once

#include <span>
#include <vector>

#include "dfq/dataset.hpp"
#include "dfq/quantizer.hpp"
#include "dfq/synthesis.hpp"

namespace dfq {

struct RangeRecord {
  int layer = -1;
  SiteKind kind = SiteKind::PostRelu;
  double observed_min = 0.0;
  double observed_max = 0.0;
  long batches_seen = 0;
};

// Exact running min/max of the pre-quantization activation at every site,
// with weights quantized and activations left unquantized.
std::vector<RangeRecord> collect_activation_ranges(const QuantModel& qm, std::span<const SyntheticBatch> batches);

// Sets every activation quantizer from the observed peaks: u = max,
// l = 0 after ReLU and the observed minimum after a residual add.
QuantModel calibrate_activation_ranges(const QuantModel& qm, std::span<const SyntheticBatch> batches,
                                       std::vector<RangeRecord>* records = nullptr);

enum class BNUpdatePolicy { Replace, Ema };

struct BNAdaptConfig {
  BNUpdatePolicy policy = BNUpdatePolicy::Replace;
  // Ema only: new = (1 - momentum) * old + momentum * estimate.
  double momentum = 0.1;
};

struct BNShift {
  int layer = -1;
  Eigen::ArrayXf old_mean, old_std;
  Eigen::ArrayXf new_mean, new_std;
  // (|d mean| + |d std|) / (|mean| + |std|) with Euclidean norms.
  double relative_deviation = 0.0;
  // Mean over channels of |d mean_c| + |d std_c|.
  double mean_channel_shift = 0.0;
};

// Re-estimates BN statistics from quantized train-stats forwards over the
// batches: the new mean is the equal-weight average of batch means, the new
// std the square root of the average biased batch variance.
QuantModel adapt_bn_statistics(const QuantModel& qm, std::span<const SyntheticBatch> batches,
                               const BNAdaptConfig& cfg = {}, std::vector<BNShift>* shifts = nullptr);

std::vector<BNShift> bn_shifts(const ModelGraph& before, const ModelGraph& after);
double max_relative_deviation(std::span<const BNShift> shifts);
double mean_channel_shift(std::span<const BNShift> shifts);

// Top-1 accuracy in percent; rejects uncalibrated models.
double evaluate_accuracy(const QuantModel& qm, const Dataset& data, Index chunk = 250);

struct SweepConfig {
  int points = 101;
  double range_factor = 1.5;
};

struct SweepSite {
  int layer = -1;
  double aac_u = 0.0;
  double best_u = 0.0;
  double grid_step = 0.0;
  bool aac_within_one_step = false;
  std::vector<double> grid;
  std::vector<double> accuracy;
};

struct SweepResult {
  double aac_accuracy = 0.0;
  double final_accuracy = 0.0;
  std::vector<SweepSite> sites;
  QuantModel model;
  double within_one_step_rate() const;
};

// Labeled-data oracle (not data-free). Coordinate-wise sweep in network order:
// each site's u is chosen by end-to-end accuracy over a grid that always
// contains the current u, ties resolved toward the smaller u.
SweepResult best_clip_sweep(const QuantModel& qm, const Dataset& labeled, const SweepConfig& cfg = {});

}  // namespace dfq
