#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dfq/calibration.hpp"
#include "dfq/dataset.hpp"
#include "dfq/quantizer.hpp"
#include "dfq/synthesis.hpp"

namespace dfq {

struct FineTuneConfig {
  int epochs = 10;
  double lr = 1e-4;
  double momentum = 0.9;
  double temperature = 4.0;
  // Weight of the hard-label CE term on AAC samples.
  double hard_weight = 0.5;
  // Synthetic pool regenerated every epoch.
  int aac_batches = 4;
  int bns_batches = 4;
  int batch_size = 32;
};

struct PipelineConfig {
  int bits = 4;
  bool clip = true;
  bool bn_adapt = true;
  bool fine_tune = false;
  SynthesisConfig aac = SynthesisConfig::aac_defaults();
  int aac_batches = 4;
  SynthesisConfig bns = SynthesisConfig::bns_defaults();
  int bns_batches = 4;
  BNAdaptConfig bn;
  FineTuneConfig ft;
  std::uint64_t seed = 0;

  // Step order: bn-adapt and fine-tune both require clip.
  void validate() const;
  std::string steps_string() const;
  void set_steps(const std::string& csv);
};

// Flat dotted key/value view of a config, e.g. "aac.lr" -> "0.2". Values
// print with round-trip precision so a dump reproduces the run exactly.
std::vector<std::pair<std::string, std::string>> config_entries(const PipelineConfig& cfg);
// Throws ContractError for unknown keys or unparsable values.
void set_config_value(PipelineConfig& cfg, const std::string& key, const std::string& value);

// The only handle on labeled data that pipeline code receives: it can score a
// model and nothing else.
class Evaluator {
 public:
  explicit Evaluator(const Dataset& data) : data_(data) {}
  double accuracy(const QuantModel& qm) const;
  double accuracy(const ModelGraph& fp) const;
  Index size() const { return data_.size(); }

 private:
  const Dataset& data_;
};

struct StepRecord {
  std::string name;
  double seconds = 0.0;
  double accuracy = 0.0;
};

struct RunReport {
  PipelineConfig config;
  double fp_accuracy = 0.0;
  std::vector<StepRecord> steps;
  std::vector<RangeRecord> ranges;
  std::vector<BNShift> bn_shifts;
  // Synthesis + calibration + adaptation (steps 1-2), and the same plus fine-tuning.
  double two_step_seconds = 0.0;
  double three_step_seconds = 0.0;
  std::string timestamp;

  double final_accuracy() const;
};

struct PipelineResult {
  QuantModel model;
  RunReport report;
};

PipelineResult run_pipeline(const ModelGraph& fp, const PipelineConfig& cfg, const Evaluator& eval);

// Weights trained through straight-through fake quantization against the
// full-precision teacher on a pool regenerated each epoch; BN statistics are
// re-adapted on every BNS batch generated along the way. epochs == 0 returns qm unchanged.
QuantModel fine_tune(const QuantModel& qm, const ModelGraph& fp, const PipelineConfig& cfg);

// Per-sample trajectory row of the identity-model experiment.
struct ToyRow {
  int iteration = 0;
  double p_target = 0.0;
  double loss = 0.0;
};

struct ToyConfig {
  SynthLoss loss = SynthLoss::Abs;
  int n = 10;
  int target = 0;
  int iterations = 300;
  double lr = 0.1;
  std::uint64_t seed = 0;
};

// Gradient descent on x in R^n through M(x) = x. Rows 0..iterations.
std::vector<ToyRow> toy_experiment(const ToyConfig& cfg);

struct AblationRow {
  std::string name;
  std::vector<double> accuracy;  // one per seed
  double median = 0.0;
  double min = 0.0;
  double max = 0.0;
};

struct AblationTable {
  int bits = 4;
  std::vector<std::uint64_t> seeds;
  double fp_accuracy = 0.0;
  std::vector<AblationRow> rows;  // none, clip, clip+bn, clip+bn+ft
  std::vector<RunReport> runs;
};

// `base` supplies everything except bits, steps and seed.
AblationTable ablation_run(const ModelGraph& fp, const Evaluator& eval, int bits, const std::vector<std::uint64_t>& seeds,
                           const PipelineConfig& base = {});

struct LossStudyRow {
  SynthLoss loss = SynthLoss::Abs;
  std::vector<double> synthesis_ce;  // one per seed
  std::vector<double> accuracy;
  double median_ce = 0.0;
  double median_accuracy = 0.0;
};

struct LossStudyTable {
  int bits = 4;
  std::vector<std::uint64_t> seeds;
  std::vector<LossStudyRow> rows;  // abs+bns, ce, mae, mse, abs
};

LossStudyTable loss_study_run(const ModelGraph& fp, const Evaluator& eval, int bits, const std::vector<std::uint64_t>& seeds,
                              const PipelineConfig& base = {});

double median(std::vector<double> values);
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream);

nlohmann::json to_json(const PipelineConfig& cfg);
nlohmann::json to_json(const RunReport& report, const ModelGraph& fp);
nlohmann::json to_json(const AblationTable& table);
nlohmann::json to_json(const LossStudyTable& table);
nlohmann::json to_json(const SweepResult& sweep, const ModelGraph& model);
// Per-site (layer, kind, l, u, delta, bits) and per-BN-layer stat tables.
nlohmann::json calibration_report(const QuantModel& qm, const std::vector<BNShift>& shifts);

std::string summary(const RunReport& report);
std::string summary(const AblationTable& table);
std::string summary(const LossStudyTable& table);

}  // namespace dfq
