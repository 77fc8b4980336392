#include "dfq/synthesis.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <random>

#include "dfq/log.hpp"
#include "dfq/losses.hpp"
#include "dfq/ops.hpp"
#include "dfq/optim.hpp"

namespace dfq {

struct SynthesisAccess {
  static SyntheticBatch make(Tensor<float> images, std::vector<int> labels, SynthLoss source) {
    return SyntheticBatch(std::move(images), std::move(labels), source);
  }
};

namespace {

struct NamedLoss {
  SynthLoss loss;
  const char* name;
};
constexpr NamedLoss kLossNames[] = {{SynthLoss::Abs, "abs"}, {SynthLoss::Ce, "ce"},          {SynthLoss::Mae, "mae"},
                                    {SynthLoss::Mse, "mse"}, {SynthLoss::AbsBns, "abs+bns"}, {SynthLoss::Bns, "bns"}};

bool uses_logits(SynthLoss l) { return l != SynthLoss::Bns; }
bool uses_bn(SynthLoss l) { return l == SynthLoss::Bns || l == SynthLoss::AbsBns; }

Tensor<float> gaussian_images(const ModelGraph& fp, int n, std::mt19937_64& rng) {
  const auto& in = fp.input_shape;
  Shape shape{n, in[0], in[1], in[2]};
  std::normal_distribution<float> normal(0.0f, 1.0f);
  Eigen::ArrayXf data(shape_numel(shape));
  for (Index i = 0; i < data.size(); ++i) data[i] = normal(rng);
  return Tensor<float>(std::move(shape), std::move(data));
}

std::vector<int> make_labels(const SynthesisConfig& cfg, int classes, std::mt19937_64& rng) {
  std::vector<int> labels(static_cast<std::size_t>(cfg.batch_size));
  std::uniform_int_distribution<int> pick(0, classes - 1);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    labels[i] = cfg.labels == LabelPolicy::RoundRobin ? static_cast<int>(i % static_cast<std::size_t>(classes)) : pick(rng);
  }
  return labels;
}

Tensor<float> logit_loss(Tape<float>& tape, SynthLoss kind, const Tensor<float>& logits, std::span<const int> labels) {
  switch (kind) {
    case SynthLoss::Abs:
    case SynthLoss::AbsBns: return abs_loss(tape, logits, labels);
    case SynthLoss::Ce: return ce_loss(tape, logits, labels);
    case SynthLoss::Mae: return mae_loss(tape, logits, labels);
    case SynthLoss::Mse: return mse_loss(tape, logits, labels);
    case SynthLoss::Bns: break;
  }
  throw ContractError("logit_loss: bns has no logit term");
}

SynthesisResult run_synthesis(const ModelGraph& fp, const SynthesisConfig& cfg) {
  cfg.validate();
  fp.validate();
  const bool logits_used = uses_logits(cfg.loss);
  const bool bn_used = uses_bn(cfg.loss);
  const std::vector<BNStats> stored = fp.batchnorm_stats();
  if (bn_used && stored.empty()) {
    throw ContractError(std::string("synthesis loss ") + synth_loss_name(cfg.loss) + " needs a model with BN layers");
  }
  if (bn_used && cfg.batch_size < 2) throw ContractError("BNS synthesis needs batch_size >= 2 (batch std undefined)");

  std::mt19937_64 rng(cfg.seed);
  Tensor<float> x = gaussian_images(fp, cfg.batch_size, rng);
  std::vector<int> labels;
  if (logits_used) labels = make_labels(cfg, fp.class_count, rng);

  // Pure BNS matches batch statistics under batch normalization; logit losses
  // see the deployed (eval-stats) network.
  ForwardOptions fwd;
  fwd.mode = cfg.loss == SynthLoss::Bns ? BNMode::TrainStats : BNMode::EvalStats;
  fwd.collect_bn_stats = bn_used;

  const Parameters<float> params = bind_parameters<float>(fp, false);
  Adam adam(cfg.lr);
  std::vector<double> trajectory, target_logit, target_grad;
  trajectory.reserve(static_cast<std::size_t>(cfg.iterations) + 1);

  for (int it = 0;; ++it) {
    x.set_requires_grad(true);
    x.zero_grad();
    Tape<float> tape;
    ForwardResult<float> out = model_forward(tape, fp, params, x, fwd);
    Tensor<float> loss;
    if (logits_used) loss = logit_loss(tape, cfg.loss, out.logits, labels);
    if (bn_used) {
      Tensor<float> b = bns_loss(tape, out.bn_stats, stored);
      loss = loss.defined() ? add(tape, loss, b) : b;
    }
    const double value = loss.item();
    if (!std::isfinite(value)) {
      throw NumericalError("synthesis (" + std::string(synth_loss_name(cfg.loss)) + ") produced a non-finite loss at iteration " +
                               std::to_string(it),
                           it);
    }
    trajectory.push_back(value);
    if (logits_used) {
      const Index k = out.logits.dim(1);
      const Eigen::ArrayXf p = softmax_rows<float>(out.logits.data(), out.logits.dim(0), k);
      double logit_sum = 0.0, grad_sum = 0.0;
      for (std::size_t n = 0; n < labels.size(); ++n) {
        const Index at = static_cast<Index>(n) * k + labels[n];
        logit_sum += out.logits.data()[at];
        grad_sum += std::abs(static_cast<double>(p[at]) - 1.0);
      }
      target_logit.push_back(logit_sum / static_cast<double>(labels.size()));
      target_grad.push_back(grad_sum / static_cast<double>(labels.size()));
    }
    if (it == cfg.iterations) break;

    tape.backward(loss);
    if (!x.has_grad()) throw ContractError("synthesis: objective does not depend on the input");
    Eigen::ArrayXf next = x.data();
    if (cfg.optimizer == SynthOptimizer::Adam) {
      adam.next_step();
      adam.update(0, next, x.grad());
    } else {
      // Batch-mean objectives shrink each image's gradient by 1/N; undo that so
      // lr is a per-image step size independent of the batch size.
      next -= static_cast<float>(cfg.lr * static_cast<double>(cfg.batch_size)) * x.grad();
    }
    if (!next.allFinite()) {
      throw NumericalError("synthesis: non-finite image values after iteration " + std::to_string(it), it);
    }
    x = Tensor<float>(x.shape(), std::move(next));
  }

  if (cfg.loss == SynthLoss::Bns && cfg.iterations > 0 && trajectory.back() > cfg.bns_warn_ratio * trajectory.front()) {
    log_warning("BNS synthesis (seed " + std::to_string(cfg.seed) + ") reduced the loss only from " +
                std::to_string(trajectory.front()) + " to " + std::to_string(trajectory.back()));
  }
  return SynthesisResult{SynthesisAccess::make(x.detach(), std::move(labels), cfg.loss), std::move(trajectory),
                         std::move(target_logit), std::move(target_grad)};
}

}  // namespace

const char* synth_loss_name(SynthLoss loss) {
  for (const auto& n : kLossNames) {
    if (n.loss == loss) return n.name;
  }
  return "unknown";
}

SynthLoss parse_synth_loss(const std::string& name) {
  for (const auto& n : kLossNames) {
    if (name == n.name) return n.loss;
  }
  throw ContractError("unknown synthesis loss '" + name + "' (expected abs, ce, mae, mse, abs+bns or bns)");
}

const char* label_policy_name(LabelPolicy policy) {
  return policy == LabelPolicy::RoundRobin ? "round-robin" : "uniform-random";
}

LabelPolicy parse_label_policy(const std::string& name) {
  if (name == "round-robin") return LabelPolicy::RoundRobin;
  if (name == "uniform-random") return LabelPolicy::UniformRandom;
  throw ContractError("unknown label policy '" + name + "' (expected round-robin or uniform-random)");
}

const char* synth_optimizer_name(SynthOptimizer opt) { return opt == SynthOptimizer::Adam ? "adam" : "gd"; }

SynthOptimizer parse_synth_optimizer(const std::string& name) {
  if (name == "gd") return SynthOptimizer::GradientDescent;
  if (name == "adam") return SynthOptimizer::Adam;
  throw ContractError("unknown synthesis optimizer '" + name + "' (expected gd or adam)");
}

SynthesisConfig SynthesisConfig::aac_defaults() { return SynthesisConfig{}; }

SynthesisConfig SynthesisConfig::bns_defaults() {
  SynthesisConfig cfg;
  cfg.iterations = 500;
  cfg.lr = 0.5;
  cfg.loss = SynthLoss::Bns;
  cfg.optimizer = SynthOptimizer::Adam;
  return cfg;
}

void SynthesisConfig::validate() const {
  if (batch_size < 1) throw ContractError("synthesis batch_size must be positive");
  if (iterations < 0) throw ContractError("synthesis iterations must be >= 0");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ContractError("synthesis lr must be a positive finite number");
}

SynthesisResult generate_aac_batch(const ModelGraph& fp, const SynthesisConfig& cfg) {
  if (!uses_logits(cfg.loss)) throw ContractError("generate_aac_batch: loss must be abs, ce, mae, mse or abs+bns");
  return run_synthesis(fp, cfg);
}

SynthesisResult generate_bns_batch(const ModelGraph& fp, const SynthesisConfig& cfg) {
  SynthesisConfig c = cfg;
  c.loss = SynthLoss::Bns;
  return run_synthesis(fp, c);
}

SynthesisResult generate_batch(const ModelGraph& fp, const SynthesisConfig& cfg) { return run_synthesis(fp, cfg); }

std::vector<SyntheticBatch> generate_pool(const ModelGraph& fp, const SynthesisConfig& cfg, int count) {
  if (count < 1) throw ContractError("synthesis pool needs at least one batch");
  std::vector<SyntheticBatch> pool;
  pool.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    SynthesisConfig c = cfg;
    c.seed = cfg.seed + static_cast<std::uint64_t>(i);
    pool.push_back(run_synthesis(fp, c).batch);
  }
  return pool;
}

SyntheticBatch gaussian_batch(const ModelGraph& fp, int batch_size, std::uint64_t seed) {
  SynthesisConfig cfg;
  cfg.batch_size = batch_size;
  cfg.iterations = 0;
  cfg.seed = seed;
  return run_synthesis(fp, cfg).batch;
}

double evaluate_synthesis_quality(const ModelGraph& fp, const Tensor<float>& images, std::span<const int> labels) {
  Tape<float> tape;
  const Tensor<float> logits = model_forward(tape, fp, images).logits;
  return ce_loss(tape, logits, labels).item();
}

double evaluate_synthesis_quality(const ModelGraph& fp, const SyntheticBatch& batch) {
  if (!batch.has_labels()) throw ContractError("synthesis quality needs a labeled batch");
  return evaluate_synthesis_quality(fp, batch.images(), batch.labels());
}

void write_trajectory(const std::filesystem::path& path, std::span<const double> trajectory) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw FormatError(FormatError::Kind::Io, "cannot open " + path.string() + " for writing");
  os << std::setprecision(17);
  for (std::size_t i = 0; i < trajectory.size(); ++i) os << i << ' ' << trajectory[i] << '\n';
  if (!os) throw FormatError(FormatError::Kind::Io, "write failed: " + path.string());
}

Dataset to_dataset(std::span<const SyntheticBatch> batches, int class_count) {
  if (batches.empty()) throw ContractError("to_dataset: no batches");
  Dataset ds;
  const Shape& s = batches.front().images().shape();
  ds.sample_shape = {static_cast<int>(s[1]), static_cast<int>(s[2]), static_cast<int>(s[3])};
  ds.class_count = class_count;
  Index total = 0;
  for (const auto& b : batches) total += b.size();
  ds.images.resize(total * ds.sample_numel());
  Index at = 0;
  for (const auto& b : batches) {
    if (b.images().shape() != Shape{b.size(), s[1], s[2], s[3]}) throw ShapeError("to_dataset: batches differ in sample shape");
    ds.images.segment(at, b.images().numel()) = b.images().data();
    at += b.images().numel();
    for (Index i = 0; i < b.size(); ++i) {
      ds.labels.push_back(b.has_labels() ? b.labels()[static_cast<std::size_t>(i)] : 0);
    }
  }
  return ds;
}

}  // namespace dfq
