#include "dfq/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <ctime>
#include <iomanip>
#include <random>
#include <sstream>

#include "dfq/log.hpp"
#include "dfq/losses.hpp"
#include "dfq/ops.hpp"
#include "dfq/optim.hpp"
#include "dfq/train.hpp"

namespace dfq {

using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  T out{};
  const char* end = value.data() + value.size();
  const auto res = std::from_chars(value.data(), end, out);
  if (res.ec != std::errc() || res.ptr != end) {
    throw ContractError("config key '" + key + "': cannot parse '" + value + "' as a number");
  }
  return out;
}

// Synthesis batches for one pipeline stream; batch i uses seed base + i.
std::vector<SyntheticBatch> synth_pool(const ModelGraph& fp, SynthesisConfig cfg, int count, std::uint64_t seed) {
  cfg.seed = seed;
  return generate_pool(fp, cfg, count);
}

// Rows [begin, begin + count) of a synthetic batch.
Tensor<float> slice_images(const Tensor<float>& images, Index begin, Index count) {
  const Index m = images.numel() / images.dim(0);
  Shape s = images.shape();
  s[0] = count;
  return Tensor<float>(std::move(s), images.data().segment(begin * m, count * m));
}

enum class Stream : std::uint64_t { Aac = 1, Bns = 2, FineTune = 100 };

std::uint64_t stream_seed(std::uint64_t seed, Stream s, std::uint64_t sub = 0) {
  return derive_seed(seed, static_cast<std::uint64_t>(s) + sub);
}

AblationRow make_row(std::string name, std::vector<double> acc) {
  AblationRow row;
  row.name = std::move(name);
  row.median = median(acc);
  row.min = *std::min_element(acc.begin(), acc.end());
  row.max = *std::max_element(acc.begin(), acc.end());
  row.accuracy = std::move(acc);
  return row;
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  // splitmix64 over the combined words.
  std::uint64_t z = base * 0x9E3779B97F4A7C15ull + stream + 0x632BE59BD9B4E019ull;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

double median(std::vector<double> values) {
  if (values.empty()) throw ContractError("median of an empty set");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

void PipelineConfig::validate() const {
  compute_delta(0.0, 1.0, bits);
  if ((bn_adapt || fine_tune) && !clip) {
    throw ContractError("pipeline steps out of order: bn-adapt and fine-tune require clip");
  }
  aac.validate();
  bns.validate();
  if (aac_batches < 1) throw ContractError("aac.batches must be >= 1");
  if (bns_batches < 1) throw ContractError("bns.batches must be >= 1");
  if (bns.batch_size < 2) throw ContractError("bns.batch_size must be >= 2");
  if (ft.epochs < 0) throw ContractError("ft.epochs must be >= 0");
  if (ft.aac_batches < 0 || ft.bns_batches < 0 || ft.aac_batches + ft.bns_batches < 1) {
    throw ContractError("fine-tune pool must contain at least one batch");
  }
  if (ft.batch_size < 1) throw ContractError("ft.batch_size must be >= 1");
  if (!(ft.lr > 0.0)) throw ContractError("ft.lr must be positive");
  if (!(ft.temperature > 0.0)) throw ContractError("ft.temperature must be positive");
}

std::string PipelineConfig::steps_string() const {
  std::string s;
  auto add = [&s](bool on, const char* name) {
    if (!on) return;
    if (!s.empty()) s += ',';
    s += name;
  };
  add(clip, "clip");
  add(bn_adapt, "bn-adapt");
  add(fine_tune, "fine-tune");
  return s;
}

void PipelineConfig::set_steps(const std::string& csv) {
  clip = bn_adapt = fine_tune = false;
  std::stringstream ss(csv);
  std::string step;
  while (std::getline(ss, step, ',')) {
    if (step == "clip") {
      clip = true;
    } else if (step == "bn-adapt") {
      bn_adapt = true;
    } else if (step == "fine-tune") {
      fine_tune = true;
    } else if (!step.empty()) {
      throw ContractError("unknown pipeline step '" + step + "' (expected clip, bn-adapt, fine-tune)");
    }
  }
}

std::vector<std::pair<std::string, std::string>> config_entries(const PipelineConfig& c) {
  auto d = format_double;
  auto i = [](auto v) { return std::to_string(v); };
  return {
      {"bits", i(c.bits)},
      {"steps", c.steps_string()},
      {"seed", i(c.seed)},
      {"aac.batch_size", i(c.aac.batch_size)},
      {"aac.iterations", i(c.aac.iterations)},
      {"aac.lr", d(c.aac.lr)},
      {"aac.loss", synth_loss_name(c.aac.loss)},
      {"aac.labels", label_policy_name(c.aac.labels)},
      {"aac.optimizer", synth_optimizer_name(c.aac.optimizer)},
      {"aac.batches", i(c.aac_batches)},
      {"bns.batch_size", i(c.bns.batch_size)},
      {"bns.iterations", i(c.bns.iterations)},
      {"bns.lr", d(c.bns.lr)},
      {"bns.optimizer", synth_optimizer_name(c.bns.optimizer)},
      {"bns.warn_ratio", d(c.bns.bns_warn_ratio)},
      {"bns.batches", i(c.bns_batches)},
      {"bn.policy", c.bn.policy == BNUpdatePolicy::Replace ? "replace" : "ema"},
      {"bn.momentum", d(c.bn.momentum)},
      {"ft.epochs", i(c.ft.epochs)},
      {"ft.lr", d(c.ft.lr)},
      {"ft.momentum", d(c.ft.momentum)},
      {"ft.temperature", d(c.ft.temperature)},
      {"ft.hard_weight", d(c.ft.hard_weight)},
      {"ft.aac_batches", i(c.ft.aac_batches)},
      {"ft.bns_batches", i(c.ft.bns_batches)},
      {"ft.batch_size", i(c.ft.batch_size)},
  };
}

void set_config_value(PipelineConfig& c, const std::string& key, const std::string& v) {
  auto num_i = [&](int& out) { out = parse_number<int>(key, v); };
  auto num_d = [&](double& out) { out = parse_number<double>(key, v); };
  if (key == "bits") num_i(c.bits);
  else if (key == "steps") c.set_steps(v);
  else if (key == "seed") c.seed = parse_number<std::uint64_t>(key, v);
  else if (key == "aac.batch_size") num_i(c.aac.batch_size);
  else if (key == "aac.iterations") num_i(c.aac.iterations);
  else if (key == "aac.lr") num_d(c.aac.lr);
  else if (key == "aac.loss") {
    c.aac.loss = parse_synth_loss(v);
    if (c.aac.loss == SynthLoss::Bns) throw ContractError("aac.loss cannot be bns (no labels to clip against)");
  } else if (key == "aac.labels") c.aac.labels = parse_label_policy(v);
  else if (key == "aac.optimizer") c.aac.optimizer = parse_synth_optimizer(v);
  else if (key == "aac.batches") num_i(c.aac_batches);
  else if (key == "bns.batch_size") num_i(c.bns.batch_size);
  else if (key == "bns.iterations") num_i(c.bns.iterations);
  else if (key == "bns.lr") num_d(c.bns.lr);
  else if (key == "bns.optimizer") c.bns.optimizer = parse_synth_optimizer(v);
  else if (key == "bns.warn_ratio") num_d(c.bns.bns_warn_ratio);
  else if (key == "bns.batches") num_i(c.bns_batches);
  else if (key == "bn.policy") {
    if (v == "replace") c.bn.policy = BNUpdatePolicy::Replace;
    else if (v == "ema") c.bn.policy = BNUpdatePolicy::Ema;
    else throw ContractError("bn.policy must be replace or ema, got '" + v + "'");
  } else if (key == "bn.momentum") num_d(c.bn.momentum);
  else if (key == "ft.epochs") num_i(c.ft.epochs);
  else if (key == "ft.lr") num_d(c.ft.lr);
  else if (key == "ft.momentum") num_d(c.ft.momentum);
  else if (key == "ft.temperature") num_d(c.ft.temperature);
  else if (key == "ft.hard_weight") num_d(c.ft.hard_weight);
  else if (key == "ft.aac_batches") num_i(c.ft.aac_batches);
  else if (key == "ft.bns_batches") num_i(c.ft.bns_batches);
  else if (key == "ft.batch_size") num_i(c.ft.batch_size);
  else throw ContractError("unknown config key '" + key + "'");
}

double Evaluator::accuracy(const QuantModel& qm) const { return evaluate_accuracy(qm, data_); }
double Evaluator::accuracy(const ModelGraph& fp) const { return evaluate_accuracy(fp, data_); }

double RunReport::final_accuracy() const {
  if (steps.empty()) throw ContractError("run report has no evaluated steps");
  return steps.back().accuracy;
}

QuantModel fine_tune(const QuantModel& qm, const ModelGraph& fp, const PipelineConfig& cfg) {
  const FineTuneConfig& ft = cfg.ft;
  if (ft.epochs == 0) return qm;
  if (qm.enabled) qm.require_calibrated();
  if (ft.aac_batches + ft.bns_batches < 1) throw ContractError("fine-tune: empty synthetic pool");

  QuantModel student = qm;
  Sgd sgd(ft.lr, ft.momentum);
  const Parameters<float> teacher = bind_parameters<float>(fp, false);
  const float temperature = static_cast<float>(ft.temperature);
  std::vector<SyntheticBatch> all_bns;
  long step = 0;

  for (int epoch = 0; epoch < ft.epochs; ++epoch) {
    const std::uint64_t e = static_cast<std::uint64_t>(epoch);
    std::vector<SyntheticBatch> pool;
    if (ft.aac_batches > 0) pool = synth_pool(fp, cfg.aac, ft.aac_batches, stream_seed(cfg.seed, Stream::FineTune, 2 * e));
    std::vector<SyntheticBatch> bns;
    if (ft.bns_batches > 0) {
      bns = synth_pool(fp, cfg.bns, ft.bns_batches, stream_seed(cfg.seed, Stream::FineTune, 2 * e + 1));
      pool.insert(pool.end(), bns.begin(), bns.end());
    }

    for (const SyntheticBatch& b : pool) {
      for (Index begin = 0; begin < b.size(); begin += ft.batch_size, ++step) {
        const Index n = std::min<Index>(ft.batch_size, b.size() - begin);
        const Tensor<float> x = slice_images(b.images(), begin, n);
        Tape<float> tape;
        const Tensor<float> target = model_forward(tape, fp, teacher, x).logits;
        Parameters<float> params = bind_parameters<float>(student.base, true);
        const Tensor<float> logits = quantized_forward(tape, student, params, x).logits;
        Tensor<float> loss = distillation_loss(tape, logits, target, temperature);
        if (b.has_labels() && ft.hard_weight != 0.0) {
          const auto labels = b.labels().subspan(static_cast<std::size_t>(begin), static_cast<std::size_t>(n));
          loss = add(tape, loss, scale(tape, ce_loss(tape, logits, labels), static_cast<float>(ft.hard_weight)));
        }
        if (!std::isfinite(loss.item())) {
          throw NumericalError("fine-tune: loss diverged at step " + std::to_string(step), step);
        }
        tape.backward(loss);
        for (std::size_t i = 0; i < student.base.layers.size(); ++i) {
          Layer& l = student.base.layers[i];
          if (params.weight[i].defined() && params.weight[i].has_grad()) sgd.update(2 * i, l.weight, params.weight[i].grad(), false);
          if (params.bias[i].defined() && params.bias[i].has_grad()) sgd.update(2 * i + 1, l.bias, params.bias[i].grad(), false);
        }
      }
    }
    all_bns.insert(all_bns.end(), bns.begin(), bns.end());
  }
  // BN statistics follow the distribution-matched images only, re-estimated
  // under the final weights.
  if (all_bns.empty()) return student;
  return adapt_bn_statistics(student, all_bns, cfg.bn);
}

PipelineResult run_pipeline(const ModelGraph& fp, const PipelineConfig& cfg, const Evaluator& eval) {
  cfg.validate();
  PipelineResult result;
  RunReport& report = result.report;
  report.config = cfg;
  report.timestamp = utc_timestamp();
  report.fp_accuracy = eval.accuracy(fp);

  QuantModel qm = quantize_weights(fp, cfg.bits);
  if (!cfg.clip) {
    // Nothing calibrates the activation quantizers; evaluation rejects this.
    eval.accuracy(qm);
  }

  if (cfg.clip) {
    const auto t0 = Clock::now();
    const auto batches = synth_pool(fp, cfg.aac, cfg.aac_batches, stream_seed(cfg.seed, Stream::Aac));
    qm = calibrate_activation_ranges(qm, batches, &report.ranges);
    const double secs = seconds_since(t0);
    report.steps.push_back({"clip", secs, eval.accuracy(qm)});
    log_info("clip: " + format_double(report.steps.back().accuracy) + "% in " + format_double(secs) + " s");
  }
  if (cfg.bn_adapt) {
    const auto t0 = Clock::now();
    const auto batches = synth_pool(fp, cfg.bns, cfg.bns_batches, stream_seed(cfg.seed, Stream::Bns));
    qm = adapt_bn_statistics(qm, batches, cfg.bn, &report.bn_shifts);
    const double secs = seconds_since(t0);
    report.steps.push_back({"bn-adapt", secs, eval.accuracy(qm)});
    log_info("bn-adapt: " + format_double(report.steps.back().accuracy) + "% in " + format_double(secs) + " s");
  }
  for (const StepRecord& s : report.steps) report.two_step_seconds += s.seconds;
  report.three_step_seconds = report.two_step_seconds;
  if (cfg.fine_tune) {
    const auto t0 = Clock::now();
    qm = fine_tune(qm, fp, cfg);
    const double secs = seconds_since(t0);
    report.steps.push_back({"fine-tune", secs, eval.accuracy(qm)});
    report.three_step_seconds += secs;
    log_info("fine-tune: " + format_double(report.steps.back().accuracy) + "% in " + format_double(secs) + " s");
  }
  result.model = std::move(qm);
  return result;
}

std::vector<ToyRow> toy_experiment(const ToyConfig& cfg) {
  if (cfg.n < 2) throw ContractError("toy experiment needs n >= 2");
  if (cfg.target < 0 || cfg.target >= cfg.n) throw ContractError("toy experiment target outside [0, n)");
  if (cfg.iterations < 0) throw ContractError("toy experiment iterations must be >= 0");
  if (cfg.loss == SynthLoss::Bns || cfg.loss == SynthLoss::AbsBns) {
    throw ContractError("toy experiment supports abs, ce, mae and mse");
  }
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::ArrayXd x(cfg.n);
  for (Index i = 0; i < cfg.n; ++i) x[i] = normal(rng);
  const std::vector<int> label{cfg.target};

  std::vector<ToyRow> rows;
  rows.reserve(static_cast<std::size_t>(cfg.iterations) + 1);
  for (int it = 0;; ++it) {
    Tensor<double> input(Shape{1, cfg.n}, x);
    input.set_requires_grad(true);
    Tape<double> tape;
    // M(x) = x: the logits are the input itself.
    Tensor<double> loss;
    switch (cfg.loss) {
      case SynthLoss::Ce: loss = ce_loss(tape, input, label); break;
      case SynthLoss::Mae: loss = mae_loss(tape, input, label); break;
      case SynthLoss::Mse: loss = mse_loss(tape, input, label); break;
      default: loss = abs_loss(tape, input, label); break;
    }
    const Eigen::ArrayXd p = softmax_rows<double>(x, 1, cfg.n);
    rows.push_back({it, p[cfg.target], loss.item()});
    if (it == cfg.iterations) break;
    tape.backward(loss);
    x -= cfg.lr * input.grad();
  }
  return rows;
}

AblationTable ablation_run(const ModelGraph& fp, const Evaluator& eval, int bits, const std::vector<std::uint64_t>& seeds,
                           const PipelineConfig& base) {
  if (seeds.empty()) throw ContractError("ablation needs at least one seed");
  AblationTable table;
  table.bits = bits;
  table.seeds = seeds;
  table.fp_accuracy = eval.accuracy(fp);
  std::vector<double> none, clip, bn, ft;
  for (std::uint64_t seed : seeds) {
    PipelineConfig cfg = base;
    cfg.bits = bits;
    cfg.seed = seed;
    cfg.clip = cfg.bn_adapt = cfg.fine_tune = true;
    cfg.validate();

    // Baseline: ranges from the unoptimized gaussian initializations.
    const std::uint64_t aac_seed = stream_seed(seed, Stream::Aac);
    std::vector<SyntheticBatch> noise;
    for (int i = 0; i < cfg.aac_batches; ++i) {
      noise.push_back(gaussian_batch(fp, cfg.aac.batch_size, aac_seed + static_cast<std::uint64_t>(i)));
    }
    none.push_back(eval.accuracy(calibrate_activation_ranges(quantize_weights(fp, bits), noise)));

    // clip -> clip+bn -> clip+bn+ft share their prefix, so one run scores all three.
    PipelineResult run = run_pipeline(fp, cfg, eval);
    clip.push_back(run.report.steps.at(0).accuracy);
    bn.push_back(run.report.steps.at(1).accuracy);
    ft.push_back(run.report.steps.at(2).accuracy);
    table.runs.push_back(std::move(run.report));
  }
  table.rows.push_back(make_row("none", std::move(none)));
  table.rows.push_back(make_row("clip", std::move(clip)));
  table.rows.push_back(make_row("clip+bn", std::move(bn)));
  table.rows.push_back(make_row("clip+bn+ft", std::move(ft)));
  return table;
}

LossStudyTable loss_study_run(const ModelGraph& fp, const Evaluator& eval, int bits, const std::vector<std::uint64_t>& seeds,
                              const PipelineConfig& base) {
  if (seeds.empty()) throw ContractError("loss study needs at least one seed");
  LossStudyTable table;
  table.bits = bits;
  table.seeds = seeds;
  for (SynthLoss loss : {SynthLoss::AbsBns, SynthLoss::Ce, SynthLoss::Mae, SynthLoss::Mse, SynthLoss::Abs}) {
    LossStudyRow row;
    row.loss = loss;
    for (std::uint64_t seed : seeds) {
      SynthesisConfig aac = base.aac;
      aac.loss = loss;
      // Same seeds for every loss: each row starts from identical images.
      const auto batches = synth_pool(fp, aac, base.aac_batches, stream_seed(seed, Stream::Aac));
      double ce = 0.0;
      for (const SyntheticBatch& b : batches) ce += evaluate_synthesis_quality(fp, b);
      row.synthesis_ce.push_back(ce / static_cast<double>(batches.size()));
      row.accuracy.push_back(eval.accuracy(calibrate_activation_ranges(quantize_weights(fp, bits), batches)));
    }
    row.median_ce = median(row.synthesis_ce);
    row.median_accuracy = median(row.accuracy);
    table.rows.push_back(std::move(row));
  }
  return table;
}

// ---------------------------------------------------------------------------
// Reports

using nlohmann::json;

json to_json(const PipelineConfig& cfg) {
  json j = json::object();
  for (const auto& [k, v] : config_entries(cfg)) j[k] = v;
  return j;
}

json calibration_report(const QuantModel& qm, const std::vector<BNShift>& shifts) {
  json sites = json::array();
  for (const auto& [layer, p] : qm.weight_quant) {
    sites.push_back({{"layer", qm.base.layer_name(layer)},
                     {"site", site_kind_name(SiteKind::Weight)},
                     {"l", p.l()},
                     {"u", p.u()},
                     {"delta", p.delta()},
                     {"bits", p.bits()}});
  }
  for (const auto& [layer, p] : qm.act_quant) {
    json row = {{"layer", qm.base.layer_name(layer)}, {"site", site_kind_name(qm.act_site_kind(layer))}};
    if (p) {
      row["l"] = p->l();
      row["u"] = p->u();
      row["delta"] = p->delta();
      row["bits"] = p->bits();
    } else {
      row["l"] = row["u"] = row["delta"] = nullptr;
      row["bits"] = qm.bits;
    }
    sites.push_back(std::move(row));
  }
  auto vec = [](const Eigen::ArrayXf& a) { return std::vector<float>(a.data(), a.data() + a.size()); };
  json bn = json::array();
  for (const BNShift& s : shifts) {
    bn.push_back({{"layer", qm.base.layer_name(s.layer)},
                  {"old_mean", vec(s.old_mean)},
                  {"old_std", vec(s.old_std)},
                  {"new_mean", vec(s.new_mean)},
                  {"new_std", vec(s.new_std)},
                  {"relative_deviation", s.relative_deviation},
                  {"mean_channel_shift", s.mean_channel_shift}});
  }
  return {{"bits", qm.bits}, {"quantization_enabled", qm.enabled}, {"sites", sites}, {"batchnorm", bn}};
}

json to_json(const RunReport& r, const ModelGraph& fp) {
  json steps = json::array(), timing_steps = json::array(), ranges = json::array();
  for (const StepRecord& s : r.steps) {
    steps.push_back({{"step", s.name}, {"accuracy", s.accuracy}});
    timing_steps.push_back({{"step", s.name}, {"seconds", s.seconds}});
  }
  for (const RangeRecord& rr : r.ranges) {
    ranges.push_back({{"layer", fp.layer_name(rr.layer)},
                      {"site", site_kind_name(rr.kind)},
                      {"observed_min", rr.observed_min},
                      {"observed_max", rr.observed_max},
                      {"batches_seen", rr.batches_seen}});
  }
  json bn = json::array();
  for (const BNShift& s : r.bn_shifts) {
    bn.push_back({{"layer", fp.layer_name(s.layer)},
                  {"relative_deviation", s.relative_deviation},
                  {"mean_channel_shift", s.mean_channel_shift}});
  }
  return {{"config", to_json(r.config)},
          {"seed", r.config.seed},
          {"fp_accuracy", r.fp_accuracy},
          {"steps", steps},
          {"activation_ranges", ranges},
          {"batchnorm_shift", bn},
          // Wall-clock fields are the only non-reproducible part of a report.
          {"timing",
           {{"timestamp", r.timestamp},
            {"steps", timing_steps},
            {"two_step_seconds", r.two_step_seconds},
            {"three_step_seconds", r.three_step_seconds}}}};
}

json to_json(const AblationTable& t) {
  json rows = json::array(), runs = json::array();
  for (const AblationRow& row : t.rows) {
    rows.push_back({{"config", row.name}, {"accuracy", row.accuracy}, {"median", row.median}, {"min", row.min}, {"max", row.max}});
  }
  json timing = json::array();
  for (const RunReport& r : t.runs) {
    timing.push_back({{"seed", r.config.seed},
                      {"two_step_seconds", r.two_step_seconds},
                      {"three_step_seconds", r.three_step_seconds}});
  }
  return {{"bits", t.bits}, {"seeds", t.seeds}, {"fp_accuracy", t.fp_accuracy}, {"rows", rows}, {"timing", timing}};
}

json to_json(const LossStudyTable& t) {
  json rows = json::array();
  for (const LossStudyRow& row : t.rows) {
    rows.push_back({{"loss", synth_loss_name(row.loss)},
                    {"synthesis_ce", row.synthesis_ce},
                    {"accuracy", row.accuracy},
                    {"median_ce", row.median_ce},
                    {"median_accuracy", row.median_accuracy}});
  }
  return {{"bits", t.bits}, {"seeds", t.seeds}, {"rows", rows}};
}

json to_json(const SweepResult& s, const ModelGraph& model) {
  json sites = json::array();
  for (const SweepSite& site : s.sites) {
    sites.push_back({{"layer", model.layer_name(site.layer)},
                     {"aac_u", site.aac_u},
                     {"best_u", site.best_u},
                     {"grid_step", site.grid_step},
                     {"aac_within_one_step", site.aac_within_one_step},
                     {"grid", site.grid},
                     {"accuracy", site.accuracy}});
  }
  return {{"aac_accuracy", s.aac_accuracy},
          {"sweep_accuracy", s.final_accuracy},
          {"within_one_step_rate", s.within_one_step_rate()},
          {"sites", sites}};
}

std::string summary(const RunReport& r) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  os << "W" << r.config.bits << "A" << r.config.bits << "  seed " << r.config.seed << "  steps " << r.config.steps_string()
     << "\n";
  os << "  " << std::left << std::setw(12) << "fp" << std::right << std::setw(8) << r.fp_accuracy << " %\n";
  for (const StepRecord& s : r.steps) {
    os << "  " << std::left << std::setw(12) << s.name << std::right << std::setw(8) << s.accuracy << " %" << std::setw(10)
       << s.seconds << " s\n";
  }
  os << "  two-step " << r.two_step_seconds << " s, three-step " << r.three_step_seconds << " s\n";
  return os.str();
}

std::string summary(const AblationTable& t) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  os << "ablation W" << t.bits << "A" << t.bits << " over " << t.seeds.size() << " seed(s), fp " << t.fp_accuracy << " %\n";
  os << "  " << std::left << std::setw(12) << "config" << std::right << std::setw(9) << "median" << std::setw(9) << "min"
     << std::setw(9) << "max" << '\n';
  for (const AblationRow& row : t.rows) {
    os << "  " << std::left << std::setw(12) << row.name << std::right << std::setw(9) << row.median << std::setw(9) << row.min
       << std::setw(9) << row.max << '\n';
  }
  return os.str();
}

std::string summary(const LossStudyTable& t) {
  std::ostringstream os;
  os << "loss study W" << t.bits << "A" << t.bits << " over " << t.seeds.size() << " seed(s)\n";
  os << "  " << std::left << std::setw(10) << "loss" << std::right << std::setw(14) << "synthesis CE" << std::setw(11)
     << "accuracy" << '\n';
  for (const LossStudyRow& row : t.rows) {
    os << "  " << std::left << std::setw(10) << synth_loss_name(row.loss) << std::right << std::setw(14)
       << std::setprecision(6) << std::defaultfloat << row.median_ce << std::setw(11) << std::fixed << std::setprecision(2)
       << row.median_accuracy << '\n';
  }
  return os.str();
}

}  // namespace dfq
