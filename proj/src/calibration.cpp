#include "dfq/calibration.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "dfq/log.hpp"

namespace dfq {

std::vector<RangeRecord> collect_activation_ranges(const QuantModel& qm, std::span<const SyntheticBatch> batches) {
  if (batches.empty()) throw ContractError("activation calibration needs at least one batch");
  QuantForwardOptions opts;
  opts.calibration_mode = true;
  opts.skip_activation_quant = true;
  std::vector<RangeRecord> records;
  for (const auto& [layer, p] : qm.act_quant) {
    opts.probes.push_back(layer);
    RangeRecord r;
    r.layer = layer;
    r.kind = qm.act_site_kind(layer);
    r.observed_min = std::numeric_limits<double>::infinity();
    r.observed_max = -std::numeric_limits<double>::infinity();
    records.push_back(r);
  }
  const Parameters<float> params = bind_parameters<float>(qm.base, false);
  for (const SyntheticBatch& b : batches) {
    Tape<float> tape;
    const ForwardResult<float> out = quantized_forward(tape, qm, params, b.images(), opts);
    for (RangeRecord& r : records) {
      const auto& a = out.probes.at(r.layer).data();
      r.observed_min = std::min(r.observed_min, static_cast<double>(a.minCoeff()));
      r.observed_max = std::max(r.observed_max, static_cast<double>(a.maxCoeff()));
      ++r.batches_seen;
    }
  }
  return records;
}

QuantModel calibrate_activation_ranges(const QuantModel& qm, std::span<const SyntheticBatch> batches,
                                       std::vector<RangeRecord>* records) {
  std::vector<RangeRecord> ranges = collect_activation_ranges(qm, batches);
  QuantModel out = qm;
  for (const RangeRecord& r : ranges) {
    double l = r.kind == SiteKind::PostRelu ? 0.0 : r.observed_min;
    double u = r.observed_max;
    if (!(u > l)) {
      const double band = std::numeric_limits<float>::epsilon() * std::max(1.0, std::abs(l));
      log_warning(qm.base.layer_name(r.layer) + ": constant activations during calibration, widening range by " +
                  std::to_string(band));
      u = l + band;
    }
    out.act_quant[r.layer] = QuantParams(l, u, qm.bits);
  }
  if (records) *records = std::move(ranges);
  return out;
}

std::vector<BNShift> bn_shifts(const ModelGraph& before, const ModelGraph& after) {
  std::vector<BNShift> shifts;
  for (int layer : before.batchnorm_layers()) {
    const BNStats& a = before.layers[static_cast<std::size_t>(layer)].stats;
    const BNStats& b = after.layers.at(static_cast<std::size_t>(layer)).stats;
    BNShift s;
    s.layer = layer;
    s.old_mean = a.mean;
    s.old_std = a.std;
    s.new_mean = b.mean;
    s.new_std = b.std;
    const Eigen::ArrayXd dm = b.mean.cast<double>() - a.mean.cast<double>();
    const Eigen::ArrayXd ds = b.std.cast<double>() - a.std.cast<double>();
    const double base = a.mean.cast<double>().matrix().norm() + a.std.cast<double>().matrix().norm();
    s.relative_deviation = (dm.matrix().norm() + ds.matrix().norm()) / base;
    s.mean_channel_shift = (dm.abs() + ds.abs()).mean();
    shifts.push_back(std::move(s));
  }
  return shifts;
}

double max_relative_deviation(std::span<const BNShift> shifts) {
  double m = 0.0;
  for (const BNShift& s : shifts) m = std::max(m, s.relative_deviation);
  return m;
}

double mean_channel_shift(std::span<const BNShift> shifts) {
  if (shifts.empty()) return 0.0;
  double total = 0.0;
  for (const BNShift& s : shifts) total += s.mean_channel_shift;
  return total / static_cast<double>(shifts.size());
}

QuantModel adapt_bn_statistics(const QuantModel& qm, std::span<const SyntheticBatch> batches, const BNAdaptConfig& cfg,
                               std::vector<BNShift>* shifts) {
  if (batches.empty()) throw ContractError("BN adaptation needs at least one batch");
  if (qm.enabled) qm.require_calibrated();
  const std::vector<int> bn_layers = qm.base.batchnorm_layers();
  if (bn_layers.empty()) throw ContractError("BN adaptation: model has no batch-normalization layers");
  if (cfg.policy == BNUpdatePolicy::Ema && !(cfg.momentum > 0.0 && cfg.momentum <= 1.0)) {
    throw ContractError("BN adaptation: EMA momentum must lie in (0, 1]");
  }

  std::vector<Eigen::ArrayXd> mean_sum(bn_layers.size()), var_sum(bn_layers.size());
  QuantForwardOptions opts;
  opts.mode = BNMode::TrainStats;
  const Parameters<float> params = bind_parameters<float>(qm.base, false);
  for (const SyntheticBatch& b : batches) {
    if (b.size() < 2) throw ContractError("BN adaptation needs batches of at least 2 images");
    Tape<float> tape;
    const ForwardResult<float> out = quantized_forward(tape, qm, params, b.images(), opts);
    for (std::size_t i = 0; i < bn_layers.size(); ++i) {
      const Eigen::ArrayXd m = out.bn_stats[i].mean.data().cast<double>();
      const Eigen::ArrayXd v = out.bn_stats[i].std.data().cast<double>().square();
      if (mean_sum[i].size() == 0) {
        mean_sum[i] = m;
        var_sum[i] = v;
      } else {
        mean_sum[i] += m;
        var_sum[i] += v;
      }
    }
  }

  QuantModel adapted = qm;
  const double n = static_cast<double>(batches.size());
  for (std::size_t i = 0; i < bn_layers.size(); ++i) {
    Layer& layer = adapted.base.layers[static_cast<std::size_t>(bn_layers[i])];
    Eigen::ArrayXd mean = mean_sum[i] / n;
    Eigen::ArrayXd var = var_sum[i] / n;
    if (cfg.policy == BNUpdatePolicy::Ema) {
      mean = (1.0 - cfg.momentum) * layer.stats.mean.cast<double>() + cfg.momentum * mean;
      var = (1.0 - cfg.momentum) * layer.stats.std.cast<double>().square() + cfg.momentum * var;
    }
    Eigen::ArrayXf sd = var.sqrt().cast<float>();
    // Dead channels have zero variance; keep std strictly positive.
    sd = sd.max(std::numeric_limits<float>::min());
    layer.stats.mean = mean.cast<float>();
    layer.stats.std = sd;
  }
  if (!adapted.base.batchnorm_stats().empty()) adapted.base.validate();
  if (shifts) *shifts = bn_shifts(qm.base, adapted.base);
  return adapted;
}

double evaluate_accuracy(const QuantModel& qm, const Dataset& data, Index chunk) {
  if (data.size() == 0) throw ContractError("evaluate: empty dataset");
  if (qm.enabled) qm.require_calibrated();
  if (data.sample_shape != qm.base.input_shape || data.class_count != qm.base.class_count) {
    throw ShapeError("evaluate: dataset shape/classes do not match the model");
  }
  const Parameters<float> params = bind_parameters<float>(qm.base, false);
  Index correct = 0;
  for (Index begin = 0; begin < data.size(); begin += chunk) {
    const Index n = std::min(chunk, data.size() - begin);
    Tape<float> tape;
    const Tensor<float> logits = quantized_forward(tape, qm, params, data.batch(begin, n)).logits;
    const Index k = logits.dim(1);
    for (Index r = 0; r < n; ++r) {
      Index best = 0;
      logits.data().segment(r * k, k).maxCoeff(&best);
      if (best == data.labels[static_cast<std::size_t>(begin + r)]) ++correct;
    }
  }
  return 100.0 * static_cast<double>(correct) / static_cast<double>(data.size());
}

double SweepResult::within_one_step_rate() const {
  if (sites.empty()) return 0.0;
  const auto hits = std::count_if(sites.begin(), sites.end(), [](const SweepSite& s) { return s.aac_within_one_step; });
  return static_cast<double>(hits) / static_cast<double>(sites.size());
}

SweepResult best_clip_sweep(const QuantModel& qm, const Dataset& labeled, const SweepConfig& cfg) {
  if (cfg.points < 2) throw ContractError("clip sweep grid needs at least 2 points");
  if (!(cfg.range_factor > 0.0)) throw ContractError("clip sweep range factor must be positive");
  if (!qm.enabled) throw ContractError("clip sweep needs an enabled quantized model");
  qm.require_calibrated();

  SweepResult result;
  result.model = qm;
  result.aac_accuracy = evaluate_accuracy(qm, labeled);
  double current_accuracy = result.aac_accuracy;

  for (auto& [layer, slot] : result.model.act_quant) {
    const QuantParams aac = *slot;
    SweepSite site;
    site.layer = layer;
    site.aac_u = aac.u();
    const double top = aac.u() * cfg.range_factor;
    site.grid_step = top / static_cast<double>(cfg.points - 1);
    for (int i = 0; i < cfg.points; ++i) {
      const double u = top * static_cast<double>(i) / static_cast<double>(cfg.points - 1);
      if (u > aac.l()) site.grid.push_back(u);
    }
    site.grid.push_back(aac.u());
    std::sort(site.grid.begin(), site.grid.end());
    site.grid.erase(std::unique(site.grid.begin(), site.grid.end()), site.grid.end());

    double best_acc = -1.0;
    double best_u = aac.u();
    for (double u : site.grid) {
      slot = QuantParams(aac.l(), u, aac.bits());
      const double acc = u == aac.u() ? current_accuracy : evaluate_accuracy(result.model, labeled);
      site.accuracy.push_back(acc);
      // Ascending grid, strict improvement: ties keep the smaller u.
      if (acc > best_acc) {
        best_acc = acc;
        best_u = u;
      }
    }
    slot = QuantParams(aac.l(), best_u, aac.bits());
    current_accuracy = best_acc;
    site.best_u = best_u;
    site.aac_within_one_step = std::abs(aac.u() - best_u) <= site.grid_step * (1.0 + 1e-12);
    result.sites.push_back(std::move(site));
  }
  result.final_accuracy = current_accuracy;
  return result;
}

}  // namespace dfq
