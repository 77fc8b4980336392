// End-to-end acceptance suite: one PASS/FAIL line per criterion.
//
// Trains the full-precision desk model once, then runs every check at its
// stated tolerance and time budget. Exit status is the number of failures.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <optional>
#include <random>
#include <sstream>

#include "dfq/calibration.hpp"
#include "dfq/dataset.hpp"
#include "dfq/gradcheck.hpp"
#include "dfq/log.hpp"
#include "dfq/losses.hpp"
#include "dfq/model_io.hpp"
#include "dfq/pipeline.hpp"
#include "dfq/quantizer.hpp"
#include "dfq/train.hpp"
#include "dfq/zoo.hpp"
#include "grad_cases.hpp"

namespace {

using namespace dfq;
using Clock = std::chrono::steady_clock;
namespace fs = std::filesystem;

struct Verdict {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << "[violated] ";
    }
    detail << what << "; ";
  }
};

std::string fmt(double v, int precision = 2) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(precision);
  os << v;
  return os.str();
}

std::string sci(double v) {
  std::ostringstream os;
  os.precision(3);
  os << v;
  return os.str();
}

// Shared desk-scale state: the trained model and its labeled evaluation set.
struct Desk {
  ModelGraph fp;
  Dataset eval;
  double fp_accuracy = 0.0;
  std::optional<AblationTable> ablation;
};

// Desk-sized pipeline: two 32-image batches per synthetic pool. The fine-tune
// pool matches the calibration pool, as in the default configuration.
PipelineConfig desk_config() {
  PipelineConfig c;
  c.aac.batch_size = 32;
  c.aac_batches = 2;
  c.bns.batch_size = 32;
  c.bns_batches = 2;
  c.ft.aac_batches = 2;
  c.ft.bns_batches = 2;
  return c;
}

const std::vector<std::uint64_t> kSeeds{0, 1, 2, 3, 4};

nlohmann::json without_timing(nlohmann::json j) {
  j.erase("timing");
  return j;
}

const AblationRow& row(const AblationTable& t, const std::string& name) {
  for (const auto& r : t.rows) {
    if (r.name == name) return r;
  }
  throw ContractError("ablation row " + name + " missing");
}

// 1
void quantizer_exactness(Verdict& v, Desk&) {
  struct Exact {
    double l, u;
    int b;
    double delta;
  };
  const Exact cases[] = {{0, 15, 4, 1}, {0, 255, 8, 1}, {-1, 2, 2, 1}, {-8, 7, 4, 1}, {0, 7, 3, 1}, {-2, 4, 2, 2}};
  bool exact = true;
  for (const auto& c : cases) exact = exact && compute_delta(c.l, c.u, c.b) == c.delta && QuantParams(c.l, c.u, c.b).delta() == c.delta;
  v.require(exact, "integer-friendly deltas exact");

  std::mt19937_64 rng(20240611);
  std::uniform_real_distribution<double> lo(-50.0, 50.0), unit(0.0, 1.0);
  std::uniform_int_distribution<int> bits(kMinBits, kMaxBits);
  const int trials = 20000;
  long bad_delta = 0, bad_roundtrip = 0, bad_code = 0;
  double worst = 0.0;
  for (int t = 0; t < trials; ++t) {
    const double l = lo(rng);
    const double u = l + std::exp(std::log(1e-3) + unit(rng) * std::log(1e5));
    const int b = bits(rng);
    const QuantParams p(l, u, b);
    if (p.delta() != (u - l) / (std::ldexp(1.0, b) - 1.0)) ++bad_delta;
    Eigen::ArrayXd x(4);
    x << l + (u - l) * unit(rng), l, u, l + (u - l) * unit(rng);
    Eigen::ArrayXd outside(2);
    outside << l - (1.0 + unit(rng)) * (u - l), u + (1.0 + unit(rng)) * (u - l);
    const Eigen::ArrayXi q = quantize<double>(x, p), qo = quantize<double>(outside, p);
    if ((q < 0).any() || (q > p.max_code()).any() || qo[0] != 0 || qo[1] != p.max_code()) ++bad_code;
    const Eigen::ArrayXd err = (dequantize<double>(q, p) - x).abs() / p.delta();
    worst = std::max(worst, err.maxCoeff());
    // Half a step, up to one ulp of the operands.
    if ((err > 0.5 * (1.0 + 1e-9)).any()) ++bad_roundtrip;
  }
  v.require(bad_delta == 0, std::to_string(trials) + " random tuples, delta mismatches " + std::to_string(bad_delta));
  v.require(bad_roundtrip == 0, "max |D(Q(x))-x|/delta " + fmt(worst, 6));
  v.require(bad_code == 0, "codes outside [0, 2^b-1]: " + std::to_string(bad_code));
}

// 2
void gradient_oracle(Verdict& v, Desk&) {
  std::vector<test::GradCase> cases = test::kernel_grad_cases();
  for (auto& c : test::loss_grad_cases()) cases.push_back(std::move(c));
  for (auto& c : test::model_grad_cases()) cases.push_back(std::move(c));
  double worst = 0.0;
  std::string worst_name;
  int failures = 0;
  for (const auto& c : cases) {
    for (std::uint64_t seed = 101; seed < 106; ++seed) {
      const double err = finite_diff_check<double>(c.fn, test::random_tensor<double>(c.shape, seed, c.scale), c.eps);
      if (err > 1e-4) ++failures;
      if (err > worst) {
        worst = err;
        worst_name = c.name;
      }
    }
  }
  v.require(failures == 0, std::to_string(cases.size()) + " kernels/losses x 5 seeds, max rel err " + sci(worst) + " (" +
                               worst_name + "), failures " + std::to_string(failures));
}

// 3
void target_logit_identity(Verdict& v, Desk&) {
  std::mt19937_64 rng(77);
  std::normal_distribution<double> normal(0.0, 3.0);
  std::uniform_int_distribution<int> pick(0, 9);
  double ce_err = 0.0, abs_err = 0.0;
  for (int i = 0; i < 100; ++i) {
    Eigen::ArrayXd z(10);
    for (Index k = 0; k < 10; ++k) z[k] = normal(rng);
    const std::vector<int> y{pick(rng)};
    const Eigen::ArrayXd p = softmax_rows<double>(z, 1, 10);
    for (bool use_abs : {false, true}) {
      Tensor<double> logits({1, 10}, z);
      logits.set_requires_grad(true);
      Tape<double> tape;
      tape.backward(use_abs ? abs_loss(tape, logits, y) : ce_loss(tape, logits, y));
      const double g = logits.grad()[y[0]];
      if (use_abs) abs_err = std::max(abs_err, std::abs(g + 1.0));
      else ce_err = std::max(ce_err, std::abs(g - (p[y[0]] - 1.0)));
    }
  }
  v.require(ce_err <= 1e-8, "max |dCE/dz_y - (p_y - 1)| " + sci(ce_err));
  v.require(abs_err == 0.0, "max |dABS/dz_y + 1| " + sci(abs_err));
}

// 4
void toy_experiment_check(Verdict& v, Desk&) {
  ToyConfig cfg;
  cfg.iterations = 300;
  cfg.loss = SynthLoss::Abs;
  const auto abs_rows = toy_experiment(cfg);
  cfg.loss = SynthLoss::Ce;
  const auto ce_rows = toy_experiment(cfg);
  const double pa = abs_rows.back().p_target, pc = ce_rows.back().p_target;
  bool monotone = true;
  for (std::size_t i = 1; i < ce_rows.size(); ++i) {
    monotone = monotone && std::abs(ce_rows[i].p_target - 1.0) <= std::abs(ce_rows[i - 1].p_target - 1.0);
  }
  v.require(pa >= 0.999, "abs p_target " + fmt(pa, 6) + " (lr " + fmt(cfg.lr, 2) + ")");
  v.require(pa > pc, "ce p_target " + fmt(pc, 6));
  v.require(monotone, "ce |p_y - 1| non-increasing");
}

// 5
void loss_selection(Verdict& v, Desk& d) {
  const LossStudyTable t = loss_study_run(d.fp, Evaluator(d.eval), 4, kSeeds, desk_config());
  std::cout << summary(t);
  const LossStudyRow& abs = t.rows.back();
  bool lowest_ce = true, best_acc = true;
  std::string others;
  for (const LossStudyRow& r : t.rows) {
    if (r.loss == SynthLoss::Abs) continue;
    lowest_ce = lowest_ce && abs.median_ce < r.median_ce;
    best_acc = best_acc && abs.median_accuracy >= r.median_accuracy;
    others += std::string(synth_loss_name(r.loss)) + " " + sci(r.median_ce) + "/" + fmt(r.median_accuracy) + " ";
  }
  v.require(lowest_ce, "abs teacher CE " + sci(abs.median_ce) + " lowest");
  v.require(best_acc, "abs clip accuracy " + fmt(abs.median_accuracy) + " highest");
  v.detail << "others (CE/acc): " << others << "; ";
}

// 6 (also produces the runs timed by 10)
void ablation_ordering(Verdict& v, Desk& d) {
  d.ablation = ablation_run(d.fp, Evaluator(d.eval), 4, kSeeds, desk_config());
  std::cout << summary(*d.ablation);
  const double none = row(*d.ablation, "none").median, clip = row(*d.ablation, "clip").median;
  const double bn = row(*d.ablation, "clip+bn").median, ft = row(*d.ablation, "clip+bn+ft").median;
  v.require(none < clip, "none " + fmt(none) + " < clip " + fmt(clip));
  v.require(clip - none >= 5.0, "clip - none " + fmt(clip - none) + " >= 5");
  v.require(clip <= bn, "clip <= clip+bn " + fmt(bn));
  v.require(bn <= ft, "clip+bn <= clip+bn+ft " + fmt(ft));
}

// 7
void eight_bit_parity(Verdict& v, Desk& d) {
  PipelineConfig cfg = desk_config();
  cfg.bits = 8;
  cfg.set_steps("clip,bn-adapt,fine-tune");
  const PipelineResult r = run_pipeline(d.fp, cfg, Evaluator(d.eval));
  const double bn = r.report.steps.at(1).accuracy, ft = r.report.steps.at(2).accuracy;
  v.require(std::abs(bn - d.fp_accuracy) <= 1.0, "fp " + fmt(d.fp_accuracy) + " vs W8 clip+bn " + fmt(bn));
  v.require(std::abs(ft - bn) < 1.0, "W8 fine-tune " + fmt(ft) + " (change " + fmt(ft - bn) + ")");
}

// 8
void sweep_dominance(Verdict& v, Desk& d) {
  PipelineConfig cfg = desk_config();
  cfg.set_steps("clip");
  const PipelineResult r = run_pipeline(d.fp, cfg, Evaluator(d.eval));
  const SweepResult s = best_clip_sweep(r.model, d.eval);
  const double rate = s.within_one_step_rate();
  v.require(s.final_accuracy >= s.aac_accuracy, "sweep " + fmt(s.final_accuracy) + " >= calibrated " + fmt(s.aac_accuracy));
  v.require(rate >= 0.70, "sites within one grid step " + fmt(100.0 * rate, 0) + "% of " + std::to_string(s.sites.size()));
}

// 9
void bn_control(Verdict& v, Desk& d) {
  const PipelineConfig cfg = desk_config();
  SynthesisConfig bns = cfg.bns;
  bns.seed = derive_seed(0, 2);
  const auto batches = generate_pool(d.fp, bns, cfg.bns_batches);

  std::vector<BNShift> control, quantized;
  adapt_bn_statistics(unquantized(d.fp), batches, cfg.bn, &control);

  PipelineConfig clip = cfg;
  clip.set_steps("clip");
  const QuantModel calibrated = run_pipeline(d.fp, clip, Evaluator(d.eval)).model;
  adapt_bn_statistics(calibrated, batches, cfg.bn, &quantized);

  const double dev = max_relative_deviation(control);
  const double c_shift = mean_channel_shift(control), q_shift = mean_channel_shift(quantized);
  v.require(dev < 0.01, "control max relative deviation " + fmt(100.0 * dev, 3) + "%");
  v.require(q_shift > c_shift, "W4 mean channel shift " + sci(q_shift) + " > control " + sci(c_shift));
}

// 10
void timing(Verdict& v, Desk& d) {
  if (!d.ablation) {
    v.require(false, "needs the ablation runs");
    return;
  }
  double two = 0.0, three = 0.0, worst = 0.0;
  for (const RunReport& r : d.ablation->runs) {
    two += r.two_step_seconds;
    three += r.three_step_seconds;
    worst = std::max(worst, r.two_step_seconds / r.three_step_seconds);
    const auto j = to_json(r, d.fp)["timing"];
    v.require(j.contains("two_step_seconds") && j.contains("three_step_seconds"), "seed " + std::to_string(r.config.seed) + " report carries both times");
  }
  v.require(two < 0.1 * three, "two-step " + fmt(two, 1) + " s vs three-step " + fmt(three, 1) + " s over " +
                                   std::to_string(d.ablation->runs.size()) + " runs (" + fmt(100.0 * two / three, 1) +
                                   "%, worst single run " + fmt(100.0 * worst, 1) + "%)");
}

// 11
void determinism(Verdict& v, Desk& d) {
  const fs::path dir = fs::temp_directory_path() / "dfq_acceptance";
  fs::create_directories(dir);
  save_model(dir / "fp.dfqm", d.fp);
  std::ostringstream a, b;
  write_model(a, d.fp);
  write_model(b, load_model(dir / "fp.dfqm"));
  v.require(identical(load_model(dir / "fp.dfqm"), d.fp) && a.str() == b.str(), "model round-trip bit-exact");

  save_dataset(dir / "eval.dfqd", d.eval);
  const Dataset back = load_dataset(dir / "eval.dfqd");
  v.require(back.labels == d.eval.labels && (back.images == d.eval.images).all() && back.sample_shape == d.eval.sample_shape,
            "dataset round-trip bit-exact");

  PipelineConfig cfg = desk_config();
  cfg.seed = 7;
  const PipelineResult r1 = run_pipeline(d.fp, cfg, Evaluator(d.eval));
  const PipelineResult r2 = run_pipeline(d.fp, cfg, Evaluator(d.eval));
  save_quant_model(dir / "q.dfqm", r1.model);
  const QuantModel q = load_quant_model(dir / "q.dfqm");
  v.require(without_timing(to_json(r1.report, d.fp)) == without_timing(to_json(r2.report, d.fp)),
            "seed 7 run reports identical");
  v.require(identical(r1.model.base, r2.model.base) && identical(q.base, r1.model.base) &&
                Evaluator(d.eval).accuracy(q) == r1.report.final_accuracy(),
            "quantized model reproducible and round-trips");
  fs::remove_all(dir);
}

struct Criterion {
  int id;
  const char* name;
  double budget_seconds;
  std::function<void(Verdict&, Desk&)> run;
};

}  // namespace

int main() {
  set_verbosity(Verbosity::Quiet);
  std::cout.setf(std::ios::unitbuf);

  Desk desk;
  const auto t0 = Clock::now();
  const Dataset train = make_desk_dataset(10, 600, 1);
  desk.eval = make_desk_dataset(10, 100, 2);
  TrainConfig tc;
  const TrainResult trained = train_fp(make_zoo_model("tiny", 10, 3), train, nullptr, tc);
  desk.fp = trained.model;
  desk.fp_accuracy = evaluate_accuracy(desk.fp, desk.eval);
  std::cout << "desk model: " << tc.epochs << " epochs, eval accuracy " << fmt(desk.fp_accuracy) << "% ("
            << fmt(std::chrono::duration<double>(Clock::now() - t0).count(), 1) << " s)\n";

  const std::vector<Criterion> criteria{
      {1, "quantizer exactness", 5, quantizer_exactness},
      {2, "gradient oracle", 30, gradient_oracle},
      {3, "target-logit gradient identity", 1, target_logit_identity},
      {4, "identity-model toy experiment", 5, toy_experiment_check},
      {5, "synthesis loss selection", 600, loss_selection},
      {6, "ablation ordering", 1800, ablation_ordering},
      {7, "8-bit parity", 600, eight_bit_parity},
      {8, "clip sweep dominance", 1200, sweep_dominance},
      {9, "adaptive-BN control", 300, bn_control},
      {10, "timing instrumentation", 1800, timing},
      {11, "determinism and formats", 60, determinism},
  };

  int failed = 0;
  for (const Criterion& c : criteria) {
    Verdict v;
    const auto start = Clock::now();
    try {
      c.run(v, desk);
    } catch (const std::exception& e) {
      v.require(false, std::string("exception: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(Clock::now() - start).count();
    if (c.id != 10) v.require(secs < c.budget_seconds, "runtime " + fmt(secs, 1) + " s < " + fmt(c.budget_seconds, 0) + " s");
    if (!v.pass) ++failed;
    std::cout << (v.pass ? "PASS" : "FAIL") << " [" << c.id << "] " << c.name << ": " << v.detail.str() << "\n";
  }
  std::cout << (criteria.size() - static_cast<std::size_t>(failed)) << "/" << criteria.size() << " criteria passed\n";
  return failed;
}
