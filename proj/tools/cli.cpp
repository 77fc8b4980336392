#include "cli.hpp"

#include <charconv>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "dfq/calibration.hpp"
#include "dfq/dataset.hpp"
#include "dfq/error.hpp"
#include "dfq/log.hpp"
#include "dfq/model_io.hpp"
#include "dfq/pipeline.hpp"
#include "dfq/quantizer.hpp"
#include "dfq/train.hpp"
#include "dfq/zoo.hpp"

namespace dfq::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || ptr != v.data() + v.size()) {
    throw ContractError("config key '" + key + "': cannot parse '" + v + "' as a number");
  }
  return out;
}

// Settings the library configs do not own.
struct Extras {
  TrainConfig train;
  ToyConfig toy;
  SweepConfig sweep;
};

bool apply_extra(Extras& x, const std::string& key, const std::string& v) {
  if (key == "train.epochs") x.train.epochs = parse_number<int>(key, v);
  else if (key == "train.lr") x.train.lr = parse_number<double>(key, v);
  else if (key == "train.batch_size") x.train.batch_size = parse_number<int>(key, v);
  else if (key == "train.momentum") x.train.momentum = parse_number<double>(key, v);
  else if (key == "train.weight_decay") x.train.weight_decay = parse_number<double>(key, v);
  else if (key == "train.bn_momentum") x.train.bn_momentum = parse_number<double>(key, v);
  else if (key == "train.seed") x.train.seed = parse_number<std::uint64_t>(key, v);
  else if (key == "toy.loss") x.toy.loss = parse_synth_loss(v);
  else if (key == "toy.n") x.toy.n = parse_number<int>(key, v);
  else if (key == "toy.target") x.toy.target = parse_number<int>(key, v);
  else if (key == "toy.iterations") x.toy.iterations = parse_number<int>(key, v);
  else if (key == "toy.lr") x.toy.lr = parse_number<double>(key, v);
  else if (key == "toy.seed") x.toy.seed = parse_number<std::uint64_t>(key, v);
  else if (key == "sweep.points") x.sweep.points = parse_number<int>(key, v);
  else if (key == "sweep.range_factor") x.sweep.range_factor = parse_number<double>(key, v);
  else return false;
  return true;
}

json extras_json(const Extras& x) {
  return {{"train.epochs", x.train.epochs},
          {"train.lr", x.train.lr},
          {"train.batch_size", x.train.batch_size},
          {"train.momentum", x.train.momentum},
          {"train.weight_decay", x.train.weight_decay},
          {"train.bn_momentum", x.train.bn_momentum},
          {"train.seed", x.train.seed},
          {"toy.loss", synth_loss_name(x.toy.loss)},
          {"toy.n", x.toy.n},
          {"toy.target", x.toy.target},
          {"toy.iterations", x.toy.iterations},
          {"toy.lr", x.toy.lr},
          {"toy.seed", x.toy.seed},
          {"sweep.points", x.sweep.points},
          {"sweep.range_factor", x.sweep.range_factor}};
}

struct Options {
  std::uint64_t seed = 0;
  std::string report_dir = "reports";
  std::string config_path;
  std::vector<std::string> sets;
  bool overwrite = false;
  bool verbose = false;
  bool quiet = false;

  std::string model, out, dataset, eval, val, arch = "tiny", steps;
  int classes = 10, per_class = 600, bits = 4, seeds = 5;
  std::optional<int> epochs, iterations, points;
  std::optional<double> lr;
  std::string loss;
};

void check_writable(const fs::path& path, bool overwrite) {
  if (fs::exists(path) && !overwrite) {
    throw ContractError("refusing to overwrite " + path.string() + " (pass --overwrite)");
  }
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw FormatError(FormatError::Kind::Io, "cannot write " + path.string());
  os << text;
  if (!os) throw FormatError(FormatError::Kind::Io, "write failed: " + path.string());
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

std::string read_text(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw FormatError(FormatError::Kind::Io, "cannot open config " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// Resolved configuration: defaults, then --seed for every seed key, then the
// config file, then --set, then dedicated flags.
struct Resolved {
  PipelineConfig pipeline;
  Extras extras;
};

Resolved resolve(const Options& o) {
  Resolved r;
  r.pipeline.seed = o.seed;
  r.extras.train.seed = o.seed;
  r.extras.toy.seed = o.seed;
  std::vector<std::pair<std::string, std::string>> kv;
  if (!o.config_path.empty()) {
    for (const auto& [k, v] : parse_config_text(read_text(o.config_path))) kv.emplace_back(k, v);
  }
  for (const std::string& s : o.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ContractError("--set expects key=value, got '" + s + "'");
    kv.emplace_back(trim(s.substr(0, eq)), trim(s.substr(eq + 1)));
  }
  for (const auto& [k, v] : kv) {
    if (!apply_extra(r.extras, k, v)) set_config_value(r.pipeline, k, v);
  }
  return r;
}

json resolved_json(const Resolved& r) {
  json j = to_json(r.pipeline);
  const json extras = extras_json(r.extras);
  for (const auto& [k, v] : extras.items()) j[k] = v;
  return j;
}

// A model file either ends after the model section or carries a quant table.
std::optional<QuantModel> load_any(const fs::path& path, ModelGraph& fp) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError(FormatError::Kind::Io, "cannot open " + path.string());
  fp = read_model(is);
  if (is.peek() == std::char_traits<char>::eof()) return std::nullopt;
  QuantModel qm = load_quant_model(path);
  fp = qm.base;
  return qm;
}

int cmd_make_dataset(const Options& o) {
  if (o.out.empty()) throw ContractError("make-dataset needs --out");
  check_writable(o.out, o.overwrite);
  const Dataset ds = make_desk_dataset(o.classes, o.per_class, o.seed);
  save_dataset(o.out, ds);
  write_json(fs::path(o.report_dir) / "dataset_report.json",
             {{"config", {{"classes", o.classes}, {"per_class", o.per_class}, {"seed", o.seed}}},
              {"path", o.out},
              {"samples", ds.size()}});
  std::cout << "wrote " << ds.size() << " samples (" << ds.class_count << " classes) to " << o.out << "\n";
  return kOk;
}

int cmd_train_fp(const Options& o, const Resolved& r) {
  if (o.dataset.empty() || o.out.empty()) throw ContractError("train-fp needs --dataset and --out");
  check_writable(o.out, o.overwrite);
  const Dataset train = load_dataset(o.dataset);
  std::optional<Dataset> val;
  if (!o.val.empty()) val = load_dataset(o.val);
  TrainConfig cfg = r.extras.train;
  if (o.epochs) cfg.epochs = *o.epochs;
  if (o.lr) cfg.lr = *o.lr;
  const ModelGraph init = make_zoo_model(o.arch, train.class_count, o.seed);
  const TrainResult res = train_fp(init, train, val ? &*val : nullptr, cfg);
  save_model(o.out, res.model);

  Extras x = r.extras;
  x.train = cfg;
  json cfg_json = resolved_json({r.pipeline, x});
  cfg_json["model.arch"] = o.arch;
  json report = {{"config", cfg_json},
                 {"parameters", res.model.parameter_count()},
                 {"epoch_loss", res.epoch_loss},
                 {"train_accuracy", res.train_accuracy}};
  if (val) report["val_accuracy"] = res.val_accuracy;
  write_json(fs::path(o.report_dir) / "train_report.json", report);
  std::cout << "trained " << o.arch << ": train " << res.train_accuracy << " %";
  if (val) std::cout << ", validation " << res.val_accuracy << " %";
  std::cout << "\n";
  return kOk;
}

int cmd_quantize(const Options& o, Resolved r) {
  if (o.model.empty() || o.eval.empty()) throw ContractError("quantize needs --model and --eval");
  const fs::path out = o.out.empty() ? fs::path(o.report_dir) / "quantized.dfqm" : fs::path(o.out);
  check_writable(out, o.overwrite);
  if (!o.steps.empty()) r.pipeline.set_steps(o.steps);
  r.pipeline.bits = o.bits;
  const ModelGraph fp = load_model(o.model);
  const Dataset eval_data = load_dataset(o.eval);
  const PipelineResult res = run_pipeline(fp, r.pipeline, Evaluator(eval_data));
  save_quant_model(out, res.model);

  json report = to_json(res.report, fp);
  report["config"] = resolved_json(r);
  write_json(fs::path(o.report_dir) / "run_report.json", report);
  write_json(fs::path(o.report_dir) / "calibration.json", calibration_report(res.model, res.report.bn_shifts));
  std::cout << summary(res.report);
  return kOk;
}

int cmd_evaluate(const Options& o) {
  if (o.model.empty() || o.dataset.empty()) throw ContractError("evaluate needs --model and --dataset");
  ModelGraph fp;
  const std::optional<QuantModel> qm = load_any(o.model, fp);
  const Dataset data = load_dataset(o.dataset);
  const double acc = qm ? evaluate_accuracy(*qm, data) : evaluate_accuracy(fp, data);
  json report = {{"model", o.model},
                 {"dataset", o.dataset},
                 {"quantized", qm.has_value()},
                 {"samples", data.size()},
                 {"accuracy", acc}};
  if (qm) report["bits"] = qm->bits;
  write_json(fs::path(o.report_dir) / "evaluate.json", report);
  std::cout << "accuracy " << acc << " % on " << data.size() << " samples\n";
  return kOk;
}

std::vector<std::uint64_t> seed_list(const Options& o) {
  if (o.seeds < 1) throw ContractError("--seeds must be positive");
  std::vector<std::uint64_t> seeds;
  for (int i = 0; i < o.seeds; ++i) seeds.push_back(o.seed + static_cast<std::uint64_t>(i));
  return seeds;
}

int cmd_ablation(const Options& o, const Resolved& r) {
  if (o.model.empty() || o.eval.empty()) throw ContractError("ablation needs --model and --eval");
  const ModelGraph fp = load_model(o.model);
  const Dataset eval_data = load_dataset(o.eval);
  const AblationTable t = ablation_run(fp, Evaluator(eval_data), o.bits, seed_list(o), r.pipeline);
  json report = to_json(t);
  report["config"] = resolved_json(r);
  json runs = json::array();
  for (const RunReport& run : t.runs) runs.push_back(to_json(run, fp));
  report["runs"] = runs;
  write_json(fs::path(o.report_dir) / "ablation.json", report);
  std::cout << summary(t);
  return kOk;
}

int cmd_loss_study(const Options& o, const Resolved& r) {
  if (o.model.empty() || o.eval.empty()) throw ContractError("loss-study needs --model and --eval");
  const ModelGraph fp = load_model(o.model);
  const Dataset eval_data = load_dataset(o.eval);
  PipelineConfig base = r.pipeline;
  if (o.iterations) base.aac.iterations = *o.iterations;
  const LossStudyTable t = loss_study_run(fp, Evaluator(eval_data), o.bits, seed_list(o), base);
  json report = to_json(t);
  report["config"] = resolved_json({base, r.extras});
  write_json(fs::path(o.report_dir) / "loss_study.json", report);
  std::cout << summary(t);
  return kOk;
}

int cmd_toy(const Options& o, const Resolved& r) {
  ToyConfig cfg = r.extras.toy;
  if (!o.loss.empty()) cfg.loss = parse_synth_loss(o.loss);
  if (o.iterations) cfg.iterations = *o.iterations;
  if (o.lr) cfg.lr = *o.lr;
  const std::vector<ToyRow> rows = toy_experiment(cfg);
  const fs::path traj = fs::path(o.report_dir) / (std::string("toy_") + synth_loss_name(cfg.loss) + ".txt");
  std::ostringstream os;
  os.precision(17);
  for (const ToyRow& row : rows) os << row.iteration << ' ' << row.p_target << ' ' << row.loss << '\n';
  write_text(traj, os.str());
  Extras x = r.extras;
  x.toy = cfg;
  write_json(fs::path(o.report_dir) / "toy_report.json",
             {{"config", resolved_json({r.pipeline, x})},
              {"trajectory", traj.filename().string()},
              {"rows", rows.size()},
              {"final_p_target", rows.back().p_target}});
  std::cout << "final p_target " << rows.back().p_target << " after " << cfg.iterations << " iterations ("
            << traj.string() << ")\n";
  return kOk;
}

int cmd_sweep(const Options& o, const Resolved& r) {
  if (o.model.empty() || o.dataset.empty()) throw ContractError("sweep needs --model (calibrated) and --dataset");
  ModelGraph fp;
  const std::optional<QuantModel> qm = load_any(o.model, fp);
  if (!qm) throw ContractError("sweep needs a quantized model file; run quantize first");
  SweepConfig cfg = r.extras.sweep;
  if (o.points) cfg.points = *o.points;
  const Dataset data = load_dataset(o.dataset);
  const SweepResult res = best_clip_sweep(*qm, data, cfg);
  Extras x = r.extras;
  x.sweep = cfg;
  json report = to_json(res, fp);
  report["config"] = resolved_json({r.pipeline, x});
  write_json(fs::path(o.report_dir) / "sweep.json", report);
  std::cout << "calibrated " << res.aac_accuracy << " %, sweep optimum " << res.final_accuracy << " %, "
            << 100.0 * res.within_one_step_rate() << " % of sites within one grid step\n";
  return kOk;
}

}  // namespace

std::map<std::string, std::string> parse_config_text(const std::string& text) {
  std::map<std::string, std::string> out;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ContractError("config line " + std::to_string(lineno) + ": expected key = value");
    }
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw ContractError("config line " + std::to_string(lineno) + ": empty key");
    out[key] = trim(line.substr(eq + 1));
  }
  return out;
}

int run(const std::vector<std::string>& args) {
  Options o;
  CLI::App app{"Data-free post-training quantization toolkit", "dfq"};
  app.require_subcommand(1);
  app.fallthrough();
  app.add_option("--seed", o.seed, "Base seed");
  app.add_option("--report-dir", o.report_dir, "Directory for reports")->capture_default_str();
  app.add_option("--config", o.config_path, "Config file of dotted key = value lines");
  app.add_option("--set", o.sets, "Override one config key (key=value); repeatable");
  app.add_flag("--overwrite", o.overwrite, "Allow replacing existing model and dataset files");
  app.add_flag("-v,--verbose", o.verbose, "Print progress");
  app.add_flag("-q,--quiet", o.quiet, "Suppress warnings");

  auto* make = app.add_subcommand("make-dataset", "Write the procedural desk dataset");
  make->add_option("--out", o.out, "Output dataset file")->required();
  make->add_option("--classes", o.classes)->capture_default_str();
  make->add_option("--per-class", o.per_class)->capture_default_str();

  auto* train = app.add_subcommand("train-fp", "Train a full-precision zoo model");
  train->add_option("--dataset", o.dataset, "Training dataset")->required();
  train->add_option("--val", o.val, "Validation dataset");
  train->add_option("--arch", o.arch, "tiny or resnet")->capture_default_str();
  train->add_option("--out", o.out, "Output model file")->required();
  train->add_option("--epochs", o.epochs);
  train->add_option("--lr", o.lr);

  auto* quant = app.add_subcommand("quantize", "Run the calibration pipeline");
  quant->add_option("--model", o.model, "Full-precision model")->required();
  quant->add_option("--eval", o.eval, "Labeled dataset used only for reporting accuracy")->required();
  quant->add_option("--bits", o.bits)->capture_default_str();
  quant->add_option("--steps", o.steps, "Comma list of clip, bn-adapt, fine-tune");
  quant->add_option("--out", o.out, "Output quantized model (default <report-dir>/quantized.dfqm)");

  auto* evaluate = app.add_subcommand("evaluate", "Top-1 accuracy of a model file");
  evaluate->add_option("--model", o.model)->required();
  evaluate->add_option("--dataset", o.dataset)->required();

  auto* ablation = app.add_subcommand("ablation", "none / clip / clip+bn / clip+bn+ft over seeds");
  ablation->add_option("--model", o.model)->required();
  ablation->add_option("--eval", o.eval)->required();
  ablation->add_option("--bits", o.bits)->capture_default_str();
  ablation->add_option("--seeds", o.seeds, "Number of seeds starting at --seed")->capture_default_str();

  auto* study = app.add_subcommand("loss-study", "Compare synthesis losses for clipping");
  study->add_option("--model", o.model)->required();
  study->add_option("--eval", o.eval)->required();
  study->add_option("--bits", o.bits)->capture_default_str();
  study->add_option("--seeds", o.seeds)->capture_default_str();
  study->add_option("--iters", o.iterations, "Synthesis iterations");

  auto* toy = app.add_subcommand("toy", "Identity-model loss experiment");
  toy->add_option("--loss", o.loss, "abs, ce, mae or mse");
  toy->add_option("--iters", o.iterations);
  toy->add_option("--lr", o.lr);

  auto* sweep = app.add_subcommand("sweep", "Per-site clipping sweep against labeled data");
  sweep->add_option("--model", o.model, "Calibrated quantized model")->required();
  sweep->add_option("--dataset", o.dataset)->required();
  sweep->add_option("--points", o.points);

  std::vector<std::string> argv(args.rbegin(), args.rend());
  try {
    app.parse(argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  set_verbosity(o.quiet ? Verbosity::Quiet : o.verbose ? Verbosity::Verbose : Verbosity::Normal);
  try {
    if (make->parsed()) return cmd_make_dataset(o);
    const Resolved r = resolve(o);
    if (train->parsed()) return cmd_train_fp(o, r);
    if (quant->parsed()) return cmd_quantize(o, r);
    if (evaluate->parsed()) return cmd_evaluate(o);
    if (ablation->parsed()) return cmd_ablation(o, r);
    if (study->parsed()) return cmd_loss_study(o, r);
    if (toy->parsed()) return cmd_toy(o, r);
    if (sweep->parsed()) return cmd_sweep(o, r);
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFormat;
  } catch (const NumericalError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kNumerical;
  } catch (const ShapeError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kContract;
  } catch (const ContractError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kContract;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFormat;
  }
  return kUsage;
}

}  // namespace dfq::cli
