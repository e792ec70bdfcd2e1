// effecg: command-line entry point.
#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "effecg/data.hpp"
#include "effecg/errors.hpp"
#include "effecg/gradcheck_suite.hpp"
#include "effecg/metrics.hpp"
#include "effecg/model.hpp"
#include "effecg/run_config.hpp"
#include "effecg/train.hpp"

namespace fs = std::filesystem;
using namespace effecg;
using nlohmann::json;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kDivergence = 3, kGradcheck = 4 };

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void log(const std::string& msg) { std::cerr << msg << '\n'; }

void warn_all(const std::vector<std::string>& warnings) {
  for (const auto& w : warnings) log("warning: " + w);
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
  if (!out) throw DataError("write failed: " + path.string());
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw UsageError(path.string() + ": " + e.what());
  }
}

void make_outdir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw DataError("cannot create output directory " + dir.string());
}

std::vector<double> parse_thresholds(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(cell, &used));
      if (used != cell.size()) throw std::invalid_argument(cell);
    } catch (const std::exception&) {
      throw UsageError("bad threshold '" + cell + "'");
    }
  }
  return out;
}

std::vector<std::size_t> parse_indices(const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    if (cell.empty()) continue;
    try {
      out.push_back(std::stoul(cell));
    } catch (const std::exception&) {
      throw UsageError("bad class index '" + cell + "'");
    }
  }
  return out;
}

Dataset load_for_run(const fs::path& path, const RunConfig& rc) {
  Dataset ds = load_dataset(path, rc.data.beat_sample_rate, rc.data.class_count);
  warn_all(ds.warnings);
  ds.warnings.clear();
  if (rc.data.drop_abnormal && drop_abnormal(ds) > 0) warn_all(ds.warnings);
  if (ds.empty()) throw DataError(path.string() + ": no usable records");
  return ds;
}

// ---- synth ----

struct SynthArgs {
  SyntheticSetConfig cfg;
  fs::path out;
};

int run_synth(const SynthArgs& a) {
  make_outdir(a.out);
  const auto set = synthetic_dataset(a.cfg);
  for (std::size_t i = 0; i < set.dataset.size(); ++i) {
    char stem[32];
    std::snprintf(stem, sizeof stem, "rec_%04zu", i);
    write_multilead(set.dataset.records[i], a.out / (std::string(stem) + ".ecg"));
    std::string fid = "kind,index\n";
    for (auto r : set.truth[i].r_peaks) fid += "r," + std::to_string(r) + "\n";
    for (auto p : set.truth[i].p_waves) fid += "p," + std::to_string(p) + "\n";
    write_file(a.out / (std::string(stem) + ".fid.csv"), fid);
  }
  log("wrote " + std::to_string(set.dataset.size()) + " records to " + a.out.string());
  return kOk;
}

// ---- preprocess ----

struct PreprocessArgs {
  fs::path data, out, config;
};

int run_preprocess(const PreprocessArgs& a) {
  RunConfig rc;
  if (!a.config.empty()) rc = run_config_from_json(read_json(a.config));
  const Dataset ds = load_for_run(a.data, rc);
  make_outdir(a.out);
  const auto prepared = prepare(ds, rc.preprocess);
  warn_all(prepared.warnings);
  for (std::size_t i = 0; i < prepared.size(); ++i) {
    const auto& p = prepared.records[i];
    EcgRecord r = ds.records[i];
    r.samples = p.samples;
    char stem[32];
    std::snprintf(stem, sizeof stem, "rec_%04zu", i);
    write_multilead(r, a.out / (std::string(stem) + ".ecg"));
    std::string fid = "kind,index\n";
    for (auto v : p.fiducials.r_peaks) fid += "r," + std::to_string(v) + "\n";
    for (auto v : p.fiducials.p_waves) fid += "p," + std::to_string(v) + "\n";
    write_file(a.out / (std::string(stem) + ".fid.csv"), fid);
  }
  log("preprocessed " + std::to_string(prepared.size()) + " records into " + a.out.string());
  return kOk;
}

// ---- train ----

struct TrainArgs {
  fs::path config, data, outdir;
  std::optional<std::uint64_t> seed;
};

void write_report(const EvalReport& report, const fs::path& json_path) {
  write_file(json_path, to_json(report).dump(2) + "\n");
  const fs::path dir = json_path.parent_path();
  const std::string stem = json_path.stem().string();
  write_file(dir / (stem + "_roc.csv"), roc_csv(report));
  write_file(dir / (stem + "_roc.svg"), roc_svg(report));
  if (report.confusion) write_file(dir / (stem + "_confusion.svg"), confusion_svg(*report.confusion));
}

int run_train(const TrainArgs& a) {
  RunConfig rc;
  if (!a.config.empty()) rc = run_config_from_json(read_json(a.config));
  if (a.seed) rc.seed = a.seed;
  rc.apply_seed();

  Dataset ds = load_for_run(a.data, rc);
  if (rc.model.input_length == 0) rc.model.input_length = ds.length();
  rc.model.leads = ds.leads();
  rc.model.class_count = ds.class_count;
  if (ds.label_mode == LabelMode::multi) {
    rc.model.head = Head::sigmoid;
    rc.train.loss.kind = LossKind::bce;
  }
  rc.model.validate();
  rc.train.validate();

  auto idx = split_indices(ds, rc.split);
  warn_all(idx.warnings);
  if (rc.data.balanced_test_per_class > 0) {
    const Dataset test = ds.subset(idx.test);
    std::vector<std::size_t> picked;
    for (auto i : balanced_subset(test, rc.data.balanced_test_per_class, rc.split.seed)) picked.push_back(idx.test[i]);
    idx.test = picked;
  }

  make_outdir(a.outdir);
  write_file(a.outdir / "config.resolved.json", to_json(rc).dump(2) + "\n");
  write_file(a.outdir / "split.json",
             json{{"data", fs::absolute(a.data).string()}, {"train", idx.train}, {"val", idx.val}, {"test", idx.test}}
                     .dump() +
                 "\n");

  const auto train_data = prepare(ds.subset(idx.train), rc.preprocess);
  const auto val_data = prepare(ds.subset(idx.val), rc.preprocess);
  warn_all(train_data.warnings);

  Model model(rc.model);
  log("model: " + std::to_string(model.parameter_count()) + " parameters; " + std::to_string(train_data.size()) +
      " train / " + std::to_string(val_data.size()) + " val / " + std::to_string(idx.test.size()) + " test records");
  const auto result = train(model, train_data, val_data.size() ? &val_data : nullptr, rc.train, [](const HistoryRow& r) {
    char line[160];
    std::snprintf(line, sizeof line, "epoch %3zu  step %6zu  lr %.3e  train %.5f  val %.5f  f1 %.4f", r.epoch, r.step,
                  r.lrate, r.train_loss, r.val_loss, r.val_micro_f1);
    log(line);
  });

  save_checkpoint(model, a.outdir / "model.ckpt");
  write_file(a.outdir / "history.csv", history_csv(result.history));
  std::vector<double> epochs, train_loss, val_loss, f1;
  for (const auto& r : result.history) {
    epochs.push_back(static_cast<double>(r.epoch));
    train_loss.push_back(r.train_loss);
    val_loss.push_back(r.val_loss);
    f1.push_back(r.val_micro_f1);
  }
  write_file(a.outdir / "loss.svg", line_chart_svg("loss", epochs, {{"train", train_loss}, {"val", val_loss}}));
  write_file(a.outdir / "f1.svg", line_chart_svg("validation micro-F1", epochs, {{"val", f1}}));

  const auto& best = result.history[result.best_epoch];
  json summary = {{"best_epoch", best.epoch},
                  {"val_loss", best.val_loss},
                  {"val_micro_f1", best.val_micro_f1},
                  {"stopped_early", result.stopped_early},
                  {"thresholds", result.thresholds},
                  {"parameter_count", model.parameter_count()}};
  if (!idx.test.empty()) {
    const auto test_data = prepare(ds.subset(idx.test), rc.preprocess);
    const auto report = evaluate(model, test_data, rc.train.loss, result.thresholds, rc.train.eval_batch_size);
    write_report(report, a.outdir / "test_report.json");
    summary["test_micro_f1"] = report.f1.micro_f1;
  }
  write_file(a.outdir / "summary.json", summary.dump(2) + "\n");
  log("best epoch " + std::to_string(best.epoch) + "; artifacts in " + a.outdir.string());
  return kOk;
}

// ---- eval / infer ----

struct EvalArgs {
  fs::path checkpoint, data, report, config, split_file;
  std::string split = "all";
  std::string thresholds;
  std::string cinc_classes;
};

struct Loaded {
  Model model;
  RunConfig rc;
  PreparedDataset data;
};

Loaded load_model_and_data(const fs::path& checkpoint, const fs::path& data_path, const fs::path& config,
                           const fs::path& split_file, const std::string& split) {
  Model model = load_checkpoint(checkpoint);
  RunConfig rc;
  if (!config.empty()) rc = run_config_from_json(read_json(config));
  rc.model = model.config();
  if (model.config().head == Head::sigmoid) rc.train.loss.kind = LossKind::bce;
  Dataset ds = load_for_run(data_path, rc);
  if (ds.leads() != model.config().leads || ds.length() != model.config().input_length) {
    throw DataError("checkpoint expects " + std::to_string(model.config().leads) + " leads x " +
                    std::to_string(model.config().input_length) + " samples, data has " + std::to_string(ds.leads()) +
                    " leads x " + std::to_string(ds.length()) + " samples");
  }
  if (split != "all") {
    if (split_file.empty()) throw UsageError("--split needs --split-file");
    const json j = read_json(split_file);
    if (!j.contains(split)) throw UsageError("unknown split '" + split + "'");
    ds = ds.subset(j.at(split).get<std::vector<std::size_t>>());
  }
  auto prepared = prepare(ds, rc.preprocess);
  warn_all(prepared.warnings);
  return {std::move(model), rc, std::move(prepared)};
}

int run_eval(const EvalArgs& a) {
  auto [model, rc, data] = load_model_and_data(a.checkpoint, a.data, a.config, a.split_file, a.split);
  const auto thresholds = parse_thresholds(a.thresholds);
  const auto cinc = parse_indices(a.cinc_classes);
  const auto report = evaluate(model, data, rc.train.loss, thresholds, rc.train.eval_batch_size, cinc);
  if (!a.report.parent_path().empty()) make_outdir(a.report.parent_path());
  write_report(report, a.report);
  char line[200];
  std::snprintf(line, sizeof line, "%zu records  loss %.6f  micro-F1 %.6f  macro-F1 %.6f  CinC %.6f", report.samples,
                report.loss, report.f1.micro_f1, report.f1.macro_f1, report.cinc);
  std::cout << line << '\n';
  return kOk;
}

struct InferArgs {
  fs::path checkpoint, data, out, config;
  std::string thresholds;
};

int run_infer(const InferArgs& a) {
  auto [model, rc, data] = load_model_and_data(a.checkpoint, a.data, a.config, {}, "all");
  const auto p = predict_dataset(model, data, rc.train.loss, rc.train.eval_batch_size);
  const std::size_t k = model.config().class_count;
  auto thresholds = parse_thresholds(a.thresholds);
  if (thresholds.size() == 1) thresholds.assign(k, thresholds[0]);
  if (thresholds.empty()) thresholds.assign(k, 0.5);
  std::string csv = "record";
  for (std::size_t c = 0; c < k; ++c) csv += ",score_" + std::to_string(c);
  csv += ",predicted\n";
  char buf[40];
  for (std::size_t i = 0; i < data.size(); ++i) {
    const std::span<const double> row(p.scores.data() + i * k, k);
    csv += std::to_string(i);
    for (double s : row) {
      std::snprintf(buf, sizeof buf, ",%.17g", s);
      csv += buf;
    }
    const auto pred = predict(row, model.config().head, thresholds);
    csv += ",";
    for (std::size_t j = 0; j < pred.size(); ++j) csv += (j ? ";" : "") + std::to_string(pred[j]);
    csv += "\n";
  }
  if (a.out.empty()) {
    std::cout << csv;
  } else {
    write_file(a.out, csv);
  }
  return kOk;
}

// ---- gradcheck / analyze ----

struct GradcheckArgs {
  std::uint64_t seed = 1;
  std::size_t trials = 6;
  bool inject = false;
};

int run_gradcheck(const GradcheckArgs& a) {
  auto cases = gradcheck_cases();
  if (a.inject) cases.push_back(broken_adjoint_case());
  const auto report = run_gradcheck_suite(cases, a.seed, a.trials);
  std::cout << format_gradcheck_report(report);
  std::cout << report.trials() << " trials: " << (report.pass() ? "all passed" : "FAILED") << '\n';
  return report.pass() ? kOk : kGradcheck;
}

struct AnalyzeArgs {
  fs::path data, out;
  std::string labels;
  std::size_t age_bins = 10;
};

int run_analyze(const AnalyzeArgs& a) {
  const Dataset ds = load_multilead(a.data);
  warn_all(ds.warnings);
  const auto table = analyze_distribution(ds, parse_indices(a.labels), a.age_bins);
  if (a.out.empty()) {
    std::cout << table.to_csv();
  } else {
    write_file(a.out, table.to_csv());
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ECG arrhythmia classifier: synthesis, preprocessing, training and evaluation"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Write synthetic records with ground-truth fiducials");
  s->add_option("--count", synth.cfg.count, "Number of records")->check(CLI::PositiveNumber);
  s->add_option("--beats", synth.cfg.beats, "Beats per record")->check(CLI::PositiveNumber);
  s->add_option("--bpm", synth.cfg.bpm, "Heart rate")->check(CLI::Range(30.0, 220.0));
  s->add_option("--bpm-jitter", synth.cfg.bpm_jitter, "Per-record rate spread")->check(CLI::NonNegativeNumber);
  s->add_option("--fs", synth.cfg.sample_rate, "Sample rate in Hz")->check(CLI::Range(50.0, 10000.0));
  s->add_option("--noise", synth.cfg.noise_std, "White noise sigma")->check(CLI::NonNegativeNumber);
  s->add_option("--leads", synth.cfg.leads, "Lead count")->check(CLI::Range(1, 12));
  s->add_flag("--demographics", synth.cfg.demographics, "Label-correlated age and gender");
  s->add_flag("--multi-label", synth.cfg.multi_label, "Add a demographic-only third label");
  s->add_option("--seed", synth.cfg.seed, "Seed");
  s->add_option("--out", synth.out, "Output directory")->required();

  PreprocessArgs pre;
  auto* p = app.add_subcommand("preprocess", "Bandpass, standardize and detect fiducials");
  p->add_option("--data", pre.data, "Record file, record directory or beat CSV")->required();
  p->add_option("--out", pre.out, "Output directory")->required();
  p->add_option("--config", pre.config, "Run config JSON (preprocess section)");

  TrainArgs tr;
  std::uint64_t train_seed = 0;
  auto* t = app.add_subcommand("train", "Train with an 8:1:1 split and early stopping");
  t->add_option("--config", tr.config, "Run config JSON");
  t->add_option("--data", tr.data, "Record directory or beat CSV")->required();
  t->add_option("--outdir", tr.outdir, "Output directory")->required();
  auto* seed_opt = t->add_option("--seed", train_seed, "Overrides every seed in the config");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Score a checkpoint on labelled data");
  e->add_option("--checkpoint", ev.checkpoint, "Checkpoint file")->required();
  e->add_option("--data", ev.data, "Record directory or beat CSV")->required();
  e->add_option("--report", ev.report, "Report JSON path")->required();
  e->add_option("--thresholds", ev.thresholds, "One threshold or one per class, comma separated");
  e->add_option("--config", ev.config, "Run config JSON (preprocess and loss)");
  e->add_option("--split-file", ev.split_file, "split.json written by train");
  e->add_option("--split", ev.split, "all, train, val or test")->check(CLI::IsMember({"all", "train", "val", "test"}));
  e->add_option("--cinc-classes", ev.cinc_classes, "Classes averaged into the CinC score");

  InferArgs inf;
  auto* i = app.add_subcommand("infer", "Write per-record scores and predictions");
  i->add_option("--checkpoint", inf.checkpoint, "Checkpoint file")->required();
  i->add_option("--data", inf.data, "Record file, directory or beat CSV")->required();
  i->add_option("--out", inf.out, "CSV path (stdout when omitted)");
  i->add_option("--config", inf.config, "Run config JSON");
  i->add_option("--thresholds", inf.thresholds, "Sigmoid thresholds");

  GradcheckArgs gc;
  auto* g = app.add_subcommand("gradcheck", "Finite-difference check of every layer and loss");
  g->add_option("--seed", gc.seed, "Seed");
  g->add_option("--trials", gc.trials, "Trials per case")->check(CLI::PositiveNumber);
  g->add_flag("--inject-wrong-adjoint", gc.inject, "Append a case with a broken backward rule");

  AnalyzeArgs an;
  auto* z = app.add_subcommand("analyze", "Age/gender table for records carrying given labels");
  z->add_option("--data", an.data, "Record directory")->required();
  z->add_option("--labels", an.labels, "Comma-separated class indices");
  z->add_option("--age-bins", an.age_bins, "Decade bins")->check(CLI::PositiveNumber);
  z->add_option("--out", an.out, "CSV path (stdout when omitted)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::CallForAllHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::ParseError& ex) {
    app.exit(ex);
    return kUsage;
  }

  try {
    if (*s) return run_synth(synth);
    if (*p) return run_preprocess(pre);
    if (*t) {
      if (*seed_opt) tr.seed = train_seed;
      return run_train(tr);
    }
    if (*e) return run_eval(ev);
    if (*i) return run_infer(inf);
    if (*g) return run_gradcheck(gc);
    if (*z) return run_analyze(an);
  } catch (const DivergenceError& ex) {
    log(std::string("error: training diverged: ") + ex.what());
    return kDivergence;
  } catch (const DataError& ex) {
    log(std::string("error: ") + ex.what());
    return kData;
  } catch (const FormatError& ex) {
    log(std::string("error: ") + ex.what());
    return kData;
  } catch (const fs::filesystem_error& ex) {
    log(std::string("error: ") + ex.what());
    return kData;
  } catch (const UsageError& ex) {
    log(std::string("error: ") + ex.what());
    return kUsage;
  } catch (const std::invalid_argument& ex) {
    log(std::string("error: ") + ex.what());
    return kUsage;
  } catch (const std::exception& ex) {
    log(std::string("error: ") + ex.what());
    return kData;
  }
  return kUsage;
}
