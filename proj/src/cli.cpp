#include <chrono>
#include <cstdio>
#include <fstream>
#include <set>

#include "mkd/config.hpp"
#include "mkd/errors.hpp"

namespace mkd {

namespace fs = std::filesystem;

namespace {

void write_text(const fs::path& file, const std::string& text) {
  std::ofstream os(file, std::ios::trunc);
  if (!os) throw InputError("cannot write " + file.string());
  os << text;
  if (!os) throw InputError("failed writing " + file.string());
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw UsageError("cannot create directory '" + dir + "'");
}

Dataset read_required(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw UsageError("dataset directory '" + dir.string() + "' does not exist");
  return read_dataset(dir);
}

TrainingConfig resolved_training(const RunConfig& cfg) {
  TrainingConfig t = cfg.training;
  if (t.checkpoint_dir.empty() && !cfg.output_dir.empty()) t.checkpoint_dir = (fs::path(cfg.output_dir) / "checkpoints").string();
  return t;
}

ExperimentData experiment_for(const RunConfig& cfg, std::uint64_t seed) {
  if (!cfg.data_root.empty()) {
    ExperimentData d;
    d.target_train = read_required(fs::path(cfg.data_root) / "target");
    d.assistant_train = read_required(fs::path(cfg.data_root) / "assistant");
    d.target_test = read_required(fs::path(cfg.data_root) / "test");
    d.id = fs::path(cfg.data_root).filename().string() + "-seed" + std::to_string(seed);
    return d;
  }
  ExperimentSpec e = cfg.experiment;
  e.seed = seed;
  return make_phantom_experiment(e);
}

void run_synth(const RunConfig& cfg, std::ostream& log) {
  ExperimentSpec e = cfg.experiment;
  e.seed = cfg.seeds.front();
  const ExperimentData d = make_phantom_experiment(e);
  const fs::path root(cfg.data_root);
  write_dataset(d.target_train, root / "target");
  write_dataset(d.assistant_train, root / "assistant");
  write_dataset(d.target_test, root / "test");
  log << "synth: wrote " << d.target_train.size() << " target, " << d.assistant_train.size() << " assistant, "
      << d.target_test.size() << " test phantoms to " << root.string() << "\n";
}

void run_train(const RunConfig& cfg, std::ostream& log) {
  const fs::path root(cfg.data_root);
  const fs::path out(cfg.output_dir);
  const Dataset target = read_required(root / "target");
  // Baseline training must not touch the assistant data at all.
  const Dataset assistant =
      cfg.training.mode == TrainingMode::baseline ? Dataset{{}, Modality::assistant, target.num_classes}
                                                  : read_required(root / "assistant");
  Dataset validation;
  if (cfg.training.early_stop_patience > 0) validation = read_required(root / "validation");

  const TrainingConfig tcfg = resolved_training(cfg);
  const bool resume = !cfg.checkpoint.empty();
  Trainer trainer = resume ? Trainer(target, assistant, tcfg, checkpoint_load(cfg.checkpoint))
                           : Trainer(target, assistant, tcfg);
  if (cfg.training.early_stop_patience > 0) {
    const TrainingMode mode = tcfg.mode;
    trainer.set_validation([&validation, mode](const TrainerState& s) {
      const ModelTag tag = single_segmentor_mode(mode) ? ModelTag::real : ModelTag::ensemble;
      return evaluate_model(predictor(s, tag), validation, tag).mean;
    });
  }
  std::ofstream metrics(out / "metrics.log", resume ? std::ios::app : std::ios::trunc);
  if (!metrics) throw InputError("cannot write " + (out / "metrics.log").string());
  trainer.set_metrics_sink([&metrics](const MetricsRecord& r) { metrics << format_metrics_line(r) << '\n'; });
  log << "train: mode=" << to_string(tcfg.mode) << " epochs=" << trainer.total_epochs()
      << " iterations/epoch=" << trainer.iterations_per_epoch() << (resume ? " (resumed)" : "") << "\n";
  int last_epoch = trainer.state().epoch;
  while (!trainer.finished()) {
    const auto rec = trainer.step();
    if (trainer.state().epoch != last_epoch) {
      last_epoch = trainer.state().epoch;
      log << "train: epoch " << last_epoch << " done, total=" << rec->report.total << "\n";
    }
  }
  metrics.flush();
  checkpoint_save(trainer.state(), out / "checkpoint.bin");
  log << "train: wrote " << (out / "checkpoint.bin").string() << (trainer.state().stopped_early ? " (early stop)" : "")
      << "\n";
}

void run_eval(const RunConfig& cfg, std::ostream& log) {
  if (!fs::is_regular_file(cfg.checkpoint)) throw UsageError("checkpoint '" + cfg.checkpoint + "' does not exist");
  const TrainerState state = checkpoint_load(cfg.checkpoint);
  const Dataset test = read_required(fs::path(cfg.data_root) / "test");
  const std::string id = fs::path(cfg.data_root).filename().string() + "/test";
  std::vector<DiceReport> reports;
  if (single_segmentor_mode(cfg.training.mode)) {
    reports = evaluate_state(state, cfg.training.mode, test, id, cfg.aggregation);
  } else {
    for (ModelTag tag : {ModelTag::syn, ModelTag::real, ModelTag::ensemble}) {
      reports.push_back(evaluate_model(predictor(state, tag), test, tag, id, cfg.aggregation));
    }
  }
  const fs::path out(cfg.output_dir);
  write_reports_csv(reports, out / "eval.csv");
  const std::string summary = summarize_reports(reports);
  write_text(out / "eval_summary.txt", summary);
  log << summary;
}

void run_ablate(const RunConfig& cfg, std::ostream& log) {
  std::vector<DiceReport> all;
  for (std::uint64_t seed : cfg.seeds) {
    const ExperimentData d = experiment_for(cfg, seed);
    TrainingConfig t = resolved_training(cfg);
    t.seed = seed;
    t.checkpoint_every = 0;
    for (VariantResult& v : run_ablation(cfg.suite, d, t)) {
      for (DiceReport& r : v.reports) {
        r.dataset_id = d.id + "/" + v.variant;
        all.push_back(r);
      }
      log << "ablate: seed " << seed << " " << v.variant << " done\n";
    }
  }
  write_reports_csv(all, fs::path(cfg.output_dir) / "ablation.csv");
  const std::string summary = summarize_reports(all);
  write_text(fs::path(cfg.output_dir) / "ablation_summary.txt", summary);
  log << summary;
}

void run_sweep(const RunConfig& cfg, std::ostream& log) {
  std::vector<DiceReport> all;
  for (std::uint64_t seed : cfg.seeds) {
    const ExperimentData d = experiment_for(cfg, seed);
    TrainingConfig t = resolved_training(cfg);
    t.seed = seed;
    t.checkpoint_every = 0;
    for (SweepRow& row : run_assistant_sweep(cfg.sweep_counts, d, t)) {
      all.push_back(row.ensemble);
      log << "sweep: seed " << seed << " assistant_count=" << row.assistant_count << " mean_dice=" << row.ensemble.mean
          << "\n";
    }
  }
  write_reports_csv(all, fs::path(cfg.output_dir) / "sweep.csv");
  const std::string summary = summarize_reports(all);
  write_text(fs::path(cfg.output_dir) / "sweep_summary.txt", summary);
  log << summary;
}

void run_report(const RunConfig& cfg, std::ostream& log) {
  const fs::path in(cfg.input_dir);
  const fs::path out(cfg.output_dir);
  if (!fs::is_directory(in)) throw UsageError("input_dir '" + cfg.input_dir + "' does not exist");
  std::string text;
  bool any = false;
  if (fs::is_regular_file(in / "metrics.log")) {
    std::ifstream is(in / "metrics.log");
    std::vector<MetricsRecord> metrics;
    std::string line;
    while (std::getline(is, line)) {
      if (!line.empty()) metrics.push_back(parse_metrics_line(line));
    }
    const int window = 20;
    write_text(out / "loss_generators.svg", loss_curve_svg(metrics, {"adv_t", "adv_a", "cyc", "d_t", "d_a"}, window));
    write_text(out / "loss_segmentors.svg",
               loss_curve_svg(metrics, {"sup_syn", "sup_real", "kd_s2r", "kd_r2s"}, window));
    text += "iterations=" + std::to_string(metrics.size()) + "\n";
    if (!metrics.empty()) text += "final " + format_metrics_line(metrics.back()) + "\n";
    any = true;
  }
  std::set<fs::path> csvs;
  for (const auto& entry : fs::directory_iterator(in)) {
    if (entry.path().extension() == ".csv") csvs.insert(entry.path());
  }
  std::vector<DiceReport> reports;
  for (const fs::path& p : csvs) {
    const std::vector<DiceReport> r = read_reports_csv(p);
    text += "[" + p.filename().string() + "]\n" + summarize_reports(r);
    reports.insert(reports.end(), r.begin(), r.end());
    any = true;
  }
  if (!reports.empty()) write_text(out / "dice_bars.svg", dice_bar_svg(reports));
  if (!any) throw UsageError("input_dir '" + cfg.input_dir + "' holds no metrics.log or CSV reports");
  write_text(out / "report.txt", text);
  log << text;
}

std::string manifest_text(const RunConfig& cfg, double wall_seconds) {
  char wall[40];
  std::snprintf(wall, sizeof wall, "%.3f", wall_seconds);
  return "# command=" + to_string(cfg.command) + "\n# version=" + version_string() +
         "\n# seed=" + std::to_string(cfg.seeds.front()) + "\n# wall_time_s=" + wall + "\n" + echo_config(cfg);
}

}  // namespace

int dispatch(const RunConfig& cfg, std::ostream& log) {
  cfg.validate();
  const auto start = std::chrono::steady_clock::now();
  const std::string manifest_dir = cfg.output_dir.empty() ? cfg.data_root : cfg.output_dir;
  ensure_dir(manifest_dir);
  switch (cfg.command) {
    case Command::synth: run_synth(cfg, log); break;
    case Command::train: run_train(cfg, log); break;
    case Command::eval: run_eval(cfg, log); break;
    case Command::ablate: run_ablate(cfg, log); break;
    case Command::sweep: run_sweep(cfg, log); break;
    case Command::report: run_report(cfg, log); break;
  }
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  write_text(fs::path(manifest_dir) / ("manifest_" + to_string(cfg.command) + ".txt"), manifest_text(cfg, wall));
  return 0;
}

}  // namespace mkd
