// Command-line front end: dataset generation, staged training runs,
// strategy comparison, ablation grid and checkpoint analysis.

#include "csil/checkpoint.hpp"
#include "csil/doc_metric.hpp"
#include "csil/harness.hpp"
#include "csil/signal_sim.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

namespace {

using namespace csil;

struct RunOptions {
  ExperimentConfig cfg;
  std::string extractor = "cnn";
  std::vector<std::string> strategies;
  std::vector<std::string> formats{"csv", "json"};
  std::string out = "results";
  std::string dataset;
  bool strict = false;
};

void add_experiment_options(CLI::App* app, RunOptions& o) {
  app->set_config("--config", "", "key=value file overriding defaults");
  ExperimentConfig& c = o.cfg;
  app->add_option("--devices", c.devices, "total device count")->capture_default_str();
  app->add_option("--initial", c.initial_devices, "devices learned at stage 0")->capture_default_str();
  app->add_option("--increment", c.increment, "devices added per incremental stage")->capture_default_str();
  app->add_option("--samples", c.samples_per_device, "samples per device")->capture_default_str();
  app->add_option("--snr", c.snr_db, "signal-to-noise ratio in dB")->capture_default_str();
  app->add_option("--stage0-epochs", c.stage0_epochs)->capture_default_str();
  app->add_option("--epochs", c.epochs, "epochs per incremental stage")->capture_default_str();
  app->add_option("--batch", c.batch_size)->capture_default_str();
  app->add_option("--lr", c.sgd.learning_rate)->capture_default_str();
  app->add_option("--momentum", c.sgd.momentum)->capture_default_str();
  app->add_option("--l2", c.sgd.l2_factor)->capture_default_str();
  app->add_option("--temperature", c.temperature)->capture_default_str();
  app->add_option("--extractor", o.extractor)->check(CLI::IsMember({"mlp", "cnn"}))->capture_default_str();
  app->add_option("--weight-ce", c.weights.ce)->capture_default_str();
  app->add_option("--weight-kd", c.weights.kd)->capture_default_str();
  app->add_option("--weight-ewc", c.weights.ewc)->capture_default_str();
  app->add_option("--seed", c.seed)->capture_default_str();
  app->add_option("--dataset", o.dataset, "load a CSIL dataset instead of synthesizing one");
  app->add_option("--out", o.out, "output directory")->capture_default_str();
  app->add_option("--format", o.formats, "report formats")
      ->check(CLI::IsMember({"csv", "json"}))
      ->delimiter(',')
      ->capture_default_str();
  app->add_flag("--checkpoints", c.checkpoints, "write a checkpoint after every stage");
  app->add_flag("--resume", c.resume, "continue from checkpoints in the output directory");
  app->add_option("--jobs", c.jobs, "strategies trained concurrently")->capture_default_str();
  app->add_flag("--strict", o.strict, "exit nonzero when an invariant check fails");
}

void add_switches(CLI::App* app, RunOptions& o) {
  app->add_flag("--cs,!--no-cs", o.cfg.channel_separation, "channel separation for csil")->capture_default_str();
  app->add_flag("--ewc,!--no-ewc", o.cfg.use_ewc, "EWC term for csil")->capture_default_str();
  app->add_flag("--kd,!--no-kd", o.cfg.use_kd, "KD term for csil")->capture_default_str();
}

ExperimentConfig finish(RunOptions& o) {
  o.cfg.extractor = parse_extractor(o.extractor);
  o.cfg.output_dir = o.out;
  o.cfg.dataset_path = o.dataset;
  if (!o.strategies.empty()) {
    o.cfg.strategies.clear();
    for (const std::string& s : o.strategies) o.cfg.strategies.push_back(parse_strategy(s));
  }
  return o.cfg;
}

std::string fmt(const std::optional<double>& v, const char* spec = "%8.2f") {
  if (!v) return "       -";
  char buf[32];
  std::snprintf(buf, sizeof buf, spec, *v);
  return buf;
}

void print_summary(const ExperimentReport& report) {
  std::printf("%-14s %5s %8s %8s %8s %8s %8s %8s\n", "run", "stage", "acc_new", "acc_old", "acc_avg", "doc_all",
              "doc_new", "forget");
  for (const StrategyRun& r : report.runs) {
    for (const StageMetrics& s : r.stages)
      std::printf("%-14s %5ld %s %s %s %s %s %s\n", r.name.c_str(), static_cast<long>(s.stage), fmt(s.acc_new).c_str(),
                  fmt(s.acc_old).c_str(), fmt(s.acc_avg).c_str(), fmt(s.doc_all).c_str(), fmt(s.doc_new).c_str(),
                  fmt(s.forget).c_str());
    std::printf("%-14s forget/stage %s\n", r.name.c_str(), fmt(r.forget_per_stage).c_str());
  }
  for (const std::string& f : report.invariant_failures) std::printf("invariant failed: %s\n", f.c_str());
}

int finish_report(const ExperimentReport& report, const RunOptions& o) {
  std::vector<ReportFormat> formats;
  for (const std::string& f : o.formats) formats.push_back(f == "csv" ? ReportFormat::Csv : ReportFormat::Json);
  const auto written = emit_report(report, o.out, formats);
  print_summary(report);
  std::printf("wrote %zu files under %s\n", written.size(), o.out.c_str());
  if (o.strict && !report.invariant_failures.empty()) return 3;
  return 0;
}

int run_doc(const std::string& path, const std::string& csv) {
  const Checkpoint ckpt = load_checkpoint(path);
  const Matrix& w1 = ckpt.model.param(kFingerprints);
  const Index c = w1.rows();
  std::printf("classes       %ld\nembedding     %ld\n", static_cast<long>(c), static_cast<long>(w1.cols()));
  if (c < 2) {
    std::printf("DoC undefined for fewer than 2 fingerprints\n");
    return 0;
  }
  std::printf("DoC           %.6f\noptimum       %.6f\n", degree_of_conflict(w1), optimal_doc(c));
  std::printf("mean pair     %.6f (optimum %.6f)\n", mean_similarity(w1), mean_pairwise_similarity(c));
  const Matrix sim = similarity_matrix(w1);
  if (ckpt.context) {
    for (const ChannelBlock& b : ckpt.context->channel_map) {
      std::printf("stage %ld: classes [%ld, %ld) channels [%ld, %ld)", static_cast<long>(b.stage),
                  static_cast<long>(b.class_begin), static_cast<long>(b.class_begin + b.class_count),
                  static_cast<long>(b.channel_begin), static_cast<long>(b.channel_begin + b.channel_count));
      if (b.class_count >= 2) std::printf(" DoC %.6f", degree_of_conflict(w1.middleRows(b.class_begin, b.class_count)));
      std::printf("\n");
    }
    std::printf("cross-stage max |similarity| %.17g\n", cross_stage_max(sim, ckpt.context->channel_map));
  }
  if (!csv.empty()) {
    FILE* f = std::fopen(csv.c_str(), "w");
    if (!f) throw std::runtime_error("cannot open " + csv);
    std::fprintf(f, "class");
    for (Index j = 0; j < c; ++j) std::fprintf(f, ",%ld", static_cast<long>(j));
    std::fprintf(f, "\n");
    for (Index i = 0; i < c; ++i) {
      std::fprintf(f, "%ld", static_cast<long>(i));
      for (Index j = 0; j < c; ++j) std::fprintf(f, ",%.17g", sim(i, j));
      std::fprintf(f, "\n");
    }
    std::fclose(f);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Channel-separated incremental learning for device fingerprinting"};
  app.require_subcommand(1);

  RunOptions train_opts;
  std::string train_strategy = "csil";
  auto* train = app.add_subcommand("train", "staged run of a single strategy");
  add_experiment_options(train, train_opts);
  add_switches(train, train_opts);
  train->add_option("--strategy", train_strategy)
      ->check(CLI::IsMember({"csil", "finetune", "lwf", "ewc"}))
      ->capture_default_str();

  RunOptions bench_opts;
  auto* bench = app.add_subcommand("bench", "compare strategies on a shared stage-0 model");
  add_experiment_options(bench, bench_opts);
  add_switches(bench, bench_opts);
  bench->add_option("--strategies", bench_opts.strategies, "subset of csil,finetune,lwf,ewc")
      ->check(CLI::IsMember({"csil", "finetune", "lwf", "ewc"}))
      ->delimiter(',');

  RunOptions ablate_opts;
  auto* ablate = app.add_subcommand("ablate", "full CSIL against its no-CS, no-EWC and no-KD variants");
  add_experiment_options(ablate, ablate_opts);

  std::string doc_path, doc_csv;
  auto* doc = app.add_subcommand("doc", "fingerprint topology of a checkpoint");
  doc->add_option("checkpoint", doc_path, "CSMX checkpoint or weight file")->required()->check(CLI::ExistingFile);
  doc->add_option("--csv", doc_csv, "write the similarity matrix here");

  std::int64_t gen_devices = 20, gen_samples = 200;
  double gen_snr = 20.0;
  std::uint64_t gen_seed = 1;
  std::string gen_out = "dataset.csil", gen_manifest;
  auto* gen = app.add_subcommand("gen-data", "synthesize a device dataset");
  gen->add_option("--devices", gen_devices)->capture_default_str()->check(CLI::PositiveNumber);
  gen->add_option("--samples", gen_samples, "samples per device")->capture_default_str()->check(CLI::PositiveNumber);
  gen->add_option("--snr", gen_snr)->capture_default_str();
  gen->add_option("--seed", gen_seed)->capture_default_str();
  gen->add_option("--out", gen_out)->capture_default_str();
  gen->add_option("--manifest", gen_manifest, "CSV manifest path");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) {
      train_opts.strategies = {train_strategy};
      return finish_report(run_experiment(finish(train_opts)), train_opts);
    }
    if (*bench) return finish_report(run_experiment(finish(bench_opts)), bench_opts);
    if (*ablate) return finish_report(run_ablation(finish(ablate_opts)), ablate_opts);
    if (*doc) return run_doc(doc_path, doc_csv);
    if (*gen) {
      const sim::Dataset ds = sim::make_dataset(gen_devices, gen_samples, gen_snr, gen_seed);
      for (const std::filesystem::path& p : {std::filesystem::path(gen_out), std::filesystem::path(gen_manifest)})
        if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
      sim::save_dataset(ds, gen_out);
      if (!gen_manifest.empty()) sim::write_manifest(ds, gen_manifest);
      std::printf("wrote %ld samples from %ld devices to %s\n", static_cast<long>(ds.size()),
                  static_cast<long>(ds.device_count), gen_out.c_str());
      return 0;
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
