#pragma once

// Staged class-incremental experiments: one shared stage-0 model, then each
// strategy learns the remaining devices in fixed-size increments without
// access to earlier data. Metrics are collected per stage on the validation
// split of every device learned so far.

#include "csil/baselines.hpp"
#include "csil/signal_sim.hpp"

#include <json.hpp>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace csil {

struct ExperimentConfig {
  Index devices = 20;
  Index initial_devices = 8;
  Index increment = 3;
  Index samples_per_device = 200;
  double snr_db = 20.0;
  std::vector<Strategy> strategies{Strategy::Csil, Strategy::Finetune, Strategy::Lwf, Strategy::Ewc};
  Index stage0_epochs = 30;
  Index epochs = 10;
  Index batch_size = 64;
  SgdConfig sgd;
  double temperature = 5.0;
  ExtractorKind extractor = ExtractorKind::Cnn;
  // Switches for the CSIL strategy; the baselines ignore them.
  bool channel_separation = true;
  bool use_ewc = true;
  bool use_kd = true;
  LossWeights weights;
  std::uint64_t seed = 1;
  std::filesystem::path output_dir;    // empty: no files written by run_experiment
  std::filesystem::path dataset_path;  // empty: synthesize from the fields above
  bool checkpoints = false;            // write a checkpoint per stage under output_dir
  bool resume = false;                 // continue from checkpoints found under output_dir
  Index jobs = 1;                      // strategies trained concurrently

  Index stage_count() const;
  /// Throws std::invalid_argument on an infeasible schedule or bad field.
  void validate() const;
};

nlohmann::json to_json(const ExperimentConfig& cfg);

struct StageMetrics {
  Index stage = 0;
  Index class_count = 0;
  Index new_class_count = 0;
  double acc_new = 0.0;
  std::optional<double> acc_old;  // empty at stage 0
  double acc_avg = 0.0;
  std::optional<double> doc_all;
  std::optional<double> doc_new;
  std::optional<double> forget;   // mean drop on previously learned devices
  std::vector<Index> correct;     // per model class
  std::vector<Index> total;
  Matrix similarity;
  std::vector<EpochLog> epochs;

  bool operator==(const StageMetrics&) const;
};

struct StrategyRun {
  std::string name;
  std::vector<StageMetrics> stages;
  std::optional<double> forget_per_stage;  // mean of per-stage forgetting

  bool operator==(const StrategyRun&) const = default;
};

struct ExperimentReport {
  nlohmann::json config;
  std::vector<std::int32_t> device_order;  // dataset label of each model class
  std::vector<StrategyRun> runs;
  std::vector<std::string> invariant_failures;

  const StrategyRun& run(const std::string& name) const;
  bool operator==(const ExperimentReport&) const = default;
};

/// A named strategy configuration to run against the shared stage-0 model.
struct RunSpec {
  std::string name;
  StrategyConfig strategy;
};

/// Strategy list of `cfg`, with the CSIL switches applied.
std::vector<RunSpec> benchmark_runs(const ExperimentConfig& cfg);
/// Full CSIL plus the three single-component ablations.
std::vector<RunSpec> ablation_runs(const ExperimentConfig& cfg);

ExperimentReport run_experiment(const ExperimentConfig& cfg);
ExperimentReport run_ablation(const ExperimentConfig& cfg);
/// Runs an explicit list of strategy configurations.
ExperimentReport run_specs(const ExperimentConfig& cfg, const std::vector<RunSpec>& specs);

enum class ReportFormat { Csv, Json };

/// csv: metrics.csv, metrics_<run>.csv, similarity_<run>_stage<k>.csv.
/// json: report.json. Returns the paths written.
std::vector<std::filesystem::path> emit_report(const ExperimentReport& report, const std::filesystem::path& dir,
                                               const std::vector<ReportFormat>& formats);

nlohmann::json to_json(const ExperimentReport& report);
ExperimentReport report_from_json(const nlohmann::json& j);

/// Largest |similarity| between fingerprints of different stages.
double cross_stage_max(const Matrix& similarity, const std::vector<ChannelBlock>& blocks);

}  // namespace csil
