#include "csil/checkpoint.hpp"
#include "csil/doc_metric.hpp"
#include "csil/harness.hpp"

#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace csil;

namespace {

ExperimentConfig tiny() {
  ExperimentConfig c;
  c.devices = 6;
  c.initial_devices = 2;
  c.increment = 2;
  c.samples_per_device = 12;
  c.stage0_epochs = 4;
  c.epochs = 2;
  c.batch_size = 8;
  c.extractor = ExtractorKind::Mlp;
  c.seed = 3;
  return c;
}

std::filesystem::path fresh_dir(const std::string& name) {
  const auto d = std::filesystem::temp_directory_path() / ("csil_harness_" + name);
  std::filesystem::remove_all(d);
  std::filesystem::create_directories(d);
  return d;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream s(text);
  for (std::string l; std::getline(s, l);) out.push_back(l);
  return out;
}

}  // namespace

TEST_CASE("stage schedule") {
  ExperimentConfig c;
  CHECK(c.stage_count() == 5);
  CHECK_NOTHROW(c.validate());
  CHECK(c.batch_size == 64);
  CHECK(c.epochs == 10);

  c.devices = 100;
  c.initial_devices = 20;
  c.increment = 20;
  CHECK(c.stage_count() == 5);
  CHECK_NOTHROW(c.validate());

  c.increment = 30;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = ExperimentConfig{};
  c.initial_devices = 30;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = ExperimentConfig{};
  c.strategies = {Strategy::Csil, Strategy::Csil};
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = ExperimentConfig{};
  c.checkpoints = true;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("single-stage schedule is plain supervised training") {
  ExperimentConfig c = tiny();
  c.devices = c.initial_devices = 3;
  const ExperimentReport r = run_experiment(c);
  for (const StrategyRun& run : r.runs) {
    REQUIRE(run.stages.size() == 1);
    CHECK_FALSE(run.stages[0].acc_old.has_value());
    CHECK_FALSE(run.stages[0].forget.has_value());
    CHECK_FALSE(run.forget_per_stage.has_value());
    CHECK(run.stages[0].acc_new == run.stages[0].acc_avg);
  }
}

TEST_CASE("benchmark: shared stage 0, consistent metrics, clean invariants") {
  const ExperimentConfig c = tiny();
  const ExperimentReport r = run_experiment(c);
  REQUIRE(r.runs.size() == 4);
  CHECK(r.invariant_failures.empty());
  CHECK(r.device_order.size() == 6);
  for (const StrategyRun& run : r.runs) {
    CAPTURE(run.name);
    REQUIRE(run.stages.size() == 3);
    CHECK(run.stages[0] == r.runs[0].stages[0]);
    REQUIRE(run.forget_per_stage.has_value());
    double forget_sum = 0.0;
    for (std::size_t k = 0; k < run.stages.size(); ++k) {
      const StageMetrics& s = run.stages[k];
      CHECK(s.class_count == 2 + 2 * static_cast<Index>(k));
      for (double a : {s.acc_new, s.acc_avg, s.acc_old.value_or(50.0)}) {
        CHECK(a >= 0.0);
        CHECK(a <= 100.0);
      }
      // acc_avg is the sample-weighted mean of per-device accuracies.
      double weighted = 0.0, samples = 0.0;
      for (std::size_t d = 0; d < s.correct.size(); ++d) {
        const double n = static_cast<double>(s.total[d]);
        weighted += n * 100.0 * static_cast<double>(s.correct[d]) / n;
        samples += n;
      }
      CHECK(s.acc_avg == doctest::Approx(weighted / samples).epsilon(1e-12));
      if (k > 0) {
        REQUIRE(s.forget.has_value());
        forget_sum += *s.forget;
        CHECK(s.epochs.size() == 2);
      }
    }
    CHECK(*run.forget_per_stage == doctest::Approx(forget_sum / 2.0).epsilon(1e-14));
  }
  // CSIL heatmaps: cross-stage blocks are exactly zero.
  const StageMetrics& last = r.run("csil").stages.back();
  for (Index a = 0; a < 3; ++a)
    for (Index b = 0; b < 3; ++b) {
      if (a == b) continue;
      const Index ra = a == 0 ? 0 : 2 * a, rb = b == 0 ? 0 : 2 * b;
      CHECK(last.similarity.block(ra, rb, 2, 2).cwiseAbs().maxCoeff() == 0.0);
    }
}

TEST_CASE("reproducible: same config and seed give identical reports, threaded or not") {
  ExperimentConfig c = tiny();
  const ExperimentReport a = run_experiment(c);
  const ExperimentReport b = run_experiment(c);
  CHECK(a == b);
  CHECK(to_json(a).dump() == to_json(b).dump());
  c.jobs = 4;
  CHECK(run_experiment(c) == a);
  c.jobs = 1;
  c.seed = 4;
  CHECK_FALSE(run_experiment(c) == a);
}

TEST_CASE("report JSON round-trip") {
  const ExperimentReport r = run_experiment(tiny());
  CHECK(report_from_json(to_json(r)) == r);
  const auto dir = fresh_dir("json");
  emit_report(r, dir, {ReportFormat::Json});
  CHECK(report_from_json(nlohmann::json::parse(slurp(dir / "report.json"))) == r);
  std::filesystem::remove_all(dir);
}

TEST_CASE("CSV schema") {
  const ExperimentReport r = run_experiment(tiny());
  const auto dir = fresh_dir("csv");
  const auto written = emit_report(r, dir, {ReportFormat::Csv});
  const auto all = lines(slurp(dir / "metrics.csv"));
  REQUIRE(all.size() == 1 + 4 * 3);
  CHECK(all[0] == "stage,strategy,acc_new,acc_old,acc_avg,doc_all,doc_new,forget");
  for (std::size_t i = 1; i < all.size(); ++i) CHECK(std::count(all[i].begin(), all[i].end(), ',') == 7);
  CHECK(all[1].rfind("0,csil,", 0) == 0);
  CHECK(all[1].find(",,") != std::string::npos);  // stage 0 has no acc_old
  const auto per_run = lines(slurp(dir / "metrics_lwf.csv"));
  CHECK(per_run.size() == 4);
  CHECK(per_run[0] == all[0]);
  const auto sim = lines(slurp(dir / "similarity_csil_stage2.csv"));
  CHECK(sim.size() == 1 + 6);
  CHECK(written.size() == 1 + 4 + 4 * 3);
  std::filesystem::remove_all(dir);
}

TEST_CASE("ablation grid") {
  const ExperimentReport r = run_ablation(tiny());
  REQUIRE(r.runs.size() == 4);
  CHECK(r.runs[0].name == "csil");
  CHECK(r.runs[1].name == "csil-no-cs");
  CHECK(r.runs[2].name == "csil-no-ewc");
  CHECK(r.runs[3].name == "csil-no-kd");
  CHECK(r.invariant_failures.empty());
  for (std::size_t k = 1; k < 3; ++k) {
    for (const EpochLog& e : r.run("csil-no-ewc").stages[k].epochs) CHECK(e.ewc == 0.0);
    for (const EpochLog& e : r.run("csil-no-kd").stages[k].epochs) CHECK(e.kd == 0.0);
  }
  // Full-width insertion: the no-CS run's fingerprints share coordinates across stages.
  const Matrix& s = r.run("csil-no-cs").stages.back().similarity;
  CHECK(s.topRightCorner(2, 4).cwiseAbs().maxCoeff() > 0.0);
  const auto specs = ablation_runs(tiny());
  CHECK_FALSE(specs[1].strategy.recipe.channel_separation);
  CHECK(specs[1].strategy.recipe.use_kd);
  CHECK(specs[1].strategy.recipe.use_ewc);
}

TEST_CASE("checkpoints and resume reproduce an uninterrupted run") {
  ExperimentConfig c = tiny();
  c.strategies = {Strategy::Csil, Strategy::Finetune};
  c.output_dir = fresh_dir("resume");
  c.checkpoints = true;
  const ExperimentReport full = run_experiment(c);
  const auto ck = c.output_dir / "checkpoints";
  CHECK(std::filesystem::exists(ck / "stage0.csmx"));
  CHECK(std::filesystem::exists(ck / "csil_stage2.csmx"));

  // Lose the last stage of one run and both of the other.
  std::filesystem::remove(ck / "csil_stage2.csmx");
  std::filesystem::remove(ck / "finetune_stage1.csmx");
  std::filesystem::remove(ck / "finetune_stage2.csmx");
  c.resume = true;
  CHECK(run_experiment(c) == full);

  // Checkpoint contents are analysable on their own.
  const Checkpoint last = load_checkpoint(ck / "csil_stage2.csmx");
  CHECK(last.model.class_count() == 6);
  REQUIRE(last.context);
  CHECK(cross_stage_max(similarity_matrix(last.model.param(kFingerprints)), last.context->channel_map) == 0.0);

  c.seed = 99;
  CHECK_THROWS_AS((void)run_experiment(c), std::invalid_argument);
  std::filesystem::remove_all(c.output_dir);
}

TEST_CASE("dataset files drive the same experiment as the generator") {
  ExperimentConfig c = tiny();
  c.strategies = {Strategy::Csil};
  const auto dir = fresh_dir("dataset");
  sim::save_dataset(sim::make_dataset(c.devices, c.samples_per_device, c.snr_db, c.seed), dir / "d.csil");
  ExperimentReport generated = run_experiment(c);
  c.dataset_path = dir / "d.csil";
  ExperimentReport loaded = run_experiment(c);
  CHECK(loaded.runs == generated.runs);
  CHECK(loaded.device_order == generated.device_order);
  std::filesystem::remove_all(dir);
}

TEST_CASE("cross_stage_max") {
  Matrix s = Matrix::Identity(4, 4);
  s(0, 3) = s(3, 0) = -0.25;
  s(0, 1) = s(1, 0) = 0.9;
  const std::vector<ChannelBlock> blocks{{0, 0, 2, 0, 4}, {1, 2, 2, 4, 4}};
  CHECK(cross_stage_max(s, blocks) == 0.25);
  CHECK_THROWS_AS((void)cross_stage_max(Matrix::Identity(3, 3), blocks), ShapeError);
}
