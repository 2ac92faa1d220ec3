#include "csil/harness.hpp"

#include "csil/checkpoint.hpp"
#include "csil/doc_metric.hpp"
#include "csil/seed.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cmath>
#include <exception>
#include <fstream>
#include <numeric>
#include <set>
#include <stdexcept>
#include <thread>

namespace csil {

namespace {

// Stream tags for derive_seed.
constexpr std::uint64_t kPermutationStream = 0x0de7;
constexpr std::uint64_t kInitStream = 0x1417;
constexpr std::uint64_t kTrainStream = 0x7a1;
constexpr std::uint64_t kExpandStream = 0x9e9;

using nlohmann::json;

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(); }

std::optional<double> optional_from(const json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<double>();
}

// Shortest text that parses back to the same double.
std::string number_text(double v) { return json(v).dump(); }

std::string cell(const std::optional<double>& v) { return v ? number_text(*v) : std::string(); }

bool same_matrix(const Matrix& a, const Matrix& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() && (a.array() == b.array()).all();
}

json epoch_json(const EpochLog& e) {
  return {{"epoch", e.epoch},
          {"total", e.total},
          {"ce", e.ce},
          {"kd", e.kd},
          {"ewc", e.ewc},
          {"doc", optional_json(e.doc)},
          {"train_accuracy", e.train_accuracy},
          {"val_accuracy", e.val_accuracy}};
}

EpochLog epoch_from(const json& j) {
  EpochLog e;
  e.epoch = j.at("epoch").get<Index>();
  e.total = j.at("total").get<double>();
  e.ce = j.at("ce").get<double>();
  e.kd = j.at("kd").get<double>();
  e.ewc = j.at("ewc").get<double>();
  e.doc = optional_from(j.at("doc"));
  e.train_accuracy = j.at("train_accuracy").get<double>();
  e.val_accuracy = j.at("val_accuracy").get<double>();
  return e;
}

json matrix_json(const Matrix& m) {
  json rows = json::array();
  for (Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

Matrix matrix_from(const json& j) {
  const auto rows = static_cast<Index>(j.size());
  const Index cols = rows > 0 ? static_cast<Index>(j.at(0).size()) : 0;
  Matrix m(rows, cols);
  for (Index r = 0; r < rows; ++r) {
    if (static_cast<Index>(j.at(r).size()) != cols) throw std::invalid_argument("ragged similarity matrix in report");
    for (Index c = 0; c < cols; ++c) m(r, c) = j.at(r).at(c).get<double>();
  }
  return m;
}

json stage_json(const StageMetrics& s) {
  json epochs = json::array();
  for (const EpochLog& e : s.epochs) epochs.push_back(epoch_json(e));
  return {{"stage", s.stage},
          {"class_count", s.class_count},
          {"new_class_count", s.new_class_count},
          {"acc_new", s.acc_new},
          {"acc_old", optional_json(s.acc_old)},
          {"acc_avg", s.acc_avg},
          {"doc_all", optional_json(s.doc_all)},
          {"doc_new", optional_json(s.doc_new)},
          {"forget", optional_json(s.forget)},
          {"correct", s.correct},
          {"total", s.total},
          {"similarity", matrix_json(s.similarity)},
          {"epochs", epochs}};
}

StageMetrics stage_from(const json& j) {
  StageMetrics s;
  s.stage = j.at("stage").get<Index>();
  s.class_count = j.at("class_count").get<Index>();
  s.new_class_count = j.at("new_class_count").get<Index>();
  s.acc_new = j.at("acc_new").get<double>();
  s.acc_old = optional_from(j.at("acc_old"));
  s.acc_avg = j.at("acc_avg").get<double>();
  s.doc_all = optional_from(j.at("doc_all"));
  s.doc_new = optional_from(j.at("doc_new"));
  s.forget = optional_from(j.at("forget"));
  s.correct = j.at("correct").get<std::vector<Index>>();
  s.total = j.at("total").get<std::vector<Index>>();
  s.similarity = matrix_from(j.at("similarity"));
  for (const auto& e : j.at("epochs")) s.epochs.push_back(epoch_from(e));
  return s;
}

// Standardized data with per-class column lists, classes in model order.
struct PreparedData {
  Matrix train_x;
  Matrix val_x;
  std::vector<std::vector<Index>> train_cols;  // by model class
  std::vector<std::vector<Index>> val_cols;
  std::vector<std::int32_t> device_order;
};

PreparedData prepare_data(const ExperimentConfig& cfg) {
  sim::Dataset ds;
  if (cfg.dataset_path.empty()) {
    ds = sim::make_dataset(cfg.devices, cfg.samples_per_device, cfg.snr_db, cfg.seed);
  } else {
    ds = sim::load_dataset(cfg.dataset_path);
    if (ds.device_count != cfg.devices)
      throw std::invalid_argument("dataset has " + std::to_string(ds.device_count) + " devices, config expects " +
                                  std::to_string(cfg.devices));
  }
  const sim::Split split = sim::stratified_split(ds);

  PreparedData out;
  out.device_order.resize(static_cast<std::size_t>(cfg.devices));
  std::iota(out.device_order.begin(), out.device_order.end(), 0);
  std::mt19937_64 rng(derive_seed(cfg.seed, kPermutationStream));
  std::shuffle(out.device_order.begin(), out.device_order.end(), rng);
  std::vector<Index> class_of(static_cast<std::size_t>(cfg.devices));
  for (std::size_t c = 0; c < out.device_order.size(); ++c) class_of[static_cast<std::size_t>(out.device_order[c])] = static_cast<Index>(c);

  // Statistics come from the stage-0 training data only; later stages never
  // see data of other stages.
  std::vector<Index> stage0;
  for (Index i : split.train)
    if (class_of[static_cast<std::size_t>(ds.labels[static_cast<std::size_t>(i)])] < cfg.initial_devices) stage0.push_back(i);
  const sim::ChannelStats stats = sim::channel_stats(ds, stage0);

  out.train_x = sim::standardized(ds, split.train, stats);
  out.val_x = sim::standardized(ds, split.val, stats);
  out.train_cols.resize(static_cast<std::size_t>(cfg.devices));
  out.val_cols.resize(static_cast<std::size_t>(cfg.devices));
  for (std::size_t j = 0; j < split.train.size(); ++j)
    out.train_cols[static_cast<std::size_t>(class_of[static_cast<std::size_t>(ds.labels[static_cast<std::size_t>(split.train[j])])])]
        .push_back(static_cast<Index>(j));
  for (std::size_t j = 0; j < split.val.size(); ++j)
    out.val_cols[static_cast<std::size_t>(class_of[static_cast<std::size_t>(ds.labels[static_cast<std::size_t>(split.val[j])])])]
        .push_back(static_cast<Index>(j));
  return out;
}

struct Slice {
  Matrix x;
  std::vector<Index> y;
};

Slice gather(const Matrix& all, const std::vector<std::vector<Index>>& cols, Index begin, Index count) {
  std::vector<Index> idx;
  Slice s;
  for (Index c = begin; c < begin + count; ++c)
    for (Index j : cols[static_cast<std::size_t>(c)]) {
      idx.push_back(j);
      s.y.push_back(c);
    }
  s.x = all(Eigen::all, idx);
  return s;
}

StageData stage_data(const PreparedData& data, Index begin, Index count) {
  Slice train = gather(data.train_x, data.train_cols, begin, count);
  Slice val = gather(data.val_x, data.val_cols, begin, count);
  return {std::move(train.x), std::move(train.y), std::move(val.x), std::move(val.y)};
}

double percent(Index correct, Index total) {
  return total > 0 ? 100.0 * static_cast<double>(correct) / static_cast<double>(total) : 0.0;
}

StageMetrics evaluate(const Model& model, const PreparedData& data, Index stage, Index new_begin,
                      const StageMetrics* previous) {
  const Index classes = model.class_count();
  const Slice val = gather(data.val_x, data.val_cols, 0, classes);
  const std::vector<Index> pred = predict(model, val.x);

  StageMetrics m;
  m.stage = stage;
  m.class_count = classes;
  m.new_class_count = classes - new_begin;
  m.correct.assign(static_cast<std::size_t>(classes), 0);
  m.total.assign(static_cast<std::size_t>(classes), 0);
  for (std::size_t j = 0; j < pred.size(); ++j) {
    const auto c = static_cast<std::size_t>(val.y[j]);
    ++m.total[c];
    m.correct[c] += pred[j] == val.y[j];
  }
  auto pooled = [&](Index lo, Index hi) {
    Index ok = 0, n = 0;
    for (Index c = lo; c < hi; ++c) {
      ok += m.correct[static_cast<std::size_t>(c)];
      n += m.total[static_cast<std::size_t>(c)];
    }
    return percent(ok, n);
  };
  m.acc_new = pooled(new_begin, classes);
  if (new_begin > 0) m.acc_old = pooled(0, new_begin);
  m.acc_avg = pooled(0, classes);

  const Matrix& w1 = model.param(kFingerprints);
  if (classes >= 2) m.doc_all = degree_of_conflict(w1);
  if (m.new_class_count >= 2) m.doc_new = degree_of_conflict(w1.middleRows(new_begin, m.new_class_count));
  m.similarity = similarity_matrix(w1);

  if (previous && new_begin > 0) {
    double drop = 0.0;
    for (Index c = 0; c < new_begin; ++c) {
      const auto k = static_cast<std::size_t>(c);
      drop += percent(previous->correct[k], previous->total[k]) - percent(m.correct[k], m.total[k]);
    }
    m.forget = drop / static_cast<double>(new_begin);
  }
  return m;
}

void check_stage(const std::string& run, const Model& model, const StageContext& ctx, const StageLog& log,
                 const StageMetrics& metrics, bool separated, std::vector<std::string>& failures) {
  const std::string where = run + " stage " + std::to_string(metrics.stage) + ": ";
  for (double a : {metrics.acc_new, metrics.acc_avg, metrics.acc_old.value_or(0.0)})
    if (!(a >= 0.0 && a <= 100.0)) failures.push_back(where + "accuracy outside [0, 100]");
  for (std::size_t s = 0; s < log.steps.size(); ++s) {
    const StepLog& st = log.steps[s];
    const double sum = log.weights.ce * st.ce + log.weights.kd * st.kd + log.weights.ewc * st.ewc;
    if (!(std::abs(st.total - sum) <= 1e-10)) {
      failures.push_back(where + "loss decomposition off at step " + std::to_string(s));
      break;
    }
  }
  if (!ctx.snapshot.empty())
    for (std::size_t k = 0; k < model.size(); ++k) {
      const Matrix& now = model.parameters()[k].value;
      if (((ctx.masks[k].array() == 0.0) && (now.array() != ctx.snapshot[k].array())).any())
        failures.push_back(where + "frozen entries of '" + model.parameters()[k].name + "' moved");
    }
  if (separated && cross_stage_max(metrics.similarity, ctx.channel_map) != 0.0)
    failures.push_back(where + "cross-stage fingerprint similarity is not exactly 0");
}

json checkpoint_meta(const ExperimentConfig& cfg, const std::string& run, const std::vector<StageMetrics>& stages) {
  json metrics = json::array();
  for (const StageMetrics& s : stages) metrics.push_back(stage_json(s));
  return {{"config", to_json(cfg)}, {"run", run}, {"metrics", metrics}};
}

std::filesystem::path checkpoint_path(const ExperimentConfig& cfg, const std::string& run, Index stage) {
  const std::string name = stage == 0 ? "stage0.csmx" : run + "_stage" + std::to_string(stage) + ".csmx";
  return cfg.output_dir / "checkpoints" / name;
}

struct Resumed {
  Checkpoint ckpt;
  std::vector<StageMetrics> stages;
};

// Latest usable checkpoint of `run` at or below `last_stage`.
std::optional<Resumed> find_checkpoint(const ExperimentConfig& cfg, const std::string& run, Index last_stage) {
  for (Index k = last_stage; k >= 0; --k) {
    const auto path = checkpoint_path(cfg, run, k);
    if (!std::filesystem::exists(path)) continue;
    Resumed r{load_checkpoint(path), {}};
    if (r.ckpt.meta.at("config") != to_json(cfg))
      throw std::invalid_argument("checkpoint " + path.string() + " was written under a different configuration");
    if (!r.ckpt.context) throw CheckpointFormatError("checkpoint " + path.string() + " has no stage context");
    for (const auto& s : r.ckpt.meta.at("metrics")) r.stages.push_back(stage_from(s));
    return r;
  }
  return std::nullopt;
}

struct StageZero {
  Model model;
  StageContext context;
  StageMetrics metrics;
  std::vector<std::string> failures;
};

StageZero train_stage_zero(const ExperimentConfig& cfg, const PreparedData& data) {
  if (cfg.resume)
    if (auto r = find_checkpoint(cfg, "", 0)) return {r->ckpt.model, *r->ckpt.context, r->stages.at(0), {}};

  ModelConfig mc;
  mc.extractor = cfg.extractor;
  mc.temperature = cfg.temperature;
  StageZero z;
  z.model = Model::create(mc, cfg.initial_devices, 2 * cfg.initial_devices, derive_seed(cfg.seed, kInitStream));
  z.context = initial_context(z.model);
  TrainOptions opts{cfg.stage0_epochs, cfg.batch_size, cfg.sgd, cfg.weights, derive_seed(cfg.seed, kTrainStream, 0)};
  const StageLog log = train_stage(z.model, z.context, stage_data(data, 0, cfg.initial_devices), opts);
  z.metrics = evaluate(z.model, data, 0, 0, nullptr);
  z.metrics.epochs = log.epochs;
  check_stage("stage0", z.model, z.context, log, z.metrics, false, z.failures);
  if (cfg.checkpoints) save_checkpoint({z.model, z.context, checkpoint_meta(cfg, "", {z.metrics})}, checkpoint_path(cfg, "", 0));
  return z;
}

struct RunResult {
  StrategyRun run;
  std::vector<std::string> failures;
};

RunResult run_one(const ExperimentConfig& cfg, const RunSpec& spec, const PreparedData& data, const StageZero& zero) {
  const Index stages = cfg.stage_count();
  Model model = zero.model;
  StageContext ctx = zero.context;
  RunResult out;
  out.run.name = spec.name;
  out.run.stages = {zero.metrics};
  Index start = 1;
  if (cfg.resume)
    if (auto r = find_checkpoint(cfg, spec.name, stages - 1); r && r->stages.size() > 1) {
      model = r->ckpt.model;
      ctx = *r->ckpt.context;
      out.run.stages = std::move(r->stages);
      start = static_cast<Index>(out.run.stages.size());
    }

  for (Index k = start; k < stages; ++k) {
    const Index begin = cfg.initial_devices + (k - 1) * cfg.increment;
    const Index prev_begin = k == 1 ? 0 : begin - cfg.increment;
    StageInput in;
    in.new_classes = cfg.increment;
    in.previous_val_x = gather(data.val_x, data.val_cols, prev_begin, begin - prev_begin).x;
    in.data = stage_data(data, begin, cfg.increment);
    in.seed = derive_seed(cfg.seed, kExpandStream, static_cast<std::uint64_t>(k));
    TrainOptions opts{cfg.epochs, cfg.batch_size, cfg.sgd, cfg.weights,
                      derive_seed(cfg.seed, kTrainStream, static_cast<std::uint64_t>(k))};
    StageOutcome res = run_incremental_stage(model, ctx, spec.strategy, in, opts);
    ctx = std::move(res.context);

    StageMetrics m = evaluate(model, data, k, begin, &out.run.stages.back());
    m.epochs = res.log.epochs;
    check_stage(spec.name, model, ctx, res.log, m, spec.strategy.recipe.channel_separation, out.failures);
    out.run.stages.push_back(std::move(m));
    if (cfg.checkpoints)
      save_checkpoint({model, ctx, checkpoint_meta(cfg, spec.name, out.run.stages)}, checkpoint_path(cfg, spec.name, k));
  }

  if (stages > 1) {
    double sum = 0.0;
    for (std::size_t k = 1; k < out.run.stages.size(); ++k) sum += *out.run.stages[k].forget;
    out.run.forget_per_stage = sum / static_cast<double>(out.run.stages.size() - 1);
  }
  return out;
}

std::string safe_name(const std::string& name) {
  std::string s = name;
  for (char& ch : s)
    if (!std::isalnum(static_cast<unsigned char>(ch)) && ch != '-' && ch != '_') ch = '_';
  return s;
}

void write_metrics_csv(const std::filesystem::path& path, const std::vector<const StrategyRun*>& runs) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("emit_report: cannot open " + path.string());
  out << "stage,strategy,acc_new,acc_old,acc_avg,doc_all,doc_new,forget\n";
  for (const StrategyRun* run : runs)
    for (const StageMetrics& s : run->stages)
      out << s.stage << ',' << run->name << ',' << number_text(s.acc_new) << ',' << cell(s.acc_old) << ','
          << number_text(s.acc_avg) << ',' << cell(s.doc_all) << ',' << cell(s.doc_new) << ',' << cell(s.forget)
          << '\n';
}

void write_similarity_csv(const std::filesystem::path& path, const Matrix& sim) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("emit_report: cannot open " + path.string());
  out << "class";
  for (Index c = 0; c < sim.cols(); ++c) out << ',' << c;
  out << '\n';
  for (Index r = 0; r < sim.rows(); ++r) {
    out << r;
    for (Index c = 0; c < sim.cols(); ++c) out << ',' << number_text(sim(r, c));
    out << '\n';
  }
}

}  // namespace

Index ExperimentConfig::stage_count() const {
  return increment > 0 ? 1 + (devices - initial_devices) / increment : 1;
}

void ExperimentConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("experiment config: " + msg); };
  if (initial_devices < 2) fail("initial device count must be >= 2");
  if (devices < initial_devices) fail("device total is smaller than the initial stage");
  if (increment < 1) fail("increment must be >= 1");
  if ((devices - initial_devices) % increment != 0)
    fail("schedule " + std::to_string(initial_devices) + " + k*" + std::to_string(increment) + " does not sum to " +
         std::to_string(devices) + " devices");
  if (dataset_path.empty() && samples_per_device < 2) fail("samples per device must be >= 2");
  if (std::isnan(snr_db)) fail("snr must be a number");
  if (strategies.empty()) fail("no strategies selected");
  if (std::set<Strategy>(strategies.begin(), strategies.end()).size() != strategies.size()) fail("duplicate strategy");
  if (stage0_epochs < 0 || epochs < 0) fail("epoch counts must be >= 0");
  if (batch_size < 1) fail("batch size must be >= 1");
  if (!(temperature > 0.0) || !std::isfinite(temperature)) fail("temperature must be positive");
  for (double w : {weights.ce, weights.kd, weights.ewc})
    if (!(w >= 0.0) || !std::isfinite(w)) fail("loss weights must be finite and >= 0");
  if (jobs < 1) fail("jobs must be >= 1");
  if ((checkpoints || resume) && output_dir.empty()) fail("checkpoints need an output directory");
  sgd.validate();
}

json to_json(const ExperimentConfig& cfg) {
  json strategies = json::array();
  for (Strategy s : cfg.strategies) strategies.push_back(to_string(s));
  // Runtime-only fields (output location, resume, parallelism) stay out so
  // that identical experiments produce identical reports.
  return {{"devices", cfg.devices},
          {"initial_devices", cfg.initial_devices},
          {"increment", cfg.increment},
          {"samples_per_device", cfg.samples_per_device},
          {"snr_db", cfg.snr_db},
          {"strategies", strategies},
          {"stage0_epochs", cfg.stage0_epochs},
          {"epochs", cfg.epochs},
          {"batch_size", cfg.batch_size},
          {"lr", cfg.sgd.learning_rate},
          {"momentum", cfg.sgd.momentum},
          {"l2", cfg.sgd.l2_factor},
          {"temperature", cfg.temperature},
          {"extractor", to_string(cfg.extractor)},
          {"channel_separation", cfg.channel_separation},
          {"use_ewc", cfg.use_ewc},
          {"use_kd", cfg.use_kd},
          {"weight_ce", cfg.weights.ce},
          {"weight_kd", cfg.weights.kd},
          {"weight_ewc", cfg.weights.ewc},
          {"seed", cfg.seed},
          {"dataset", cfg.dataset_path.string()}};
}

bool StageMetrics::operator==(const StageMetrics& o) const {
  return stage == o.stage && class_count == o.class_count && new_class_count == o.new_class_count &&
         acc_new == o.acc_new && acc_old == o.acc_old && acc_avg == o.acc_avg && doc_all == o.doc_all &&
         doc_new == o.doc_new && forget == o.forget && correct == o.correct && total == o.total &&
         same_matrix(similarity, o.similarity) && epochs == o.epochs;
}

const StrategyRun& ExperimentReport::run(const std::string& name) const {
  for (const StrategyRun& r : runs)
    if (r.name == name) return r;
  throw std::out_of_range("report has no run named '" + name + "'");
}

std::vector<RunSpec> benchmark_runs(const ExperimentConfig& cfg) {
  std::vector<RunSpec> specs;
  for (Strategy s : cfg.strategies) {
    StrategyConfig sc = StrategyConfig::for_tag(s);
    if (s == Strategy::Csil) {
      sc.recipe.channel_separation = cfg.channel_separation;
      sc.recipe.train_embedding = !cfg.channel_separation;
      sc.recipe.use_ewc = cfg.use_ewc;
      sc.recipe.use_kd = cfg.use_kd;
    }
    specs.push_back({to_string(s), sc});
  }
  return specs;
}

std::vector<RunSpec> ablation_runs(const ExperimentConfig&) {
  StrategyConfig full = StrategyConfig::csil();
  StrategyConfig no_cs = full;
  no_cs.recipe.channel_separation = false;
  no_cs.recipe.train_embedding = true;
  StrategyConfig no_ewc = full;
  no_ewc.recipe.use_ewc = false;
  StrategyConfig no_kd = full;
  no_kd.recipe.use_kd = false;
  return {{"csil", full}, {"csil-no-cs", no_cs}, {"csil-no-ewc", no_ewc}, {"csil-no-kd", no_kd}};
}

ExperimentReport run_specs(const ExperimentConfig& cfg, const std::vector<RunSpec>& specs) {
  cfg.validate();
  if (specs.empty()) throw std::invalid_argument("run_specs: no runs");
  std::set<std::string> names;
  for (const RunSpec& s : specs) {
    s.strategy.validate();
    if (!names.insert(s.name).second) throw std::invalid_argument("run_specs: duplicate run name '" + s.name + "'");
  }
  if (cfg.checkpoints) std::filesystem::create_directories(cfg.output_dir / "checkpoints");

  const PreparedData data = prepare_data(cfg);
  const StageZero zero = train_stage_zero(cfg, data);

  std::vector<RunResult> results(specs.size());
  std::vector<std::exception_ptr> errors(specs.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < specs.size();) {
      try {
        results[i] = run_one(cfg, specs[i], data, zero);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const auto threads = static_cast<std::size_t>(std::min<Index>(cfg.jobs, static_cast<Index>(specs.size())));
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);

  ExperimentReport report;
  report.config = to_json(cfg);
  report.device_order = data.device_order;
  report.invariant_failures = zero.failures;
  for (RunResult& r : results) {
    report.runs.push_back(std::move(r.run));
    report.invariant_failures.insert(report.invariant_failures.end(), r.failures.begin(), r.failures.end());
  }
  return report;
}

ExperimentReport run_experiment(const ExperimentConfig& cfg) { return run_specs(cfg, benchmark_runs(cfg)); }

ExperimentReport run_ablation(const ExperimentConfig& cfg) { return run_specs(cfg, ablation_runs(cfg)); }

double cross_stage_max(const Matrix& similarity, const std::vector<ChannelBlock>& blocks) {
  double worst = 0.0;
  for (const ChannelBlock& a : blocks)
    for (const ChannelBlock& b : blocks) {
      if (a.stage == b.stage) continue;
      if (a.class_begin + a.class_count > similarity.rows() || b.class_begin + b.class_count > similarity.cols())
        throw ShapeError("cross_stage_max: block outside the similarity matrix");
      worst = std::max(worst, similarity.block(a.class_begin, b.class_begin, a.class_count, b.class_count)
                                  .cwiseAbs()
                                  .maxCoeff());
    }
  return worst;
}

json to_json(const ExperimentReport& report) {
  json runs = json::array();
  for (const StrategyRun& r : report.runs) {
    json stages = json::array();
    for (const StageMetrics& s : r.stages) stages.push_back(stage_json(s));
    runs.push_back({{"name", r.name}, {"forget_per_stage", optional_json(r.forget_per_stage)}, {"stages", stages}});
  }
  return {{"config", report.config},
          {"device_order", report.device_order},
          {"runs", runs},
          {"invariant_failures", report.invariant_failures}};
}

ExperimentReport report_from_json(const json& j) {
  ExperimentReport report;
  report.config = j.at("config");
  report.device_order = j.at("device_order").get<std::vector<std::int32_t>>();
  for (const auto& r : j.at("runs")) {
    StrategyRun run;
    run.name = r.at("name").get<std::string>();
    run.forget_per_stage = optional_from(r.at("forget_per_stage"));
    for (const auto& s : r.at("stages")) run.stages.push_back(stage_from(s));
    report.runs.push_back(std::move(run));
  }
  report.invariant_failures = j.at("invariant_failures").get<std::vector<std::string>>();
  return report;
}

std::vector<std::filesystem::path> emit_report(const ExperimentReport& report, const std::filesystem::path& dir,
                                               const std::vector<ReportFormat>& formats) {
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> written;
  for (ReportFormat f : formats) {
    if (f == ReportFormat::Json) {
      const auto path = dir / "report.json";
      std::ofstream out(path, std::ios::trunc);
      if (!out) throw std::runtime_error("emit_report: cannot open " + path.string());
      out << to_json(report).dump(2) << '\n';
      written.push_back(path);
      continue;
    }
    std::vector<const StrategyRun*> all;
    for (const StrategyRun& r : report.runs) all.push_back(&r);
    write_metrics_csv(dir / "metrics.csv", all);
    written.push_back(dir / "metrics.csv");
    for (const StrategyRun& r : report.runs) {
      const auto path = dir / ("metrics_" + safe_name(r.name) + ".csv");
      write_metrics_csv(path, {&r});
      written.push_back(path);
      for (const StageMetrics& s : r.stages) {
        const auto sim_path = dir / ("similarity_" + safe_name(r.name) + "_stage" + std::to_string(s.stage) + ".csv");
        write_similarity_csv(sim_path, s.similarity);
        written.push_back(sim_path);
      }
    }
  }
  return written;
}

}  // namespace csil
