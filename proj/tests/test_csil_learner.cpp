#include "csil/csil_learner.hpp"
#include "csil/doc_metric.hpp"
#include "gradcheck.hpp"
#include "toy_data.hpp"

#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>

using namespace csil;
using csil::testing::quick_options;
using csil::testing::random_matrix;
using csil::testing::toy_config;
using csil::testing::ToyProblem;

namespace {

struct Staged {
  Model model;
  StageContext ctx;
  StageData data;
  StageLog log;
};

// Stage 0 on classes [0, 3), then prepare stage 1 with 2 new classes.
Staged two_stage(const StageRecipe& recipe, Index stage0_epochs = 15) {
  ToyProblem problem(5, 16, 42);
  Model model = Model::create(toy_config(), 3, 6, 7);
  const StageData d0 = problem.stage(0, 3, 30, 10);
  const StageContext c0 = initial_context(model);
  (void)train_stage(model, c0, d0, quick_options(stage0_epochs));
  StageData d1 = problem.stage(3, 2, 30, 10);
  StageContext c1 = prepare_stage(model, c0, recipe, 2, d0.val_x, d1.train_x, d1.train_y, 11);
  return {std::move(model), std::move(c1), std::move(d1), {}};
}

}  // namespace

TEST_CASE("expand_embedding keeps the old block and appends zero bias") {
  std::mt19937_64 rng(1);
  const Matrix w0 = random_matrix(2, 3, rng);
  const Vector b = random_matrix(2, 1, rng).col(0);
  const EmbeddingLayer<double> e = expand_embedding(w0, b, 2, rng);
  REQUIRE(e.W0.rows() == 4);
  REQUIRE(e.W0.cols() == 3);
  CHECK(e.W0.topRows(2) == w0);
  CHECK(e.b.head(2) == b);
  CHECK(e.b.tail(2).isZero(0.0));
  CHECK_FALSE(e.W0.bottomRows(2).isZero(0.0));
  CHECK_THROWS_AS((void)expand_embedding(w0, b, 0, rng), std::invalid_argument);
}

TEST_CASE("expand_similarity builds the block-diagonal layout") {
  std::mt19937_64 rng(2);
  const Matrix prev = random_matrix(2, 4, rng);
  const Matrix fresh = random_matrix(1, 2, rng);
  const Matrix w1 = expand_similarity(prev, fresh, 6);
  REQUIRE(w1.rows() == 3);
  REQUIRE(w1.cols() == 6);
  CHECK(w1.topLeftCorner(2, 4) == prev);
  CHECK(w1.topRightCorner(2, 2).isZero(0.0));
  CHECK(w1.bottomLeftCorner(1, 4).isZero(0.0));
  CHECK(w1.bottomRightCorner(1, 2) == fresh);

  const Matrix s = similarity_matrix(w1);
  CHECK(s(0, 2) == 0.0);
  CHECK(s(1, 2) == 0.0);

  CHECK_THROWS_AS((void)expand_similarity(prev, fresh, 7), ShapeError);
  CHECK_THROWS_AS((void)expand_similarity(prev, Matrix(0, 2), 6), std::invalid_argument);
}

TEST_CASE("init_new_fingerprints") {
  std::mt19937_64 rng(3);
  SUBCASE("single vector gives its new-channel slice") {
    const Matrix e = random_matrix(6, 1, rng);
    const Index y[] = {0};
    const FingerprintInit init = init_new_fingerprints(e, y, 1, 2, 3, rng);
    CHECK(init.rows.row(0) == e.col(0).segment(2, 3).transpose());
    CHECK_FALSE(init.fallback[0]);
  }
  SUBCASE("opposite vectors trigger the random fallback") {
    Matrix e(4, 2);
    e.col(0) << 1, 2, 3, 4;
    e.col(1) = -e.col(0);
    const Index y[] = {0, 0};
    const FingerprintInit init = init_new_fingerprints(e, y, 1, 0, 4, rng);
    CHECK(init.fallback[0]);
    CHECK(init.rows.row(0).norm() > 0.0);
    CHECK(init.rows.row(0).norm() < 0.1 * e.col(0).norm());
  }
  SUBCASE("50 noisy same-direction vectors land within 5 degrees") {
    Vector dir = random_matrix(8, 1, rng).col(0);
    dir.normalize();
    std::normal_distribution<double> noise(0.0, 0.15);  // expected mean error ~3 degrees
    Matrix e(8, 50);
    std::vector<Index> y(50, 0);
    for (Index j = 0; j < 50; ++j)
      for (Index i = 0; i < 8; ++i) e(i, j) = dir(i) + noise(rng);
    const FingerprintInit init = init_new_fingerprints(e, y, 1, 0, 8, rng);
    const double cosine = init.rows.row(0).dot(dir.transpose()) / init.rows.row(0).norm();
    CHECK(std::acos(std::min(1.0, cosine)) * 180.0 / std::numbers::pi < 5.0);
  }
  SUBCASE("empty class is rejected") {
    const Matrix e = random_matrix(4, 2, rng);
    const Index y[] = {0, 0};
    CHECK_THROWS_AS((void)init_new_fingerprints(e, y, 2, 0, 4, rng), std::invalid_argument);
  }
}

TEST_CASE("kd_loss") {
  std::mt19937_64 rng(4);
  const Matrix a = random_matrix(3, 5, rng);
  CHECK(kd_loss(a, a) == 0.0);

  Matrix p = Matrix::Zero(3, 1), q = Matrix::Zero(3, 1);
  q(1, 0) = 0.25;
  CHECK(kd_loss(p, q) == 0.0625);

  const Matrix b = random_matrix(3, 5, rng);
  double direct = 0.0;
  for (Index j = 0; j < 5; ++j) direct += (a.col(j) - b.col(j)).squaredNorm();
  CHECK(kd_loss(a, b) == doctest::Approx(direct / 5.0).epsilon(1e-14));
  CHECK_THROWS_AS((void)kd_loss(a, Matrix::Zero(2, 5)), ShapeError);
}

TEST_CASE("ewc_loss") {
  std::mt19937_64 rng(5);
  const std::vector<Matrix> theta{random_matrix(2, 3, rng), random_matrix(4, 1, rng)};
  FisherMatrix f{{random_matrix(2, 3, rng, 0, 1), random_matrix(4, 1, rng, 0, 1)}};
  CHECK(ewc_loss(theta, theta, f) == 0.0);

  std::vector<Matrix> moved = theta;
  moved[1](2, 0) += 2.0;
  const FisherMatrix ones{{Matrix::Ones(2, 3), Matrix::Ones(4, 1)}};
  CHECK(ewc_loss(moved, theta, ones) == doctest::Approx(2.0).epsilon(1e-14));

  const std::vector<Matrix> other{random_matrix(2, 3, rng), random_matrix(4, 1, rng)};
  double direct = 0.0;
  for (std::size_t k = 0; k < 2; ++k)
    for (Index i = 0; i < theta[k].size(); ++i)
      direct += 0.5 * f.entries[k](i) * std::pow(other[k](i) - theta[k](i), 2);
  CHECK(ewc_loss(other, theta, f) == doctest::Approx(direct).epsilon(1e-13));

  // Zero only where F > 0 matters.
  FisherMatrix partial = f;
  partial.entries[0](1, 1) = 0.0;
  std::vector<Matrix> nudged = theta;
  nudged[0](1, 1) += 3.0;
  CHECK(ewc_loss(nudged, theta, partial) == 0.0);

  f.entries[0](0, 0) = -1e-3;
  CHECK_THROWS_AS((void)ewc_loss(other, theta, f), DomainError);
}

TEST_CASE("estimate_fisher: non-negative, zero for dead units, averaging-invariant") {
  ToyProblem problem(3, 16, 9);
  Model model = Model::create(toy_config(), 3, 6, 3);
  // Hidden unit 0 never fires, so its incoming and outgoing weights are inert.
  model.parameters()[1].value(0, 0) = -1e6;
  const Matrix x = problem.sample(0, 3, 8).x;
  const FisherMatrix f = estimate_fisher(model, x);
  REQUIRE(f.entries.size() == model.size());
  for (const Matrix& m : f.entries) CHECK(m.minCoeff() >= 0.0);
  CHECK(f.entries[0].row(0).isZero(0.0));
  CHECK(f.entries[1](0, 0) == 0.0);
  CHECK(f.entries[2].col(0).isZero(0.0));
  CHECK(f.entries[model.index_of(kFingerprints)].maxCoeff() > 0.0);

  Matrix twice(x.rows(), 2 * x.cols());
  twice << x, x;
  const FisherMatrix f2 = estimate_fisher(model, twice);
  for (std::size_t k = 0; k < f.entries.size(); ++k)
    CHECK((f2.entries[k] - f.entries[k]).cwiseAbs().maxCoeff() <= 1e-12 * (1.0 + f.entries[k].cwiseAbs().maxCoeff()));

  CHECK_THROWS_AS((void)estimate_fisher(model, Matrix(16, 0)), std::invalid_argument);
}

TEST_CASE("train_stage: zero epochs leave the model bit-identical") {
  ToyProblem problem(2, 16, 1);
  Model model = Model::create(toy_config(), 2, 4, 1);
  const Model before = model;
  const StageLog log = train_stage(model, initial_context(model), problem.stage(0, 2, 10, 5), quick_options(0));
  CHECK(model.values() == before.values());
  CHECK(log.epochs.empty());
}

TEST_CASE("train_stage: two separated classes reach 100% train accuracy in 30 epochs") {
  ToyProblem problem(2, 16, 2, 0.2);
  Model model = Model::create(toy_config(), 2, 4, 2);
  const StageLog log = train_stage(model, initial_context(model), problem.stage(0, 2, 40, 10), quick_options(30));
  REQUIRE(log.epochs.size() == 30);
  CHECK(log.epochs.back().train_accuracy == 100.0);
  CHECK(log.epochs.back().kd == 0.0);
  CHECK(log.epochs.back().ewc == 0.0);
}

TEST_CASE("train_stage rejects empty data and foreign labels") {
  ToyProblem problem(3, 16, 3);
  Model model = Model::create(toy_config(), 2, 4, 3);
  const StageContext ctx = initial_context(model);
  StageData empty{Matrix(16, 0), {}, Matrix(16, 0), {}};
  CHECK_THROWS_AS((void)train_stage(model, ctx, empty, quick_options(1)), std::invalid_argument);
  CHECK_THROWS_AS((void)train_stage(model, ctx, problem.stage(1, 2, 5, 2), quick_options(1)), std::out_of_range);
}

TEST_CASE("prepare_stage with channel separation") {
  Staged s = two_stage(StageRecipe{});
  const Model& m = s.model;
  CHECK(m.class_count() == 5);
  CHECK(m.embed_dim() == 6 + 4);
  REQUIRE(s.ctx.channel_map.size() == 2);
  CHECK(s.ctx.channel_map[1] == ChannelBlock{1, 3, 2, 6, 4});
  CHECK(s.ctx.old_class_count == 3);

  const Matrix& w1 = m.param(kFingerprints);
  CHECK(w1.topRightCorner(3, 4).isZero(0.0));
  CHECK(w1.bottomLeftCorner(2, 6).isZero(0.0));

  // Masks: extractor frozen, old embedding rows frozen, zero blocks frozen.
  for (std::size_t k = 0; k < m.extractor_param_count(); ++k) CHECK(s.ctx.masks[k].isZero(0.0));
  const Matrix& w0m = s.ctx.masks[m.index_of(kEmbedWeight)];
  CHECK(w0m.topRows(6).isZero(0.0));
  CHECK(w0m.bottomRows(4).isOnes(0.0));
  const Matrix& w1m = s.ctx.masks[m.index_of(kFingerprints)];
  CHECK(w1m.topRightCorner(3, 4).isZero(0.0));
  CHECK(w1m.bottomLeftCorner(2, 6).isZero(0.0));
  CHECK(w1m.bottomRightCorner(2, 4).isOnes(0.0));
  for (const Matrix& f : s.ctx.fisher.entries) CHECK(f.minCoeff() >= 0.0);
}

TEST_CASE("stage-k scores read only stage-k channels") {
  Staged s = two_stage(StageRecipe{});
  (void)train_stage(s.model, s.ctx, s.data, quick_options(3));
  const Matrix x = s.data.val_x;
  const Matrix base_scores = score(s.model, x);
  const Matrix base_embed = embed_features(s.model, x);

  Model cut = s.model;
  cut.param(kEmbedWeight).topRows(6).setZero();
  cut.param(kEmbedBias).topRows(6).setZero();
  const Matrix cut_scores = score(cut, x);
  const Matrix cut_embed = embed_features(cut, x);
  // The numerators f_k . y are untouched; only the shared column norm changes.
  for (Index j = 0; j < x.cols(); ++j) {
    const double ratio = base_embed.col(j).norm() / cut_embed.col(j).norm();
    for (Index i = 3; i < 5; ++i) CHECK(cut_scores(i, j) == doctest::Approx(base_scores(i, j) * ratio).epsilon(1e-12));
  }
}

TEST_CASE("CSIL stage: frozen entries, exact orthogonality, loss decomposition") {
  Staged s = two_stage(StageRecipe{});
  const Model before = s.model;
  TrainOptions opts = quick_options(8);
  opts.weights = {1.0, 2.5, 0.75};
  const StageLog log = train_stage(s.model, s.ctx, s.data, opts);

  for (std::size_t k = 0; k < s.model.size(); ++k) {
    const Matrix& now = s.model.parameters()[k].value;
    const Matrix& was = before.parameters()[k].value;
    for (Index i = 0; i < now.size(); ++i)
      if (s.ctx.masks[k](i) == 0.0) REQUIRE(now(i) == was(i));
  }
  const Matrix sim = similarity_matrix(s.model.param(kFingerprints));
  for (Index i = 0; i < 3; ++i)
    for (Index j = 3; j < 5; ++j) CHECK(sim(i, j) == 0.0);

  REQUIRE(!log.steps.empty());
  bool kd_seen = false, ewc_seen = false;
  for (const StepLog& st : log.steps) {
    CHECK(std::abs(st.total - (1.0 * st.ce + 2.5 * st.kd + 0.75 * st.ewc)) <= 1e-10);
    CHECK(st.kd >= 0.0);
    CHECK(st.ewc >= 0.0);
    kd_seen |= st.kd > 0.0;
    ewc_seen |= st.ewc > 0.0;
  }
  CHECK(kd_seen);
  CHECK(ewc_seen);
  CHECK(log.steps.front().ewc == 0.0);  // theta equals the snapshot before the first update
}

TEST_CASE("old embedding rows stay bit-identical over 100 steps") {
  Staged s = two_stage(StageRecipe{});
  const Matrix old_rows = s.model.param(kEmbedWeight).topRows(6);
  const Matrix old_bias = s.model.param(kEmbedBias).topRows(6);
  const StageLog log = train_stage(s.model, s.ctx, s.data, quick_options(25));
  REQUIRE(log.steps.size() >= 100);
  CHECK(s.model.param(kEmbedWeight).topRows(6) == old_rows);
  CHECK(s.model.param(kEmbedBias).topRows(6) == old_bias);
}

TEST_CASE("switching off KD or EWC zeroes that term") {
  StageRecipe r;
  r.use_kd = false;
  Staged no_kd = two_stage(r);
  for (const StepLog& st : train_stage(no_kd.model, no_kd.ctx, no_kd.data, quick_options(2)).steps) CHECK(st.kd == 0.0);
  r = StageRecipe{};
  r.use_ewc = false;
  Staged no_ewc = two_stage(r);
  for (const StepLog& st : train_stage(no_ewc.model, no_ewc.ctx, no_ewc.data, quick_options(2)).steps)
    CHECK(st.ewc == 0.0);
}

TEST_CASE("fingerprint matrix grows by the class and channel counts of every stage") {
  ToyProblem problem(7, 16, 8);
  Model model = Model::create(toy_config(), 3, 6, 1);
  StageData d = problem.stage(0, 3, 20, 5);
  StageContext ctx = initial_context(model);
  (void)train_stage(model, ctx, d, quick_options(5));
  Index first = 3;
  for (const Index add : {2, 2}) {
    StageData next = problem.stage(first, add, 20, 5);
    ctx = prepare_stage(model, ctx, StageRecipe{}, add, d.val_x, next.train_x, next.train_y, first);
    (void)train_stage(model, ctx, next, quick_options(3));
    first += add;
    d = std::move(next);
  }
  Index classes = 0, channels = 0;
  for (const ChannelBlock& b : ctx.channel_map) {
    classes += b.class_count;
    channels += b.channel_count;
  }
  CHECK(model.class_count() == classes);
  CHECK(model.embed_dim() == channels);
  CHECK(classes == 7);
  CHECK(channels == 6 + 4 + 4);
  const Matrix sim = similarity_matrix(model.param(kFingerprints));
  for (const ChannelBlock& a : ctx.channel_map)
    for (const ChannelBlock& b : ctx.channel_map) {
      if (a.stage == b.stage) continue;
      CHECK(sim.block(a.class_begin, b.class_begin, a.class_count, b.class_count).isZero(0.0));
    }
}

TEST_CASE("training is deterministic") {
  Staged a = two_stage(StageRecipe{}), b = two_stage(StageRecipe{});
  const StageLog la = train_stage(a.model, a.ctx, a.data, quick_options(4));
  const StageLog lb = train_stage(b.model, b.ctx, b.data, quick_options(4));
  CHECK(a.model.values() == b.model.values());
  CHECK(la.epochs == lb.epochs);
}
