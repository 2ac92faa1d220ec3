#include "csil/baselines.hpp"
#include "toy_data.hpp"

#include <doctest.h>

using namespace csil;
using csil::testing::quick_options;
using csil::testing::toy_config;
using csil::testing::ToyProblem;

namespace {

struct Start {
  Model model;
  StageContext ctx;
  StageData previous;
  StageInput input;
};

// Shared stage 0 on 3 classes; stage 1 brings 2 more.
Start start() {
  ToyProblem problem(5, 16, 21);
  Start s{Model::create(toy_config(), 3, 6, 4), {}, problem.stage(0, 3, 30, 10), {}};
  s.ctx = initial_context(s.model);
  (void)train_stage(s.model, s.ctx, s.previous, quick_options(15));
  s.input.new_classes = 2;
  s.input.previous_val_x = s.previous.val_x;
  s.input.data = problem.stage(3, 2, 30, 10);
  s.input.seed = 77;
  return s;
}

double old_fingerprint_shift(const Model& before, const Model& after) {
  return (after.param(kFingerprints).topLeftCorner(3, before.embed_dim()) - before.param(kFingerprints)).norm();
}

void check_frozen_backbone(const Model& before, const Model& after) {
  for (std::size_t k = 0; k < before.extractor_param_count(); ++k)
    CHECK(after.parameters()[k].value == before.parameters()[k].value);
  CHECK(after.param(kEmbedWeight) == before.param(kEmbedWeight));
  CHECK(after.param(kEmbedBias) == before.param(kEmbedBias));
}

}  // namespace

TEST_CASE("strategy names round-trip") {
  for (Strategy s : {Strategy::Csil, Strategy::Finetune, Strategy::Lwf, Strategy::Ewc})
    CHECK(parse_strategy(to_string(s)) == s);
  CHECK_THROWS_AS((void)parse_strategy("icarl"), std::invalid_argument);
}

TEST_CASE("recipes are tied to their tags") {
  for (Strategy s : {Strategy::Csil, Strategy::Finetune, Strategy::Lwf, Strategy::Ewc})
    CHECK_NOTHROW(StrategyConfig::for_tag(s).validate());
  StrategyConfig ft = StrategyConfig::finetune();
  ft.recipe.use_kd = true;
  CHECK_THROWS_AS(ft.validate(), std::invalid_argument);
  StrategyConfig lwf = StrategyConfig::lwf();
  lwf.recipe.channel_separation = true;
  CHECK_THROWS_AS(lwf.validate(), std::invalid_argument);
  StrategyConfig ablated = StrategyConfig::csil();
  ablated.recipe.use_ewc = false;
  CHECK_NOTHROW(ablated.validate());
}

TEST_CASE("zero epochs change nothing beyond the appended rows") {
  for (Strategy s : {Strategy::Finetune, Strategy::Lwf, Strategy::Ewc}) {
    CAPTURE(to_string(s));
    Start st = start();
    const Model before = st.model;
    const StageOutcome out = run_incremental_stage(st.model, st.ctx, StrategyConfig::for_tag(s), st.input, quick_options(0));
    CHECK(out.log.epochs.empty());
    check_frozen_backbone(before, st.model);
    CHECK(st.model.param(kFingerprints).topRows(3) == before.param(kFingerprints));
    CHECK(st.model.class_count() == 5);
    CHECK(st.model.embed_dim() == before.embed_dim());
  }
}

TEST_CASE("finetune: only the new fingerprint rows move, CE only") {
  Start st = start();
  const Model before = st.model;
  const StageOutcome out = finetune_stage(st.model, st.ctx, st.input, quick_options(5));
  check_frozen_backbone(before, st.model);
  CHECK(st.model.param(kFingerprints).topRows(3) == before.param(kFingerprints));
  CHECK(st.model.param(kFingerprints).bottomRows(2) != out.context.snapshot[st.model.index_of(kFingerprints)].bottomRows(2));
  for (const StepLog& s : out.log.steps) {
    CHECK(s.kd == 0.0);
    CHECK(s.ewc == 0.0);
    CHECK(s.total == s.ce);
  }
}

TEST_CASE("lwf: whole matching layer trainable, KD starts at zero and then grows") {
  Start st = start();
  const Model before = st.model;
  const StageOutcome out = lwf_stage(st.model, st.ctx, st.input, quick_options(5));
  check_frozen_backbone(before, st.model);
  CHECK(old_fingerprint_shift(before, st.model) > 0.0);
  REQUIRE(out.log.steps.size() > 1);
  CHECK(out.log.steps.front().kd == 0.0);
  CHECK(out.log.steps.back().kd > 0.0);
  for (const StepLog& s : out.log.steps) CHECK(s.ewc == 0.0);
}

TEST_CASE("ewc: penalty starts at zero and restrains old fingerprints") {
  Start a = start();
  const Model before = a.model;
  const StageOutcome with = ewc_stage(a.model, a.ctx, a.input, quick_options(5));
  check_frozen_backbone(before, a.model);
  REQUIRE(!with.log.steps.empty());
  CHECK(with.log.steps.front().ewc == 0.0);
  CHECK(with.log.steps.back().ewc > 0.0);
  for (const StepLog& s : with.log.steps) CHECK(s.kd == 0.0);

  // Paired run without the penalty, same data and seeds.
  Start b = start();
  StageRecipe free = StrategyConfig::ewc().recipe;
  free.use_ewc = false;
  const StageContext ctx = prepare_stage(b.model, b.ctx, free, 2, b.input.previous_val_x, b.input.data.train_x,
                                         b.input.data.train_y, b.input.seed);
  (void)train_stage(b.model, ctx, b.input.data, quick_options(5));
  CHECK(old_fingerprint_shift(before, a.model) < old_fingerprint_shift(before, b.model));
}

TEST_CASE("ewc with an all-zero Fisher reduces to plain CE on the matching layer") {
  Start a = start();
  StageOutcome prepared = ewc_stage(a.model, a.ctx, a.input, quick_options(0));
  for (Matrix& f : prepared.context.fisher.entries) f.setZero();
  StageContext plain = prepared.context;
  plain.use_ewc = false;
  Model twin = a.model;
  const StageLog la = train_stage(a.model, prepared.context, a.input.data, quick_options(4));
  const StageLog lb = train_stage(twin, plain, a.input.data, quick_options(4));
  CHECK(a.model.values() == twin.values());
  CHECK(la.epochs.size() == lb.epochs.size());
  for (std::size_t i = 0; i < la.epochs.size(); ++i) CHECK(la.epochs[i].ce == lb.epochs[i].ce);
}

TEST_CASE("csil stage keeps cross-stage fingerprints orthogonal") {
  Start st = start();
  const StageOutcome out = csil_stage(st.model, st.ctx, st.input, quick_options(5));
  const Matrix& w1 = st.model.param(kFingerprints);
  const ChannelBlock& blk = out.context.current_block();
  CHECK(w1.topRightCorner(blk.class_begin, blk.channel_count).isZero(0.0));
  CHECK(w1.bottomLeftCorner(blk.class_count, blk.channel_begin).isZero(0.0));
}

TEST_CASE("empty stage data is rejected") {
  Start st = start();
  st.input.data = StageData{Matrix(16, 0), {}, Matrix(16, 0), {}};
  CHECK_THROWS_AS((void)finetune_stage(st.model, st.ctx, st.input, quick_options(1)), std::invalid_argument);
}
