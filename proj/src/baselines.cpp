#include "csil/baselines.hpp"

#include <stdexcept>

namespace csil {

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::Csil: return "csil";
    case Strategy::Finetune: return "finetune";
    case Strategy::Lwf: return "lwf";
    case Strategy::Ewc: return "ewc";
  }
  return "?";
}

Strategy parse_strategy(std::string_view name) {
  for (Strategy s : {Strategy::Csil, Strategy::Finetune, Strategy::Lwf, Strategy::Ewc})
    if (to_string(s) == name) return s;
  throw std::invalid_argument("unknown strategy '" + std::string(name) + "'");
}

StrategyConfig StrategyConfig::csil() {
  return {Strategy::Csil, StageRecipe{.channel_separation = true,
                                      .train_embedding = false,
                                      .train_old_fingerprints = true,
                                      .use_kd = true,
                                      .use_ewc = true}};
}

StrategyConfig StrategyConfig::finetune() {
  return {Strategy::Finetune, StageRecipe{.channel_separation = false,
                                          .train_embedding = false,
                                          .train_old_fingerprints = false,
                                          .use_kd = false,
                                          .use_ewc = false}};
}

StrategyConfig StrategyConfig::lwf() {
  return {Strategy::Lwf, StageRecipe{.channel_separation = false,
                                     .train_embedding = false,
                                     .train_old_fingerprints = true,
                                     .use_kd = true,
                                     .use_ewc = false}};
}

StrategyConfig StrategyConfig::ewc() {
  return {Strategy::Ewc, StageRecipe{.channel_separation = false,
                                     .train_embedding = false,
                                     .train_old_fingerprints = true,
                                     .use_kd = false,
                                     .use_ewc = true}};
}

StrategyConfig StrategyConfig::for_tag(Strategy tag) {
  switch (tag) {
    case Strategy::Csil: return csil();
    case Strategy::Finetune: return finetune();
    case Strategy::Lwf: return lwf();
    case Strategy::Ewc: return ewc();
  }
  throw std::invalid_argument("unknown strategy tag");
}

void StrategyConfig::validate() const {
  if (tag == Strategy::Csil) return;
  const StageRecipe expected = for_tag(tag).recipe;
  const bool same = recipe.channel_separation == expected.channel_separation &&
                    recipe.train_embedding == expected.train_embedding &&
                    recipe.train_old_fingerprints == expected.train_old_fingerprints &&
                    recipe.use_kd == expected.use_kd && recipe.use_ewc == expected.use_ewc;
  if (!same) throw std::invalid_argument("strategy '" + to_string(tag) + "' does not admit a modified recipe");
}

StageOutcome run_incremental_stage(Model& model, const StageContext& previous, const StrategyConfig& cfg,
                                   const StageInput& input, const TrainOptions& opts) {
  cfg.validate();
  if (input.data.train_x.cols() == 0) throw std::invalid_argument("incremental stage: empty stage data");
  StageOutcome out;
  out.context = prepare_stage(model, previous, cfg.recipe, input.new_classes, input.previous_val_x,
                              input.data.train_x, input.data.train_y, input.seed);
  out.log = train_stage(model, out.context, input.data, opts);
  return out;
}

StageOutcome csil_stage(Model& model, const StageContext& previous, const StageInput& input, const TrainOptions& opts) {
  return run_incremental_stage(model, previous, StrategyConfig::csil(), input, opts);
}

StageOutcome finetune_stage(Model& model, const StageContext& previous, const StageInput& input,
                            const TrainOptions& opts) {
  return run_incremental_stage(model, previous, StrategyConfig::finetune(), input, opts);
}

StageOutcome lwf_stage(Model& model, const StageContext& previous, const StageInput& input, const TrainOptions& opts) {
  return run_incremental_stage(model, previous, StrategyConfig::lwf(), input, opts);
}

StageOutcome ewc_stage(Model& model, const StageContext& previous, const StageInput& input, const TrainOptions& opts) {
  return run_incremental_stage(model, previous, StrategyConfig::ewc(), input, opts);
}

}  // namespace csil
