#pragma once

// Memoryless comparison strategies. All of them share the zero-bias backbone
// and the stage machinery of csil_learner; they differ only in the recipe
// (what is expanded, what is trainable, which penalties apply).

#include "csil/csil_learner.hpp"

#include <string>
#include <string_view>

namespace csil {

enum class Strategy { Csil, Finetune, Lwf, Ewc };

std::string to_string(Strategy s);
Strategy parse_strategy(std::string_view name);

struct StrategyConfig {
  Strategy tag = Strategy::Csil;
  StageRecipe recipe;

  static StrategyConfig csil();
  /// Extractor, embedding and old fingerprints frozen; new rows only; CE.
  static StrategyConfig finetune();
  /// Extractor and embedding frozen; whole matching layer; CE + KD.
  static StrategyConfig lwf();
  /// Extractor and embedding frozen; whole matching layer; CE + EWC.
  static StrategyConfig ewc();
  static StrategyConfig for_tag(Strategy tag);

  /// Baseline tags admit exactly their own recipe; CSIL admits ablations.
  void validate() const;
};

/// What one incremental stage needs besides the model.
struct StageInput {
  Index new_classes = 0;
  Matrix previous_val_x;  // validation data of the previous stage (Fisher)
  StageData data;         // labels are model class indices of the new classes
  std::uint64_t seed = 0;
};

struct StageOutcome {
  StageContext context;
  StageLog log;
};

/// prepare_stage + train_stage under the strategy's recipe.
StageOutcome run_incremental_stage(Model& model, const StageContext& previous, const StrategyConfig& cfg,
                                   const StageInput& input, const TrainOptions& opts);

StageOutcome csil_stage(Model& model, const StageContext& previous, const StageInput& input, const TrainOptions& opts);
StageOutcome finetune_stage(Model& model, const StageContext& previous, const StageInput& input,
                            const TrainOptions& opts);
StageOutcome lwf_stage(Model& model, const StageContext& previous, const StageInput& input, const TrainOptions& opts);
StageOutcome ewc_stage(Model& model, const StageContext& previous, const StageInput& input, const TrainOptions& opts);

}  // namespace csil
