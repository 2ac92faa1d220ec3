#pragma once

// Channel-separated incremental learning. At stage k the embedding layer gets
// fresh rows (channels) and the fingerprint matrix grows block-diagonally, so
// fingerprints of different stages live on disjoint coordinates and stay
// orthogonal. Training uses CE + KD + EWC under per-parameter gradient masks.

#include "csil/model.hpp"
#include "csil/sgd.hpp"
#include "csil/tensor.hpp"

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <vector>

namespace csil {

/// Classes and embedding channels introduced by one stage.
struct ChannelBlock {
  Index stage = 0;
  Index class_begin = 0;
  Index class_count = 0;
  Index channel_begin = 0;
  Index channel_count = 0;
  bool operator==(const ChannelBlock&) const = default;
};

/// Per-parameter non-negative importance weights, parallel to Model::parameters().
struct FisherMatrix {
  std::vector<Matrix> entries;
};

struct LossWeights {
  double ce = 1.0;
  double kd = 1.0;
  double ewc = 1.0;
};

/// Which parameters a stage may move and which penalties it adds.
struct StageRecipe {
  bool channel_separation = true;      // expand embedding, block-diagonal fingerprints
  bool train_embedding = false;        // whole embedding layer (only meaningful without separation)
  bool train_old_fingerprints = true;  // old fingerprints, within their own channel block
  bool use_kd = true;
  bool use_ewc = true;
};

struct StageContext {
  Index stage_index = 0;
  std::vector<Matrix> snapshot;  // previous-stage parameters, zero-padded to current shapes
  FisherMatrix fisher;           // zero-padded likewise
  std::vector<GradientMask> masks;
  std::vector<ChannelBlock> channel_map;
  Index old_class_count = 0;          // classes covered by KD
  std::optional<Model> previous;      // frozen previous-stage model (KD responses)
  bool use_kd = false;
  bool use_ewc = false;

  /// Classes this stage trains on.
  const ChannelBlock& current_block() const { return channel_map.back(); }
};

/// Training data of one stage. Labels are model class indices and must fall
/// inside the stage's current block.
struct StageData {
  Matrix train_x;
  std::vector<Index> train_y;
  Matrix val_x;
  std::vector<Index> val_y;
};

struct TrainOptions {
  Index epochs = 10;
  Index batch_size = 64;
  SgdConfig sgd;
  LossWeights weights;
  std::uint64_t seed = 0;
};

struct StepLog {
  double total = 0.0;
  double ce = 0.0;
  double kd = 0.0;
  double ewc = 0.0;
};

struct EpochLog {
  Index epoch = 0;
  double total = 0.0;  // batch means
  double ce = 0.0;
  double kd = 0.0;
  double ewc = 0.0;
  std::optional<double> doc;
  double train_accuracy = 0.0;  // percent, over the epoch's batches
  double val_accuracy = 0.0;    // percent, on StageData::val_x (empty -> 0)

  bool operator==(const EpochLog&) const = default;
};

struct StageLog {
  std::vector<EpochLog> epochs;
  std::vector<StepLog> steps;
  LossWeights weights;
};

// -- Building blocks --------------------------------------------------------

/// Appends `rows_new` freshly initialized rows to W0 and zeros to b.
EmbeddingLayer<double> expand_embedding(const Matrix& W0_prev, const Vector& b_prev, Index rows_new,
                                        std::mt19937_64& rng);

/// Block-diagonal growth: [[W1_prev, 0], [0, new_fingerprints]]. `embed_dim`
/// is the width of the already expanded embedding and must equal
/// W1_prev.cols() + new_fingerprints.cols().
Matrix expand_similarity(const Matrix& W1_prev, const Matrix& new_fingerprints, Index embed_dim);

struct FingerprintInit {
  Matrix rows;                 // class_count x channel_count
  std::vector<bool> fallback;  // true where the class mean was degenerate
};

/// Class means of embedded features (N1 x n, labels in [0, class_count))
/// restricted to [channel_begin, channel_begin + channel_count). A mean whose
/// norm is below 1e-6 of the class's mean feature norm is replaced by a small
/// random vector.
FingerprintInit init_new_fingerprints(const Matrix& embedded, std::span<const Index> labels, Index class_count,
                                      Index channel_begin, Index channel_count, std::mt19937_64& rng);

/// Batch mean of the squared L2 distance between responses (columns).
double kd_loss(const Matrix& previous, const Matrix& current);

/// 1/2 * sum F * (theta - theta_prev)^2 over all parameters.
double ewc_loss(std::span<const Matrix> params, std::span<const Matrix> previous, const FisherMatrix& fisher);

/// Mean over samples of the squared gradient of log softmax at the predicted class.
FisherMatrix estimate_fisher(const Model& model, const Matrix& val_x);

// -- Stages -----------------------------------------------------------------

/// Stage 0: every parameter trainable, CE only.
StageContext initial_context(const Model& model);

/// Grows `model` for `new_classes` classes under `recipe` and returns the
/// stage context. Fisher is estimated on `previous_val_x` with the model as it
/// was on entry; new fingerprints start at class means of `new_train_x`.
StageContext prepare_stage(Model& model, const StageContext& previous, const StageRecipe& recipe,
                           Index new_classes, const Matrix& previous_val_x, const Matrix& new_train_x,
                           std::span<const Index> new_train_y, std::uint64_t seed);

/// Mini-batch training of one stage under the context's masks and losses.
StageLog train_stage(Model& model, const StageContext& ctx, const StageData& data, const TrainOptions& opts);

/// Trainable flag per parameter (any mask entry set).
std::vector<bool> trainable_flags(const std::vector<GradientMask>& masks);

}  // namespace csil
