#pragma once

// Classifier = feature extractor -> embedding layer L1 -> matching layer L2.
// All learnable state is an ordered list of named parameter matrices so that
// masks, Fisher estimates and snapshots can be kept as parallel lists.

#include "csil/autodiff.hpp"
#include "csil/sgd.hpp"
#include "csil/tensor.hpp"
#include "csil/zerobias.hpp"

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace csil {

enum class ExtractorKind { Mlp, Cnn };
enum class HeadKind { ZeroBias, Regular };

std::string to_string(ExtractorKind kind);
std::string to_string(HeadKind kind);
ExtractorKind parse_extractor(std::string_view name);
HeadKind parse_head(std::string_view name);

struct ModelConfig {
  ExtractorKind extractor = ExtractorKind::Cnn;
  ImageShape input{32, 32, 3};
  Index mlp_hidden = 128;
  Index mlp_features = 64;
  Index cnn_channels1 = 8;
  Index cnn_channels2 = 16;
  Index cnn_kernel = 3;
  HeadKind head = HeadKind::ZeroBias;
  double temperature = 5.0;

  /// Width N0 of the extractor output.
  Index feature_dim() const;
};

struct Parameter {
  std::string name;
  Matrix value;
};

inline constexpr std::string_view kEmbedWeight = "embed.W0";
inline constexpr std::string_view kEmbedBias = "embed.b";
inline constexpr std::string_view kFingerprints = "match.W1";
inline constexpr std::string_view kHeadBias = "match.b";

class Model {
 public:
  Model() = default;
  /// Fresh model for `class_count` classes with an `embed_dim`-wide embedding.
  static Model create(const ModelConfig& cfg, Index class_count, Index embed_dim, std::uint64_t seed);
  /// Rebuilds a model from stored parameters; validates names and shapes.
  static Model from_parameters(const ModelConfig& cfg, std::vector<Parameter> params);

  const ModelConfig& config() const { return cfg_; }
  std::span<Parameter> parameters() { return params_; }
  std::span<const Parameter> parameters() const { return params_; }
  std::size_t size() const { return params_.size(); }

  std::size_t index_of(std::string_view name) const;
  Matrix& param(std::string_view name) { return params_[index_of(name)].value; }
  const Matrix& param(std::string_view name) const { return params_[index_of(name)].value; }
  /// Number of leading parameters that belong to the feature extractor.
  std::size_t extractor_param_count() const { return extractor_count_; }

  Index class_count() const { return param(kFingerprints).rows(); }
  Index embed_dim() const { return param(kEmbedWeight).rows(); }
  Index feature_dim() const { return cfg_.feature_dim(); }

  std::vector<Matrix> values() const;
  FingerprintMatrix<double> fingerprints() const { return {param(kFingerprints)}; }
  EmbeddingLayer<double> embedding() const { return {param(kEmbedWeight), param(kEmbedBias).col(0)}; }

 private:
  void validate() const;

  ModelConfig cfg_;
  std::vector<Parameter> params_;
  std::size_t extractor_count_ = 0;
};

/// Nodes of one recorded forward pass.
struct ForwardPass {
  std::vector<ad::Var> params;  // parallel to Model::parameters()
  ad::Var features;             // extractor output, N0 x q
  ad::Var embedded;             // Y1, N1 x q
  ad::Var scores;               // cosine scores (zero-bias) or affine scores (regular), C x q
  ad::Var logits;               // temperature * scores, or scores for the regular head
};

/// Records the model on `graph` for the batch X (input features x q).
/// `trainable[k]` decides whether parameter k is a differentiable leaf; empty
/// means every parameter is.
ForwardPass build_forward(ad::Graph& graph, const Model& model, const Matrix& X,
                          const std::vector<bool>& trainable = {});

Matrix extract_features(const Model& model, const Matrix& X);
Matrix embed_features(const Model& model, const Matrix& X);
Matrix score(const Model& model, const Matrix& X);
/// Column-wise softmax of the logits.
Matrix predict_proba(const Model& model, const Matrix& X);
std::vector<Index> predict(const Model& model, const Matrix& X);

/// Glorot-uniform matrix; used for fresh layers and stage expansions.
Matrix glorot_uniform(Index rows, Index cols, Index fan_in, Index fan_out, std::mt19937_64& rng);

}  // namespace csil
