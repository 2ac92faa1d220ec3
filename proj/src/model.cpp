#include "csil/model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace csil {

std::string to_string(ExtractorKind kind) { return kind == ExtractorKind::Mlp ? "mlp" : "cnn"; }
std::string to_string(HeadKind kind) { return kind == HeadKind::ZeroBias ? "zerobias" : "regular"; }

ExtractorKind parse_extractor(std::string_view name) {
  if (name == "mlp") return ExtractorKind::Mlp;
  if (name == "cnn") return ExtractorKind::Cnn;
  throw std::invalid_argument("unknown extractor '" + std::string(name) + "'");
}

HeadKind parse_head(std::string_view name) {
  if (name == "zerobias") return HeadKind::ZeroBias;
  if (name == "regular") return HeadKind::Regular;
  throw std::invalid_argument("unknown head '" + std::string(name) + "'");
}

namespace {

ImageShape cnn_stage1(const ModelConfig& cfg) {
  return ad::max_pool2_output_shape(ad::conv2d_output_shape(cfg.input, cfg.cnn_kernel, cfg.cnn_channels1));
}

ImageShape cnn_stage2(const ModelConfig& cfg) {
  return ad::max_pool2_output_shape(ad::conv2d_output_shape(cnn_stage1(cfg), cfg.cnn_kernel, cfg.cnn_channels2));
}

Matrix he_uniform(Index rows, Index cols, Index fan_in, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-limit, limit);
  Matrix m(rows, cols);
  for (Index j = 0; j < cols; ++j)
    for (Index i = 0; i < rows; ++i) m(i, j) = dist(rng);
  return m;
}

std::vector<std::string> extractor_names(ExtractorKind kind) {
  if (kind == ExtractorKind::Mlp) return {"extractor.fc1.W", "extractor.fc1.b", "extractor.fc2.W", "extractor.fc2.b"};
  return {"extractor.conv1.K", "extractor.conv1.b", "extractor.conv2.K", "extractor.conv2.b"};
}

}  // namespace

Index ModelConfig::feature_dim() const {
  if (extractor == ExtractorKind::Mlp) return mlp_features;
  return cnn_stage2(*this).size();
}

Matrix glorot_uniform(Index rows, Index cols, Index fan_in, Index fan_out, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  Matrix m(rows, cols);
  for (Index j = 0; j < cols; ++j)
    for (Index i = 0; i < rows; ++i) m(i, j) = dist(rng);
  return m;
}

Model Model::create(const ModelConfig& cfg, Index class_count, Index embed_dim, std::uint64_t seed) {
  if (class_count < 1) throw std::invalid_argument("Model::create: class_count must be >= 1");
  if (embed_dim < 1) throw std::invalid_argument("Model::create: embed_dim must be >= 1");
  if (!(cfg.temperature > 0.0)) throw DomainError("Model::create: temperature must be positive");
  std::mt19937_64 rng(seed);
  std::vector<Parameter> params;
  const auto names = extractor_names(cfg.extractor);
  if (cfg.extractor == ExtractorKind::Mlp) {
    const Index in = cfg.input.size();
    params.push_back({names[0], he_uniform(cfg.mlp_hidden, in, in, rng)});
    params.push_back({names[1], Matrix::Zero(cfg.mlp_hidden, 1)});
    params.push_back({names[2], he_uniform(cfg.mlp_features, cfg.mlp_hidden, cfg.mlp_hidden, rng)});
    params.push_back({names[3], Matrix::Zero(cfg.mlp_features, 1)});
  } else {
    const Index k2 = cfg.cnn_kernel * cfg.cnn_kernel;
    params.push_back({names[0], he_uniform(cfg.cnn_channels1, k2 * cfg.input.channels, k2 * cfg.input.channels, rng)});
    params.push_back({names[1], Matrix::Zero(cfg.cnn_channels1, 1)});
    params.push_back({names[2], he_uniform(cfg.cnn_channels2, k2 * cfg.cnn_channels1, k2 * cfg.cnn_channels1, rng)});
    params.push_back({names[3], Matrix::Zero(cfg.cnn_channels2, 1)});
  }
  const Index n0 = cfg.feature_dim();
  params.push_back({std::string(kEmbedWeight), glorot_uniform(embed_dim, n0, n0, embed_dim, rng)});
  params.push_back({std::string(kEmbedBias), Matrix::Zero(embed_dim, 1)});
  params.push_back({std::string(kFingerprints), glorot_uniform(class_count, embed_dim, embed_dim, class_count, rng)});
  if (cfg.head == HeadKind::Regular) params.push_back({std::string(kHeadBias), Matrix::Zero(class_count, 1)});
  return from_parameters(cfg, std::move(params));
}

Model Model::from_parameters(const ModelConfig& cfg, std::vector<Parameter> params) {
  Model m;
  m.cfg_ = cfg;
  m.params_ = std::move(params);
  m.extractor_count_ = 4;
  m.validate();
  return m;
}

void Model::validate() const {
  auto expect = extractor_names(cfg_.extractor);
  expect.emplace_back(kEmbedWeight);
  expect.emplace_back(kEmbedBias);
  expect.emplace_back(kFingerprints);
  if (cfg_.head == HeadKind::Regular) expect.emplace_back(kHeadBias);
  if (params_.size() != expect.size())
    throw std::invalid_argument("Model: expected " + std::to_string(expect.size()) + " parameters, got " +
                                std::to_string(params_.size()));
  for (std::size_t k = 0; k < expect.size(); ++k)
    if (params_[k].name != expect[k])
      throw std::invalid_argument("Model: parameter " + std::to_string(k) + " is '" + params_[k].name +
                                  "', expected '" + expect[k] + "'");
  for (const Parameter& p : params_)
    if (!p.value.allFinite()) throw DomainError("Model: parameter '" + p.name + "' has non-finite entries");

  const Index n0 = cfg_.feature_dim();
  const Matrix& w0 = param(kEmbedWeight);
  const Matrix& b = param(kEmbedBias);
  const Matrix& w1 = param(kFingerprints);
  if (w0.cols() != n0) throw ShapeError("Model: " + std::string(kEmbedWeight) + " is " + shape_string(w0) +
                                        ", expected " + std::to_string(n0) + " columns");
  if (b.rows() != w0.rows() || b.cols() != 1)
    throw ShapeError("Model: " + std::string(kEmbedBias) + " is " + shape_string(b));
  if (w1.cols() != w0.rows())
    throw ShapeError("Model: " + std::string(kFingerprints) + " is " + shape_string(w1) + " but embedding has " +
                     std::to_string(w0.rows()) + " rows");
  if (cfg_.head == HeadKind::Regular) {
    const Matrix& hb = param(kHeadBias);
    if (hb.rows() != w1.rows() || hb.cols() != 1)
      throw ShapeError("Model: " + std::string(kHeadBias) + " is " + shape_string(hb));
  }
}

std::size_t Model::index_of(std::string_view name) const {
  for (std::size_t k = 0; k < params_.size(); ++k)
    if (params_[k].name == name) return k;
  throw std::out_of_range("Model: no parameter named '" + std::string(name) + "'");
}

std::vector<Matrix> Model::values() const {
  std::vector<Matrix> out;
  out.reserve(params_.size());
  for (const Parameter& p : params_) out.push_back(p.value);
  return out;
}

ForwardPass build_forward(ad::Graph& graph, const Model& model, const Matrix& X, const std::vector<bool>& trainable) {
  const ModelConfig& cfg = model.config();
  if (X.rows() != cfg.input.size())
    throw ShapeError("build_forward: batch has " + std::to_string(X.rows()) + " rows, model expects " +
                     std::to_string(cfg.input.size()));
  if (!trainable.empty() && trainable.size() != model.size())
    throw ShapeError("build_forward: trainable flags for " + std::to_string(trainable.size()) + " of " +
                     std::to_string(model.size()) + " parameters");

  ForwardPass fp;
  for (std::size_t k = 0; k < model.size(); ++k) {
    const Parameter& p = model.parameters()[k];
    fp.params.push_back(graph.parameter(p.value, p.name, trainable.empty() || trainable[k]));
  }
  ad::Var h = graph.input(X, "batch");
  if (cfg.extractor == ExtractorKind::Mlp) {
    h = ad::relu(ad::add_bias(ad::matmul(fp.params[0], h), fp.params[1]));
    h = ad::relu(ad::add_bias(ad::matmul(fp.params[2], h), fp.params[3]));
  } else {
    const ImageShape c1 = ad::conv2d_output_shape(cfg.input, cfg.cnn_kernel, cfg.cnn_channels1);
    h = ad::relu(ad::conv2d(h, fp.params[0], fp.params[1], cfg.input, cfg.cnn_kernel));
    h = ad::max_pool2(h, c1);
    const ImageShape p1 = ad::max_pool2_output_shape(c1);
    const ImageShape c2 = ad::conv2d_output_shape(p1, cfg.cnn_kernel, cfg.cnn_channels2);
    h = ad::relu(ad::conv2d(h, fp.params[2], fp.params[3], p1, cfg.cnn_kernel));
    h = ad::flatten(ad::max_pool2(h, c2));
  }
  fp.features = h;

  const std::size_t e = model.extractor_param_count();
  fp.embedded = ad::add_bias(ad::matmul(fp.params[e], fp.features), fp.params[e + 1]);
  if (cfg.head == HeadKind::ZeroBias) {
    fp.scores = ad::matmul(ad::normalize_rows(fp.params[e + 2]), ad::normalize_cols(fp.embedded));
    fp.logits = ad::scale(fp.scores, cfg.temperature);
  } else {
    fp.scores = ad::add_bias(ad::matmul(fp.params[e + 2], fp.embedded), fp.params[e + 3]);
    fp.logits = fp.scores;
  }
  return fp;
}

namespace {

constexpr Index kInferenceChunk = 256;

template <typename Pick>
Matrix chunked(const Model& model, const Matrix& X, Index out_rows, Pick pick) {
  Matrix out(out_rows, X.cols());
  const std::vector<bool> frozen(model.size(), false);
  for (Index start = 0; start < X.cols(); start += kInferenceChunk) {
    const Index n = std::min(kInferenceChunk, X.cols() - start);
    ad::Graph g;
    const ForwardPass fp = build_forward(g, model, X.middleCols(start, n), frozen);
    out.middleCols(start, n) = g.value(pick(fp));
  }
  return out;
}

}  // namespace

Matrix extract_features(const Model& model, const Matrix& X) {
  return chunked(model, X, model.feature_dim(), [](const ForwardPass& fp) { return fp.features; });
}

Matrix embed_features(const Model& model, const Matrix& X) {
  return chunked(model, X, model.embed_dim(), [](const ForwardPass& fp) { return fp.embedded; });
}

Matrix score(const Model& model, const Matrix& X) {
  return chunked(model, X, model.class_count(), [](const ForwardPass& fp) { return fp.scores; });
}

Matrix predict_proba(const Model& model, const Matrix& X) {
  const Matrix s = score(model, X);
  const double t = model.config().head == HeadKind::ZeroBias ? model.config().temperature : 1.0;
  return classify(s, t);
}

std::vector<Index> predict(const Model& model, const Matrix& X) {
  const Matrix s = score(model, X);
  std::vector<Index> out(static_cast<std::size_t>(s.cols()));
  for (Index j = 0; j < s.cols(); ++j) s.col(j).maxCoeff(&out[static_cast<std::size_t>(j)]);
  return out;
}

}  // namespace csil
