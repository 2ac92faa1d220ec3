#include "csil/csil_learner.hpp"

#include "csil/doc_metric.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace csil {

namespace {

constexpr double kNewChannelScale = 0.01;

Matrix padded(const Matrix& m, Index rows, Index cols) {
  Matrix out = Matrix::Zero(rows, cols);
  out.topLeftCorner(std::min(rows, m.rows()), std::min(cols, m.cols())) =
      m.topLeftCorner(std::min(rows, m.rows()), std::min(cols, m.cols()));
  return out;
}

void check_fisher(const FisherMatrix& fisher) {
  for (std::size_t k = 0; k < fisher.entries.size(); ++k)
    if ((fisher.entries[k].array() < 0.0).any() || !fisher.entries[k].allFinite())
      throw DomainError("Fisher entry for parameter " + std::to_string(k) + " is negative or non-finite");
}

}  // namespace

std::vector<bool> trainable_flags(const std::vector<GradientMask>& masks) {
  std::vector<bool> out;
  out.reserve(masks.size());
  for (const GradientMask& m : masks) out.push_back((m.array() != 0.0).any());
  return out;
}

EmbeddingLayer<double> expand_embedding(const Matrix& W0_prev, const Vector& b_prev, Index rows_new,
                                        std::mt19937_64& rng) {
  if (rows_new < 1) throw std::invalid_argument("expand_embedding: rows_new must be >= 1");
  if (b_prev.size() != W0_prev.rows())
    throw ShapeError("expand_embedding: W0 " + shape_string(W0_prev) + " vs b " + std::to_string(b_prev.size()));
  EmbeddingLayer<double> out;
  out.W0.resize(W0_prev.rows() + rows_new, W0_prev.cols());
  out.W0.topRows(W0_prev.rows()) = W0_prev;
  out.W0.bottomRows(rows_new) = glorot_uniform(rows_new, W0_prev.cols(), W0_prev.cols(), rows_new, rng);
  out.b = Vector::Zero(W0_prev.rows() + rows_new);
  out.b.head(b_prev.size()) = b_prev;
  return out;
}

Matrix expand_similarity(const Matrix& W1_prev, const Matrix& new_fingerprints, Index embed_dim) {
  if (new_fingerprints.rows() < 1) throw std::invalid_argument("expand_similarity: classes_new must be >= 1");
  if (W1_prev.cols() + new_fingerprints.cols() != embed_dim)
    throw ShapeError("expand_similarity: " + std::to_string(W1_prev.cols()) + " old + " +
                     std::to_string(new_fingerprints.cols()) + " new channels do not match embedding width " +
                     std::to_string(embed_dim));
  Matrix out = Matrix::Zero(W1_prev.rows() + new_fingerprints.rows(), embed_dim);
  out.topLeftCorner(W1_prev.rows(), W1_prev.cols()) = W1_prev;
  out.bottomRightCorner(new_fingerprints.rows(), new_fingerprints.cols()) = new_fingerprints;
  return out;
}

FingerprintInit init_new_fingerprints(const Matrix& embedded, std::span<const Index> labels, Index class_count,
                                      Index channel_begin, Index channel_count, std::mt19937_64& rng) {
  if (static_cast<Index>(labels.size()) != embedded.cols())
    throw ShapeError("init_new_fingerprints: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(embedded.cols()) + " feature vectors");
  if (channel_begin < 0 || channel_count < 1 || channel_begin + channel_count > embedded.rows())
    throw ShapeError("init_new_fingerprints: channel range outside embedding of width " +
                     std::to_string(embedded.rows()));
  FingerprintInit out;
  out.rows = Matrix::Zero(class_count, channel_count);
  out.fallback.assign(static_cast<std::size_t>(class_count), false);
  std::vector<Index> counts(static_cast<std::size_t>(class_count), 0);
  std::vector<double> norm_sum(static_cast<std::size_t>(class_count), 0.0);
  for (Index j = 0; j < embedded.cols(); ++j) {
    const Index c = labels[static_cast<std::size_t>(j)];
    if (c < 0 || c >= class_count)
      throw std::out_of_range("init_new_fingerprints: label " + std::to_string(c) + " outside [0, " +
                              std::to_string(class_count) + ")");
    const auto slice = embedded.col(j).segment(channel_begin, channel_count);
    out.rows.row(c) += slice.transpose();
    norm_sum[static_cast<std::size_t>(c)] += slice.norm();
    ++counts[static_cast<std::size_t>(c)];
  }
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (Index c = 0; c < class_count; ++c) {
    const auto n = counts[static_cast<std::size_t>(c)];
    if (n == 0) throw std::invalid_argument("init_new_fingerprints: class " + std::to_string(c) + " has no samples");
    out.rows.row(c) /= static_cast<double>(n);
    const double typical = norm_sum[static_cast<std::size_t>(c)] / static_cast<double>(n);
    if (out.rows.row(c).norm() <= 1e-6 * typical || !(out.rows.row(c).norm() > 0.0)) {
      const double scale = 1e-2 * (typical > 0.0 ? typical : 1.0) / std::sqrt(static_cast<double>(channel_count));
      for (Index i = 0; i < channel_count; ++i) out.rows(c, i) = scale * gauss(rng);
      out.fallback[static_cast<std::size_t>(c)] = true;
    }
  }
  return out;
}

double kd_loss(const Matrix& previous, const Matrix& current) {
  if (previous.rows() != current.rows() || previous.cols() != current.cols())
    throw ShapeError("kd_loss: responses " + shape_string(previous) + " vs " + shape_string(current));
  if (previous.cols() == 0) throw ShapeError("kd_loss: empty batch");
  return (previous - current).squaredNorm() / static_cast<double>(previous.cols());
}

double ewc_loss(std::span<const Matrix> params, std::span<const Matrix> previous, const FisherMatrix& fisher) {
  if (params.size() != previous.size() || params.size() != fisher.entries.size())
    throw ShapeError("ewc_loss: parameter, snapshot and Fisher lists differ in length");
  check_fisher(fisher);
  double total = 0.0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    const Matrix& f = fisher.entries[k];
    if (params[k].rows() != previous[k].rows() || params[k].cols() != previous[k].cols() ||
        f.rows() != params[k].rows() || f.cols() != params[k].cols())
      throw ShapeError("ewc_loss: shape mismatch at parameter " + std::to_string(k));
    total += (f.array() * (params[k] - previous[k]).array().square()).sum();
  }
  return 0.5 * total;
}

FisherMatrix estimate_fisher(const Model& model, const Matrix& val_x) {
  if (val_x.cols() == 0) throw std::invalid_argument("estimate_fisher: empty validation set");
  FisherMatrix fisher;
  for (const Parameter& p : model.parameters()) fisher.entries.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
  for (Index j = 0; j < val_x.cols(); ++j) {
    ad::Graph g;
    const ForwardPass fp = build_forward(g, model, val_x.col(j));
    Index predicted = 0;
    g.value(fp.logits).col(0).maxCoeff(&predicted);
    const std::array<Index, 1> label{predicted};
    g.backward(ad::softmax_cross_entropy(fp.logits, label));
    for (std::size_t k = 0; k < fp.params.size(); ++k) fisher.entries[k] += g.grad(fp.params[k]).cwiseAbs2();
  }
  for (Matrix& f : fisher.entries) f /= static_cast<double>(val_x.cols());
  return fisher;
}

StageContext initial_context(const Model& model) {
  StageContext ctx;
  ctx.stage_index = 0;
  for (const Parameter& p : model.parameters()) ctx.masks.push_back(Matrix::Ones(p.value.rows(), p.value.cols()));
  ctx.channel_map.push_back({0, 0, model.class_count(), 0, model.embed_dim()});
  return ctx;
}

StageContext prepare_stage(Model& model, const StageContext& previous, const StageRecipe& recipe, Index new_classes,
                           const Matrix& previous_val_x, const Matrix& new_train_x,
                           std::span<const Index> new_train_y, std::uint64_t seed) {
  if (new_classes < 1) throw std::invalid_argument("prepare_stage: new_classes must be >= 1");
  const Index c_prev = model.class_count();
  const Index n1_prev = model.embed_dim();
  std::vector<Index> local(new_train_y.begin(), new_train_y.end());
  for (Index& y : local) {
    y -= c_prev;
    if (y < 0 || y >= new_classes)
      throw std::out_of_range("prepare_stage: label " + std::to_string(y + c_prev) + " is not a new class");
  }

  StageContext ctx;
  ctx.stage_index = previous.stage_index + 1;
  ctx.use_kd = recipe.use_kd;
  ctx.use_ewc = recipe.use_ewc;
  ctx.old_class_count = c_prev;
  ctx.channel_map = previous.channel_map;
  const Model prev_model = model;
  if (recipe.use_kd) ctx.previous = prev_model;
  const FisherMatrix prev_fisher = recipe.use_ewc ? estimate_fisher(prev_model, previous_val_x) : FisherMatrix{};

  std::mt19937_64 rng(seed);
  const Matrix features = extract_features(prev_model, new_train_x);
  EmbeddingLayer<double> layer = prev_model.embedding();
  Matrix w1;
  if (recipe.channel_separation) {
    const Index rows_new = 2 * new_classes;
    layer = expand_embedding(layer.W0, layer.b, rows_new, rng);
    // Near-silent new channels, centred on this stage's data: the expanded
    // model starts out predicting like the previous one, and class means in
    // the new channels differ by class rather than by the shared offset.
    layer.W0.bottomRows(rows_new) *= kNewChannelScale;
    layer.b.tail(rows_new) = -layer.W0.bottomRows(rows_new) * features.rowwise().mean();
    const FingerprintInit init = init_new_fingerprints(embed(features, layer), local, new_classes, n1_prev, rows_new, rng);
    w1 = expand_similarity(prev_model.param(kFingerprints), init.rows, layer.embed_dim());
    ctx.channel_map.push_back({ctx.stage_index, c_prev, new_classes, n1_prev, rows_new});
  } else {
    const FingerprintInit init = init_new_fingerprints(embed(features, layer), local, new_classes, 0, n1_prev, rng);
    w1.resize(c_prev + new_classes, n1_prev);
    w1.topRows(c_prev) = prev_model.param(kFingerprints);
    w1.bottomRows(new_classes) = init.rows;
    ctx.channel_map.push_back({ctx.stage_index, c_prev, new_classes, 0, n1_prev});
  }
  model.param(kEmbedWeight) = layer.W0;
  model.param(kEmbedBias) = layer.b;
  model.param(kFingerprints) = w1;
  if (model.config().head == HeadKind::Regular) model.param(kHeadBias) = padded(model.param(kHeadBias), w1.rows(), 1);
  model = Model::from_parameters(model.config(), {model.parameters().begin(), model.parameters().end()});

  const Index n1 = model.embed_dim();
  for (std::size_t k = 0; k < model.size(); ++k) {
    const Matrix& p = model.parameters()[k].value;
    ctx.masks.push_back(Matrix::Zero(p.rows(), p.cols()));
    ctx.snapshot.push_back(padded(prev_model.parameters()[k].value, p.rows(), p.cols()));
    ctx.fisher.entries.push_back(recipe.use_ewc ? padded(prev_fisher.entries[k], p.rows(), p.cols())
                                                : Matrix::Zero(p.rows(), p.cols()));
  }
  Matrix& w0_mask = ctx.masks[model.index_of(kEmbedWeight)];
  Matrix& b_mask = ctx.masks[model.index_of(kEmbedBias)];
  Matrix& w1_mask = ctx.masks[model.index_of(kFingerprints)];
  if (recipe.channel_separation) {
    w0_mask.bottomRows(n1 - n1_prev).setOnes();
    b_mask.bottomRows(n1 - n1_prev).setOnes();
    w1_mask.bottomRightCorner(new_classes, n1 - n1_prev).setOnes();
    if (recipe.train_old_fingerprints)
      for (std::size_t i = 0; i + 1 < ctx.channel_map.size(); ++i) {
        const ChannelBlock& blk = ctx.channel_map[i];
        w1_mask.block(blk.class_begin, blk.channel_begin, blk.class_count, blk.channel_count).setOnes();
      }
  } else {
    if (recipe.train_embedding) {
      w0_mask.setOnes();
      b_mask.setOnes();
    }
    w1_mask.bottomRows(new_classes).setOnes();
    if (recipe.train_old_fingerprints) w1_mask.topRows(c_prev).setOnes();
  }
  if (model.config().head == HeadKind::Regular) {
    Matrix& hb_mask = ctx.masks[model.index_of(kHeadBias)];
    hb_mask.bottomRows(new_classes).setOnes();
    if (recipe.train_old_fingerprints) hb_mask.topRows(c_prev).setOnes();
  }
  return ctx;
}

StageLog train_stage(Model& model, const StageContext& ctx, const StageData& data, const TrainOptions& opts) {
  const Index n = data.train_x.cols();
  if (n == 0) throw std::invalid_argument("train_stage: empty stage data");
  if (static_cast<Index>(data.train_y.size()) != n || static_cast<Index>(data.val_y.size()) != data.val_x.cols())
    throw ShapeError("train_stage: label count does not match sample count");
  if (ctx.masks.size() != model.size()) throw ShapeError("train_stage: mask list does not match the model");
  for (std::size_t k = 0; k < model.size(); ++k) {
    const Matrix& p = model.parameters()[k].value;
    if (ctx.masks[k].rows() != p.rows() || ctx.masks[k].cols() != p.cols())
      throw ShapeError("train_stage: mask for '" + model.parameters()[k].name + "' is " + shape_string(ctx.masks[k]) +
                       ", parameter is " + shape_string(p));
  }
  if (opts.batch_size < 1) throw std::invalid_argument("train_stage: batch_size must be >= 1");
  const ChannelBlock& block = ctx.current_block();
  auto in_stage = [&](Index y) { return y >= block.class_begin && y < block.class_begin + block.class_count; };
  for (Index y : data.train_y)
    if (!in_stage(y)) throw std::out_of_range("train_stage: label " + std::to_string(y) + " outside the stage classes");
  for (Index y : data.val_y)
    if (!in_stage(y)) throw std::out_of_range("train_stage: label " + std::to_string(y) + " outside the stage classes");
  opts.sgd.validate();

  const bool use_kd = ctx.use_kd && ctx.stage_index > 0;
  const bool use_ewc = ctx.use_ewc && ctx.stage_index > 0;
  if (use_kd && !ctx.previous) throw std::invalid_argument("train_stage: KD needs the previous-stage model");
  if (use_ewc) {
    if (ctx.fisher.entries.size() != model.size() || ctx.snapshot.size() != model.size())
      throw std::invalid_argument("train_stage: EWC needs a snapshot and Fisher estimate");
    check_fisher(ctx.fisher);
  }

  StageLog log;
  log.weights = opts.weights;
  if (opts.epochs <= 0) return log;

  const std::vector<bool> trainable = trainable_flags(ctx.masks);
  const Index old_classes = ctx.old_class_count;
  Matrix previous_scores;
  if (use_kd) previous_scores = score(*ctx.previous, data.train_x).topRows(old_classes);

  std::vector<Matrix> velocity(model.size());
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  std::mt19937_64 rng(opts.seed);

  for (Index epoch = 0; epoch < opts.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    EpochLog e;
    e.epoch = epoch;
    Index correct = 0, batches = 0;
    for (Index start = 0; start < n; start += opts.batch_size) {
      const Index q = std::min(opts.batch_size, n - start);
      const std::vector<Index> idx(order.begin() + start, order.begin() + start + q);
      std::vector<Index> y(static_cast<std::size_t>(q));
      for (Index j = 0; j < q; ++j) y[static_cast<std::size_t>(j)] = data.train_y[static_cast<std::size_t>(idx[static_cast<std::size_t>(j)])];

      ad::Graph g;
      const ForwardPass fp = build_forward(g, model, data.train_x(Eigen::all, idx), trainable);
      const ad::Var ce = ad::softmax_cross_entropy(fp.logits, y);
      ad::Var total = ad::scale(ce, opts.weights.ce);
      StepLog step;
      step.ce = g.scalar(ce);
      if (use_kd) {
        const ad::Var target = g.input(previous_scores(Eigen::all, idx), "previous responses");
        const ad::Var kd = ad::scale(ad::sum_squares(ad::slice_rows(fp.scores, 0, old_classes) - target),
                                     1.0 / static_cast<double>(q));
        step.kd = g.scalar(kd);
        total = total + ad::scale(kd, opts.weights.kd);
      }
      if (use_ewc) {
        std::optional<ad::Var> ewc;
        for (std::size_t k = 0; k < model.size(); ++k) {
          if (!trainable[k]) continue;
          const ad::Var term =
              ad::weighted_sum_squares(fp.params[k] - g.input(ctx.snapshot[k], "snapshot"), ctx.fisher.entries[k]);
          ewc = ewc ? *ewc + term : term;
        }
        if (ewc) {
          const ad::Var half = ad::scale(*ewc, 0.5);
          step.ewc = g.scalar(half);
          total = total + ad::scale(half, opts.weights.ewc);
        }
      }
      step.total = g.scalar(total);
      g.backward(total);

      for (std::size_t k = 0; k < model.size(); ++k) {
        if (!trainable[k]) continue;
        sgd_step(model.parameters()[k].value, g.grad(fp.params[k]), ctx.masks[k], velocity[k], opts.sgd);
      }

      const Matrix& logits = g.value(fp.logits);
      for (Index j = 0; j < q; ++j) {
        Index pred = 0;
        logits.col(j).maxCoeff(&pred);
        correct += pred == y[static_cast<std::size_t>(j)];
      }
      e.total += step.total;
      e.ce += step.ce;
      e.kd += step.kd;
      e.ewc += step.ewc;
      ++batches;
      log.steps.push_back(step);
    }
    e.total /= static_cast<double>(batches);
    e.ce /= static_cast<double>(batches);
    e.kd /= static_cast<double>(batches);
    e.ewc /= static_cast<double>(batches);
    e.train_accuracy = 100.0 * static_cast<double>(correct) / static_cast<double>(n);
    if (model.class_count() >= 2) e.doc = degree_of_conflict(model.param(kFingerprints));
    if (data.val_x.cols() > 0) {
      const auto pred = predict(model, data.val_x);
      Index ok = 0;
      for (std::size_t j = 0; j < pred.size(); ++j) ok += pred[j] == data.val_y[j];
      e.val_accuracy = 100.0 * static_cast<double>(ok) / static_cast<double>(pred.size());
    }
    log.epochs.push_back(e);
  }
  return log;
}

}  // namespace csil
