#pragma once

// Small Gaussian-cluster problems for the stage tests: fast enough to train
// in milliseconds, separable enough that accuracy oracles are meaningful.

#include "csil/csil_learner.hpp"
#include "csil/model.hpp"

#include <random>
#include <vector>

namespace csil::testing {

inline ModelConfig toy_config() {
  ModelConfig cfg;
  cfg.extractor = ExtractorKind::Mlp;
  cfg.input = {4, 4, 1};
  cfg.mlp_hidden = 12;
  cfg.mlp_features = 8;
  return cfg;
}

/// Labelled samples of classes [first, first + count); one column per sample.
struct ToySet {
  Matrix x;
  std::vector<Index> y;
};

class ToyProblem {
 public:
  ToyProblem(Index classes, Index dim, std::uint64_t seed, double spread = 0.4) : spread_(spread), rng_(seed) {
    std::normal_distribution<double> g(0.0, 1.0);
    centres_ = Matrix(dim, classes);
    for (Index i = 0; i < centres_.size(); ++i) centres_(i) = 2.0 * g(rng_);
  }

  ToySet sample(Index first, Index count, Index per_class) {
    std::normal_distribution<double> g(0.0, spread_);
    ToySet s;
    s.x.resize(centres_.rows(), count * per_class);
    for (Index c = 0; c < count; ++c)
      for (Index i = 0; i < per_class; ++i) {
        const Index col = c * per_class + i;
        for (Index r = 0; r < centres_.rows(); ++r) s.x(r, col) = centres_(r, first + c) + g(rng_);
        s.y.push_back(first + c);
      }
    return s;
  }

  StageData stage(Index first, Index count, Index train_per_class, Index val_per_class) {
    ToySet tr = sample(first, count, train_per_class), va = sample(first, count, val_per_class);
    return {std::move(tr.x), std::move(tr.y), std::move(va.x), std::move(va.y)};
  }

 private:
  double spread_;
  std::mt19937_64 rng_;
  Matrix centres_;
};

inline TrainOptions quick_options(Index epochs, std::uint64_t seed = 5) {
  TrainOptions o;
  o.epochs = epochs;
  o.batch_size = 16;
  o.seed = seed;
  return o;
}

}  // namespace csil::testing
