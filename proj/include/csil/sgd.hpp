#pragma once

#include "csil/tensor.hpp"

#include <span>
#include <vector>

namespace csil {

struct SgdConfig {
  double learning_rate = 0.01;
  double momentum = 0.9;
  double l2_factor = 0.01;

  /// Throws DomainError unless learning_rate > 0, momentum in [0,1), l2_factor >= 0.
  void validate() const;
};

/// Per-parameter {0,1} matrix; 1 = trainable, 0 = frozen.
using GradientMask = Matrix;

/// Momentum SGD with decoupled L2 weight decay. Entries whose mask is 0 are
/// never written: neither the parameter nor its velocity changes.
///
///   v <- momentum * v + g
///   w <- w - lr * (v + l2 * w)
class SgdOptimizer {
 public:
  explicit SgdOptimizer(SgdConfig cfg);

  void step(std::span<Matrix> params, std::span<const Matrix> grads, std::span<const GradientMask> masks);
  const std::vector<Matrix>& velocity() const { return velocity_; }
  const SgdConfig& config() const { return cfg_; }

 private:
  SgdConfig cfg_;
  std::vector<Matrix> velocity_;
};

/// Single update of one parameter matrix with explicit velocity state.
void sgd_step(Matrix& param, const Matrix& grad, const GradientMask& mask, Matrix& velocity, const SgdConfig& cfg);

}  // namespace csil
