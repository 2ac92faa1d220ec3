#include "csil/sgd.hpp"

#include <cmath>
#include <string>

namespace csil {

void SgdConfig::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate))
    throw DomainError("SgdConfig: learning_rate must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw DomainError("SgdConfig: momentum must lie in [0, 1)");
  if (!(l2_factor >= 0.0) || !std::isfinite(l2_factor)) throw DomainError("SgdConfig: l2_factor must be >= 0");
}

void sgd_step(Matrix& param, const Matrix& grad, const GradientMask& mask, Matrix& velocity, const SgdConfig& cfg) {
  if (grad.rows() != param.rows() || grad.cols() != param.cols())
    throw ShapeError("sgd_step: gradient " + shape_string(grad) + " vs parameter " + shape_string(param));
  if (mask.rows() != param.rows() || mask.cols() != param.cols())
    throw ShapeError("sgd_step: mask " + shape_string(mask) + " vs parameter " + shape_string(param));
  if (velocity.size() == 0) velocity = Matrix::Zero(param.rows(), param.cols());
  if (velocity.rows() != param.rows() || velocity.cols() != param.cols())
    throw ShapeError("sgd_step: velocity " + shape_string(velocity) + " vs parameter " + shape_string(param));

  for (Index j = 0; j < param.cols(); ++j)
    for (Index i = 0; i < param.rows(); ++i) {
      const double m = mask(i, j);
      if (m == 0.0) continue;
      if (m != 1.0) throw DomainError("sgd_step: mask entries must be 0 or 1");
      double& v = velocity(i, j);
      double& w = param(i, j);
      v = cfg.momentum * v + grad(i, j);
      w -= cfg.learning_rate * (v + cfg.l2_factor * w);
    }
}

SgdOptimizer::SgdOptimizer(SgdConfig cfg) : cfg_(cfg) { cfg_.validate(); }

void SgdOptimizer::step(std::span<Matrix> params, std::span<const Matrix> grads, std::span<const GradientMask> masks) {
  if (grads.size() != params.size() || masks.size() != params.size())
    throw ShapeError("SgdOptimizer::step: " + std::to_string(params.size()) + " parameters, " +
                     std::to_string(grads.size()) + " gradients, " + std::to_string(masks.size()) + " masks");
  velocity_.resize(params.size());
  for (std::size_t k = 0; k < params.size(); ++k) {
    // Parameters can grow between stages; carry the old velocity into the top-left block.
    Matrix& v = velocity_[k];
    if (v.size() != 0 && (v.rows() != params[k].rows() || v.cols() != params[k].cols())) {
      Matrix grown = Matrix::Zero(params[k].rows(), params[k].cols());
      const Index r = std::min(v.rows(), grown.rows()), c = std::min(v.cols(), grown.cols());
      grown.topLeftCorner(r, c) = v.topLeftCorner(r, c);
      v = std::move(grown);
    }
    sgd_step(params[k], grads[k], masks[k], v, cfg_);
  }
}

}  // namespace csil
