#pragma once

// Zero-bias classifier head: an affine embedding layer followed by cosine
// matching against per-class fingerprints. Everything here is templated on the
// Eigen expression type so it works for float and double data alike.

#include "csil/tensor.hpp"

#include <cmath>
#include <string>

namespace csil {

/// Affine embedding layer L1: Y1 = W0 X + b.
template <typename Scalar>
struct EmbeddingLayer {
  MatrixX<Scalar> W0;  // N1 x N0
  VectorX<Scalar> b;   // N1

  Index input_dim() const { return W0.cols(); }
  Index embed_dim() const { return W0.rows(); }
};

/// Similarity matching layer L2. One row per class fingerprint; stored rows
/// may have any nonzero norm.
template <typename Scalar>
struct FingerprintMatrix {
  MatrixX<Scalar> W1;  // C x N1

  Index class_count() const { return W1.rows(); }
  Index embed_dim() const { return W1.cols(); }
};

template <typename Derived>
MatrixX<typename Derived::Scalar> unit_normalize_rows(const Eigen::MatrixBase<Derived>& m) {
  using Scalar = typename Derived::Scalar;
  MatrixX<Scalar> out(m.rows(), m.cols());
  for (Index i = 0; i < m.rows(); ++i) {
    const Scalar norm = m.row(i).norm();
    if (!(norm > Scalar(0)))
      throw DomainError("unit_normalize_rows: row " + std::to_string(i) + " has zero norm");
    out.row(i) = m.row(i) / norm;
  }
  return out;
}

template <typename Derived>
MatrixX<typename Derived::Scalar> unit_normalize_cols(const Eigen::MatrixBase<Derived>& m) {
  using Scalar = typename Derived::Scalar;
  MatrixX<Scalar> out(m.rows(), m.cols());
  for (Index j = 0; j < m.cols(); ++j) {
    const Scalar norm = m.col(j).norm();
    if (!(norm > Scalar(0)))
      throw DomainError("unit_normalize_cols: column " + std::to_string(j) + " has zero norm");
    out.col(j) = m.col(j) / norm;
  }
  return out;
}

template <typename Derived, typename Scalar>
MatrixX<Scalar> embed(const Eigen::MatrixBase<Derived>& X, const EmbeddingLayer<Scalar>& layer) {
  if (X.rows() != layer.input_dim() || layer.b.size() != layer.embed_dim())
    throw ShapeError("embed: features " + shape_string(X) + " vs W0 " +
                     shape_string(layer.W0) + ", b " + std::to_string(layer.b.size()));
  return (layer.W0 * X).colwise() + layer.b;
}

/// C x q matrix of cosines between each fingerprint and each embedded column.
template <typename Derived, typename Scalar>
MatrixX<Scalar> zerobias_forward(const Eigen::MatrixBase<Derived>& X,
                                 const EmbeddingLayer<Scalar>& layer,
                                 const FingerprintMatrix<Scalar>& fp) {
  if (fp.embed_dim() != layer.embed_dim())
    throw ShapeError("zerobias_forward: W1 " + shape_string(fp.W1) + " vs embedding width " +
                     std::to_string(layer.embed_dim()));
  const MatrixX<Scalar> Y1 = embed(X, layer);
  return unit_normalize_rows(fp.W1) * unit_normalize_cols(Y1);
}

/// Column-wise softmax of temperature * scores.
template <typename Derived>
MatrixX<typename Derived::Scalar> classify(const Eigen::MatrixBase<Derived>& scores,
                                           typename Derived::Scalar temperature) {
  using Scalar = typename Derived::Scalar;
  if (!(temperature > Scalar(0)))
    throw DomainError("classify: temperature must be positive");
  MatrixX<Scalar> z = temperature * scores;
  for (Index j = 0; j < z.cols(); ++j) {
    auto col = z.col(j);
    col.array() = (col.array() - col.maxCoeff()).exp();
    col /= col.sum();
  }
  return z;
}

/// Plain affine head used for comparison: scores = W (W0 X + b0) + bias.
template <typename Derived, typename Scalar>
MatrixX<Scalar> regular_dense_forward(const Eigen::MatrixBase<Derived>& X,
                                      const EmbeddingLayer<Scalar>& layer,
                                      const MatrixX<Scalar>& weight, const VectorX<Scalar>& bias) {
  if (weight.cols() != layer.embed_dim() || bias.size() != weight.rows())
    throw ShapeError("regular_dense_forward: weight " + shape_string(weight) + ", bias " +
                     std::to_string(bias.size()) + ", embedding width " +
                     std::to_string(layer.embed_dim()));
  return (weight * embed(X, layer)).colwise() + bias;
}

}  // namespace csil
