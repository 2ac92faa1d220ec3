#pragma once

// Topology diagnostics over fingerprint matrices. "Degree of Conflict" (DoC)
// is the sum of pairwise cosine similarities between class fingerprints. At a
// converged zero-bias model the unit fingerprints sum to the zero vector,
// which pins DoC at -C/2.

#include "csil/tensor.hpp"
#include "csil/zerobias.hpp"

#include <string>

namespace csil {

/// S(i,j) = unit(f_i) . unit(f_j). Symmetric with unit diagonal.
template <typename Derived>
MatrixX<typename Derived::Scalar> similarity_matrix(const Eigen::MatrixBase<Derived>& fingerprints) {
  const auto unit = unit_normalize_rows(fingerprints);
  MatrixX<typename Derived::Scalar> s = unit * unit.transpose();
  // Pin the exact structure the products can only approximate.
  for (Index i = 0; i < s.rows(); ++i) {
    s(i, i) = 1;
    for (Index j = 0; j < i; ++j) s(i, j) = s(j, i);
  }
  return s;
}

template <typename Derived>
typename Derived::Scalar degree_of_conflict(const Eigen::MatrixBase<Derived>& fingerprints) {
  if (fingerprints.rows() < 2)
    throw DomainError("degree_of_conflict: needs at least 2 fingerprints, got " +
                      std::to_string(fingerprints.rows()));
  const auto s = similarity_matrix(fingerprints);
  typename Derived::Scalar total = 0;
  for (Index i = 0; i < s.rows(); ++i)
    for (Index j = i + 1; j < s.cols(); ++j) total += s(i, j);
  return total;
}

template <typename Scalar>
Scalar degree_of_conflict(const FingerprintMatrix<Scalar>& fp) {
  return degree_of_conflict(fp.W1);
}

/// Lowest attainable DoC for C classes.
inline double optimal_doc(Index class_count) {
  if (class_count < 2) throw DomainError("optimal_doc: class count must be >= 2");
  return -static_cast<double>(class_count) / 2.0;
}

/// Mean pairwise similarity at the optimum: -1/(C-1).
inline double mean_pairwise_similarity(Index class_count) {
  if (class_count < 2) throw DomainError("mean_pairwise_similarity: class count must be >= 2");
  return -1.0 / static_cast<double>(class_count - 1);
}

/// Mean of the strict upper triangle of the similarity matrix.
template <typename Derived>
typename Derived::Scalar mean_similarity(const Eigen::MatrixBase<Derived>& fingerprints) {
  const auto c = static_cast<typename Derived::Scalar>(fingerprints.rows());
  return degree_of_conflict(fingerprints) / (c * (c - 1) / 2);
}

}  // namespace csil
