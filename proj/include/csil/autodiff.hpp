#pragma once

// Reverse-mode differentiation over a dynamically recorded graph. Nodes are
// appended in evaluation order, so creation order is a topological order and
// backward() walks it in reverse exactly once.

#include "csil/tensor.hpp"

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace csil::ad {

class Graph;

/// Handle to a node of a Graph. Cheap to copy; only valid while its graph lives.
struct Var {
  Graph* graph = nullptr;
  std::size_t id = 0;
};

class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Constant leaf (data, targets, frozen snapshots). Never receives a gradient.
  Var input(Matrix value, std::string label = "input");
  /// Differentiable leaf. With requires_grad = false it behaves like input().
  Var parameter(Matrix value, std::string label, bool requires_grad = true);

  const Matrix& value(Var v) const;
  double scalar(Var v) const;
  /// Gradient accumulated by the last backward(); zeros if the node was not reached.
  Matrix grad(Var v) const;
  bool requires_grad(Var v) const;
  const std::string& label(Var v) const;
  std::size_t size() const { return nodes_.size(); }

  /// Back-propagates from a 1x1 loss node. Throws ShapeError for non-scalar losses.
  void backward(Var loss);

  // Used by op implementations.
  using BackwardFn = std::function<void(Graph&, const Matrix& upstream)>;
  Var record(std::string op, Matrix value, std::vector<Var> parents, BackwardFn backward);
  template <typename Expr>
  void accumulate(Var v, const Expr& g) {
    Node& n = nodes_[v.id];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0)
      n.grad = g;
    else
      n.grad += g;
  }
  std::string describe(Var v) const;

 private:
  struct Node {
    std::string op;
    std::string label;
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    BackwardFn backward;
  };
  Node& node(Var v);
  const Node& node(Var v) const;

  std::vector<Node> nodes_;
};

// -- Primitive set ----------------------------------------------------------

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
/// Adds a column vector to every column of a.
Var add_bias(Var a, Var bias);
Var scale(Var a, double factor);
Var relu(Var a);

/// Valid (no padding), stride-1 convolution. Input columns are images laid out
/// per `in`; kernel is out_channels x (k*k*in.channels) with patch order
/// (dy, dx, channel); bias is out_channels x 1.
Var conv2d(Var x, Var kernel, Var bias, const ImageShape& in, Index kernel_size);
ImageShape conv2d_output_shape(const ImageShape& in, Index kernel_size, Index out_channels);
/// 2x2 max-pooling with stride 2 (trailing odd row/column dropped).
Var max_pool2(Var x, const ImageShape& in);
ImageShape max_pool2_output_shape(const ImageShape& in);
/// Image columns are already flat; recorded as an explicit node for clarity.
Var flatten(Var x);

Var normalize_rows(Var a);
Var normalize_cols(Var a);
/// Column-wise softmax.
Var softmax(Var logits);
/// Mean over columns of -log softmax(logits)[label]; labels index rows.
Var softmax_cross_entropy(Var logits, std::span<const Index> labels);
/// Sum of squared entries (1x1).
Var sum_squares(Var a);
/// Sum of weights .* a.^2 (1x1); weights is a constant of a's shape.
Var weighted_sum_squares(Var a, const Matrix& weights);
Var slice_rows(Var a, Index begin, Index count);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(double s, Var a) { return scale(a, s); }

}  // namespace csil::ad
