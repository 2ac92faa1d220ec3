#include "csil/autodiff.hpp"

#include "csil/zerobias.hpp"

#include <cmath>
#include <limits>
#include <utility>

namespace csil::ad {

Graph::Node& Graph::node(Var v) {
  if (v.graph != this || v.id >= nodes_.size()) throw std::out_of_range("Var does not belong to this graph");
  return nodes_[v.id];
}

const Graph::Node& Graph::node(Var v) const {
  if (v.graph != this || v.id >= nodes_.size()) throw std::out_of_range("Var does not belong to this graph");
  return nodes_[v.id];
}

Var Graph::input(Matrix value, std::string label) {
  nodes_.push_back(Node{"input", std::move(label), std::move(value), {}, false, {}});
  return Var{this, nodes_.size() - 1};
}

Var Graph::parameter(Matrix value, std::string label, bool requires_grad) {
  nodes_.push_back(Node{"parameter", std::move(label), std::move(value), {}, requires_grad, {}});
  return Var{this, nodes_.size() - 1};
}

const Matrix& Graph::value(Var v) const { return node(v).value; }

double Graph::scalar(Var v) const {
  const Matrix& m = value(v);
  if (m.size() != 1) throw ShapeError(describe(v) + " is not a scalar (" + shape_string(m) + ")");
  return m(0, 0);
}

Matrix Graph::grad(Var v) const {
  const Node& n = node(v);
  if (n.grad.size() == 0) return Matrix::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

bool Graph::requires_grad(Var v) const { return node(v).requires_grad; }

const std::string& Graph::label(Var v) const { return node(v).label; }

std::string Graph::describe(Var v) const {
  const Node& n = node(v);
  std::string s = n.op + " (node " + std::to_string(v.id);
  if (!n.label.empty() && n.label != n.op) s += " '" + n.label + "'";
  return s + ")";
}

Var Graph::record(std::string op, Matrix value, std::vector<Var> parents, BackwardFn backward) {
  bool needs = false;
  for (Var p : parents) needs = needs || node(p).requires_grad;
  std::string label = op;
  nodes_.push_back(Node{std::move(op), std::move(label), std::move(value), {}, needs,
                        needs ? std::move(backward) : BackwardFn{}});
  return Var{this, nodes_.size() - 1};
}

void Graph::backward(Var loss) {
  Node& root = node(loss);
  if (root.value.size() != 1)
    throw ShapeError("backward: loss " + describe(loss) + " is " + shape_string(root.value) +
                     ", expected a scalar");
  for (Node& n : nodes_) n.grad.resize(0, 0);
  if (!root.requires_grad) return;
  root.grad = Matrix::Ones(1, 1);
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.backward || n.grad.size() == 0) continue;
    // Callbacks only accumulate into parents (lower ids), never into n.
    n.backward(*this, n.grad);
  }
}

namespace {

Graph& graph_of(Var a, Var b) {
  if (a.graph == nullptr || a.graph != b.graph) throw std::invalid_argument("operands belong to different graphs");
  return *a.graph;
}

Graph& graph_of(Var a) {
  if (a.graph == nullptr) throw std::invalid_argument("operand has no graph");
  return *a.graph;
}

[[noreturn]] void shape_mismatch(const Graph& g, const std::string& op, Var a, Var b) {
  throw ShapeError(op + ": " + g.describe(a) + " is " + shape_string(g.value(a)) + " but " +
                   g.describe(b) + " is " + shape_string(g.value(b)));
}

}  // namespace

Var matmul(Var a, Var b) {
  Graph& g = graph_of(a, b);
  const Matrix& A = g.value(a);
  const Matrix& B = g.value(b);
  if (A.cols() != B.rows()) shape_mismatch(g, "matmul", a, b);
  return g.record("matmul", A * B, {a, b}, [a, b](Graph& gr, const Matrix& up) {
    if (gr.requires_grad(a)) gr.accumulate(a, up * gr.value(b).transpose());
    if (gr.requires_grad(b)) gr.accumulate(b, gr.value(a).transpose() * up);
  });
}

Var add(Var a, Var b) {
  Graph& g = graph_of(a, b);
  if (g.value(a).rows() != g.value(b).rows() || g.value(a).cols() != g.value(b).cols())
    shape_mismatch(g, "add", a, b);
  return g.record("add", g.value(a) + g.value(b), {a, b}, [a, b](Graph& gr, const Matrix& up) {
    gr.accumulate(a, up);
    gr.accumulate(b, up);
  });
}

Var sub(Var a, Var b) {
  Graph& g = graph_of(a, b);
  if (g.value(a).rows() != g.value(b).rows() || g.value(a).cols() != g.value(b).cols())
    shape_mismatch(g, "sub", a, b);
  return g.record("sub", g.value(a) - g.value(b), {a, b}, [a, b](Graph& gr, const Matrix& up) {
    gr.accumulate(a, up);
    gr.accumulate(b, -up);
  });
}

Var add_bias(Var a, Var bias) {
  Graph& g = graph_of(a, bias);
  const Matrix& A = g.value(a);
  const Matrix& B = g.value(bias);
  if (B.cols() != 1 || B.rows() != A.rows()) shape_mismatch(g, "add_bias", a, bias);
  return g.record("add_bias", A.colwise() + B.col(0), {a, bias}, [a, bias](Graph& gr, const Matrix& up) {
    gr.accumulate(a, up);
    if (gr.requires_grad(bias)) gr.accumulate(bias, up.rowwise().sum());
  });
}

Var scale(Var a, double factor) {
  Graph& g = graph_of(a);
  return g.record("scale", factor * g.value(a), {a}, [a, factor](Graph& gr, const Matrix& up) {
    gr.accumulate(a, factor * up);
  });
}

Var relu(Var a) {
  Graph& g = graph_of(a);
  return g.record("relu", g.value(a).cwiseMax(0.0), {a}, [a](Graph& gr, const Matrix& up) {
    gr.accumulate(a, (gr.value(a).array() > 0.0).select(up, 0.0));
  });
}

ImageShape conv2d_output_shape(const ImageShape& in, Index kernel_size, Index out_channels) {
  if (kernel_size < 1 || in.height < kernel_size || in.width < kernel_size)
    throw ShapeError("conv2d: kernel " + std::to_string(kernel_size) + " does not fit image " +
                     shape_string(in.height, in.width));
  return {in.height - kernel_size + 1, in.width - kernel_size + 1, out_channels};
}

namespace {

// Patch matrix for one image column: (k*k*C) x (Ho*Wo), patch order (dy, dx, c).
Matrix im2col(const Eigen::Ref<const Vector>& image, const ImageShape& in, Index k, const ImageShape& out) {
  Matrix patches(k * k * in.channels, out.height * out.width);
  for (Index oy = 0; oy < out.height; ++oy)
    for (Index ox = 0; ox < out.width; ++ox) {
      const Index col = oy * out.width + ox;
      Index row = 0;
      for (Index dy = 0; dy < k; ++dy)
        for (Index dx = 0; dx < k; ++dx) {
          patches.col(col).segment(row, in.channels) =
              image.segment(in.offset(oy + dy, ox + dx, 0), in.channels);
          row += in.channels;
        }
    }
  return patches;
}

void col2im_add(const Matrix& patches, const ImageShape& in, Index k, const ImageShape& out,
                Eigen::Ref<Vector> image) {
  for (Index oy = 0; oy < out.height; ++oy)
    for (Index ox = 0; ox < out.width; ++ox) {
      const Index col = oy * out.width + ox;
      Index row = 0;
      for (Index dy = 0; dy < k; ++dy)
        for (Index dx = 0; dx < k; ++dx) {
          image.segment(in.offset(oy + dy, ox + dx, 0), in.channels) +=
              patches.col(col).segment(row, in.channels);
          row += in.channels;
        }
    }
}

}  // namespace

Var conv2d(Var x, Var kernel, Var bias, const ImageShape& in, Index kernel_size) {
  Graph& g = graph_of(x, kernel);
  graph_of(x, bias);
  const Matrix& X = g.value(x);
  const Matrix& K = g.value(kernel);
  const Matrix& B = g.value(bias);
  if (X.rows() != in.size()) throw ShapeError("conv2d: " + g.describe(x) + " rows " + std::to_string(X.rows()) +
                                              " do not match image size " + std::to_string(in.size()));
  if (K.cols() != kernel_size * kernel_size * in.channels)
    throw ShapeError("conv2d: " + g.describe(kernel) + " is " + shape_string(K) + ", expected " +
                     std::to_string(kernel_size * kernel_size * in.channels) + " columns");
  if (B.rows() != K.rows() || B.cols() != 1) shape_mismatch(g, "conv2d bias", kernel, bias);
  const ImageShape out = conv2d_output_shape(in, kernel_size, K.rows());

  Matrix Y(out.size(), X.cols());
  for (Index j = 0; j < X.cols(); ++j) {
    const Matrix response = (K * im2col(X.col(j), in, kernel_size, out)).colwise() + B.col(0);
    // response is Cout x (Ho*Wo); column-major storage is exactly HWC order.
    Y.col(j) = Eigen::Map<const Vector>(response.data(), response.size());
  }
  return g.record("conv2d", std::move(Y), {x, kernel, bias},
                  [x, kernel, bias, in, kernel_size, out](Graph& gr, const Matrix& up) {
                    const Matrix& Xv = gr.value(x);
                    const Matrix& Kv = gr.value(kernel);
                    Matrix dK = Matrix::Zero(Kv.rows(), Kv.cols());
                    Vector dB = Vector::Zero(Kv.rows());
                    Matrix dX = Matrix::Zero(Xv.rows(), Xv.cols());
                    for (Index j = 0; j < Xv.cols(); ++j) {
                      const Eigen::Map<const Matrix> dR(up.col(j).data(), out.channels, out.height * out.width);
                      if (gr.requires_grad(kernel)) dK += dR * im2col(Xv.col(j), in, kernel_size, out).transpose();
                      dB += dR.rowwise().sum();
                      if (gr.requires_grad(x)) col2im_add(Kv.transpose() * dR, in, kernel_size, out, dX.col(j));
                    }
                    gr.accumulate(kernel, dK);
                    gr.accumulate(bias, dB);
                    gr.accumulate(x, dX);
                  });
}

ImageShape max_pool2_output_shape(const ImageShape& in) {
  if (in.height < 2 || in.width < 2) throw ShapeError("max_pool2: image smaller than 2x2");
  return {in.height / 2, in.width / 2, in.channels};
}

Var max_pool2(Var x, const ImageShape& in) {
  Graph& g = graph_of(x);
  const Matrix& X = g.value(x);
  if (X.rows() != in.size())
    throw ShapeError("max_pool2: " + g.describe(x) + " rows " + std::to_string(X.rows()) +
                     " do not match image size " + std::to_string(in.size()));
  const ImageShape out = max_pool2_output_shape(in);
  Matrix Y(out.size(), X.cols());
  Eigen::Matrix<Index, Eigen::Dynamic, Eigen::Dynamic> argmax(out.size(), X.cols());
  for (Index j = 0; j < X.cols(); ++j)
    for (Index oy = 0; oy < out.height; ++oy)
      for (Index ox = 0; ox < out.width; ++ox)
        for (Index c = 0; c < in.channels; ++c) {
          Index best = in.offset(2 * oy, 2 * ox, c);
          for (Index dy = 0; dy < 2; ++dy)
            for (Index dx = 0; dx < 2; ++dx) {
              const Index idx = in.offset(2 * oy + dy, 2 * ox + dx, c);
              if (X(idx, j) > X(best, j)) best = idx;
            }
          const Index o = out.offset(oy, ox, c);
          Y(o, j) = X(best, j);
          argmax(o, j) = best;
        }
  return g.record("max_pool2", std::move(Y), {x}, [x, argmax](Graph& gr, const Matrix& up) {
    Matrix dX = Matrix::Zero(gr.value(x).rows(), gr.value(x).cols());
    for (Index j = 0; j < up.cols(); ++j)
      for (Index o = 0; o < up.rows(); ++o) dX(argmax(o, j), j) += up(o, j);
    gr.accumulate(x, dX);
  });
}

Var flatten(Var x) {
  Graph& g = graph_of(x);
  return g.record("flatten", g.value(x), {x}, [x](Graph& gr, const Matrix& up) { gr.accumulate(x, up); });
}

Var normalize_rows(Var a) {
  Graph& g = graph_of(a);
  Matrix Y;
  try {
    Y = unit_normalize_rows(g.value(a));
  } catch (const DomainError& e) {
    throw DomainError(g.describe(a) + ": " + e.what());
  }
  return g.record("normalize_rows", std::move(Y), {a}, [a](Graph& gr, const Matrix& up) {
    const Matrix& A = gr.value(a);
    const Vector norms = A.rowwise().norm();
    const Matrix Yv = norms.cwiseInverse().asDiagonal() * A;
    const Vector dots = (Yv.cwiseProduct(up)).rowwise().sum();
    gr.accumulate(a, norms.cwiseInverse().asDiagonal() * (up - dots.asDiagonal() * Yv));
  });
}

Var normalize_cols(Var a) {
  Graph& g = graph_of(a);
  Matrix Y;
  try {
    Y = unit_normalize_cols(g.value(a));
  } catch (const DomainError& e) {
    throw DomainError(g.describe(a) + ": " + e.what());
  }
  return g.record("normalize_cols", std::move(Y), {a}, [a](Graph& gr, const Matrix& up) {
    const Matrix& A = gr.value(a);
    const Eigen::RowVectorXd inv = A.colwise().norm().cwiseInverse();
    const Matrix Yv = A * inv.asDiagonal();
    const Eigen::RowVectorXd dots = Yv.cwiseProduct(up).colwise().sum();
    gr.accumulate(a, (up - Yv * dots.asDiagonal()) * inv.asDiagonal());
  });
}

namespace {

Matrix column_softmax(const Matrix& z) {
  Matrix p = z;
  for (Index j = 0; j < p.cols(); ++j) {
    auto col = p.col(j);
    col.array() = (col.array() - col.maxCoeff()).exp();
    col /= col.sum();
  }
  return p;
}

}  // namespace

Var softmax(Var logits) {
  Graph& g = graph_of(logits);
  Matrix P = column_softmax(g.value(logits));
  return g.record("softmax", P, {logits}, [logits, P](Graph& gr, const Matrix& up) {
    const Eigen::RowVectorXd dots = P.cwiseProduct(up).colwise().sum();
    gr.accumulate(logits, P.cwiseProduct(up - Matrix::Ones(up.rows(), 1) * dots));
  });
}

Var softmax_cross_entropy(Var logits, std::span<const Index> labels) {
  Graph& g = graph_of(logits);
  const Matrix& Z = g.value(logits);
  if (static_cast<Index>(labels.size()) != Z.cols())
    throw ShapeError("softmax_cross_entropy: " + g.describe(logits) + " has " + std::to_string(Z.cols()) +
                     " columns but " + std::to_string(labels.size()) + " labels");
  if (Z.cols() == 0) throw ShapeError("softmax_cross_entropy: empty batch");
  std::vector<Index> y(labels.begin(), labels.end());
  double loss = 0.0;
  for (Index j = 0; j < Z.cols(); ++j) {
    if (y[j] < 0 || y[j] >= Z.rows())
      throw std::out_of_range("softmax_cross_entropy: label " + std::to_string(y[j]) + " outside [0, " +
                              std::to_string(Z.rows()) + ")");
    const double m = Z.col(j).maxCoeff();
    const double lse = m + std::log((Z.col(j).array() - m).exp().sum());
    loss += lse - Z(y[j], j);
  }
  const double q = static_cast<double>(Z.cols());
  return g.record("softmax_cross_entropy", Matrix::Constant(1, 1, loss / q), {logits},
                  [logits, y = std::move(y), q](Graph& gr, const Matrix& up) {
                    Matrix d = column_softmax(gr.value(logits));
                    for (Index j = 0; j < d.cols(); ++j) d(y[j], j) -= 1.0;
                    gr.accumulate(logits, (up(0, 0) / q) * d);
                  });
}

Var sum_squares(Var a) {
  Graph& g = graph_of(a);
  return g.record("sum_squares", Matrix::Constant(1, 1, g.value(a).squaredNorm()), {a},
                  [a](Graph& gr, const Matrix& up) { gr.accumulate(a, (2.0 * up(0, 0)) * gr.value(a)); });
}

Var weighted_sum_squares(Var a, const Matrix& weights) {
  Graph& g = graph_of(a);
  const Matrix& A = g.value(a);
  if (weights.rows() != A.rows() || weights.cols() != A.cols())
    throw ShapeError("weighted_sum_squares: " + g.describe(a) + " is " + shape_string(A) + " but weights are " +
                     shape_string(weights));
  const double s = (weights.array() * A.array().square()).sum();
  return g.record("weighted_sum_squares", Matrix::Constant(1, 1, s), {a},
                  [a, weights](Graph& gr, const Matrix& up) {
                    gr.accumulate(a, (2.0 * up(0, 0)) * weights.cwiseProduct(gr.value(a)));
                  });
}

Var slice_rows(Var a, Index begin, Index count) {
  Graph& g = graph_of(a);
  const Matrix& A = g.value(a);
  if (begin < 0 || count < 0 || begin + count > A.rows())
    throw ShapeError("slice_rows: rows [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                     ") outside " + g.describe(a) + " with " + std::to_string(A.rows()) + " rows");
  return g.record("slice_rows", A.middleRows(begin, count), {a}, [a, begin, count](Graph& gr, const Matrix& up) {
    Matrix d = Matrix::Zero(gr.value(a).rows(), gr.value(a).cols());
    d.middleRows(begin, count) = up;
    gr.accumulate(a, d);
  });
}

}  // namespace csil::ad
