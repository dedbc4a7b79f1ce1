#pragma once

// Tape-based reverse-mode differentiation over dense double matrices.
//
// A Graph records every operation applied to its Vars. Calling backward() on a
// scalar Var walks the tape in reverse and accumulates gradients into every
// node that depends on a trainable Parameter. Parameters are never mutated by
// the graph; their gradients are read back with Graph::gradients().

#include <Eigen/Dense>

#include <cstddef>
#include <functional>
#include <string>
#include <utility>
#include <vector>

namespace despos {

using Mat = Eigen::MatrixXd;
using RowVec = Eigen::RowVectorXd;

/// A named trainable (or frozen) weight matrix.
struct Parameter {
  std::string name;
  Mat value;
  bool frozen = false;
};

class Graph;

/// Handle to a node of a Graph. Cheap to copy.
struct Var {
  Graph* graph = nullptr;
  int id = -1;

  const Mat& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }
};

class Graph {
 public:
  Graph() { nodes_.reserve(256); }
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Leaf that never receives a gradient.
  Var constant(Mat value);
  /// Leaf bound to a parameter. Frozen parameters behave like constants.
  /// The leaf reads the parameter's storage, which must outlive the graph and
  /// stay unchanged while it is in use.
  Var param(const Parameter& p);
  /// Free leaf that receives a gradient; read it back with grad().
  Var input(Mat value);
  /// Accumulated gradient of a node after backward(); zeros if untouched.
  Mat grad(Var v) const;

  /// Seeds d(loss)/d(loss) = 1 and propagates. `loss` must be 1x1.
  void backward(Var loss);

  /// Gradients of every non-frozen parameter touched by the graph, in the
  /// order the parameters were first bound.
  std::vector<std::pair<const Parameter*, Mat>> gradients() const;
  /// Same traversal without copies; `grad` is null for untouched parameters.
  void visit_gradients(const std::function<void(const Parameter*, const Mat* grad)>& fn) const;

  const Mat& value(int id) const { return nodes_[id].val(); }
  std::size_t size() const { return nodes_.size(); }

  // Internal API used by the op implementations.
  struct Node {
    Mat value;
    const Mat* ref = nullptr;  // set for parameter leaves instead of `value`
    Mat grad;
    bool needs_grad = false;
    std::function<void(Graph&, int)> backward;
    const Mat& val() const { return ref ? *ref : value; }
  };
  int push(Mat value, bool needs_grad, std::function<void(Graph&, int)> back);
  Node& node(int id) { return nodes_[id]; }
  bool needs_grad(int id) const { return nodes_[id].needs_grad; }
  /// grad(id) += g, allocating on first use. No-op if id needs no gradient.
  template <typename Derived>
  void accumulate(int id, const Eigen::MatrixBase<Derived>& g) {
    Node& n = nodes_[id];
    if (!n.needs_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad.noalias() += g;
    }
  }
  /// Gradient buffer of a node, zero-initialized on first use.
  Mat& grad_buffer(int id) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0) n.grad = Mat::Zero(n.val().rows(), n.val().cols());
    return n.grad;
  }

 private:
  std::vector<Node> nodes_;
  std::vector<std::pair<const Parameter*, int>> bound_;
};

// ---- element-wise and linear algebra -------------------------------------

Var matmul(Var a, Var b);
/// a * b^T
Var matmul_nt(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
/// Adds a 1 x n row to every row of `a`.
Var add_row(Var a, Var row);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var transpose(Var a);

Var relu(Var a);
Var sigmoid(Var a);
Var tanh(Var a);

/// Row-wise softmax.
Var softmax_rows(Var a);
/// Row-wise log-softmax.
Var log_softmax_rows(Var a);

// ---- shape ----------------------------------------------------------------

Var concat_cols(const std::vector<Var>& parts);
Var concat_rows(const std::vector<Var>& parts);
Var slice_rows(Var a, Eigen::Index start, Eigen::Index count);
Var slice_cols(Var a, Eigen::Index start, Eigen::Index count);
/// Repeats a 1 x n row `rows` times.
Var broadcast_rows(Var row, Eigen::Index rows);
/// Row i of the result is row (i - offset) of `a`, or zero when out of range.
Var shift_rows(Var a, Eigen::Index offset);
/// Gathers the listed rows (duplicates allowed).
Var gather_rows(Var a, const std::vector<Eigen::Index>& rows);

// ---- reductions -----------------------------------------------------------

/// Column-wise maximum over rows, 1 x n. Ties resolve to the first row.
Var max_rows(Var a);
/// Column-wise mean over rows, 1 x n.
Var mean_rows(Var a);
Var sum(Var a);
Var mean(Var a);
/// Sum of the main diagonal of a square matrix, 1 x 1.
Var trace(Var a);
/// Euclidean norm of all entries, 1 x 1.
Var l2_norm(Var a);
/// Divides a 1 x n row by its Euclidean norm.
Var l2_normalize(Var row);

// ---- composite ------------------------------------------------------------

/// Per-row layer normalization followed by gain and bias (both 1 x n).
Var layer_norm(Var a, Var gain, Var bias, double eps = 1e-5);

}  // namespace despos
