#include "despos/autodiff.hpp"

#include <cassert>
#include <cmath>
#include <stdexcept>

namespace despos {

const Mat& Var::value() const { return graph->value(id); }

int Graph::push(Mat value, bool needs_grad, std::function<void(Graph&, int)> back) {
  Node n;
  n.value = std::move(value);
  n.needs_grad = needs_grad;
  if (needs_grad) n.backward = std::move(back);
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

Var Graph::constant(Mat value) { return {this, push(std::move(value), false, nullptr)}; }

Var Graph::param(const Parameter& p) {
  for (const auto& [bound, id] : bound_) {
    if (bound == &p) return {this, id};
  }
  int id = push(Mat(), !p.frozen, nullptr);
  nodes_[id].ref = &p.value;
  // Frozen parameters are bound too, so repeated uses share one leaf, but
  // they never report a gradient.
  bound_.emplace_back(&p, id);
  return {this, id};
}

Var Graph::input(Mat value) { return {this, push(std::move(value), true, nullptr)}; }

Mat Graph::grad(Var v) const {
  const Node& n = nodes_[v.id];
  if (n.grad.size() == 0) return Mat::Zero(n.val().rows(), n.val().cols());
  return n.grad;
}

void Graph::backward(Var loss) {
  if (loss.rows() != 1 || loss.cols() != 1) {
    throw std::invalid_argument("backward: loss must be a 1x1 matrix");
  }
  if (!nodes_[loss.id].needs_grad) return;
  nodes_[loss.id].grad = Mat::Ones(1, 1);
  for (int i = loss.id; i >= 0; --i) {
    Node& n = nodes_[i];
    if (!n.needs_grad || n.grad.size() == 0 || !n.backward) continue;
    n.backward(*this, i);
  }
}

std::vector<std::pair<const Parameter*, Mat>> Graph::gradients() const {
  std::vector<std::pair<const Parameter*, Mat>> out;
  out.reserve(bound_.size());
  visit_gradients([&](const Parameter* p, const Mat* grad) {
    out.emplace_back(p, grad ? *grad : Mat::Zero(p->value.rows(), p->value.cols()));
  });
  return out;
}

void Graph::visit_gradients(const std::function<void(const Parameter*, const Mat*)>& fn) const {
  for (const auto& [p, id] : bound_) {
    const Node& n = nodes_[id];
    if (!n.needs_grad) continue;
    fn(p, n.grad.size() == 0 ? nullptr : &n.grad);
  }
}

namespace {

void check_same_graph(Var a, Var b) {
  if (a.graph != b.graph) throw std::logic_error("vars belong to different graphs");
}

void check_same_shape(Var a, Var b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
  }
}

}  // namespace

Var matmul(Var a, Var b) {
  check_same_graph(a, b);
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimension mismatch");
  Graph& g = *a.graph;
  bool ng = g.needs_grad(a.id) || g.needs_grad(b.id);
  int ia = a.id, ib = b.id;
  Mat v = a.value() * b.value();
  return {&g, g.push(std::move(v), ng, [ia, ib](Graph& g, int self) {
            const Mat& go = g.node(self).grad;
            if (g.needs_grad(ia)) g.accumulate(ia, go * g.value(ib).transpose());
            if (g.needs_grad(ib)) g.accumulate(ib, g.value(ia).transpose() * go);
          })};
}

Var matmul_nt(Var a, Var b) {
  check_same_graph(a, b);
  if (a.cols() != b.cols()) throw std::invalid_argument("matmul_nt: inner dimension mismatch");
  Graph& g = *a.graph;
  bool ng = g.needs_grad(a.id) || g.needs_grad(b.id);
  int ia = a.id, ib = b.id;
  Mat v = a.value() * b.value().transpose();
  return {&g, g.push(std::move(v), ng, [ia, ib](Graph& g, int self) {
            const Mat& go = g.node(self).grad;
            if (g.needs_grad(ia)) g.accumulate(ia, go * g.value(ib));
            if (g.needs_grad(ib)) g.accumulate(ib, go.transpose() * g.value(ia));
          })};
}

Var add(Var a, Var b) {
  check_same_graph(a, b);
  check_same_shape(a, b, "add");
  Graph& g = *a.graph;
  bool ng = g.needs_grad(a.id) || g.needs_grad(b.id);
  int ia = a.id, ib = b.id;
  Mat v = a.value() + b.value();
  return {&g, g.push(std::move(v), ng, [ia, ib](Graph& g, int self) {
            const Mat go = g.node(self).grad;
            g.accumulate(ia, go);
            g.accumulate(ib, go);
          })};
}

Var sub(Var a, Var b) {
  check_same_graph(a, b);
  check_same_shape(a, b, "sub");
  Graph& g = *a.graph;
  bool ng = g.needs_grad(a.id) || g.needs_grad(b.id);
  int ia = a.id, ib = b.id;
  Mat v = a.value() - b.value();
  return {&g, g.push(std::move(v), ng, [ia, ib](Graph& g, int self) {
            const Mat go = g.node(self).grad;
            g.accumulate(ia, go);
            g.accumulate(ib, -go);
          })};
}

Var add_row(Var a, Var row) {
  check_same_graph(a, row);
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw std::invalid_argument("add_row: bias must be 1 x cols");
  }
  Graph& g = *a.graph;
  bool ng = g.needs_grad(a.id) || g.needs_grad(row.id);
  int ia = a.id, ib = row.id;
  Mat v = a.value().rowwise() + row.value().row(0);
  return {&g, g.push(std::move(v), ng, [ia, ib](Graph& g, int self) {
            const Mat go = g.node(self).grad;
            g.accumulate(ia, go);
            if (g.needs_grad(ib)) g.accumulate(ib, go.colwise().sum());
          })};
}

Var mul(Var a, Var b) {
  check_same_graph(a, b);
  check_same_shape(a, b, "mul");
  Graph& g = *a.graph;
  bool ng = g.needs_grad(a.id) || g.needs_grad(b.id);
  int ia = a.id, ib = b.id;
  Mat v = a.value().cwiseProduct(b.value());
  return {&g, g.push(std::move(v), ng, [ia, ib](Graph& g, int self) {
            const Mat& go = g.node(self).grad;
            if (g.needs_grad(ia)) g.accumulate(ia, go.cwiseProduct(g.value(ib)));
            if (g.needs_grad(ib)) g.accumulate(ib, go.cwiseProduct(g.value(ia)));
          })};
}

Var scale(Var a, double s) {
  Graph& g = *a.graph;
  int ia = a.id;
  Mat v = a.value() * s;
  return {&g, g.push(std::move(v), g.needs_grad(ia), [ia, s](Graph& g, int self) {
            g.accumulate(ia, g.node(self).grad * s);
          })};
}

Var transpose(Var a) {
  Graph& g = *a.graph;
  int ia = a.id;
  Mat v = a.value().transpose();
  return {&g, g.push(std::move(v), g.needs_grad(ia), [ia](Graph& g, int self) {
            g.accumulate(ia, g.node(self).grad.transpose());
          })};
}

Var relu(Var a) {
  Graph& g = *a.graph;
  int ia = a.id;
  Mat v = a.value().cwiseMax(0.0);
  return {&g, g.push(std::move(v), g.needs_grad(ia), [ia](Graph& g, int self) {
            const Mat& x = g.value(ia);
            Mat mask = (x.array() > 0.0).cast<double>();
            g.accumulate(ia, g.node(self).grad.cwiseProduct(mask));
          })};
}

Var sigmoid(Var a) {
  Graph& g = *a.graph;
  int ia = a.id;
  Mat v = (1.0 / (1.0 + (-a.value().array()).exp())).matrix();
  return {&g, g.push(std::move(v), g.needs_grad(ia), [ia](Graph& g, int self) {
            const Mat& y = g.value(self);
            Mat d = (y.array() * (1.0 - y.array())).matrix();
            g.accumulate(ia, g.node(self).grad.cwiseProduct(d));
          })};
}

Var tanh(Var a) {
  Graph& g = *a.graph;
  int ia = a.id;
  Mat v = a.value().array().tanh().matrix();
  return {&g, g.push(std::move(v), g.needs_grad(ia), [ia](Graph& g, int self) {
            const Mat& y = g.value(self);
            Mat d = (1.0 - y.array().square()).matrix();
            g.accumulate(ia, g.node(self).grad.cwiseProduct(d));
          })};
}

Var softmax_rows(Var a) {
  Graph& g = *a.graph;
  int ia = a.id;
  const Mat& x = a.value();
  Mat v(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    double m = x.row(r).maxCoeff();
    v.row(r) = (x.row(r).array() - m).exp().matrix();
    v.row(r) /= v.row(r).sum();
  }
  return {&g, g.push(std::move(v), g.needs_grad(ia), [ia](Graph& g, int self) {
            const Mat& y = g.value(self);
            const Mat& go = g.node(self).grad;
            Eigen::VectorXd dots = go.cwiseProduct(y).rowwise().sum();
            Mat d = y.cwiseProduct(go.colwise() - dots);
            g.accumulate(ia, d);
          })};
}

Var log_softmax_rows(Var a) {
  Graph& g = *a.graph;
  int ia = a.id;
  const Mat& x = a.value();
  Mat v(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    double m = x.row(r).maxCoeff();
    double lse = m + std::log((x.row(r).array() - m).exp().sum());
    v.row(r) = x.row(r).array() - lse;
  }
  return {&g, g.push(std::move(v), g.needs_grad(ia), [ia](Graph& g, int self) {
            const Mat& y = g.value(self);
            const Mat& go = g.node(self).grad;
            Eigen::VectorXd sums = go.rowwise().sum();
            Mat soft = y.array().exp().matrix();
            Mat d = go - (soft.array().colwise() * sums.array()).matrix();
            g.accumulate(ia, d);
          })};
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  Graph& g = *parts.front().graph;
  Eigen::Index rows = parts.front().rows(), cols = 0;
  bool ng = false;
  std::vector<int> ids;
  std::vector<Eigen::Index> widths;
  for (Var p : parts) {
    check_same_graph(parts.front(), p);
    if (p.rows() != rows) throw std::invalid_argument("concat_cols: row mismatch");
    cols += p.cols();
    ng = ng || g.needs_grad(p.id);
    ids.push_back(p.id);
    widths.push_back(p.cols());
  }
  Mat v(rows, cols);
  Eigen::Index c = 0;
  for (Var p : parts) {
    v.middleCols(c, p.cols()) = p.value();
    c += p.cols();
  }
  return {&g, g.push(std::move(v), ng, [ids, widths](Graph& g, int self) {
            Eigen::Index c = 0;
            for (std::size_t k = 0; k < ids.size(); ++k) {
              if (g.needs_grad(ids[k])) {
                Mat part = g.node(self).grad.middleCols(c, widths[k]);
                g.accumulate(ids[k], part);
              }
              c += widths[k];
            }
          })};
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  Graph& g = *parts.front().graph;
  Eigen::Index cols = parts.front().cols(), rows = 0;
  bool ng = false;
  std::vector<int> ids;
  std::vector<Eigen::Index> heights;
  for (Var p : parts) {
    check_same_graph(parts.front(), p);
    if (p.cols() != cols) throw std::invalid_argument("concat_rows: column mismatch");
    rows += p.rows();
    ng = ng || g.needs_grad(p.id);
    ids.push_back(p.id);
    heights.push_back(p.rows());
  }
  Mat v(rows, cols);
  Eigen::Index r = 0;
  for (Var p : parts) {
    v.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  return {&g, g.push(std::move(v), ng, [ids, heights](Graph& g, int self) {
            Eigen::Index r = 0;
            for (std::size_t k = 0; k < ids.size(); ++k) {
              if (g.needs_grad(ids[k])) {
                Mat part = g.node(self).grad.middleRows(r, heights[k]);
                g.accumulate(ids[k], part);
              }
              r += heights[k];
            }
          })};
}

Var slice_rows(Var a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) {
    throw std::out_of_range("slice_rows: range outside matrix");
  }
  Graph& g = *a.graph;
  int ia = a.id;
  Mat v = a.value().middleRows(start, count);
  return {&g, g.push(std::move(v), g.needs_grad(ia), [ia, start, count](Graph& g, int self) {
            g.grad_buffer(ia).middleRows(start, count) += g.node(self).grad;
          })};
}

Var slice_cols(Var a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) {
    throw std::out_of_range("slice_cols: range outside matrix");
  }
  Graph& g = *a.graph;
  int ia = a.id;
  Mat v = a.value().middleCols(start, count);
  return {&g, g.push(std::move(v), g.needs_grad(ia), [ia, start, count](Graph& g, int self) {
            g.grad_buffer(ia).middleCols(start, count) += g.node(self).grad;
          })};
}

Var broadcast_rows(Var row, Eigen::Index rows) {
  if (row.rows() != 1) throw std::invalid_argument("broadcast_rows: expects a 1 x n row");
  Graph& g = *row.graph;
  int ia = row.id;
  Mat v = row.value().replicate(rows, 1);
  return {&g, g.push(std::move(v), g.needs_grad(ia), [ia](Graph& g, int self) {
            g.accumulate(ia, g.node(self).grad.colwise().sum());
          })};
}

Var shift_rows(Var a, Eigen::Index offset) {
  Graph& g = *a.graph;
  int ia = a.id;
  const Mat& x = a.value();
  Eigen::Index n = x.rows();
  Mat v = Mat::Zero(n, x.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    Eigen::Index src = i - offset;
    if (src >= 0 && src < n) v.row(i) = x.row(src);
  }
  return {&g, g.push(std::move(v), g.needs_grad(ia), [ia, offset, n](Graph& g, int self) {
            const Mat& go = g.node(self).grad;
            Mat d = Mat::Zero(n, go.cols());
            for (Eigen::Index i = 0; i < n; ++i) {
              Eigen::Index src = i - offset;
              if (src >= 0 && src < n) d.row(src) = go.row(i);
            }
            g.accumulate(ia, d);
          })};
}

Var gather_rows(Var a, const std::vector<Eigen::Index>& rows) {
  Graph& g = *a.graph;
  int ia = a.id;
  const Mat& x = a.value();
  Mat v(static_cast<Eigen::Index>(rows.size()), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= x.rows()) throw std::out_of_range("gather_rows: bad index");
    v.row(static_cast<Eigen::Index>(i)) = x.row(rows[i]);
  }
  return {&g, g.push(std::move(v), g.needs_grad(ia), [ia, rows](Graph& g, int self) {
            const Mat& go = g.node(self).grad;
            Mat& d = g.grad_buffer(ia);
            for (std::size_t i = 0; i < rows.size(); ++i) {
              d.row(rows[i]) += go.row(static_cast<Eigen::Index>(i));
            }
          })};
}

Var max_rows(Var a) {
  if (a.rows() == 0) throw std::invalid_argument("max_rows: empty input");
  Graph& g = *a.graph;
  int ia = a.id;
  const Mat& x = a.value();
  Mat v(1, x.cols());
  std::vector<Eigen::Index> arg(static_cast<std::size_t>(x.cols()));
  for (Eigen::Index c = 0; c < x.cols(); ++c) {
    Eigen::Index best = 0;
    for (Eigen::Index r = 1; r < x.rows(); ++r) {
      if (x(r, c) > x(best, c)) best = r;
    }
    arg[static_cast<std::size_t>(c)] = best;
    v(0, c) = x(best, c);
  }
  return {&g, g.push(std::move(v), g.needs_grad(ia), [ia, arg](Graph& g, int self) {
            const Mat& go = g.node(self).grad;
            Mat& d = g.grad_buffer(ia);
            for (Eigen::Index c = 0; c < go.cols(); ++c) d(arg[static_cast<std::size_t>(c)], c) += go(0, c);
          })};
}

Var mean_rows(Var a) {
  if (a.rows() == 0) throw std::invalid_argument("mean_rows: empty input");
  Graph& g = *a.graph;
  int ia = a.id;
  Eigen::Index n = a.rows();
  Mat v = a.value().colwise().mean();
  return {&g, g.push(std::move(v), g.needs_grad(ia), [ia, n](Graph& g, int self) {
            g.accumulate(ia, g.node(self).grad.replicate(n, 1) / static_cast<double>(n));
          })};
}

Var sum(Var a) {
  Graph& g = *a.graph;
  int ia = a.id;
  Eigen::Index r = a.rows(), c = a.cols();
  Mat v = Mat::Constant(1, 1, a.value().sum());
  return {&g, g.push(std::move(v), g.needs_grad(ia), [ia, r, c](Graph& g, int self) {
            g.accumulate(ia, Mat::Constant(r, c, g.node(self).grad(0, 0)));
          })};
}

Var mean(Var a) {
  return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

Var trace(Var a) {
  if (a.rows() != a.cols()) throw std::invalid_argument("trace: matrix not square");
  Graph& g = *a.graph;
  int ia = a.id;
  Eigen::Index n = a.rows();
  Mat v = Mat::Constant(1, 1, a.value().trace());
  return {&g, g.push(std::move(v), g.needs_grad(ia), [ia, n](Graph& g, int self) {
            Mat d = Mat::Identity(n, n) * g.node(self).grad(0, 0);
            g.accumulate(ia, d);
          })};
}

Var l2_norm(Var a) {
  Graph& g = *a.graph;
  int ia = a.id;
  Mat v = Mat::Constant(1, 1, a.value().norm());
  return {&g, g.push(std::move(v), g.needs_grad(ia), [ia](Graph& g, int self) {
            double n = g.value(self)(0, 0);
            if (n == 0.0) return;
            g.accumulate(ia, g.value(ia) * (g.node(self).grad(0, 0) / n));
          })};
}

Var l2_normalize(Var row) {
  if (row.rows() != 1) throw std::invalid_argument("l2_normalize: expects a 1 x n row");
  double n = row.value().norm();
  if (!(n > 0.0)) throw std::domain_error("l2_normalize: zero vector");
  Graph& g = *row.graph;
  int ia = row.id;
  Mat v = row.value() / n;
  return {&g, g.push(std::move(v), g.needs_grad(ia), [ia, n](Graph& g, int self) {
            const Mat& y = g.value(self);
            const Mat& go = g.node(self).grad;
            double d = (go.array() * y.array()).sum();
            g.accumulate(ia, (go - y * d) / n);
          })};
}

Var layer_norm(Var a, Var gain, Var bias, double eps) {
  check_same_graph(a, gain);
  check_same_graph(a, bias);
  const Mat& x = a.value();
  Eigen::Index n = x.rows(), d = x.cols();
  if (gain.cols() != d || bias.cols() != d) throw std::invalid_argument("layer_norm: width mismatch");
  Mat xhat(n, d);
  Eigen::VectorXd inv_std(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    double mu = x.row(r).mean();
    double var = (x.row(r).array() - mu).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (x.row(r).array() - mu) * inv_std(r);
  }
  Mat v = (xhat.array().rowwise() * gain.value().row(0).array()).matrix();
  v.rowwise() += bias.value().row(0);
  Graph& g = *a.graph;
  int ia = a.id, ig = gain.id, ib = bias.id;
  bool ng = g.needs_grad(ia) || g.needs_grad(ig) || g.needs_grad(ib);
  return {&g, g.push(std::move(v), ng, [ia, ig, ib, xhat, inv_std](Graph& g, int self) {
            const Mat& go = g.node(self).grad;
            if (g.needs_grad(ig)) g.accumulate(ig, go.cwiseProduct(xhat).colwise().sum());
            if (g.needs_grad(ib)) g.accumulate(ib, go.colwise().sum());
            if (g.needs_grad(ia)) {
              Mat gx = (go.array().rowwise() * g.value(ig).row(0).array()).matrix();
              double d = static_cast<double>(gx.cols());
              Eigen::VectorXd mean_g = gx.rowwise().sum() / d;
              Eigen::VectorXd mean_gx = gx.cwiseProduct(xhat).rowwise().sum() / d;
              Mat dx = gx;
              dx.colwise() -= mean_g;
              dx -= (xhat.array().colwise() * mean_gx.array()).matrix();
              dx = (dx.array().colwise() * inv_std.array()).matrix();
              g.accumulate(ia, dx);
            }
          })};
}

}  // namespace despos
