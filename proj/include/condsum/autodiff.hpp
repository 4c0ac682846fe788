#pragma once

// Minimal reverse-mode automatic differentiation over dense double matrices.
// A Var is a shared handle to a graph node; operations record a closure that
// pushes the node's gradient onto its parents. Graphs are rebuilt on every
// forward pass and released when the last handle goes away.

#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <string>
#include <unordered_set>
#include <vector>

#include "condsum/core.hpp"

namespace condsum::ad {

struct Node {
  Matrix value;
  Matrix grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  Matrix& grad_buffer() {
    if (grad.size() == 0) grad = Matrix::Zero(value.rows(), value.cols());
    return grad;
  }
};

class Var {
 public:
  Var() = default;
  explicit Var(Matrix value, bool requires_grad = false)
      : node_(std::make_shared<Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Matrix& value() const { return node_->value; }
  Matrix& mutable_value() { return node_->value; }
  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  bool requires_grad() const { return node_->requires_grad; }

  /// Gradient accumulated by the last backward(); zeros if never reached.
  Matrix grad() const {
    if (node_->grad.size() == 0) return Matrix::Zero(rows(), cols());
    return node_->grad;
  }
  void zero_grad() { node_->grad.resize(0, 0); }

  double scalar() const { return node_->value(0, 0); }

  /// Backpropagates from a 1x1 node.
  void backward() const;

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

inline Var constant(Matrix value) { return Var(std::move(value), false); }
inline Var parameter(Matrix value) { return Var(std::move(value), true); }
inline Var scalar_constant(double v) { return constant(Matrix::Constant(1, 1, v)); }

namespace detail {

inline Var make_result(Matrix value, std::vector<Var> const& parents,
                       std::function<void(Node&)> backward) {
  Var out(std::move(value), false);
  bool any = false;
  for (const auto& p : parents) any = any || p.requires_grad();
  if (any) {
    auto& node = *out.node();
    node.requires_grad = true;
    for (const auto& p : parents) node.parents.push_back(p.node());
    node.backward = std::move(backward);
  }
  return out;
}

inline void accumulate(const std::shared_ptr<Node>& target, const Matrix& delta) {
  if (target->requires_grad) target->grad_buffer() += delta;
}

inline void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ArgumentError(std::string(op) + ": shape mismatch (" +
                        std::to_string(a.rows()) + "x" + std::to_string(a.cols()) + " vs " +
                        std::to_string(b.rows()) + "x" + std::to_string(b.cols()) + ")");
}

}  // namespace detail

inline void Var::backward() const {
  if (rows() != 1 || cols() != 1) throw ArgumentError("backward: root must be 1x1");
  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  node_->grad_buffer().array() += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && n->grad.size() != 0) n->backward(*n);
  }
}

// ---------------------------------------------------------------- algebra

inline Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) throw ArgumentError("matmul: inner dimensions differ");
  auto pa = a.node(), pb = b.node();
  return detail::make_result(a.value() * b.value(), {a, b}, [pa, pb](Node& self) {
    if (pa->requires_grad) pa->grad_buffer().noalias() += self.grad * pb->value.transpose();
    if (pb->requires_grad) pb->grad_buffer().noalias() += pa->value.transpose() * self.grad;
  });
}

inline Var transpose(const Var& a) {
  auto pa = a.node();
  return detail::make_result(a.value().transpose(), {a}, [pa](Node& self) {
    detail::accumulate(pa, self.grad.transpose());
  });
}

inline Var add(const Var& a, const Var& b) {
  detail::check_same_shape(a, b, "add");
  auto pa = a.node(), pb = b.node();
  return detail::make_result(a.value() + b.value(), {a, b}, [pa, pb](Node& self) {
    detail::accumulate(pa, self.grad);
    detail::accumulate(pb, self.grad);
  });
}

inline Var sub(const Var& a, const Var& b) {
  detail::check_same_shape(a, b, "sub");
  auto pa = a.node(), pb = b.node();
  return detail::make_result(a.value() - b.value(), {a, b}, [pa, pb](Node& self) {
    detail::accumulate(pa, self.grad);
    detail::accumulate(pb, -self.grad);
  });
}

inline Var mul(const Var& a, const Var& b) {
  detail::check_same_shape(a, b, "mul");
  auto pa = a.node(), pb = b.node();
  return detail::make_result(a.value().cwiseProduct(b.value()), {a, b}, [pa, pb](Node& self) {
    detail::accumulate(pa, self.grad.cwiseProduct(pb->value));
    detail::accumulate(pb, self.grad.cwiseProduct(pa->value));
  });
}

/// a (n x c) + row (1 x c) broadcast over rows.
inline Var add_row(const Var& a, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw ArgumentError("add_row: shape mismatch");
  auto pa = a.node(), pr = row.node();
  Matrix out = a.value();
  out.rowwise() += row.value().row(0);
  return detail::make_result(std::move(out), {a, row}, [pa, pr](Node& self) {
    detail::accumulate(pa, self.grad);
    detail::accumulate(pr, self.grad.colwise().sum());
  });
}

/// a (n x c) * row (1 x c) element-wise, broadcast over rows.
inline Var mul_row(const Var& a, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw ArgumentError("mul_row: shape mismatch");
  auto pa = a.node(), pr = row.node();
  Matrix out = a.value().array().rowwise() * row.value().row(0).array();
  return detail::make_result(std::move(out), {a, row}, [pa, pr](Node& self) {
    if (pa->requires_grad)
      pa->grad_buffer().array() += self.grad.array().rowwise() * pr->value.row(0).array();
    if (pr->requires_grad)
      pr->grad_buffer() += self.grad.cwiseProduct(pa->value).colwise().sum();
  });
}

/// a (n x c) + col (n x 1) broadcast over columns.
inline Var add_col(const Var& a, const Var& col) {
  if (col.cols() != 1 || col.rows() != a.rows()) throw ArgumentError("add_col: shape mismatch");
  auto pa = a.node(), pc = col.node();
  Matrix out = a.value();
  out.colwise() += col.value().col(0);
  return detail::make_result(std::move(out), {a, col}, [pa, pc](Node& self) {
    detail::accumulate(pa, self.grad);
    detail::accumulate(pc, self.grad.rowwise().sum());
  });
}

/// a (n x c) * col (n x 1) element-wise, broadcast over columns.
inline Var mul_col(const Var& a, const Var& col) {
  if (col.cols() != 1 || col.rows() != a.rows()) throw ArgumentError("mul_col: shape mismatch");
  auto pa = a.node(), pc = col.node();
  Matrix out = a.value().array().colwise() * col.value().col(0).array();
  return detail::make_result(std::move(out), {a, col}, [pa, pc](Node& self) {
    if (pa->requires_grad)
      pa->grad_buffer().array() += self.grad.array().colwise() * pc->value.col(0).array();
    if (pc->requires_grad)
      pc->grad_buffer() += self.grad.cwiseProduct(pa->value).rowwise().sum();
  });
}

inline Var scale(const Var& a, double s) {
  auto pa = a.node();
  return detail::make_result(a.value() * s, {a}, [pa, s](Node& self) {
    detail::accumulate(pa, self.grad * s);
  });
}

inline Var add_scalar(const Var& a, double s) {
  auto pa = a.node();
  Matrix out = a.value().array() + s;
  return detail::make_result(std::move(out), {a}, [pa](Node& self) {
    detail::accumulate(pa, self.grad);
  });
}

/// s - a, element-wise.
inline Var rsub_scalar(double s, const Var& a) {
  auto pa = a.node();
  Matrix out = s - a.value().array();
  return detail::make_result(std::move(out), {a}, [pa](Node& self) {
    detail::accumulate(pa, -self.grad);
  });
}

// ------------------------------------------------------------ element-wise

inline Var tanh(const Var& a) {
  auto pa = a.node();
  Matrix out = a.value().array().tanh();
  return detail::make_result(out, {a}, [pa, out](Node& self) {
    detail::accumulate(pa, (self.grad.array() * (1.0 - out.array().square())).matrix());
  });
}

inline Matrix logistic_value(const Matrix& x) {
  return x.unaryExpr([](double v) {
    if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
  });
}

inline Var logistic(const Var& a) {
  auto pa = a.node();
  Matrix out = logistic_value(a.value());
  return detail::make_result(out, {a}, [pa, out](Node& self) {
    detail::accumulate(pa, (self.grad.array() * out.array() * (1.0 - out.array())).matrix());
  });
}

inline Var exp(const Var& a) {
  auto pa = a.node();
  Matrix out = a.value().array().exp();
  return detail::make_result(out, {a}, [pa, out](Node& self) {
    detail::accumulate(pa, self.grad.cwiseProduct(out));
  });
}

inline Var log(const Var& a) {
  auto pa = a.node();
  return detail::make_result(a.value().array().log().matrix(), {a}, [pa](Node& self) {
    detail::accumulate(pa, self.grad.cwiseQuotient(pa->value));
  });
}

inline Var square(const Var& a) {
  auto pa = a.node();
  return detail::make_result(a.value().array().square().matrix(), {a}, [pa](Node& self) {
    detail::accumulate(pa, 2.0 * self.grad.cwiseProduct(pa->value));
  });
}

inline Var sqrt(const Var& a) {
  auto pa = a.node();
  Matrix out = a.value().array().sqrt();
  return detail::make_result(out, {a}, [pa, out](Node& self) {
    detail::accumulate(pa, (0.5 * self.grad.array() / out.array()).matrix());
  });
}

inline Var reciprocal(const Var& a) {
  auto pa = a.node();
  Matrix out = a.value().array().inverse();
  return detail::make_result(out, {a}, [pa, out](Node& self) {
    detail::accumulate(pa, (-self.grad.array() * out.array().square()).matrix());
  });
}

/// Clamp to [lo, hi]; the gradient is passed through only where the input
/// lies strictly inside the interval.
inline Var clamp(const Var& a, double lo, double hi) {
  auto pa = a.node();
  Matrix out = a.value().cwiseMax(lo).cwiseMin(hi);
  return detail::make_result(std::move(out), {a}, [pa, lo, hi](Node& self) {
    Matrix pass = pa->value.unaryExpr([lo, hi](double v) { return (v > lo && v < hi) ? 1.0 : 0.0; });
    detail::accumulate(pa, self.grad.cwiseProduct(pass));
  });
}

// -------------------------------------------------------------- reductions

inline Var sum(const Var& a) {
  auto pa = a.node();
  return detail::make_result(Matrix::Constant(1, 1, a.value().sum()), {a}, [pa](Node& self) {
    detail::accumulate(pa, Matrix::Constant(pa->value.rows(), pa->value.cols(), self.grad(0, 0)));
  });
}

/// Column-wise mean over rows: (n x c) -> (1 x c).
inline Var mean_rows(const Var& a) {
  auto pa = a.node();
  const double n = static_cast<double>(a.rows());
  return detail::make_result(a.value().colwise().mean(), {a}, [pa, n](Node& self) {
    detail::accumulate(pa, self.grad.replicate(pa->value.rows(), 1) / n);
  });
}

/// Per-row mean: (n x c) -> (n x 1).
inline Var row_mean(const Var& a) {
  auto pa = a.node();
  const double c = static_cast<double>(a.cols());
  return detail::make_result(a.value().rowwise().mean(), {a}, [pa, c](Node& self) {
    detail::accumulate(pa, self.grad.replicate(1, pa->value.cols()) / c);
  });
}

/// Per-row sum: (n x c) -> (n x 1).
inline Var row_sum(const Var& a) {
  auto pa = a.node();
  return detail::make_result(a.value().rowwise().sum(), {a}, [pa](Node& self) {
    detail::accumulate(pa, self.grad.replicate(1, pa->value.cols()));
  });
}

// ------------------------------------------------------------ structural

inline Var concat_cols(const Var& a, const Var& b) {
  if (a.rows() != b.rows()) throw ArgumentError("concat_cols: row counts differ");
  auto pa = a.node(), pb = b.node();
  Matrix out(a.rows(), a.cols() + b.cols());
  out << a.value(), b.value();
  const auto ca = a.cols(), cb = b.cols();
  return detail::make_result(std::move(out), {a, b}, [pa, pb, ca, cb](Node& self) {
    detail::accumulate(pa, self.grad.leftCols(ca));
    detail::accumulate(pb, self.grad.rightCols(cb));
  });
}

/// Stacks a (1 x c) row n times.
inline Var repeat_rows(const Var& row, Eigen::Index n) {
  if (row.rows() != 1) throw ArgumentError("repeat_rows: expected a row");
  auto pr = row.node();
  return detail::make_result(row.value().replicate(n, 1), {row}, [pr](Node& self) {
    detail::accumulate(pr, self.grad.colwise().sum());
  });
}

inline Var gather_rows(const Var& table, const std::vector<int>& index) {
  auto pt = table.node();
  Matrix out(static_cast<Eigen::Index>(index.size()), table.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= table.rows()) throw ArgumentError("gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(i)) = table.value().row(index[i]);
  }
  return detail::make_result(std::move(out), {table}, [pt, index](Node& self) {
    if (!pt->requires_grad) return;
    auto& g = pt->grad_buffer();
    for (std::size_t i = 0; i < index.size(); ++i) g.row(index[i]) += self.grad.row(static_cast<Eigen::Index>(i));
  });
}

/// out(i) = a(i, index[i]); (n x c) -> (n x 1).
inline Var pick(const Var& a, const std::vector<int>& index) {
  if (static_cast<Eigen::Index>(index.size()) != a.rows()) throw ArgumentError("pick: one index per row");
  auto pa = a.node();
  Matrix out(a.rows(), 1);
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    if (index[i] < 0 || index[i] >= a.cols()) throw ArgumentError("pick: index out of range");
    out(i, 0) = a.value()(i, index[i]);
  }
  return detail::make_result(std::move(out), {a}, [pa, index](Node& self) {
    if (!pa->requires_grad) return;
    auto& g = pa->grad_buffer();
    for (std::size_t i = 0; i < index.size(); ++i) g(static_cast<Eigen::Index>(i), index[i]) += self.grad(static_cast<Eigen::Index>(i), 0);
  });
}

// ---------------------------------------------------------------- softmax

using KeepMask = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>;

inline Matrix softmax_rows_value(const Matrix& logits, const KeepMask* keep = nullptr) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < logits.cols(); ++j)
      if (!keep || (*keep)(i, j)) mx = std::max(mx, logits(i, j));
    double total = 0.0;
    for (Eigen::Index j = 0; j < logits.cols(); ++j) {
      const double e = (!keep || (*keep)(i, j)) ? std::exp(logits(i, j) - mx) : 0.0;
      out(i, j) = e;
      total += e;
    }
    out.row(i) /= total;
  }
  return out;
}

/// Row-wise softmax. With a mask, entries where keep is false behave as
/// logits of -infinity: probability exactly zero and no gradient.
inline Var softmax_rows(const Var& logits, const KeepMask* keep = nullptr) {
  if (keep && (keep->rows() != logits.rows() || keep->cols() != logits.cols()))
    throw ArgumentError("softmax_rows: mask shape mismatch");
  auto pl = logits.node();
  Matrix out = softmax_rows_value(logits.value(), keep);
  return detail::make_result(out, {logits}, [pl, out](Node& self) {
    // dL/dx = p * (g - sum(g * p))
    Matrix gp = self.grad.cwiseProduct(out);
    Vector dot = gp.rowwise().sum();
    Matrix dx = gp - (out.array().colwise() * dot.array()).matrix();
    detail::accumulate(pl, dx);
  });
}

// ------------------------------------------------------------- parameters

/// Named, ordered parameter collection. Iteration order (lexicographic by
/// name) is the serialization and optimizer order.
class ParamStore {
 public:
  Var& add(const std::string& name, Matrix value) {
    auto [it, inserted] = params_.emplace(name, parameter(std::move(value)));
    if (!inserted) throw ArgumentError("duplicate parameter " + name);
    return it->second;
  }
  const Var& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ArgumentError("unknown parameter " + name);
    return it->second;
  }
  Var& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw ArgumentError("unknown parameter " + name);
    return it->second;
  }
  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }
  std::size_t size() const { return params_.size(); }

  void zero_grad() {
    for (auto& [_, v] : params_) v.zero_grad();
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, v] : params_) n += static_cast<std::size_t>(v.value().size());
    return n;
  }

  /// Deep copy: fresh leaf nodes carrying the same values.
  ParamStore clone() const {
    ParamStore out;
    for (const auto& [name, v] : params_) out.add(name, v.value());
    return out;
  }

  bool all_finite() const {
    for (const auto& [_, v] : params_)
      if (!v.value().allFinite()) return false;
    return true;
  }

 private:
  std::map<std::string, Var> params_;
};

struct AdamOptions {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

class Adam {
 public:
  explicit Adam(AdamOptions options) : options_(options) {}

  void step(ParamStore& params) {
    ++t_;
    const double c1 = 1.0 - std::pow(options_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(options_.beta2, static_cast<double>(t_));
    for (auto& [name, var] : params) {
      const Matrix g = var.grad();
      auto [it, fresh] = state_.try_emplace(name);
      if (fresh) {
        it->second.m = Matrix::Zero(g.rows(), g.cols());
        it->second.v = Matrix::Zero(g.rows(), g.cols());
      }
      auto& s = it->second;
      s.m = options_.beta1 * s.m + (1.0 - options_.beta1) * g;
      s.v = options_.beta2 * s.v + (1.0 - options_.beta2) * g.cwiseProduct(g);
      var.mutable_value().array() -= options_.learning_rate * (s.m.array() / c1) /
                                     ((s.v.array() / c2).sqrt() + options_.epsilon);
    }
  }

  long steps() const { return t_; }

 private:
  struct Moments {
    Matrix m, v;
  };
  AdamOptions options_;
  long t_ = 0;
  std::map<std::string, Moments> state_;
};

}  // namespace condsum::ad
