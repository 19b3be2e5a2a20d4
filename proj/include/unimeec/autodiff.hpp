#pragma once

// Reverse-mode differentiation over dense row-major matrices.
//
// A Tape records every operation of one forward pass. Var is a lightweight
// handle (tape, node id). Tape::backward walks nodes in reverse creation order
// and accumulates gradients into the Parameter objects used as leaves.

#include <algorithm>
#include <cmath>
#include <deque>
#include <functional>
#include <limits>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

#include "unimeec/error.hpp"
#include "unimeec/parameter.hpp"

namespace unimeec::ad {

class Tape;

class Var {
 public:
  Var() = default;

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  Tape* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, int)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix m) {
    Node n;
    n.value = std::move(m);
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<int>(nodes_.size()) - 1);
  }

  // Leaf bound to a parameter. Frozen parameters act as constants. One leaf
  // per parameter per tape.
  Var param(Parameter& p) {
    auto it = param_leaf_.find(&p);
    if (it != param_leaf_.end()) return Var(this, it->second);
    Node n;
    n.ref = &p.value;
    n.param = &p;
    n.requires_grad = p.trainable;
    nodes_.push_back(std::move(n));
    const int id = static_cast<int>(nodes_.size()) - 1;
    param_leaf_[&p] = id;
    return Var(this, id);
  }

  // Records an operation. `backward` runs only when some input needs a gradient.
  Var record(Matrix value, std::initializer_list<Var> inputs, Backward backward) {
    return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                  std::move(backward));
  }
  Var record(Matrix value, std::span<const Var> inputs, Backward backward) {
    Node n;
    n.value = std::move(value);
    for (const Var& v : inputs) {
      if (v.tape() != this) throw Error("autodiff: operand recorded on a different tape");
      n.requires_grad = n.requires_grad || nodes_[v.id()].requires_grad;
    }
    if (n.requires_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<int>(nodes_.size()) - 1);
  }

  const Matrix& value(int id) const {
    const Node& n = nodes_[id];
    return n.ref ? *n.ref : n.value;
  }
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }

  // Gradient buffer of node `id`, zero-initialized on first access.
  Matrix& grad(int id) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0) {
      const Matrix& v = value(id);
      n.grad.setZero(v.rows(), v.cols());
    }
    return n.grad;
  }
  bool has_grad(int id) const { return nodes_[id].grad.size() != 0; }

  // Seeds d(loss)/d(loss) = seed and accumulates into Parameter::grad.
  void backward(Var loss, double seed = 1.0) {
    if (loss.tape() != this) throw Error("autodiff: loss recorded on a different tape");
    if (loss.rows() != 1 || loss.cols() != 1) throw ShapeError("autodiff: loss must be 1x1");
    if (!requires_grad(loss.id())) return;
    grad(loss.id())(0, 0) += seed;
    for (int id = loss.id(); id >= 0; --id) {
      Node& n = nodes_[id];
      if (!n.requires_grad || n.grad.size() == 0) continue;
      if (n.param) {
        n.param->grad += n.grad;
      } else if (n.backward) {
        n.backward(*this, id);
      }
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    const Matrix* ref = nullptr;
    Matrix grad;
    Parameter* param = nullptr;
    bool requires_grad = false;
    Backward backward;
  };
  std::deque<Node> nodes_;
  std::unordered_map<const Parameter*, int> param_leaf_;
};

inline const Matrix& Var::value() const { return tape_->value(id_); }

namespace detail {

inline void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError(std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                     std::to_string(b.cols()) + ")");
}

inline void accumulate(Tape& t, const Var& v, const Matrix& g) {
  if (t.requires_grad(v.id())) t.grad(v.id()) += g;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

inline Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) throw ShapeError("matmul: inner dimension mismatch");
  Tape& t = *a.tape();
  Matrix out = a.value() * b.value();
  return t.record(std::move(out), {a, b}, [a, b](Tape& tp, int self) {
    const Matrix& g = tp.grad(self);
    if (tp.requires_grad(a.id())) tp.grad(a.id()).noalias() += g * b.value().transpose();
    if (tp.requires_grad(b.id())) tp.grad(b.id()).noalias() += a.value().transpose() * g;
  });
}

// a * b^T
inline Var matmul_nt(const Var& a, const Var& b) {
  if (a.cols() != b.cols()) throw ShapeError("matmul_nt: inner dimension mismatch");
  Tape& t = *a.tape();
  Matrix out = a.value() * b.value().transpose();
  return t.record(std::move(out), {a, b}, [a, b](Tape& tp, int self) {
    const Matrix& g = tp.grad(self);
    if (tp.requires_grad(a.id())) tp.grad(a.id()).noalias() += g * b.value();
    if (tp.requires_grad(b.id())) tp.grad(b.id()).noalias() += g.transpose() * a.value();
  });
}

inline Var add(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "add");
  Tape& t = *a.tape();
  Matrix out = a.value() + b.value();
  return t.record(std::move(out), {a, b}, [a, b](Tape& tp, int self) {
    const Matrix& g = tp.grad(self);
    detail::accumulate(tp, a, g);
    detail::accumulate(tp, b, g);
  });
}

// x (n x m) + bias (1 x m) broadcast over rows.
inline Var add_row(const Var& x, const Var& bias) {
  if (bias.rows() != 1 || bias.cols() != x.cols()) throw ShapeError("add_row: bias shape");
  Tape& t = *x.tape();
  Matrix out = x.value().rowwise() + bias.value().row(0);
  return t.record(std::move(out), {x, bias}, [x, bias](Tape& tp, int self) {
    const Matrix& g = tp.grad(self);
    detail::accumulate(tp, x, g);
    if (tp.requires_grad(bias.id())) tp.grad(bias.id()) += g.colwise().sum();
  });
}

// x W + b
inline Var linear(const Var& x, const Var& weight, const Var& bias) {
  return add_row(matmul(x, weight), bias);
}

inline Var scale(const Var& a, double s) {
  Tape& t = *a.tape();
  Matrix out = a.value() * s;
  return t.record(std::move(out), {a}, [a, s](Tape& tp, int self) {
    detail::accumulate(tp, a, tp.grad(self) * s);
  });
}

inline Var mul(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "mul");
  Tape& t = *a.tape();
  Matrix out = a.value().cwiseProduct(b.value());
  return t.record(std::move(out), {a, b}, [a, b](Tape& tp, int self) {
    const Matrix& g = tp.grad(self);
    if (tp.requires_grad(a.id())) tp.grad(a.id()) += g.cwiseProduct(b.value());
    if (tp.requires_grad(b.id())) tp.grad(b.id()) += g.cwiseProduct(a.value());
  });
}

inline Var transpose(const Var& a) {
  Tape& t = *a.tape();
  Matrix out = a.value().transpose();
  return t.record(std::move(out), {a}, [a](Tape& tp, int self) {
    detail::accumulate(tp, a, tp.grad(self).transpose());
  });
}

// Sum of all entries, as a 1x1.
inline Var sum(const Var& a) {
  Tape& t = *a.tape();
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return t.record(std::move(out), {a}, [a](Tape& tp, int self) {
    if (tp.requires_grad(a.id())) tp.grad(a.id()).array() += tp.grad(self)(0, 0);
  });
}

// Σ_k w_k s_k over 1x1 operands.
inline Var weighted_sum(std::span<const Var> scalars, std::span<const double> weights) {
  if (scalars.empty() || scalars.size() != weights.size())
    throw ShapeError("weighted_sum: operand/weight count mismatch");
  Tape& t = *scalars[0].tape();
  Matrix out = Matrix::Zero(1, 1);
  for (std::size_t k = 0; k < scalars.size(); ++k) {
    if (scalars[k].rows() != 1 || scalars[k].cols() != 1)
      throw ShapeError("weighted_sum: operands must be 1x1");
    out(0, 0) += weights[k] * scalars[k].value()(0, 0);
  }
  std::vector<Var> in(scalars.begin(), scalars.end());
  std::vector<double> w(weights.begin(), weights.end());
  return t.record(std::move(out), std::span<const Var>(in),
                  [in, w](Tape& tp, int self) {
                    const double g = tp.grad(self)(0, 0);
                    for (std::size_t k = 0; k < in.size(); ++k)
                      if (tp.requires_grad(in[k].id())) tp.grad(in[k].id())(0, 0) += w[k] * g;
                  });
}

// ---------------------------------------------------------------------------
// Elementwise nonlinearities

inline Var relu(const Var& a) {
  Tape& t = *a.tape();
  Matrix out = a.value().cwiseMax(0.0);
  return t.record(std::move(out), {a}, [a](Tape& tp, int self) {
    if (!tp.requires_grad(a.id())) return;
    const Matrix& g = tp.grad(self);
    tp.grad(a.id()).array() += (a.value().array() > 0.0).select(g.array(), 0.0);
  });
}

inline Var leaky_relu(const Var& a, double slope) {
  Tape& t = *a.tape();
  Matrix out = (a.value().array() > 0.0).select(a.value().array(), slope * a.value().array());
  return t.record(std::move(out), {a}, [a, slope](Tape& tp, int self) {
    if (!tp.requires_grad(a.id())) return;
    const Matrix& g = tp.grad(self);
    tp.grad(a.id()).array() += (a.value().array() > 0.0).select(g.array(), slope * g.array());
  });
}

// Exact (erf) GELU.
inline Var gelu(const Var& a) {
  Tape& t = *a.tape();
  const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
  Matrix out = a.value().unaryExpr(
      [inv_sqrt2](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); });
  return t.record(std::move(out), {a}, [a, inv_sqrt2](Tape& tp, int self) {
    if (!tp.requires_grad(a.id())) return;
    const double inv_sqrt2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    Matrix d = a.value().unaryExpr([&](double x) {
      return 0.5 * (1.0 + std::erf(x * inv_sqrt2)) + x * inv_sqrt2pi * std::exp(-0.5 * x * x);
    });
    tp.grad(a.id()) += tp.grad(self).cwiseProduct(d);
  });
}

// Multiplies by a fixed {0, 1/(1-rate)} mask drawn from `rng`.
template <class Rng>
Var dropout(const Var& a, double rate, Rng& rng) {
  if (rate <= 0.0) return a;
  if (rate >= 1.0) throw ConfigError("dropout rate must be < 1");
  std::bernoulli_distribution keep(1.0 - rate);
  Matrix mask(a.rows(), a.cols());
  for (Eigen::Index i = 0; i < mask.size(); ++i)
    mask.data()[i] = keep(rng) ? 1.0 / (1.0 - rate) : 0.0;
  return mul(a, a.tape()->constant(std::move(mask)));
}

// ---------------------------------------------------------------------------
// Normalization

// Row-wise softmax restricted to entries where mask != 0. Masked entries are
// exactly 0; a row with no unmasked entry is all zero.
inline Var masked_softmax(const Var& x, const Matrix& mask) {
  if (mask.rows() != x.rows() || mask.cols() != x.cols())
    throw ShapeError("masked_softmax: mask shape");
  Tape& t = *x.tape();
  const Matrix& v = x.value();
  Matrix out = Matrix::Zero(v.rows(), v.cols());
  for (Eigen::Index r = 0; r < v.rows(); ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (Eigen::Index c = 0; c < v.cols(); ++c)
      if (mask(r, c) != 0.0) mx = std::max(mx, v(r, c));
    if (mx == -std::numeric_limits<double>::infinity()) continue;
    double z = 0.0;
    for (Eigen::Index c = 0; c < v.cols(); ++c)
      if (mask(r, c) != 0.0) {
        out(r, c) = std::exp(v(r, c) - mx);
        z += out(r, c);
      }
    out.row(r) /= z;
  }
  return t.record(std::move(out), {x}, [x](Tape& tp, int self) {
    const Matrix& y = tp.value(self);
    const Matrix& g = tp.grad(self);
    Eigen::VectorXd dot = g.cwiseProduct(y).rowwise().sum();
    Matrix dx = y.cwiseProduct(g - dot.replicate(1, g.cols()));
    tp.grad(x.id()) += dx;
  });
}

// Row-wise layer normalization with gain and bias (1 x cols each).
inline Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5) {
  const Eigen::Index n = x.cols();
  if (gain.rows() != 1 || gain.cols() != n || bias.rows() != 1 || bias.cols() != n)
    throw ShapeError("layer_norm: gain/bias shape");
  Tape& t = *x.tape();
  const Matrix& v = x.value();
  Matrix xhat(v.rows(), n);
  Eigen::VectorXd inv_std(v.rows());
  for (Eigen::Index r = 0; r < v.rows(); ++r) {
    const double mean = v.row(r).mean();
    const double var = (v.row(r).array() - mean).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (v.row(r).array() - mean) * inv_std(r);
  }
  Matrix out = (xhat.array().rowwise() * gain.value().row(0).array()).rowwise() +
               bias.value().row(0).array();
  return t.record(std::move(out), {x, gain, bias},
                  [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                      Tape& tp, int self) {
                    const Matrix& g = tp.grad(self);
                    if (tp.requires_grad(gain.id()))
                      tp.grad(gain.id()) += g.cwiseProduct(xhat).colwise().sum();
                    if (tp.requires_grad(bias.id())) tp.grad(bias.id()) += g.colwise().sum();
                    if (!tp.requires_grad(x.id())) return;
                    Matrix dxhat = g.array().rowwise() * gain.value().row(0).array();
                    Matrix& gx = tp.grad(x.id());
                    const double inv_n = 1.0 / static_cast<double>(g.cols());
                    for (Eigen::Index r = 0; r < g.rows(); ++r) {
                      const double m1 = dxhat.row(r).sum() * inv_n;
                      const double m2 = dxhat.row(r).dot(xhat.row(r)) * inv_n;
                      gx.row(r).array() +=
                          inv_std(r) * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
                    }
                  });
}

// ---------------------------------------------------------------------------
// Indexing and reshaping

inline Var gather_rows(const Var& table, std::span<const int> ids) {
  Tape& t = *table.tape();
  const Matrix& tv = table.value();
  Matrix out(static_cast<Eigen::Index>(ids.size()), tv.cols());
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || ids[r] >= tv.rows())
      throw ShapeError("gather_rows: index " + std::to_string(ids[r]) + " out of range");
    out.row(static_cast<Eigen::Index>(r)) = tv.row(ids[r]);
  }
  std::vector<int> idx(ids.begin(), ids.end());
  return t.record(std::move(out), {table}, [table, idx = std::move(idx)](Tape& tp, int self) {
    const Matrix& g = tp.grad(self);
    Matrix& gt = tp.grad(table.id());
    for (std::size_t r = 0; r < idx.size(); ++r) gt.row(idx[r]) += g.row(static_cast<Eigen::Index>(r));
  });
}

inline Var slice_rows(const Var& a, Eigen::Index begin, Eigen::Index count) {
  if (begin < 0 || count < 0 || begin + count > a.rows()) throw ShapeError("slice_rows: range");
  Tape& t = *a.tape();
  Matrix out = a.value().middleRows(begin, count);
  return t.record(std::move(out), {a}, [a, begin, count](Tape& tp, int self) {
    tp.grad(a.id()).middleRows(begin, count) += tp.grad(self);
  });
}

inline Var slice_cols(const Var& a, Eigen::Index begin, Eigen::Index count) {
  if (begin < 0 || count < 0 || begin + count > a.cols()) throw ShapeError("slice_cols: range");
  Tape& t = *a.tape();
  Matrix out = a.value().middleCols(begin, count);
  return t.record(std::move(out), {a}, [a, begin, count](Tape& tp, int self) {
    tp.grad(a.id()).middleCols(begin, count) += tp.grad(self);
  });
}

inline Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no operands");
  Tape& t = *parts[0].tape();
  const Eigen::Index rows = parts[0].rows();
  Eigen::Index cols = 0;
  for (const Var& p : parts) {
    if (p.rows() != rows) throw ShapeError("concat_cols: row mismatch");
    cols += p.cols();
  }
  Matrix out(rows, cols);
  Eigen::Index off = 0;
  for (const Var& p : parts) {
    out.middleCols(off, p.cols()) = p.value();
    off += p.cols();
  }
  std::vector<Var> in(parts.begin(), parts.end());
  return t.record(std::move(out), std::span<const Var>(in), [in](Tape& tp, int self) {
    const Matrix& g = tp.grad(self);
    Eigen::Index o = 0;
    for (const Var& p : in) {
      if (tp.requires_grad(p.id())) tp.grad(p.id()) += g.middleCols(o, p.cols());
      o += p.cols();
    }
  });
}

inline Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no operands");
  Tape& t = *parts[0].tape();
  const Eigen::Index cols = parts[0].cols();
  Eigen::Index rows = 0;
  for (const Var& p : parts) {
    if (p.cols() != cols) throw ShapeError("concat_rows: column mismatch");
    rows += p.rows();
  }
  Matrix out(rows, cols);
  Eigen::Index off = 0;
  for (const Var& p : parts) {
    out.middleRows(off, p.rows()) = p.value();
    off += p.rows();
  }
  std::vector<Var> in(parts.begin(), parts.end());
  return t.record(std::move(out), std::span<const Var>(in), [in](Tape& tp, int self) {
    const Matrix& g = tp.grad(self);
    Eigen::Index o = 0;
    for (const Var& p : in) {
      if (tp.requires_grad(p.id())) tp.grad(p.id()) += g.middleRows(o, p.rows());
      o += p.rows();
    }
  });
}

// Copy of `a` with rows [begin, begin + block.rows()) replaced by `block`.
inline Var replace_rows(const Var& a, Eigen::Index begin, const Var& block) {
  if (block.cols() != a.cols() || begin < 0 || begin + block.rows() > a.rows())
    throw ShapeError("replace_rows: block does not fit");
  Tape& t = *a.tape();
  Matrix out = a.value();
  out.middleRows(begin, block.rows()) = block.value();
  const Eigen::Index count = block.rows();
  return t.record(std::move(out), {a, block}, [a, block, begin, count](Tape& tp, int self) {
    const Matrix& g = tp.grad(self);
    if (tp.requires_grad(a.id())) {
      Matrix& ga = tp.grad(a.id());
      ga.topRows(begin) += g.topRows(begin);
      const Eigen::Index tail = g.rows() - begin - count;
      ga.bottomRows(tail) += g.bottomRows(tail);
    }
    if (tp.requires_grad(block.id())) tp.grad(block.id()) += g.middleRows(begin, count);
  });
}

// Column means, as 1 x cols.
inline Var mean_rows(const Var& a) {
  if (a.rows() == 0) throw ShapeError("mean_rows: empty operand");
  Tape& t = *a.tape();
  Matrix out = a.value().colwise().mean();
  const double inv = 1.0 / static_cast<double>(a.rows());
  return t.record(std::move(out), {a}, [a, inv](Tape& tp, int self) {
    tp.grad(a.id()).rowwise() += tp.grad(self).row(0) * inv;
  });
}

// out(i, j) = col(i) + row(j) for col (n x 1), row (1 x m).
inline Var outer_sum(const Var& col, const Var& row) {
  if (col.cols() != 1 || row.rows() != 1) throw ShapeError("outer_sum: operand shapes");
  Tape& t = *col.tape();
  Matrix out = col.value().replicate(1, row.cols()) + row.value().replicate(col.rows(), 1);
  return t.record(std::move(out), {col, row}, [col, row](Tape& tp, int self) {
    const Matrix& g = tp.grad(self);
    if (tp.requires_grad(col.id())) tp.grad(col.id()) += g.rowwise().sum();
    if (tp.requires_grad(row.id())) tp.grad(row.id()) += g.colwise().sum();
  });
}

// Entries at columns >= n_valid become -inf; their gradient is dropped.
inline Var mask_tail_cols(const Var& a, Eigen::Index n_valid) {
  if (n_valid < 0 || n_valid > a.cols()) throw ShapeError("mask_tail_cols: n_valid out of range");
  Tape& t = *a.tape();
  Matrix out = a.value();
  out.rightCols(a.cols() - n_valid).setConstant(-std::numeric_limits<double>::infinity());
  return t.record(std::move(out), {a}, [a, n_valid](Tape& tp, int self) {
    tp.grad(a.id()).leftCols(n_valid) += tp.grad(self).leftCols(n_valid);
  });
}

// Softmax over a 1 x K row; -inf entries have probability exactly 0.
inline Matrix softmax_row(const Matrix& logits) {
  const double mx = logits.maxCoeff();
  Matrix p(1, logits.cols());
  double z = 0.0;
  for (Eigen::Index c = 0; c < logits.cols(); ++c) {
    p(0, c) = std::isinf(logits(0, c)) && logits(0, c) < 0 ? 0.0 : std::exp(logits(0, c) - mx);
    z += p(0, c);
  }
  return p / z;
}

// -log softmax(logits)[gold] for a 1 x K row, as 1x1.
inline Var softmax_cross_entropy(const Var& logits, int gold) {
  if (logits.rows() != 1) throw ShapeError("softmax_cross_entropy: expects a single row");
  if (gold < 0 || gold >= logits.cols())
    throw ShapeError("softmax_cross_entropy: gold index out of range");
  const Matrix& l = logits.value();
  if (!std::isfinite(l(0, gold))) throw ShapeError("softmax_cross_entropy: gold class is masked");
  Tape& t = *logits.tape();
  Matrix p = softmax_row(l);
  const double mx = l.maxCoeff();
  double z = 0.0;
  for (Eigen::Index c = 0; c < l.cols(); ++c)
    if (std::isfinite(l(0, c))) z += std::exp(l(0, c) - mx);
  Matrix out(1, 1);
  out(0, 0) = -(l(0, gold) - mx - std::log(z));
  return t.record(std::move(out), {logits}, [logits, gold, p = std::move(p)](Tape& tp, int self) {
    const double g = tp.grad(self)(0, 0);
    Matrix d = p * g;
    d(0, gold) -= g;
    tp.grad(logits.id()) += d;
  });
}

}  // namespace unimeec::ad
