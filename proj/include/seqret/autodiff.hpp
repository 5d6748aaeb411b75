#pragma once

// Minimal reverse-mode differentiation over dense Eigen matrices.
//
// A Tape records every operation in construction order; backward() walks the
// nodes in reverse exactly once. Node payloads are matrices (vectors are n x 1
// or 1 x n), so a whole sequence flows through a handful of nodes. All
// operations are templates on the scalar type: with `Dual` scalars the same
// tape produces Hessian-vector products (see dual.hpp).

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "seqret/dual.hpp"

namespace seqret::ad {

template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;

template <class S>
class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
template <class S>
struct Value {
  Tape<S>* tape = nullptr;
  std::size_t id = 0;

  const Mat<S>& value() const { return tape->value(id); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  S scalar() const { return value()(0, 0); }
};

template <class S>
class Tape {
 public:
  using Matrix = Mat<S>;
  using Backward = std::function<void(Tape&, const Matrix&)>;

  Tape() { nodes_.reserve(256); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Differentiable input.
  Value<S> leaf(Matrix v) { return append(std::move(v), true, nullptr); }
  /// Input that never receives a gradient.
  Value<S> constant(Matrix v) { return append(std::move(v), false, nullptr); }

  /// Records an operation result. `fn` receives the adjoint of the result and
  /// must accumulate into the inputs; it is dropped when no input needs a
  /// gradient.
  Value<S> push(Matrix v, std::initializer_list<Value<S>> inputs, Backward fn) {
    bool needs = false;
    for (const auto& in : inputs) needs = needs || nodes_[in.id].needs_grad;
    return append(std::move(v), needs, needs ? std::move(fn) : nullptr);
  }

  const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
  std::size_t size() const { return nodes_.size(); }

  template <class Derived>
  void accumulate(std::size_t id, const Eigen::MatrixBase<Derived>& g) {
    Node& n = nodes_[id];
    if (!n.needs_grad) return;
    if (!n.has_grad) {
      n.grad = g;
      n.has_grad = true;
    } else {
      n.grad += g;
    }
  }

  /// Reverse sweep from a 1 x 1 output. Clears adjoints of any earlier sweep.
  void backward(Value<S> out) {
    if (out.rows() != 1 || out.cols() != 1) {
      std::ostringstream msg;
      msg << "backward: output must be scalar, got " << out.rows() << "x" << out.cols();
      throw std::invalid_argument(msg.str());
    }
    for (auto& n : nodes_) {
      n.has_grad = false;
    }
    Matrix seed(1, 1);
    seed(0, 0) = S(1.0);
    accumulate(out.id, seed);
    for (std::size_t i = out.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.has_grad && n.backward) {
        // The closure may accumulate into lower ids only, so `n` stays valid.
        n.backward(*this, n.grad);
      }
    }
  }

  /// Adjoint after backward(); zeros for nodes not on a path to the output.
  Matrix grad(Value<S> v) const {
    const Node& n = nodes_[v.id];
    if (n.has_grad) return n.grad;
    return Matrix::Zero(n.value.rows(), n.value.cols());
  }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool needs_grad = false;
    bool has_grad = false;
    Backward backward;
  };

  Value<S> append(Matrix v, bool needs, Backward fn) {
    nodes_.push_back(Node{std::move(v), Matrix(), needs, false, std::move(fn)});
    return Value<S>{this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
};

namespace detail {

template <class S>
[[noreturn]] void shape_error(const char* op, const Value<S>& a, const Value<S>& b) {
  std::ostringstream msg;
  msg << op << ": shape mismatch " << a.rows() << "x" << a.cols() << " vs " << b.rows() << "x"
      << b.cols();
  throw std::invalid_argument(msg.str());
}

template <class S>
void same_shape(const char* op, const Value<S>& a, const Value<S>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) shape_error(op, a, b);
}

template <class S, class F>
Mat<S> map(const Mat<S>& m, F f) {
  return m.unaryExpr(f);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

template <class S>
Value<S> add(Value<S> a, Value<S> b) {
  detail::same_shape("add", a, b);
  return a.tape->push(a.value() + b.value(), {a, b},
                      [ia = a.id, ib = b.id](Tape<S>& t, const Mat<S>& g) {
                        t.accumulate(ia, g);
                        t.accumulate(ib, g);
                      });
}

template <class S>
Value<S> sub(Value<S> a, Value<S> b) {
  detail::same_shape("sub", a, b);
  return a.tape->push(a.value() - b.value(), {a, b},
                      [ia = a.id, ib = b.id](Tape<S>& t, const Mat<S>& g) {
                        t.accumulate(ia, g);
                        t.accumulate(ib, -g);
                      });
}

template <class S>
Value<S> neg(Value<S> a) {
  return a.tape->push(-a.value(), {a},
                      [ia = a.id](Tape<S>& t, const Mat<S>& g) { t.accumulate(ia, -g); });
}

/// Elementwise (Hadamard) product.
template <class S>
Value<S> mul(Value<S> a, Value<S> b) {
  detail::same_shape("mul", a, b);
  Mat<S> out = a.value().cwiseProduct(b.value());
  return a.tape->push(std::move(out), {a, b},
                      [ia = a.id, ib = b.id](Tape<S>& t, const Mat<S>& g) {
                        if (t.needs_grad(ia)) t.accumulate(ia, g.cwiseProduct(t.value(ib)));
                        if (t.needs_grad(ib)) t.accumulate(ib, g.cwiseProduct(t.value(ia)));
                      });
}

template <class S>
Value<S> div(Value<S> a, Value<S> b) {
  detail::same_shape("div", a, b);
  const Mat<S>& den = b.value();
  for (Eigen::Index i = 0; i < den.size(); ++i) {
    if (primal(den(i)) == 0.0) throw std::domain_error("div: division by zero");
  }
  Mat<S> out = a.value().cwiseQuotient(den);
  return a.tape->push(std::move(out), {a, b},
                      [ia = a.id, ib = b.id](Tape<S>& t, const Mat<S>& g) {
                        const Mat<S>& bv = t.value(ib);
                        if (t.needs_grad(ia)) t.accumulate(ia, g.cwiseQuotient(bv));
                        if (t.needs_grad(ib)) {
                          const Mat<S>& av = t.value(ia);
                          t.accumulate(ib, -(g.cwiseProduct(av)).cwiseQuotient(bv.cwiseProduct(bv)));
                        }
                      });
}

/// a * c for a constant scalar c.
template <class S>
Value<S> scale(Value<S> a, S c) {
  return a.tape->push(a.value() * c, {a},
                      [ia = a.id, c](Tape<S>& t, const Mat<S>& g) { t.accumulate(ia, g * c); });
}

/// a + c for a constant scalar c.
template <class S>
Value<S> shift(Value<S> a, S c) {
  Mat<S> out = a.value().array() + c;
  return a.tape->push(std::move(out), {a},
                      [ia = a.id](Tape<S>& t, const Mat<S>& g) { t.accumulate(ia, g); });
}

template <class S>
Value<S> operator+(Value<S> a, Value<S> b) { return add(a, b); }
template <class S>
Value<S> operator-(Value<S> a, Value<S> b) { return sub(a, b); }
template <class S>
Value<S> operator-(Value<S> a) { return neg(a); }

// ---------------------------------------------------------------------------
// Elementwise nonlinearities

template <class S>
Value<S> exp(Value<S> a) {
  Mat<S> out = detail::map<S>(a.value(), [](const S& x) {
    using std::exp;
    return exp(x);
  });
  return a.tape->push(std::move(out), {a}, [ia = a.id, self = a.tape->size()](Tape<S>& t, const Mat<S>& g) {
    t.accumulate(ia, g.cwiseProduct(t.value(self)));
  });
}

template <class S>
Value<S> log(Value<S> a) {
  const Mat<S>& x = a.value();
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    if (!(primal(x(i)) > 0.0)) {
      std::ostringstream msg;
      msg << "log: non-positive argument " << primal(x(i)) << " at flat index " << i;
      throw std::domain_error(msg.str());
    }
  }
  Mat<S> out = detail::map<S>(x, [](const S& v) {
    using std::log;
    return log(v);
  });
  return a.tape->push(std::move(out), {a}, [ia = a.id](Tape<S>& t, const Mat<S>& g) {
    t.accumulate(ia, g.cwiseQuotient(t.value(ia)));
  });
}

template <class S>
Value<S> tanh(Value<S> a) {
  Mat<S> out = detail::map<S>(a.value(), [](const S& x) {
    using std::tanh;
    return tanh(x);
  });
  return a.tape->push(std::move(out), {a}, [ia = a.id, self = a.tape->size()](Tape<S>& t, const Mat<S>& g) {
    const Mat<S>& y = t.value(self);
    Mat<S> dy = detail::map<S>(y, [](const S& v) { return S(1.0) - v * v; });
    t.accumulate(ia, g.cwiseProduct(dy));
  });
}

template <class S>
Value<S> relu(Value<S> a) {
  Mat<S> out = detail::map<S>(a.value(), [](const S& x) { return primal(x) > 0.0 ? x : S(0.0); });
  return a.tape->push(std::move(out), {a}, [ia = a.id](Tape<S>& t, const Mat<S>& g) {
    const Mat<S>& x = t.value(ia);
    Mat<S> gx = g;
    for (Eigen::Index i = 0; i < gx.size(); ++i) {
      if (!(primal(x(i)) > 0.0)) gx(i) = S(0.0);
    }
    t.accumulate(ia, gx);
  });
}

template <class S>
Value<S> square(Value<S> a) {
  Mat<S> out = a.value().cwiseProduct(a.value());
  return a.tape->push(std::move(out), {a}, [ia = a.id](Tape<S>& t, const Mat<S>& g) {
    t.accumulate(ia, g.cwiseProduct(t.value(ia)) * S(2.0));
  });
}

/// |a| with subgradient 0 at 0.
template <class S>
Value<S> abs(Value<S> a) {
  Mat<S> out = detail::map<S>(a.value(), [](const S& x) { return primal(x) < 0.0 ? S(-x) : x; });
  return a.tape->push(std::move(out), {a}, [ia = a.id](Tape<S>& t, const Mat<S>& g) {
    const Mat<S>& x = t.value(ia);
    Mat<S> gx = g;
    for (Eigen::Index i = 0; i < gx.size(); ++i) {
      const double p = primal(x(i));
      gx(i) = p > 0.0 ? g(i) : (p < 0.0 ? S(-g(i)) : S(0.0));
    }
    t.accumulate(ia, gx);
  });
}

// ---------------------------------------------------------------------------
// Reductions

template <class S>
Value<S> sum(Value<S> a) {
  Mat<S> out(1, 1);
  out(0, 0) = a.value().sum();
  return a.tape->push(std::move(out), {a}, [ia = a.id](Tape<S>& t, const Mat<S>& g) {
    const Mat<S>& x = t.value(ia);
    t.accumulate(ia, Mat<S>::Constant(x.rows(), x.cols(), g(0, 0)));
  });
}

template <class S>
Value<S> dot(Value<S> a, Value<S> b) {
  detail::same_shape("dot", a, b);
  Mat<S> out(1, 1);
  out(0, 0) = a.value().cwiseProduct(b.value()).sum();
  return a.tape->push(std::move(out), {a, b}, [ia = a.id, ib = b.id](Tape<S>& t, const Mat<S>& g) {
    if (t.needs_grad(ia)) t.accumulate(ia, t.value(ib) * g(0, 0));
    if (t.needs_grad(ib)) t.accumulate(ib, t.value(ia) * g(0, 0));
  });
}

/// log(sum(exp(a))) over all entries.
template <class S>
Value<S> logsumexp(Value<S> a) {
  const Mat<S>& x = a.value();
  const S m = x.maxCoeff();
  Mat<S> e = detail::map<S>(x, [m](const S& v) {
    using std::exp;
    return exp(v - m);
  });
  using std::log;
  Mat<S> out(1, 1);
  out(0, 0) = m + log(e.sum());
  return a.tape->push(std::move(out), {a}, [ia = a.id, self = a.tape->size()](Tape<S>& t, const Mat<S>& g) {
    const S lse = t.value(self)(0, 0);
    Mat<S> p = detail::map<S>(t.value(ia), [lse](const S& v) {
      using std::exp;
      return exp(v - lse);
    });
    t.accumulate(ia, p * g(0, 0));
  });
}

// ---------------------------------------------------------------------------
// Linear algebra and shape plumbing

/// Matrix product; `matvec` is the n x 1 special case.
template <class S>
Value<S> matmul(Value<S> a, Value<S> b) {
  if (a.cols() != b.rows()) detail::shape_error("matmul", a, b);
  Mat<S> out = a.value() * b.value();
  return a.tape->push(std::move(out), {a, b}, [ia = a.id, ib = b.id](Tape<S>& t, const Mat<S>& g) {
    if (t.needs_grad(ia)) t.accumulate(ia, g * t.value(ib).transpose());
    if (t.needs_grad(ib)) t.accumulate(ib, t.value(ia).transpose() * g);
  });
}

template <class S>
Value<S> matvec(Value<S> a, Value<S> x) {
  if (x.cols() != 1) detail::shape_error("matvec", a, x);
  return matmul(a, x);
}

template <class S>
Value<S> transpose(Value<S> a) {
  return a.tape->push(a.value().transpose(), {a},
                      [ia = a.id](Tape<S>& t, const Mat<S>& g) { t.accumulate(ia, g.transpose()); });
}

/// M + v broadcast over columns (v is rows x 1).
template <class S>
Value<S> add_colvec(Value<S> m, Value<S> v) {
  if (v.cols() != 1 || v.rows() != m.rows()) detail::shape_error("add_colvec", m, v);
  Mat<S> out = m.value().colwise() + v.value().col(0);
  return m.tape->push(std::move(out), {m, v}, [im = m.id, iv = v.id](Tape<S>& t, const Mat<S>& g) {
    t.accumulate(im, g);
    if (t.needs_grad(iv)) t.accumulate(iv, g.rowwise().sum());
  });
}

/// Each column of M multiplied elementwise by v (rows x 1).
template <class S>
Value<S> mul_colvec(Value<S> m, Value<S> v) {
  if (v.cols() != 1 || v.rows() != m.rows()) detail::shape_error("mul_colvec", m, v);
  Mat<S> out = m.value().array().colwise() * v.value().col(0).array();
  return m.tape->push(std::move(out), {m, v}, [im = m.id, iv = v.id](Tape<S>& t, const Mat<S>& g) {
    if (t.needs_grad(im)) {
      Mat<S> gm = g.array().colwise() * t.value(iv).col(0).array();
      t.accumulate(im, gm);
    }
    if (t.needs_grad(iv)) t.accumulate(iv, g.cwiseProduct(t.value(im)).rowwise().sum());
  });
}

/// Columns [start, start + n).
template <class S>
Value<S> cols(Value<S> m, Eigen::Index start, Eigen::Index n) {
  if (start < 0 || n < 0 || start + n > m.cols()) {
    throw std::invalid_argument("cols: range out of bounds");
  }
  Mat<S> out = m.value().middleCols(start, n);
  return m.tape->push(std::move(out), {m}, [im = m.id, start, n](Tape<S>& t, const Mat<S>& g) {
    const Mat<S>& x = t.value(im);
    Mat<S> gm = Mat<S>::Zero(x.rows(), x.cols());
    gm.middleCols(start, n) = g;
    t.accumulate(im, gm);
  });
}

template <class S>
Value<S> row(Value<S> m, Eigen::Index r) {
  if (r < 0 || r >= m.rows()) throw std::invalid_argument("row: index out of bounds");
  Mat<S> out = m.value().row(r);
  return m.tape->push(std::move(out), {m}, [im = m.id, r](Tape<S>& t, const Mat<S>& g) {
    const Mat<S>& x = t.value(im);
    Mat<S> gm = Mat<S>::Zero(x.rows(), x.cols());
    gm.row(r) = g;
    t.accumulate(im, gm);
  });
}

/// Horizontal concatenation [a b].
template <class S>
Value<S> hcat(Value<S> a, Value<S> b) {
  if (a.rows() != b.rows()) detail::shape_error("hcat", a, b);
  Mat<S> out(a.rows(), a.cols() + b.cols());
  out << a.value(), b.value();
  return a.tape->push(std::move(out), {a, b}, [ia = a.id, ib = b.id](Tape<S>& t, const Mat<S>& g) {
    const Eigen::Index na = t.value(ia).cols();
    if (t.needs_grad(ia)) t.accumulate(ia, g.leftCols(na));
    if (t.needs_grad(ib)) t.accumulate(ib, g.rightCols(g.cols() - na));
  });
}

/// Output column k is input column idx[k]; repeated indices accumulate.
template <class S>
Value<S> select_cols(Value<S> m, std::vector<Eigen::Index> idx) {
  const Mat<S>& x = m.value();
  Mat<S> out(x.rows(), static_cast<Eigen::Index>(idx.size()));
  for (std::size_t k = 0; k < idx.size(); ++k) {
    if (idx[k] < 0 || idx[k] >= x.cols()) throw std::invalid_argument("select_cols: index out of bounds");
    out.col(static_cast<Eigen::Index>(k)) = x.col(idx[k]);
  }
  return m.tape->push(std::move(out), {m}, [im = m.id, idx = std::move(idx)](Tape<S>& t, const Mat<S>& g) {
    const Mat<S>& xv = t.value(im);
    Mat<S> gm = Mat<S>::Zero(xv.rows(), xv.cols());
    for (std::size_t k = 0; k < idx.size(); ++k) gm.col(idx[k]) += g.col(static_cast<Eigen::Index>(k));
    t.accumulate(im, gm);
  });
}

/// 1 x n row holding M(idx[j], j).
template <class S>
Value<S> pick(Value<S> m, std::vector<Eigen::Index> idx) {
  const Mat<S>& x = m.value();
  if (static_cast<Eigen::Index>(idx.size()) != x.cols()) {
    throw std::invalid_argument("pick: need one index per column");
  }
  Mat<S> out(1, x.cols());
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    if (idx[j] < 0 || idx[j] >= x.rows()) throw std::invalid_argument("pick: index out of bounds");
    out(0, j) = x(idx[j], j);
  }
  return m.tape->push(std::move(out), {m}, [im = m.id, idx = std::move(idx)](Tape<S>& t, const Mat<S>& g) {
    const Mat<S>& xv = t.value(im);
    Mat<S> gm = Mat<S>::Zero(xv.rows(), xv.cols());
    for (Eigen::Index j = 0; j < xv.cols(); ++j) gm(idx[j], j) = g(0, j);
    t.accumulate(im, gm);
  });
}

/// Running sum along columns: out[:, j] = sum_{i <= j} m[:, i].
template <class S>
Value<S> cumsum_cols(Value<S> m) {
  Mat<S> out = m.value();
  for (Eigen::Index j = 1; j < out.cols(); ++j) out.col(j) += out.col(j - 1);
  return m.tape->push(std::move(out), {m}, [im = m.id](Tape<S>& t, const Mat<S>& g) {
    Mat<S> gm = g;
    for (Eigen::Index j = gm.cols() - 1; j-- > 0;) gm.col(j) += gm.col(j + 1);
    t.accumulate(im, gm);
  });
}

/// First differences along columns with an implicit zero column before the first.
template <class S>
Value<S> diff_cols(Value<S> m) {
  Mat<S> out = m.value();
  for (Eigen::Index j = out.cols() - 1; j > 0; --j) out.col(j) -= m.value().col(j - 1);
  return m.tape->push(std::move(out), {m}, [im = m.id](Tape<S>& t, const Mat<S>& g) {
    Mat<S> gm = g;
    for (Eigen::Index j = 0; j + 1 < gm.cols(); ++j) gm.col(j) -= g.col(j + 1);
    t.accumulate(im, gm);
  });
}

// ---------------------------------------------------------------------------
// Softmax family (fused adjoints)

/// Row-wise softmax. With `causal`, row i is normalized over columns 0..i and
/// the rest are exactly zero.
template <class S>
Value<S> softmax_rows(Value<S> a, bool causal = false) {
  const Mat<S>& x = a.value();
  Mat<S> out = Mat<S>::Zero(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const Eigen::Index width = causal ? std::min<Eigen::Index>(i + 1, x.cols()) : x.cols();
    const S m = x.row(i).head(width).maxCoeff();
    S total(0.0);
    for (Eigen::Index j = 0; j < width; ++j) {
      using std::exp;
      out(i, j) = exp(x(i, j) - m);
      total += out(i, j);
    }
    out.row(i).head(width) /= total;
  }
  return a.tape->push(std::move(out), {a}, [ia = a.id, self = a.tape->size()](Tape<S>& t, const Mat<S>& g) {
    const Mat<S>& y = t.value(self);
    Mat<S> gy = g.cwiseProduct(y);
    Mat<S> ga = gy - (y.array().colwise() * gy.rowwise().sum().array()).matrix();
    t.accumulate(ia, ga);
  });
}

/// Column-wise softmax; the single-column case is the plain vector softmax.
template <class S>
Value<S> softmax(Value<S> a) {
  return transpose(softmax_rows(transpose(a)));
}

/// Column-wise log-softmax.
template <class S>
Value<S> log_softmax_cols(Value<S> a) {
  const Mat<S>& x = a.value();
  Mat<S> out(x.rows(), x.cols());
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    const S m = x.col(j).maxCoeff();
    S total(0.0);
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      using std::exp;
      total += exp(x(i, j) - m);
    }
    using std::log;
    const S lse = m + log(total);
    out.col(j) = x.col(j).array() - lse;
  }
  return a.tape->push(std::move(out), {a}, [ia = a.id, self = a.tape->size()](Tape<S>& t, const Mat<S>& g) {
    Mat<S> p = detail::map<S>(t.value(self), [](const S& v) {
      using std::exp;
      return exp(v);
    });
    Mat<S> ga = g - (p.array().rowwise() * g.colwise().sum().array()).matrix();
    t.accumulate(ia, ga);
  });
}

}  // namespace seqret::ad
