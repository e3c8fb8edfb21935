#pragma once

// Minimal reverse-mode differentiation over dense Eigen matrices.
//
// Convention: activations are (batch x features) matrices. A Tape records
// every op of one forward pass; Tape::backward walks it in reverse and
// accumulates gradients. Parameters are never mutated by a forward pass, so
// model forward methods are const and inference is safe from many threads
// (each thread owns its Tape).

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "posgen/core/error.hpp"

namespace posgen::ag {

template <class T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;

/// A trainable array. Gradients live on the Tape, not here.
template <class T>
struct Parameter {
  Matrix<T> value;
};

template <class T>
class Tape;

template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  int id = -1;

  const Matrix<T>& value() const { return tape->value(id); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  T scalar() const { return value()(0, 0); }
};

template <class T>
class Tape {
 public:
  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }

  Var<T> constant(Matrix<T> m) { return {this, push(std::move(m), false)}; }

  /// Leaf for a parameter. Repeated calls with the same parameter return the
  /// same node so gradient contributions accumulate in one place.
  Var<T> param(const Parameter<T>& p) {
    if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return {this, it->second};
    Node n;
    n.ext = &p.value;
    n.needs_grad = record_;
    nodes_.push_back(std::move(n));
    const int id = static_cast<int>(nodes_.size()) - 1;
    param_nodes_.emplace(&p, id);
    return {this, id};
  }

  const Matrix<T>& value(int id) const {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    return n.ext ? *n.ext : n.value;
  }

  bool needs_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }

  /// Records an op result. `fn` runs during backward when the result needs a
  /// gradient; it reads the result gradient via grad(out) and accumulates
  /// into its inputs via accumulate().
  int push(Matrix<T> value, bool needs_grad, std::function<void(int)> fn = {}) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = record_ && needs_grad;
    if (n.needs_grad) n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  const Matrix<T>& grad(int id) const { return nodes_[static_cast<std::size_t>(id)].grad; }

  /// Returns the gradient buffer for `id`, zero-initialized on first use.
  Matrix<T>& grad_buffer(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.size() == 0) {
      const Matrix<T>& v = value(id);
      n.grad = Matrix<T>::Zero(v.rows(), v.cols());
    }
    return n.grad;
  }

  template <class Expr>
  void accumulate(int id, const Expr& g) {
    if (!needs_grad(id)) return;
    grad_buffer(id) += g;
  }

  void backward(Var<T> loss) {
    if (!record_) throw ContractError("backward on a non-recording tape");
    if (loss.rows() != 1 || loss.cols() != 1) throw ContractError("backward needs a scalar loss");
    grad_buffer(loss.id)(0, 0) += T(1);
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.needs_grad && n.backward && n.grad.size() != 0) n.backward(i);
    }
  }

  /// Gradient accumulated for `p`; zeros of p's shape when `p` was unused.
  Matrix<T> grad(const Parameter<T>& p) const {
    auto it = param_nodes_.find(&p);
    if (it == param_nodes_.end() || grad(it->second).size() == 0) {
      return Matrix<T>::Zero(p.value.rows(), p.value.cols());
    }
    return grad(it->second);
  }

 private:
  struct Node {
    Matrix<T> value;
    const Matrix<T>* ext = nullptr;
    Matrix<T> grad;
    bool needs_grad = false;
    std::function<void(int)> backward;
  };

  bool record_;
  std::vector<Node> nodes_;
  std::unordered_map<const Parameter<T>*, int> param_nodes_;
};

namespace detail {

template <class T>
void check_same(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.tape != b.tape) throw ContractError(std::string(op) + ": operands on different tapes");
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ContractError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                        std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                        std::to_string(b.cols()));
  }
}

template <class T>
bool any_grad(std::initializer_list<Var<T>> vs) {
  for (const auto& v : vs)
    if (v.tape->needs_grad(v.id)) return true;
  return false;
}

}  // namespace detail

template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
  if (a.cols() != b.rows()) {
    throw ContractError("matmul: inner dimensions " + std::to_string(a.cols()) + " vs " +
                        std::to_string(b.rows()));
  }
  Tape<T>* t = a.tape;
  Matrix<T> out = a.value() * b.value();
  return {t, t->push(std::move(out), detail::any_grad({a, b}), [t, a, b](int o) {
            const Matrix<T>& g = t->grad(o);
            if (t->needs_grad(a.id)) t->accumulate(a.id, g * b.value().transpose());
            if (t->needs_grad(b.id)) t->accumulate(b.id, a.value().transpose() * g);
          })};
}

/// a + b; b may also be a single row broadcast over a's rows.
template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  Tape<T>* t = a.tape;
  if (b.rows() == 1 && a.rows() != 1) {
    if (a.cols() != b.cols()) throw ContractError("add: broadcast width mismatch");
    Matrix<T> out = a.value().rowwise() + b.value().row(0);
    return {t, t->push(std::move(out), detail::any_grad({a, b}), [t, a, b](int o) {
              const Matrix<T>& g = t->grad(o);
              t->accumulate(a.id, g);
              t->accumulate(b.id, g.colwise().sum());
            })};
  }
  detail::check_same(a, b, "add");
  Matrix<T> out = a.value() + b.value();
  return {t, t->push(std::move(out), detail::any_grad({a, b}), [t, a, b](int o) {
            t->accumulate(a.id, t->grad(o));
            t->accumulate(b.id, t->grad(o));
          })};
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
  detail::check_same(a, b, "sub");
  Tape<T>* t = a.tape;
  Matrix<T> out = a.value() - b.value();
  return {t, t->push(std::move(out), detail::any_grad({a, b}), [t, a, b](int o) {
            t->accumulate(a.id, t->grad(o));
            t->accumulate(b.id, -t->grad(o));
          })};
}

/// Elementwise product.
template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::check_same(a, b, "mul");
  Tape<T>* t = a.tape;
  Matrix<T> out = a.value().cwiseProduct(b.value());
  return {t, t->push(std::move(out), detail::any_grad({a, b}), [t, a, b](int o) {
            const Matrix<T>& g = t->grad(o);
            if (t->needs_grad(a.id)) t->accumulate(a.id, g.cwiseProduct(b.value()));
            if (t->needs_grad(b.id)) t->accumulate(b.id, g.cwiseProduct(a.value()));
          })};
}

/// Scales row i of `a` by column vector entry c(i, 0).
template <class T>
Var<T> mul_col(Var<T> a, Var<T> c) {
  if (c.cols() != 1 || c.rows() != a.rows()) throw ContractError("mul_col: expects (B x 1) scale");
  Tape<T>* t = a.tape;
  Matrix<T> out = a.value().array().colwise() * c.value().col(0).array();
  return {t, t->push(std::move(out), detail::any_grad({a, c}), [t, a, c](int o) {
            const Matrix<T>& g = t->grad(o);
            if (t->needs_grad(a.id)) {
              t->accumulate(a.id, (g.array().colwise() * c.value().col(0).array()).matrix());
            }
            if (t->needs_grad(c.id)) {
              t->accumulate(c.id, g.cwiseProduct(a.value()).rowwise().sum());
            }
          })};
}

template <class T>
Var<T> scale(Var<T> a, T s) {
  Tape<T>* t = a.tape;
  Matrix<T> out = a.value() * s;
  return {t, t->push(std::move(out), detail::any_grad({a}),
                     [t, a, s](int o) { t->accumulate(a.id, t->grad(o) * s); })};
}

template <class T>
Var<T> transpose(Var<T> a) {
  Tape<T>* t = a.tape;
  Matrix<T> out = a.value().transpose();
  return {t, t->push(std::move(out), detail::any_grad({a}),
                     [t, a](int o) { t->accumulate(a.id, t->grad(o).transpose()); })};
}

template <class T>
Var<T> sigmoid(Var<T> a) {
  Tape<T>* t = a.tape;
  Matrix<T> out = a.value().unaryExpr([](T x) {
    return x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
  });
  return {t, t->push(std::move(out), detail::any_grad({a}), [t, a](int o) {
            const Matrix<T>& y = t->value(o);
            t->accumulate(a.id, (t->grad(o).array() * y.array() * (T(1) - y.array())).matrix());
          })};
}

template <class T>
Var<T> tanh(Var<T> a) {
  Tape<T>* t = a.tape;
  Matrix<T> out = a.value().array().tanh().matrix();
  return {t, t->push(std::move(out), detail::any_grad({a}), [t, a](int o) {
            const Matrix<T>& y = t->value(o);
            t->accumulate(a.id, (t->grad(o).array() * (T(1) - y.array().square())).matrix());
          })};
}

template <class T>
Var<T> relu(Var<T> a) {
  Tape<T>* t = a.tape;
  Matrix<T> out = a.value().cwiseMax(T(0));
  return {t, t->push(std::move(out), detail::any_grad({a}), [t, a](int o) {
            const Matrix<T>& x = t->value(a.id);
            t->accumulate(a.id, (x.array() > T(0)).select(t->grad(o).array(), T(0)).matrix());
          })};
}

template <class T>
Var<T> exp(Var<T> a) {
  Tape<T>* t = a.tape;
  Matrix<T> out = a.value().array().exp().matrix();
  return {t, t->push(std::move(out), detail::any_grad({a}), [t, a](int o) {
            t->accumulate(a.id, t->grad(o).cwiseProduct(t->value(o)));
          })};
}

template <class T>
Var<T> concat_cols(std::span<const Var<T>> parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  Tape<T>* t = parts.front().tape;
  const Eigen::Index rows = parts.front().rows();
  Eigen::Index cols = 0;
  bool grad = false;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw ContractError("concat_cols: row mismatch");
    cols += p.cols();
    grad = grad || t->needs_grad(p.id);
  }
  Matrix<T> out(rows, cols);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  std::vector<Var<T>> keep(parts.begin(), parts.end());
  return {t, t->push(std::move(out), grad, [t, keep](int o) {
            Eigen::Index off = 0;
            for (const auto& p : keep) {
              t->accumulate(p.id, t->grad(o).middleCols(off, p.cols()));
              off += p.cols();
            }
          })};
}

template <class T>
Var<T> concat_cols(std::initializer_list<Var<T>> parts) {
  return concat_cols(std::span<const Var<T>>(parts.begin(), parts.size()));
}

template <class T>
Var<T> concat_rows(std::span<const Var<T>> parts) {
  if (parts.empty()) throw ContractError("concat_rows: no inputs");
  Tape<T>* t = parts.front().tape;
  const Eigen::Index cols = parts.front().cols();
  Eigen::Index rows = 0;
  bool grad = false;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw ContractError("concat_rows: column mismatch");
    rows += p.rows();
    grad = grad || t->needs_grad(p.id);
  }
  Matrix<T> out(rows, cols);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  std::vector<Var<T>> keep(parts.begin(), parts.end());
  return {t, t->push(std::move(out), grad, [t, keep](int o) {
            Eigen::Index off = 0;
            for (const auto& p : keep) {
              t->accumulate(p.id, t->grad(o).middleRows(off, p.rows()));
              off += p.rows();
            }
          })};
}

template <class T>
Var<T> slice_cols(Var<T> a, Eigen::Index start, Eigen::Index n) {
  if (start < 0 || n < 0 || start + n > a.cols()) throw ContractError("slice_cols: out of range");
  Tape<T>* t = a.tape;
  Matrix<T> out = a.value().middleCols(start, n);
  return {t, t->push(std::move(out), detail::any_grad({a}), [t, a, start, n](int o) {
            if (!t->needs_grad(a.id)) return;
            t->grad_buffer(a.id).middleCols(start, n) += t->grad(o);
          })};
}

/// Row-wise dot product: (B x d), (B x d) -> (B x 1).
template <class T>
Var<T> rows_dot(Var<T> a, Var<T> b) {
  detail::check_same(a, b, "rows_dot");
  Tape<T>* t = a.tape;
  Matrix<T> out = a.value().cwiseProduct(b.value()).rowwise().sum();
  return {t, t->push(std::move(out), detail::any_grad({a, b}), [t, a, b](int o) {
            const Eigen::Array<T, Eigen::Dynamic, 1> g = t->grad(o).col(0).array();
            if (t->needs_grad(a.id)) t->accumulate(a.id, (b.value().array().colwise() * g).matrix());
            if (t->needs_grad(b.id)) t->accumulate(b.id, (a.value().array().colwise() * g).matrix());
          })};
}

template <class T>
Matrix<T> softmax_rows_value(const Matrix<T>& x) {
  Matrix<T> y(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const T m = x.row(i).maxCoeff();
    y.row(i) = (x.row(i).array() - m).exp();
    y.row(i) /= y.row(i).sum();
  }
  return y;
}

template <class T>
Var<T> softmax_rows(Var<T> a) {
  Tape<T>* t = a.tape;
  Matrix<T> out = softmax_rows_value(a.value());
  return {t, t->push(std::move(out), detail::any_grad({a}), [t, a](int o) {
            const Matrix<T>& y = t->value(o);
            const Matrix<T>& g = t->grad(o);
            const Matrix<T> dot = g.cwiseProduct(y).rowwise().sum();
            t->accumulate(a.id, (y.array() * (g.array().colwise() - dot.col(0).array())).matrix());
          })};
}

template <class T>
Var<T> sum(Var<T> a) {
  Tape<T>* t = a.tape;
  Matrix<T> out(1, 1);
  out(0, 0) = a.value().sum();
  return {t, t->push(std::move(out), detail::any_grad({a}), [t, a](int o) {
            const T g = t->grad(o)(0, 0);
            t->accumulate(a.id, Matrix<T>::Constant(a.rows(), a.cols(), g));
          })};
}

template <class T>
Var<T> mean(Var<T> a) {
  return scale(sum(a), T(1) / static_cast<T>(a.value().size()));
}

/// Sum of squares of every entry.
template <class T>
Var<T> sq_sum(Var<T> a) {
  Tape<T>* t = a.tape;
  Matrix<T> out(1, 1);
  out(0, 0) = a.value().squaredNorm();
  return {t, t->push(std::move(out), detail::any_grad({a}), [t, a](int o) {
            t->accumulate(a.id, a.value() * (T(2) * t->grad(o)(0, 0)));
          })};
}

/// Row i of the result is the sum of table rows listed in bags[i].
template <class T>
Var<T> embedding_bag(Var<T> table, std::vector<std::vector<int>> bags) {
  Tape<T>* t = table.tape;
  const Matrix<T>& w = table.value();
  Matrix<T> out = Matrix<T>::Zero(static_cast<Eigen::Index>(bags.size()), w.cols());
  for (std::size_t i = 0; i < bags.size(); ++i) {
    for (int j : bags[i]) {
      if (j < 0 || j >= w.rows()) throw ContractError("embedding_bag: index out of range");
      out.row(static_cast<Eigen::Index>(i)) += w.row(j);
    }
  }
  return {t, t->push(std::move(out), detail::any_grad({table}),
                     [t, table, bags = std::move(bags)](int o) {
                       const Matrix<T>& g = t->grad(o);
                       Matrix<T>& gw = t->grad_buffer(table.id);
                       for (std::size_t i = 0; i < bags.size(); ++i)
                         for (int j : bags[i]) gw.row(j) += g.row(static_cast<Eigen::Index>(i));
                     })};
}

/// Gathers one table row per entry of `ids`.
template <class T>
Var<T> gather_rows(Var<T> table, std::span<const int> ids) {
  std::vector<std::vector<int>> bags;
  bags.reserve(ids.size());
  for (int id : ids) bags.push_back({id});
  return embedding_bag(table, std::move(bags));
}

/// Mean binary cross-entropy of (B x 1) logits against 0/1 labels.
template <class T>
Var<T> bce_with_logits(Var<T> logits, std::span<const T> labels) {
  if (logits.cols() != 1 || static_cast<std::size_t>(logits.rows()) != labels.size()) {
    throw ContractError("bce_with_logits: expects (B x 1) logits and B labels");
  }
  Tape<T>* t = logits.tape;
  const Eigen::Index n = logits.rows();
  Matrix<T> out(1, 1);
  T acc = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const T x = logits.value()(i, 0);
    const T y = labels[static_cast<std::size_t>(i)];
    acc += std::max(x, T(0)) - x * y + std::log1p(std::exp(-std::abs(x)));
  }
  out(0, 0) = acc / static_cast<T>(n);
  std::vector<T> ys(labels.begin(), labels.end());
  return {t, t->push(std::move(out), detail::any_grad({logits}), [t, logits, ys, n](int o) {
            const T g = t->grad(o)(0, 0) / static_cast<T>(n);
            Matrix<T> d(n, 1);
            for (Eigen::Index i = 0; i < n; ++i) {
              const T x = logits.value()(i, 0);
              const T p = x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
              d(i, 0) = g * (p - ys[static_cast<std::size_t>(i)]);
            }
            t->accumulate(logits.id, d);
          })};
}

/// Sum over rows of weight[i] * -log softmax(logits[i])[target[i]], where the
/// softmax only spans entries with allowed(i, j) != 0 (all entries when
/// `allowed` is empty). Rows with zero weight are skipped.
template <class T>
Var<T> masked_nll(Var<T> logits, std::span<const int> targets, std::span<const T> weights,
                  const Matrix<T>& allowed = Matrix<T>()) {
  const Eigen::Index n = logits.rows();
  const Eigen::Index v = logits.cols();
  if (static_cast<std::size_t>(n) != targets.size() || targets.size() != weights.size()) {
    throw ContractError("masked_nll: targets/weights must match batch size");
  }
  const bool masked = allowed.size() != 0;
  if (masked && (allowed.rows() != n || allowed.cols() != v)) {
    throw ContractError("masked_nll: mask shape mismatch");
  }
  Tape<T>* t = logits.tape;
  Matrix<T> probs = Matrix<T>::Zero(n, v);
  T acc = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const T w = weights[static_cast<std::size_t>(i)];
    if (w == T(0)) continue;
    const int tgt = targets[static_cast<std::size_t>(i)];
    if (tgt < 0 || tgt >= v || (masked && allowed(i, tgt) == T(0))) {
      throw ContractError("masked_nll: target outside the allowed set");
    }
    T m = -std::numeric_limits<T>::infinity();
    for (Eigen::Index j = 0; j < v; ++j)
      if (!masked || allowed(i, j) != T(0)) m = std::max(m, logits.value()(i, j));
    T z = 0;
    for (Eigen::Index j = 0; j < v; ++j) {
      if (masked && allowed(i, j) == T(0)) continue;
      probs(i, j) = std::exp(logits.value()(i, j) - m);
      z += probs(i, j);
    }
    probs.row(i) /= z;
    acc += w * -(logits.value()(i, tgt) - m - std::log(z));
  }
  Matrix<T> out(1, 1);
  out(0, 0) = acc;
  std::vector<int> tg(targets.begin(), targets.end());
  std::vector<T> ws(weights.begin(), weights.end());
  return {t, t->push(std::move(out), detail::any_grad({logits}),
                     [t, logits, probs = std::move(probs), tg, ws](int o) {
                       const T g = t->grad(o)(0, 0);
                       Matrix<T> d = probs;
                       for (Eigen::Index i = 0; i < d.rows(); ++i) {
                         const T w = ws[static_cast<std::size_t>(i)];
                         if (w == T(0)) continue;
                         d(i, tg[static_cast<std::size_t>(i)]) -= T(1);
                         d.row(i) *= g * w;
                       }
                       t->accumulate(logits.id, d);
                     })};
}

/// Per-row KL(N(mu_q, exp(ls_q)^2) || N(mu_p, exp(ls_p)^2)) for diagonal
/// Gaussians parameterized by log standard deviation. Returns (B x 1).
template <class T>
Var<T> gaussian_kl(Var<T> mu_q, Var<T> ls_q, Var<T> mu_p, Var<T> ls_p) {
  detail::check_same(mu_q, ls_q, "gaussian_kl");
  detail::check_same(mu_q, mu_p, "gaussian_kl");
  detail::check_same(mu_q, ls_p, "gaussian_kl");
  Tape<T>* t = mu_q.tape;
  const Matrix<T> dm = mu_q.value() - mu_p.value();
  const Matrix<T> inv_vp = (T(-2) * ls_p.value().array()).exp().matrix();
  const Matrix<T> ratio = (T(2) * (ls_q.value() - ls_p.value()).array()).exp().matrix();
  const Matrix<T> terms = (ls_p.value().array() - ls_q.value().array() +
                           (ratio.array() + dm.array().square() * inv_vp.array()) * T(0.5) - T(0.5))
                              .matrix();
  Matrix<T> out = terms.rowwise().sum();
  return {t, t->push(std::move(out), detail::any_grad({mu_q, ls_q, mu_p, ls_p}),
                     [t, mu_q, ls_q, mu_p, ls_p](int o) {
                       const Eigen::Array<T, Eigen::Dynamic, 1> g = t->grad(o).col(0).array();
                       const Matrix<T> dm = mu_q.value() - mu_p.value();
                       const Matrix<T> inv_vp = (T(-2) * ls_p.value().array()).exp().matrix();
                       const Matrix<T> ratio = (T(2) * (ls_q.value() - ls_p.value()).array()).exp().matrix();
                       const Matrix<T> d_mu = dm.cwiseProduct(inv_vp);
                       t->accumulate(mu_q.id, (d_mu.array().colwise() * g).matrix());
                       t->accumulate(mu_p.id, ((-d_mu).array().colwise() * g).matrix());
                       t->accumulate(ls_q.id,
                                     ((ratio.array() - T(1)).colwise() * g).matrix());
                       t->accumulate(ls_p.id,
                                     ((T(1) - ratio.array() - dm.array().square() * inv_vp.array())
                                          .colwise() *
                                      g)
                                         .matrix());
                     })};
}

}  // namespace posgen::ag
