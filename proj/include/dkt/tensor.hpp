#pragma once

// Dense 64-bit matrices with a reverse-mode gradient tape.
//
// A Tensor is a (rows, cols) matrix; column vectors are n×1 and scalars 1×1.
// Operations build a DAG of nodes. GradTape linearizes the DAG from a scalar
// root (every node's inputs precede it) and replays adjoints in reverse, so
// each node is visited exactly once. Gradients accumulate additively until
// zero_grad() — callers must clear them between optimizer steps.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace dkt {

struct shape_error : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Signals the caller to escalate jitter and retry the factorization.
struct not_positive_definite : std::runtime_error {
  int pivot;
  explicit not_positive_definite(int pivot_index)
      : std::runtime_error("matrix not positive definite at pivot " +
                           std::to_string(pivot_index)),
        pivot(pivot_index) {}
};

namespace detail {

struct TensorNode {
  int rows = 0;
  int cols = 0;
  std::vector<double> values;
  bool requires_grad = false;
  std::vector<double> grad;  // same size as values whenever requires_grad
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(const TensorNode&)> backprop;  // pushes this->grad into parents

  std::size_t size() const { return values.size(); }
};

inline bool all_finite(const std::vector<double>& v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

}  // namespace detail

class Tensor {
 public:
  Tensor() : node_(std::make_shared<detail::TensorNode>()) {}

  static Tensor from(int rows, int cols, std::vector<double> values,
                     bool requires_grad = false) {
    if (rows < 0 || cols < 0 ||
        values.size() != static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols))
      throw shape_error("tensor value count does not match shape");
    if (!detail::all_finite(values))
      throw std::invalid_argument("tensor constructed with non-finite values");
    Tensor t;
    t.node_->rows = rows;
    t.node_->cols = cols;
    t.node_->values = std::move(values);
    if (requires_grad) {
      t.node_->requires_grad = true;
      t.node_->grad.assign(t.node_->values.size(), 0.0);
    }
    return t;
  }

  static Tensor zeros(int rows, int cols, bool requires_grad = false) {
    return from(rows, cols, std::vector<double>(static_cast<std::size_t>(rows) * cols, 0.0),
                requires_grad);
  }

  static Tensor constant(int rows, int cols, double value) {
    return from(rows, cols, std::vector<double>(static_cast<std::size_t>(rows) * cols, value));
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return from(1, 1, {value}, requires_grad);
  }

  static Tensor identity(int n) {
    Tensor t = zeros(n, n);
    for (int i = 0; i < n; ++i) t.node_->values[static_cast<std::size_t>(i) * n + i] = 1.0;
    return t;
  }

  static Tensor ones(int rows, int cols) { return constant(rows, cols, 1.0); }

  int rows() const { return node_->rows; }
  int cols() const { return node_->cols; }
  std::size_t size() const { return node_->size(); }
  bool is_scalar() const { return rows() == 1 && cols() == 1; }
  bool requires_grad() const { return node_->requires_grad; }

  double value() const {
    if (!is_scalar()) throw shape_error("value() requires a 1x1 tensor");
    return node_->values[0];
  }

  double at(int i, int j) const {
    check_index(i, j);
    return node_->values[static_cast<std::size_t>(i) * cols() + j];
  }

  std::span<const double> values() const { return node_->values; }

  // Mutable access is meant for leaves (optimizer updates, finite differences);
  // graphs built from old values are stale after mutation.
  std::span<double> mutable_values() { return node_->values; }

  void set(int i, int j, double v) {
    check_index(i, j);
    if (!std::isfinite(v)) throw std::invalid_argument("non-finite value in set()");
    node_->values[static_cast<std::size_t>(i) * cols() + j] = v;
  }

  std::span<const double> grad() const {
    if (!node_->requires_grad) throw std::logic_error("tensor does not require grad");
    return node_->grad;
  }

  double grad_at(int i, int j) const {
    check_index(i, j);
    if (!node_->requires_grad) throw std::logic_error("tensor does not require grad");
    return node_->grad[static_cast<std::size_t>(i) * cols() + j];
  }

  void zero_grad() {
    if (node_->requires_grad) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
  }

  // Value snapshot with no gradient tracking (safe to share across threads).
  Tensor detached() const {
    return from(rows(), cols(), node_->values, false);
  }

  Tensor clone(bool requires_grad) const {
    return from(rows(), cols(), node_->values, requires_grad);
  }

  bool same_node(const Tensor& other) const { return node_ == other.node_; }

  std::shared_ptr<detail::TensorNode> node() const { return node_; }

 private:
  void check_index(int i, int j) const {
    if (i < 0 || i >= rows() || j < 0 || j >= cols()) throw shape_error("index out of range");
  }

  std::shared_ptr<detail::TensorNode> node_;

  friend Tensor wrap_node(std::shared_ptr<detail::TensorNode> n);
};

inline Tensor wrap_node(std::shared_ptr<detail::TensorNode> n) {
  Tensor t;
  t.node_ = std::move(n);
  return t;
}

namespace detail {

inline Tensor make_op(int rows, int cols, std::vector<double> values,
                      std::initializer_list<Tensor> inputs,
                      std::function<void(const TensorNode&)> backprop) {
  auto node = std::make_shared<TensorNode>();
  node->rows = rows;
  node->cols = cols;
  node->values = std::move(values);
  bool needs_grad = false;
  for (const Tensor& t : inputs)
    if (t.requires_grad()) needs_grad = true;
  if (needs_grad) {
    node->requires_grad = true;
    node->grad.assign(node->values.size(), 0.0);
    node->backprop = std::move(backprop);
    for (const Tensor& t : inputs)
      if (t.requires_grad()) node->parents.push_back(t.node());
  }
  return wrap_node(std::move(node));
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw shape_error(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                      std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                      std::to_string(b.cols()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and broadcast primitives
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
  auto an = a.node(), bn = b.node();
  return detail::make_op(a.rows(), a.cols(), std::move(out), {a, b},
                         [an, bn](const detail::TensorNode& o) {
                           if (an->requires_grad)
                             for (std::size_t i = 0; i < o.size(); ++i) an->grad[i] += o.grad[i];
                           if (bn->requires_grad)
                             for (std::size_t i = 0; i < o.size(); ++i) bn->grad[i] += o.grad[i];
                         });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] - b.values()[i];
  auto an = a.node(), bn = b.node();
  return detail::make_op(a.rows(), a.cols(), std::move(out), {a, b},
                         [an, bn](const detail::TensorNode& o) {
                           if (an->requires_grad)
                             for (std::size_t i = 0; i < o.size(); ++i) an->grad[i] += o.grad[i];
                           if (bn->requires_grad)
                             for (std::size_t i = 0; i < o.size(); ++i) bn->grad[i] -= o.grad[i];
                         });
}

inline Tensor neg(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = -a.values()[i];
  auto an = a.node();
  return detail::make_op(a.rows(), a.cols(), std::move(out), {a},
                         [an](const detail::TensorNode& o) {
                           for (std::size_t i = 0; i < o.size(); ++i) an->grad[i] -= o.grad[i];
                         });
}

// Hadamard product. mul(a, a) is valid: both adjoint paths accumulate.
inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
  auto an = a.node(), bn = b.node();
  return detail::make_op(a.rows(), a.cols(), std::move(out), {a, b},
                         [an, bn](const detail::TensorNode& o) {
                           if (an->requires_grad)
                             for (std::size_t i = 0; i < o.size(); ++i)
                               an->grad[i] += o.grad[i] * bn->values[i];
                           if (bn->requires_grad)
                             for (std::size_t i = 0; i < o.size(); ++i)
                               bn->grad[i] += o.grad[i] * an->values[i];
                         });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "div");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] / b.values()[i];
  auto an = a.node(), bn = b.node();
  return detail::make_op(a.rows(), a.cols(), std::move(out), {a, b},
                         [an, bn](const detail::TensorNode& o) {
                           if (an->requires_grad)
                             for (std::size_t i = 0; i < o.size(); ++i)
                               an->grad[i] += o.grad[i] / bn->values[i];
                           if (bn->requires_grad)
                             for (std::size_t i = 0; i < o.size(); ++i)
                               bn->grad[i] -= o.grad[i] * o.values[i] / bn->values[i];
                         });
}

inline Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * a.values()[i];
  auto an = a.node();
  return detail::make_op(a.rows(), a.cols(), std::move(out), {a},
                         [an, c](const detail::TensorNode& o) {
                           for (std::size_t i = 0; i < o.size(); ++i)
                             an->grad[i] += c * o.grad[i];
                         });
}

// a + s broadcast over every element; s is 1×1.
inline Tensor add_scalar(const Tensor& a, const Tensor& s) {
  if (!s.is_scalar()) throw shape_error("add_scalar: s must be 1x1");
  std::vector<double> out(a.size());
  const double sv = s.values()[0];
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + sv;
  auto an = a.node(), sn = s.node();
  return detail::make_op(a.rows(), a.cols(), std::move(out), {a, s},
                         [an, sn](const detail::TensorNode& o) {
                           if (an->requires_grad)
                             for (std::size_t i = 0; i < o.size(); ++i) an->grad[i] += o.grad[i];
                           if (sn->requires_grad) {
                             double acc = 0.0;
                             for (std::size_t i = 0; i < o.size(); ++i) acc += o.grad[i];
                             sn->grad[0] += acc;
                           }
                         });
}

// a * s broadcast over every element; s is 1×1.
inline Tensor mul_scalar(const Tensor& a, const Tensor& s) {
  if (!s.is_scalar()) throw shape_error("mul_scalar: s must be 1x1");
  std::vector<double> out(a.size());
  const double sv = s.values()[0];
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * sv;
  auto an = a.node(), sn = s.node();
  return detail::make_op(a.rows(), a.cols(), std::move(out), {a, s},
                         [an, sn](const detail::TensorNode& o) {
                           const double sv2 = sn->values[0];
                           if (an->requires_grad)
                             for (std::size_t i = 0; i < o.size(); ++i)
                               an->grad[i] += o.grad[i] * sv2;
                           if (sn->requires_grad) {
                             double acc = 0.0;
                             for (std::size_t i = 0; i < o.size(); ++i)
                               acc += o.grad[i] * an->values[i];
                             sn->grad[0] += acc;
                           }
                         });
}

// Broadcast a 1×m row vector down the rows of a (n×m).
inline Tensor add_rowvec(const Tensor& a, const Tensor& v) {
  if (v.rows() != 1 || v.cols() != a.cols()) throw shape_error("add_rowvec: v must be 1 x cols(a)");
  const int n = a.rows(), m = a.cols();
  std::vector<double> out(a.size());
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j)
      out[static_cast<std::size_t>(i) * m + j] = a.values()[static_cast<std::size_t>(i) * m + j] + v.values()[j];
  auto an = a.node(), vn = v.node();
  return detail::make_op(n, m, std::move(out), {a, v},
                         [an, vn, n, m](const detail::TensorNode& o) {
                           if (an->requires_grad)
                             for (std::size_t i = 0; i < o.size(); ++i) an->grad[i] += o.grad[i];
                           if (vn->requires_grad)
                             for (int i = 0; i < n; ++i)
                               for (int j = 0; j < m; ++j)
                                 vn->grad[j] += o.grad[static_cast<std::size_t>(i) * m + j];
                         });
}

inline Tensor mul_rowvec(const Tensor& a, const Tensor& v) {
  if (v.rows() != 1 || v.cols() != a.cols()) throw shape_error("mul_rowvec: v must be 1 x cols(a)");
  const int n = a.rows(), m = a.cols();
  std::vector<double> out(a.size());
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j)
      out[static_cast<std::size_t>(i) * m + j] = a.values()[static_cast<std::size_t>(i) * m + j] * v.values()[j];
  auto an = a.node(), vn = v.node();
  return detail::make_op(n, m, std::move(out), {a, v},
                         [an, vn, n, m](const detail::TensorNode& o) {
                           for (int i = 0; i < n; ++i)
                             for (int j = 0; j < m; ++j) {
                               const std::size_t idx = static_cast<std::size_t>(i) * m + j;
                               if (an->requires_grad) an->grad[idx] += o.grad[idx] * vn->values[j];
                               if (vn->requires_grad) vn->grad[j] += o.grad[idx] * an->values[idx];
                             }
                         });
}

// Broadcast an n×1 column vector across the columns of a (n×m).
inline Tensor add_colvec(const Tensor& a, const Tensor& v) {
  if (v.cols() != 1 || v.rows() != a.rows()) throw shape_error("add_colvec: v must be rows(a) x 1");
  const int n = a.rows(), m = a.cols();
  std::vector<double> out(a.size());
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j)
      out[static_cast<std::size_t>(i) * m + j] = a.values()[static_cast<std::size_t>(i) * m + j] + v.values()[i];
  auto an = a.node(), vn = v.node();
  return detail::make_op(n, m, std::move(out), {a, v},
                         [an, vn, n, m](const detail::TensorNode& o) {
                           if (an->requires_grad)
                             for (std::size_t i = 0; i < o.size(); ++i) an->grad[i] += o.grad[i];
                           if (vn->requires_grad)
                             for (int i = 0; i < n; ++i) {
                               double acc = 0.0;
                               for (int j = 0; j < m; ++j)
                                 acc += o.grad[static_cast<std::size_t>(i) * m + j];
                               vn->grad[i] += acc;
                             }
                         });
}

inline Tensor mul_colvec(const Tensor& a, const Tensor& v) {
  if (v.cols() != 1 || v.rows() != a.rows()) throw shape_error("mul_colvec: v must be rows(a) x 1");
  const int n = a.rows(), m = a.cols();
  std::vector<double> out(a.size());
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j)
      out[static_cast<std::size_t>(i) * m + j] = a.values()[static_cast<std::size_t>(i) * m + j] * v.values()[i];
  auto an = a.node(), vn = v.node();
  return detail::make_op(n, m, std::move(out), {a, v},
                         [an, vn, n, m](const detail::TensorNode& o) {
                           for (int i = 0; i < n; ++i) {
                             double acc = 0.0;
                             for (int j = 0; j < m; ++j) {
                               const std::size_t idx = static_cast<std::size_t>(i) * m + j;
                               if (an->requires_grad) an->grad[idx] += o.grad[idx] * vn->values[i];
                               acc += o.grad[idx] * an->values[idx];
                             }
                             if (vn->requires_grad) vn->grad[i] += acc;
                           }
                         });
}

// ---------------------------------------------------------------------------
// Structural primitives
// ---------------------------------------------------------------------------

inline Tensor transpose(const Tensor& a) {
  const int n = a.rows(), m = a.cols();
  std::vector<double> out(a.size());
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j)
      out[static_cast<std::size_t>(j) * n + i] = a.values()[static_cast<std::size_t>(i) * m + j];
  auto an = a.node();
  return detail::make_op(m, n, std::move(out), {a},
                         [an, n, m](const detail::TensorNode& o) {
                           for (int i = 0; i < n; ++i)
                             for (int j = 0; j < m; ++j)
                               an->grad[static_cast<std::size_t>(i) * m + j] +=
                                   o.grad[static_cast<std::size_t>(j) * n + i];
                         });
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows())
    throw shape_error("matmul: inner dimensions disagree (" + std::to_string(a.cols()) + " vs " +
                      std::to_string(b.rows()) + ")");
  const int n = a.rows(), k = a.cols(), m = b.cols();
  std::vector<double> out(static_cast<std::size_t>(n) * m, 0.0);
  for (int i = 0; i < n; ++i)
    for (int p = 0; p < k; ++p) {
      const double av = a.values()[static_cast<std::size_t>(i) * k + p];
      if (av == 0.0) continue;
      const double* brow = &b.values()[static_cast<std::size_t>(p) * m];
      double* orow = &out[static_cast<std::size_t>(i) * m];
      for (int j = 0; j < m; ++j) orow[j] += av * brow[j];
    }
  auto an = a.node(), bn = b.node();
  return detail::make_op(n, m, std::move(out), {a, b},
                         [an, bn, n, k, m](const detail::TensorNode& o) {
                           // dA += G Bᵀ, dB += Aᵀ G
                           if (an->requires_grad)
                             for (int i = 0; i < n; ++i)
                               for (int p = 0; p < k; ++p) {
                                 double acc = 0.0;
                                 const double* grow = &o.grad[static_cast<std::size_t>(i) * m];
                                 const double* brow = &bn->values[static_cast<std::size_t>(p) * m];
                                 for (int j = 0; j < m; ++j) acc += grow[j] * brow[j];
                                 an->grad[static_cast<std::size_t>(i) * k + p] += acc;
                               }
                           if (bn->requires_grad)
                             for (int p = 0; p < k; ++p)
                               for (int i = 0; i < n; ++i) {
                                 const double av = an->values[static_cast<std::size_t>(i) * k + p];
                                 if (av == 0.0) continue;
                                 const double* grow = &o.grad[static_cast<std::size_t>(i) * m];
                                 double* brow = &bn->grad[static_cast<std::size_t>(p) * m];
                                 for (int j = 0; j < m; ++j) brow[j] += av * grow[j];
                               }
                         });
}

inline Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.values()) acc += v;
  auto an = a.node();
  return detail::make_op(1, 1, {acc}, {a},
                         [an](const detail::TensorNode& o) {
                           const double g = o.grad[0];
                           for (double& gv : an->grad) gv += g;
                         });
}

// Stack a on top of b (column counts must agree).
inline Tensor vcat(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols()) throw shape_error("vcat: column counts differ");
  std::vector<double> out;
  out.reserve(a.size() + b.size());
  out.insert(out.end(), a.values().begin(), a.values().end());
  out.insert(out.end(), b.values().begin(), b.values().end());
  auto an = a.node(), bn = b.node();
  const std::size_t asz = a.size();
  return detail::make_op(a.rows() + b.rows(), a.cols(), std::move(out), {a, b},
                         [an, bn, asz](const detail::TensorNode& o) {
                           if (an->requires_grad)
                             for (std::size_t i = 0; i < asz; ++i) an->grad[i] += o.grad[i];
                           if (bn->requires_grad)
                             for (std::size_t i = asz; i < o.size(); ++i)
                               bn->grad[i - asz] += o.grad[i];
                         });
}

// Contiguous sub-matrix [r0, r1) × [c0, c1).
inline Tensor block(const Tensor& a, int r0, int r1, int c0, int c1) {
  if (r0 < 0 || r1 > a.rows() || c0 < 0 || c1 > a.cols() || r0 > r1 || c0 > c1)
    throw shape_error("block: range out of bounds");
  const int n = r1 - r0, m = c1 - c0, acols = a.cols();
  std::vector<double> out(static_cast<std::size_t>(n) * m);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j)
      out[static_cast<std::size_t>(i) * m + j] =
          a.values()[static_cast<std::size_t>(i + r0) * acols + (j + c0)];
  auto an = a.node();
  return detail::make_op(n, m, std::move(out), {a},
                         [an, r0, c0, n, m, acols](const detail::TensorNode& o) {
                           for (int i = 0; i < n; ++i)
                             for (int j = 0; j < m; ++j)
                               an->grad[static_cast<std::size_t>(i + r0) * acols + (j + c0)] +=
                                   o.grad[static_cast<std::size_t>(i) * m + j];
                         });
}

// K + (s + extra)·I for square K and scalar s.
inline Tensor add_diag(const Tensor& a, const Tensor& s, double extra) {
  if (a.rows() != a.cols()) throw shape_error("add_diag: matrix must be square");
  if (!s.is_scalar()) throw shape_error("add_diag: s must be 1x1");
  const int n = a.rows();
  std::vector<double> out(a.values().begin(), a.values().end());
  const double d = s.values()[0] + extra;
  for (int i = 0; i < n; ++i) out[static_cast<std::size_t>(i) * n + i] += d;
  auto an = a.node(), sn = s.node();
  return detail::make_op(n, n, std::move(out), {a, s},
                         [an, sn, n](const detail::TensorNode& o) {
                           if (an->requires_grad)
                             for (std::size_t i = 0; i < o.size(); ++i) an->grad[i] += o.grad[i];
                           if (sn->requires_grad) {
                             double acc = 0.0;
                             for (int i = 0; i < n; ++i)
                               acc += o.grad[static_cast<std::size_t>(i) * n + i];
                             sn->grad[0] += acc;
                           }
                         });
}

// ---------------------------------------------------------------------------
// Elementwise nonlinearities
// ---------------------------------------------------------------------------

namespace detail {

inline Tensor unary_op(const Tensor& a, std::vector<double> out,
                       std::function<void(const TensorNode&, TensorNode&)> pull) {
  auto an = a.node();
  return make_op(a.rows(), a.cols(), std::move(out), {a},
                 [an, pull = std::move(pull)](const TensorNode& o) { pull(o, *an); });
}

}  // namespace detail

inline Tensor exp(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a.values()[i]);
  return detail::unary_op(a, std::move(out), [](const detail::TensorNode& o, detail::TensorNode& in) {
    for (std::size_t i = 0; i < o.size(); ++i) in.grad[i] += o.grad[i] * o.values[i];
  });
}

inline Tensor log(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (a.values()[i] <= 0.0) throw std::domain_error("log: non-positive input");
    out[i] = std::log(a.values()[i]);
  }
  return detail::unary_op(a, std::move(out), [](const detail::TensorNode& o, detail::TensorNode& in) {
    for (std::size_t i = 0; i < o.size(); ++i) in.grad[i] += o.grad[i] / in.values[i];
  });
}

// sqrt(max(x, floor)); zero gradient where the clamp is active. Used to take
// distances through sqrt without a NaN at coincident points.
inline Tensor sqrt_clamped(const Tensor& a, double floor) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::sqrt(std::max(a.values()[i], floor));
  return detail::unary_op(a, std::move(out),
                          [floor](const detail::TensorNode& o, detail::TensorNode& in) {
                            for (std::size_t i = 0; i < o.size(); ++i)
                              if (in.values[i] > floor)
                                in.grad[i] += o.grad[i] * 0.5 / o.values[i];
                          });
}

inline Tensor clamp_min(const Tensor& a, double floor) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(a.values()[i], floor);
  return detail::unary_op(a, std::move(out),
                          [floor](const detail::TensorNode& o, detail::TensorNode& in) {
                            for (std::size_t i = 0; i < o.size(); ++i)
                              if (in.values[i] > floor) in.grad[i] += o.grad[i];
                          });
}

inline Tensor cos(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::cos(a.values()[i]);
  return detail::unary_op(a, std::move(out), [](const detail::TensorNode& o, detail::TensorNode& in) {
    for (std::size_t i = 0; i < o.size(); ++i)
      in.grad[i] -= o.grad[i] * std::sin(in.values[i]);
  });
}

inline Tensor sigmoid(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = a.values()[i];
    out[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  }
  return detail::unary_op(a, std::move(out), [](const detail::TensorNode& o, detail::TensorNode& in) {
    for (std::size_t i = 0; i < o.size(); ++i)
      in.grad[i] += o.grad[i] * o.values[i] * (1.0 - o.values[i]);
  });
}

inline Tensor tanh(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(a.values()[i]);
  return detail::unary_op(a, std::move(out), [](const detail::TensorNode& o, detail::TensorNode& in) {
    for (std::size_t i = 0; i < o.size(); ++i)
      in.grad[i] += o.grad[i] * (1.0 - o.values[i] * o.values[i]);
  });
}

inline Tensor relu(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(a.values()[i], 0.0);
  return detail::unary_op(a, std::move(out), [](const detail::TensorNode& o, detail::TensorNode& in) {
    for (std::size_t i = 0; i < o.size(); ++i)
      if (in.values[i] > 0.0) in.grad[i] += o.grad[i];
  });
}

inline double softplus_value(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }

// Inverse of softplus; used to seed raw parameters at a target constrained value.
inline double softplus_inverse(double y) {
  if (y <= 0.0) throw std::domain_error("softplus_inverse: y must be positive");
  return y > 30.0 ? y : std::log(std::expm1(y));
}

inline Tensor softplus(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = softplus_value(a.values()[i]);
  return detail::unary_op(a, std::move(out), [](const detail::TensorNode& o, detail::TensorNode& in) {
    for (std::size_t i = 0; i < o.size(); ++i) {
      const double x = in.values[i];
      const double s = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
      in.grad[i] += o.grad[i] * s;
    }
  });
}

// ---------------------------------------------------------------------------
// Cholesky factorization and friends
// ---------------------------------------------------------------------------

namespace detail {

// Plain value-level solve of (L Lᵀ) X = B given lower-triangular L.
inline std::vector<double> chol_solve_values(const std::vector<double>& l, int n,
                                             const std::vector<double>& b, int m) {
  std::vector<double> x(b);
  // forward substitution: L U = B
  for (int j = 0; j < m; ++j) {
    for (int i = 0; i < n; ++i) {
      double acc = x[static_cast<std::size_t>(i) * m + j];
      for (int k = 0; k < i; ++k)
        acc -= l[static_cast<std::size_t>(i) * n + k] * x[static_cast<std::size_t>(k) * m + j];
      x[static_cast<std::size_t>(i) * m + j] = acc / l[static_cast<std::size_t>(i) * n + i];
    }
    // back substitution: Lᵀ X = U
    for (int i = n - 1; i >= 0; --i) {
      double acc = x[static_cast<std::size_t>(i) * m + j];
      for (int k = i + 1; k < n; ++k)
        acc -= l[static_cast<std::size_t>(k) * n + i] * x[static_cast<std::size_t>(k) * m + j];
      x[static_cast<std::size_t>(i) * m + j] = acc / l[static_cast<std::size_t>(i) * n + i];
    }
  }
  return x;
}

// Solve Lᵀ Y = P for Y (back substitution over each column).
inline std::vector<double> lt_solve_values(const std::vector<double>& l, int n,
                                           const std::vector<double>& p) {
  std::vector<double> y(p);
  for (int j = 0; j < n; ++j)
    for (int i = n - 1; i >= 0; --i) {
      double acc = y[static_cast<std::size_t>(i) * n + j];
      for (int k = i + 1; k < n; ++k)
        acc -= l[static_cast<std::size_t>(k) * n + i] * y[static_cast<std::size_t>(k) * n + j];
      y[static_cast<std::size_t>(i) * n + j] = acc / l[static_cast<std::size_t>(i) * n + i];
    }
  return y;
}

inline void check_lower_triangular(const Tensor& l, const char* op) {
  if (l.rows() != l.cols()) throw shape_error(std::string(op) + ": matrix must be square");
  const int n = l.rows();
  for (int i = 0; i < n; ++i) {
    if (l.at(i, i) <= 0.0)
      throw std::invalid_argument(std::string(op) + ": non-positive diagonal at " +
                                  std::to_string(i));
  }
}

}  // namespace detail

// Lower-triangular factor L with L Lᵀ = A. The input must be symmetric within
// 1e-10; a non-positive pivot throws not_positive_definite so the caller can
// raise jitter and retry.
//
// Adjoint: with G = tril(dL), P = Φ(Lᵀ G) where Φ keeps the lower triangle and
// halves the diagonal; dA = ½ (X + Xᵀ) with X = L⁻ᵀ P L⁻¹. This is exact for
// symmetric perturbations of A, which is how A is always built here.
inline Tensor cholesky(const Tensor& a) {
  if (a.rows() != a.cols()) throw shape_error("cholesky: matrix must be square");
  const int n = a.rows();
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j)
      if (std::abs(a.at(i, j) - a.at(j, i)) > 1e-10)
        throw std::invalid_argument("cholesky: matrix not symmetric within 1e-10");

  std::vector<double> l(static_cast<std::size_t>(n) * n, 0.0);
  for (int j = 0; j < n; ++j) {
    double d = a.values()[static_cast<std::size_t>(j) * n + j];
    for (int k = 0; k < j; ++k) {
      const double v = l[static_cast<std::size_t>(j) * n + k];
      d -= v * v;
    }
    if (!(d > 0.0)) throw not_positive_definite(j);
    const double ljj = std::sqrt(d);
    l[static_cast<std::size_t>(j) * n + j] = ljj;
    for (int i = j + 1; i < n; ++i) {
      double acc = a.values()[static_cast<std::size_t>(i) * n + j];
      for (int k = 0; k < j; ++k)
        acc -= l[static_cast<std::size_t>(i) * n + k] * l[static_cast<std::size_t>(j) * n + k];
      l[static_cast<std::size_t>(i) * n + j] = acc / ljj;
    }
  }

  auto an = a.node();
  return detail::make_op(
      n, n, std::move(l), {a}, [an, n](const detail::TensorNode& o) {
        const std::vector<double>& lv = o.values;
        // M = Lᵀ tril(G)
        std::vector<double> m(static_cast<std::size_t>(n) * n, 0.0);
        for (int i = 0; i < n; ++i)
          for (int j = 0; j <= i; ++j) {
            const double g = o.grad[static_cast<std::size_t>(i) * n + j];
            if (g == 0.0) continue;
            for (int r = 0; r < n; ++r)
              m[static_cast<std::size_t>(r) * n + j] += lv[static_cast<std::size_t>(i) * n + r] * g;
          }
        // P = Φ(M): lower triangle, halved diagonal
        std::vector<double> p(static_cast<std::size_t>(n) * n, 0.0);
        for (int i = 0; i < n; ++i) {
          for (int j = 0; j < i; ++j) p[static_cast<std::size_t>(i) * n + j] = m[static_cast<std::size_t>(i) * n + j];
          p[static_cast<std::size_t>(i) * n + i] = 0.5 * m[static_cast<std::size_t>(i) * n + i];
        }
        // X = L⁻ᵀ P L⁻¹ via two triangular solves
        std::vector<double> y = detail::lt_solve_values(lv, n, p);
        // solve X L = Y  ⇔  Lᵀ Xᵀ = Yᵀ
        std::vector<double> yt(static_cast<std::size_t>(n) * n);
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < n; ++j)
            yt[static_cast<std::size_t>(j) * n + i] = y[static_cast<std::size_t>(i) * n + j];
        std::vector<double> xt = detail::lt_solve_values(lv, n, yt);
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < n; ++j)
            an->grad[static_cast<std::size_t>(i) * n + j] +=
                0.5 * (xt[static_cast<std::size_t>(j) * n + i] + xt[static_cast<std::size_t>(i) * n + j]);
      });
}

// Solves (L Lᵀ) x = b via two triangular substitutions.
inline Tensor cholesky_solve(const Tensor& l, const Tensor& b) {
  detail::check_lower_triangular(l, "cholesky_solve");
  if (b.rows() != l.rows()) throw shape_error("cholesky_solve: rhs row count mismatch");
  const int n = l.rows(), m = b.cols();
  std::vector<double> lv(l.values().begin(), l.values().end());
  std::vector<double> bv(b.values().begin(), b.values().end());
  std::vector<double> x = detail::chol_solve_values(lv, n, bv, m);

  auto ln = l.node(), bn = b.node();
  return detail::make_op(
      n, m, std::move(x), {l, b}, [ln, bn, n, m](const detail::TensorNode& o) {
        // db = A⁻¹ g ; dA = −db xᵀ ; dL = tril((dA + dAᵀ) L)
        std::vector<double> db = detail::chol_solve_values(ln->values, n, o.grad, m);
        if (bn->requires_grad)
          for (std::size_t i = 0; i < db.size(); ++i) bn->grad[i] += db[i];
        if (ln->requires_grad) {
          std::vector<double> abar(static_cast<std::size_t>(n) * n, 0.0);
          for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) {
              double acc = 0.0;
              for (int c = 0; c < m; ++c)
                acc += db[static_cast<std::size_t>(i) * m + c] * o.values[static_cast<std::size_t>(j) * m + c];
              abar[static_cast<std::size_t>(i) * n + j] = -acc;
            }
          for (int i = 0; i < n; ++i)
            for (int j = 0; j <= i; ++j) {
              double acc = 0.0;
              for (int k = 0; k < n; ++k)
                acc += (abar[static_cast<std::size_t>(i) * n + k] + abar[static_cast<std::size_t>(k) * n + i]) *
                       ln->values[static_cast<std::size_t>(k) * n + j];
              ln->grad[static_cast<std::size_t>(i) * n + j] += acc;
            }
        }
      });
}

// log|L Lᵀ| = 2 Σ log Lᵢᵢ
inline Tensor logdet_from_chol(const Tensor& l) {
  detail::check_lower_triangular(l, "logdet_from_chol");
  const int n = l.rows();
  double acc = 0.0;
  for (int i = 0; i < n; ++i) acc += std::log(l.at(i, i));
  auto ln = l.node();
  return detail::make_op(1, 1, {2.0 * acc}, {l},
                         [ln, n](const detail::TensorNode& o) {
                           const double g = o.grad[0];
                           for (int i = 0; i < n; ++i)
                             ln->grad[static_cast<std::size_t>(i) * n + i] +=
                                 g * 2.0 / ln->values[static_cast<std::size_t>(i) * n + i];
                         });
}

// ---------------------------------------------------------------------------
// Tape and backward
// ---------------------------------------------------------------------------

// Linearization of the graph reachable from a scalar root. Construction is a
// post-order traversal, so every node's inputs precede it; backward() replays
// the list once in reverse.
class GradTape {
 public:
  explicit GradTape(const Tensor& root) : root_(root.node()) {
    if (root.rows() != 1 || root.cols() != 1)
      throw shape_error("GradTape: root must be a scalar");
    if (!root_->requires_grad) return;  // nothing reachable carries gradients
    std::unordered_set<const detail::TensorNode*> visited;
    struct Frame {
      detail::TensorNode* node;
      std::size_t next_parent;
    };
    std::vector<Frame> stack;
    visited.insert(root_.get());
    stack.push_back({root_.get(), 0});
    while (!stack.empty()) {
      Frame& f = stack.back();
      if (f.next_parent < f.node->parents.size()) {
        detail::TensorNode* p = f.node->parents[f.next_parent++].get();
        if (visited.insert(p).second) stack.push_back({p, 0});
      } else {
        order_.push_back(f.node);
        stack.pop_back();
      }
    }
  }

  std::size_t node_count() const { return order_.size(); }

  // Seeds d(root)/d(root) = 1 and accumulates adjoints into every
  // requires_grad tensor reachable from the root.
  void backward() {
    if (!root_->requires_grad) return;
    root_->grad[0] += 1.0;
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
      detail::TensorNode* node = *it;
      if (node->backprop) node->backprop(*node);
    }
  }

 private:
  std::shared_ptr<detail::TensorNode> root_;
  std::vector<detail::TensorNode*> order_;
};

inline void backward(const Tensor& loss) { GradTape(loss).backward(); }

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

// Max over all parameter entries of
//   |analytic − central-difference| / max(1, |central-difference|).
// f must be a deterministic function of the current parameter values.
inline double grad_check(const std::function<Tensor()>& f, std::span<Tensor> params,
                         double eps) {
  if (!(eps > 0.0)) throw std::invalid_argument("grad_check: eps must be positive");
  for (Tensor& p : params) p.zero_grad();
  Tensor loss = f();
  if (!loss.is_scalar()) throw shape_error("grad_check: f must return a scalar");
  if (!std::isfinite(loss.value()))
    throw std::runtime_error("grad_check: non-finite function value");
  backward(loss);

  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (Tensor& p : params)
    analytic.emplace_back(p.grad().begin(), p.grad().end());

  double max_rel = 0.0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto vals = params[pi].mutable_values();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double orig = vals[i];
      vals[i] = orig + eps;
      const double fp = f().value();
      vals[i] = orig - eps;
      const double fm = f().value();
      vals[i] = orig;
      if (!std::isfinite(fp) || !std::isfinite(fm))
        throw std::runtime_error("grad_check: non-finite function value");
      const double fd = (fp - fm) / (2.0 * eps);
      const double rel = std::abs(analytic[pi][i] - fd) / std::max(1.0, std::abs(fd));
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

inline void zero_grad(std::span<Tensor> params) {
  for (Tensor& p : params) p.zero_grad();
}

}  // namespace dkt
