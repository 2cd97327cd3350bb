#pragma once

// Reverse-mode automatic differentiation over dense tensors.
//
// A Tape records every operation of one forward pass in creation order, which
// is a topological order of the graph. backward() walks it in reverse. Model
// parameters live outside the tape in Parameter objects; the tape registers each
// Parameter once, so a parameter used on several paths gets the sum of the path
// gradients in Parameter::grad.

#include <cmath>
#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>
#include <deque>

#include "mmshare/errors.hpp"
#include "mmshare/tensor.hpp"

namespace mmshare {

/// Trainable tensor with an accumulated gradient of the same shape.
template <typename Scalar>
struct Parameter {
  Parameter(std::string name_, Tensor<Scalar> value_)
      : name(std::move(name_)), value(std::move(value_)), grad(Tensor<Scalar>::zeros(value.shape())) {}

  std::string name;
  Tensor<Scalar> value;
  Tensor<Scalar> grad;
};

enum class OpKind {
  Constant,
  Parameter,
  MatMul,
  Add,
  Sub,
  Mul,
  Scale,
  AddRow,
  MulScalar,
  Exp,
  Log,
  Gelu,
  Transpose,
  Reshape,
  ConcatLast,
  ConcatRows,
  SliceRows,
  SliceCols,
  GatherRows,
  Sum,
  Mean,
  SoftmaxLast,
  LogSoftmaxLast,
  LayerNormLast,
  L2NormalizeLast,
  Diagonal,
  Attention,
};

using NodeId = std::size_t;

template <typename Scalar>
class Tape;

template <typename Scalar>
struct Node {
  using BackwardFn = std::function<void(Tape<Scalar>&, NodeId self)>;

  OpKind op = OpKind::Constant;
  std::vector<NodeId> parents;
  Tensor<Scalar> value;
  std::optional<Tensor<Scalar>> grad;
  bool requires_grad = false;
  Parameter<Scalar>* param = nullptr;
  BackwardFn backward;
};

/// Lightweight handle to a node on a tape.
template <typename Scalar>
class Var {
 public:
  Var() = default;
  Var(Tape<Scalar>* tape, NodeId id) : tape_(tape), id_(id) {}

  Tape<Scalar>& tape() const { return *tape_; }
  NodeId id() const { return id_; }
  const Tensor<Scalar>& value() const { return tape_->value(id_); }
  const Shape& shape() const { return value().shape(); }
  /// Gradient after backward(); zeros if the node was not reached.
  const Tensor<Scalar>& grad() const { return tape_->grad(id_); }

 private:
  Tape<Scalar>* tape_ = nullptr;
  NodeId id_ = 0;
};

template <typename Scalar>
class Tape {
 public:
  using TensorT = Tensor<Scalar>;
  using BackwardFn = typename Node<Scalar>::BackwardFn;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<Scalar> constant(TensorT value) {
    return push(OpKind::Constant, {}, std::move(value), nullptr, false);
  }

  /// Leaf for a parameter. Registering the same parameter twice returns the
  /// same node.
  Var<Scalar> param(Parameter<Scalar>& p) {
    if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var<Scalar>(this, it->second);
    Var<Scalar> v = push(OpKind::Parameter, {}, p.value, nullptr, true);
    nodes_[v.id()].param = &p;
    param_nodes_.emplace(&p, v.id());
    return v;
  }

  /// Appends an operation node. `backward` receives the node's own id (its
  /// value and output gradient are read through the tape) and must accumulate
  /// into the parents that require gradients.
  Var<Scalar> record(OpKind op, std::vector<NodeId> parents, TensorT value, BackwardFn backward) {
    bool needs = false;
    for (NodeId p : parents) needs = needs || nodes_.at(p).requires_grad;
    return push(op, std::move(parents), std::move(value), needs ? std::move(backward) : nullptr, needs);
  }

  const TensorT& value(NodeId id) const { return nodes_.at(id).value; }
  bool requires_grad(NodeId id) const { return nodes_.at(id).requires_grad; }
  const Node<Scalar>& node(NodeId id) const { return nodes_.at(id); }
  std::size_t size() const { return nodes_.size(); }

  /// Mutable gradient buffer, allocated as zeros on first access.
  TensorT& grad(NodeId id) {
    Node<Scalar>& n = nodes_.at(id);
    if (!n.grad) n.grad = TensorT::zeros(n.value.shape());
    return *n.grad;
  }
  const TensorT& grad(NodeId id) const { return const_cast<Tape*>(this)->grad(id); }

  /// Reverse sweep from a scalar root. Node gradients are reset first;
  /// parameter gradients are accumulated into Parameter::grad.
  void backward(Var<Scalar> root) {
    if (root.value().size() != 1) {
      throw ContractError("backward() requires a scalar root, got shape " + shape_string(root.shape()));
    }
    for (auto& n : nodes_) {
      if (n.requires_grad) {
        if (n.grad) n.grad->set_zero();
        else n.grad = TensorT::zeros(n.value.shape());
      }
    }
    if (!nodes_[root.id()].requires_grad) return;
    grad(root.id())[0] = Scalar(1);
    for (std::size_t i = root.id() + 1; i-- > 0;) {
      Node<Scalar>& n = nodes_[i];
      if (!n.requires_grad) continue;
      if (n.backward) n.backward(*this, i);
      if (n.param) n.param->grad.vector() += n.grad->vector();
    }
  }

 private:
  Var<Scalar> push(OpKind op, std::vector<NodeId> parents, TensorT value, BackwardFn backward, bool needs) {
    Node<Scalar> n;
    n.op = op;
    n.parents = std::move(parents);
    n.value = std::move(value);
    n.requires_grad = needs;
    n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var<Scalar>(this, nodes_.size() - 1);
  }

  std::deque<Node<Scalar>> nodes_;  // stable addresses: value() references survive later ops
  std::unordered_map<const Parameter<Scalar>*, NodeId> param_nodes_;
};

inline const char* op_name(OpKind op) {
  switch (op) {
    case OpKind::Constant: return "constant";
    case OpKind::Parameter: return "parameter";
    case OpKind::MatMul: return "matmul";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Scale: return "scale";
    case OpKind::AddRow: return "add_row";
    case OpKind::MulScalar: return "mul_scalar";
    case OpKind::Exp: return "exp";
    case OpKind::Log: return "log";
    case OpKind::Gelu: return "gelu";
    case OpKind::Transpose: return "transpose";
    case OpKind::Reshape: return "reshape";
    case OpKind::ConcatLast: return "concat_last";
    case OpKind::ConcatRows: return "concat_rows";
    case OpKind::SliceRows: return "slice_rows";
    case OpKind::SliceCols: return "slice_cols";
    case OpKind::GatherRows: return "gather_rows";
    case OpKind::Sum: return "sum";
    case OpKind::Mean: return "mean";
    case OpKind::SoftmaxLast: return "softmax_last";
    case OpKind::LogSoftmaxLast: return "log_softmax_last";
    case OpKind::LayerNormLast: return "layernorm_last";
    case OpKind::L2NormalizeLast: return "l2_normalize_last";
    case OpKind::Diagonal: return "diagonal";
    case OpKind::Attention: return "attention";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------


namespace detail {

template <typename Scalar>
void require_same_tape(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (&a.tape() != &b.tape()) throw ContractError("operands live on different tapes");
}

template <typename Scalar>
void require_same_shape(const char* op, const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

template <typename Scalar>
void require_rank2(const char* op, const Var<Scalar>& a) {
  if (a.value().rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a rank-2 tensor, got " + shape_string(a.shape()));
  }
}

inline Shape with_last(Shape s, Index last) {
  s.back() = last;
  return s;
}

/// Numerically stable row softmax in place.
template <typename Derived>
void softmax_rows(Eigen::MatrixBase<Derived>& m) {
  for (Index r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    row.array() -= row.maxCoeff();
    row = row.array().exp().matrix();
    row /= row.sum();
  }
}

}  // namespace detail

/// a[m x k] * b[k x n].
template <typename Scalar>
Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_tape(a, b);
  detail::require_rank2("matmul", a);
  detail::require_rank2("matmul", b);
  if (a.value().cols() != b.value().rows()) {
    throw DimensionError("matmul: inner dimensions disagree for " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  Tensor<Scalar> out({a.value().rows(), b.value().cols()});
  out.matrix().noalias() = a.value().matrix() * b.value().matrix();
  const NodeId ia = a.id(), ib = b.id();
  return a.tape().record(OpKind::MatMul, {ia, ib}, std::move(out), [ia, ib](Tape<Scalar>& t, NodeId self) {
    const auto g = t.grad(self).matrix();
    if (t.requires_grad(ia)) t.grad(ia).matrix().noalias() += g * t.value(ib).matrix().transpose();
    if (t.requires_grad(ib)) t.grad(ib).matrix().noalias() += t.value(ia).matrix().transpose() * g;
  });
}

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_tape(a, b);
  detail::require_same_shape("add", a, b);
  Tensor<Scalar> out(a.shape());
  out.vector() = a.value().vector() + b.value().vector();
  const NodeId ia = a.id(), ib = b.id();
  return a.tape().record(OpKind::Add, {ia, ib}, std::move(out), [ia, ib](Tape<Scalar>& t, NodeId self) {
    const auto g = t.grad(self).vector();
    if (t.requires_grad(ia)) t.grad(ia).vector() += g;
    if (t.requires_grad(ib)) t.grad(ib).vector() += g;
  });
}

template <typename Scalar>
Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_tape(a, b);
  detail::require_same_shape("sub", a, b);
  Tensor<Scalar> out(a.shape());
  out.vector() = a.value().vector() - b.value().vector();
  const NodeId ia = a.id(), ib = b.id();
  return a.tape().record(OpKind::Sub, {ia, ib}, std::move(out), [ia, ib](Tape<Scalar>& t, NodeId self) {
    const auto g = t.grad(self).vector();
    if (t.requires_grad(ia)) t.grad(ia).vector() += g;
    if (t.requires_grad(ib)) t.grad(ib).vector() -= g;
  });
}

/// Elementwise (Hadamard) product.
template <typename Scalar>
Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_tape(a, b);
  detail::require_same_shape("mul", a, b);
  Tensor<Scalar> out(a.shape());
  out.vector() = a.value().vector().cwiseProduct(b.value().vector());
  const NodeId ia = a.id(), ib = b.id();
  return a.tape().record(OpKind::Mul, {ia, ib}, std::move(out), [ia, ib](Tape<Scalar>& t, NodeId self) {
    const auto g = t.grad(self).vector();
    if (t.requires_grad(ia)) t.grad(ia).vector() += g.cwiseProduct(t.value(ib).vector());
    if (t.requires_grad(ib)) t.grad(ib).vector() += g.cwiseProduct(t.value(ia).vector());
  });
}

/// Multiplication by a fixed constant.
template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& a, Scalar factor) {
  Tensor<Scalar> out(a.shape());
  out.vector() = a.value().vector() * factor;
  const NodeId ia = a.id();
  return a.tape().record(OpKind::Scale, {ia}, std::move(out), [ia, factor](Tape<Scalar>& t, NodeId self) {
    t.grad(ia).vector() += t.grad(self).vector() * factor;
  });
}

/// a + bias broadcast over rows; bias holds exactly a.cols() elements. This is
/// the only broadcasting operation.
template <typename Scalar>
Var<Scalar> add_row(const Var<Scalar>& a, const Var<Scalar>& bias) {
  detail::require_same_tape(a, bias);
  if (bias.value().size() != a.value().cols()) {
    throw DimensionError("add_row: bias " + shape_string(bias.shape()) + " does not match last dim of " +
                         shape_string(a.shape()));
  }
  Tensor<Scalar> out(a.shape());
  out.matrix() = a.value().matrix().rowwise() + bias.value().vector().transpose();
  const NodeId ia = a.id(), ib = bias.id();
  return a.tape().record(OpKind::AddRow, {ia, ib}, std::move(out), [ia, ib](Tape<Scalar>& t, NodeId self) {
    const auto& g = t.grad(self);
    if (t.requires_grad(ia)) t.grad(ia).vector() += g.vector();
    if (t.requires_grad(ib)) t.grad(ib).vector() += g.matrix().colwise().sum().transpose();
  });
}

/// a * s where s is a one-element node.
template <typename Scalar>
Var<Scalar> mul_scalar(const Var<Scalar>& a, const Var<Scalar>& s) {
  detail::require_same_tape(a, s);
  if (s.value().size() != 1) {
    throw DimensionError("mul_scalar: expected a one-element factor, got " + shape_string(s.shape()));
  }
  Tensor<Scalar> out(a.shape());
  out.vector() = a.value().vector() * s.value()[0];
  const NodeId ia = a.id(), is = s.id();
  return a.tape().record(OpKind::MulScalar, {ia, is}, std::move(out), [ia, is](Tape<Scalar>& t, NodeId self) {
    const auto g = t.grad(self).vector();
    if (t.requires_grad(ia)) t.grad(ia).vector() += g * t.value(is)[0];
    if (t.requires_grad(is)) t.grad(is)[0] += g.dot(t.value(ia).vector());
  });
}

template <typename Scalar>
Var<Scalar> exp(const Var<Scalar>& a) {
  Tensor<Scalar> out(a.shape());
  out.vector() = a.value().vector().array().exp().matrix();
  const NodeId ia = a.id();
  return a.tape().record(OpKind::Exp, {ia}, std::move(out), [ia](Tape<Scalar>& t, NodeId self) {
    t.grad(ia).vector() += t.grad(self).vector().cwiseProduct(t.value(self).vector());
  });
}

/// Natural log; every input must be positive.
template <typename Scalar>
Var<Scalar> log(const Var<Scalar>& a) {
  const auto v = a.value().vector();
  if ((v.array() <= Scalar(0)).any()) throw DomainError("log: input has non-positive entries");
  Tensor<Scalar> out(a.shape());
  out.vector() = v.array().log().matrix();
  const NodeId ia = a.id();
  return a.tape().record(OpKind::Log, {ia}, std::move(out), [ia](Tape<Scalar>& t, NodeId self) {
    t.grad(ia).vector().array() += t.grad(self).vector().array() / t.value(ia).vector().array();
  });
}

/// Exact (erf-based) GELU.
template <typename Scalar>
Var<Scalar> gelu(const Var<Scalar>& a) {
  constexpr Scalar inv_sqrt2 = Scalar(0.70710678118654752440);
  const auto& x = a.value();
  Tensor<Scalar> out(x.shape());
  for (Index i = 0; i < x.size(); ++i) out[i] = Scalar(0.5) * x[i] * (Scalar(1) + std::erf(x[i] * inv_sqrt2));
  const NodeId ia = a.id();
  return a.tape().record(OpKind::Gelu, {ia}, std::move(out), [ia](Tape<Scalar>& t, NodeId self) {
    constexpr Scalar inv_sqrt_2pi = Scalar(0.39894228040143267794);
    const auto& g = t.grad(self);
    const auto& xv = t.value(ia);
    auto& gx = t.grad(ia);
    for (Index i = 0; i < xv.size(); ++i) {
      const Scalar xi = xv[i];
      const Scalar cdf = Scalar(0.5) * (Scalar(1) + std::erf(xi * inv_sqrt2));
      const Scalar pdf = inv_sqrt_2pi * std::exp(Scalar(-0.5) * xi * xi);
      gx[i] += g[i] * (cdf + xi * pdf);
    }
  });
}

template <typename Scalar>
Var<Scalar> transpose(const Var<Scalar>& a) {
  detail::require_rank2("transpose", a);
  Tensor<Scalar> out({a.value().cols(), a.value().rows()});
  out.matrix() = a.value().matrix().transpose();
  const NodeId ia = a.id();
  return a.tape().record(OpKind::Transpose, {ia}, std::move(out), [ia](Tape<Scalar>& t, NodeId self) {
    t.grad(ia).matrix() += t.grad(self).matrix().transpose();
  });
}

template <typename Scalar>
Var<Scalar> reshape(const Var<Scalar>& a, Shape shape) {
  Tensor<Scalar> out = a.value().reshaped(std::move(shape));
  const NodeId ia = a.id();
  return a.tape().record(OpKind::Reshape, {ia}, std::move(out), [ia](Tape<Scalar>& t, NodeId self) {
    t.grad(ia).vector() += t.grad(self).vector();
  });
}

/// Concatenation along the last dimension; leading dims must agree.
template <typename Scalar>
Var<Scalar> concat_last(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_tape(a, b);
  if (!std::equal(a.shape().begin(), a.shape().end() - 1, b.shape().begin(), b.shape().end() - 1)) {
    throw DimensionError("concat_last: leading dims differ for " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()));
  }
  const Index ca = a.value().cols(), cb = b.value().cols();
  Tensor<Scalar> out(detail::with_last(a.shape(), ca + cb));
  out.matrix().leftCols(ca) = a.value().matrix();
  out.matrix().rightCols(cb) = b.value().matrix();
  const NodeId ia = a.id(), ib = b.id();
  return a.tape().record(OpKind::ConcatLast, {ia, ib}, std::move(out),
                         [ia, ib, ca, cb](Tape<Scalar>& t, NodeId self) {
                           const auto g = t.grad(self).matrix();
                           if (t.requires_grad(ia)) t.grad(ia).matrix() += g.leftCols(ca);
                           if (t.requires_grad(ib)) t.grad(ib).matrix() += g.rightCols(cb);
                         });
}

/// Stacks rank-2 tensors with equal column counts vertically.
template <typename Scalar>
Var<Scalar> concat_rows(std::span<const Var<Scalar>> parts) {
  if (parts.empty()) throw ContractError("concat_rows: no operands");
  const Index cols = parts.front().value().cols();
  Index rows = 0;
  std::vector<NodeId> ids;
  std::vector<Index> offsets;
  for (const auto& p : parts) {
    detail::require_same_tape(parts.front(), p);
    detail::require_rank2("concat_rows", p);
    if (p.value().cols() != cols) {
      throw DimensionError("concat_rows: column mismatch " + shape_string(parts.front().shape()) + " vs " +
                           shape_string(p.shape()));
    }
    ids.push_back(p.id());
    offsets.push_back(rows);
    rows += p.value().rows();
  }
  Tensor<Scalar> out({rows, cols});
  for (std::size_t i = 0; i < parts.size(); ++i)
    out.matrix().middleRows(offsets[i], parts[i].value().rows()) = parts[i].value().matrix();
  return parts.front().tape().record(OpKind::ConcatRows, ids, std::move(out),
                                     [ids, offsets](Tape<Scalar>& t, NodeId self) {
                                       const auto g = t.grad(self).matrix();
                                       for (std::size_t i = 0; i < ids.size(); ++i) {
                                         if (!t.requires_grad(ids[i])) continue;
                                         auto& gi = t.grad(ids[i]);
                                         gi.matrix() += g.middleRows(offsets[i], gi.rows());
                                       }
                                     });
}

template <typename Scalar>
Var<Scalar> concat_rows(std::initializer_list<Var<Scalar>> parts) {
  const std::vector<Var<Scalar>> v(parts);
  return concat_rows(std::span<const Var<Scalar>>(v));
}

/// Rows [begin, begin + count) of a rank-2 tensor.
template <typename Scalar>
Var<Scalar> slice_rows(const Var<Scalar>& a, Index begin, Index count) {
  detail::require_rank2("slice_rows", a);
  if (begin < 0 || count < 1 || begin + count > a.value().rows()) {
    throw DimensionError("slice_rows: range [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                         ") outside " + shape_string(a.shape()));
  }
  Tensor<Scalar> out({count, a.value().cols()});
  out.matrix() = a.value().matrix().middleRows(begin, count);
  const NodeId ia = a.id();
  return a.tape().record(OpKind::SliceRows, {ia}, std::move(out), [ia, begin, count](Tape<Scalar>& t, NodeId self) {
    t.grad(ia).matrix().middleRows(begin, count) += t.grad(self).matrix();
  });
}

/// Columns [begin, begin + count) of the matrix view.
template <typename Scalar>
Var<Scalar> slice_cols(const Var<Scalar>& a, Index begin, Index count) {
  if (begin < 0 || count < 1 || begin + count > a.value().cols()) {
    throw DimensionError("slice_cols: range [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                         ") outside " + shape_string(a.shape()));
  }
  Tensor<Scalar> out(detail::with_last(a.shape(), count));
  out.matrix() = a.value().matrix().middleCols(begin, count);
  const NodeId ia = a.id();
  return a.tape().record(OpKind::SliceCols, {ia}, std::move(out), [ia, begin, count](Tape<Scalar>& t, NodeId self) {
    t.grad(ia).matrix().middleCols(begin, count) += t.grad(self).matrix();
  });
}

/// out[i] = table[indices[i]] over the matrix view of `table`. Repeated indices
/// accumulate gradient. Serves embedding lookup and explicit row broadcasting.
template <typename Scalar>
Var<Scalar> gather_rows(const Var<Scalar>& table, std::vector<Index> indices) {
  const Index n = table.value().rows();
  if (indices.empty()) throw DimensionError("gather_rows: empty index list");
  for (Index i : indices) {
    if (i < 0 || i >= n) {
      throw DimensionError("gather_rows: index " + std::to_string(i) + " outside " + shape_string(table.shape()));
    }
  }
  Tensor<Scalar> out({static_cast<Index>(indices.size()), table.value().cols()});
  for (std::size_t r = 0; r < indices.size(); ++r)
    out.matrix().row(static_cast<Index>(r)) = table.value().matrix().row(indices[r]);
  const NodeId it = table.id();
  return table.tape().record(OpKind::GatherRows, {it}, std::move(out),
                             [it, idx = std::move(indices)](Tape<Scalar>& t, NodeId self) {
                               const auto g = t.grad(self).matrix();
                               auto gt = t.grad(it).matrix();
                               for (std::size_t r = 0; r < idx.size(); ++r) gt.row(idx[r]) += g.row(static_cast<Index>(r));
                             });
}

/// Sum of all elements, shape [1].
template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& a) {
  const NodeId ia = a.id();
  return a.tape().record(OpKind::Sum, {ia}, Tensor<Scalar>::scalar(a.value().vector().sum()),
                         [ia](Tape<Scalar>& t, NodeId self) { t.grad(ia).vector().array() += t.grad(self)[0]; });
}

template <typename Scalar>
Var<Scalar> mean(const Var<Scalar>& a) {
  const Scalar n = static_cast<Scalar>(a.value().size());
  const NodeId ia = a.id();
  return a.tape().record(OpKind::Mean, {ia}, Tensor<Scalar>::scalar(a.value().vector().sum() / n),
                         [ia, n](Tape<Scalar>& t, NodeId self) { t.grad(ia).vector().array() += t.grad(self)[0] / n; });
}

/// Softmax over the last dimension, computed with max-subtraction.
template <typename Scalar>
Var<Scalar> softmax_last(const Var<Scalar>& a) {
  Tensor<Scalar> out = a.value();
  auto m = out.matrix();
  detail::softmax_rows(m);
  const NodeId ia = a.id();
  return a.tape().record(OpKind::SoftmaxLast, {ia}, std::move(out), [ia](Tape<Scalar>& t, NodeId self) {
    const auto y = t.value(self).matrix();
    const auto g = t.grad(self).matrix();
    auto gx = t.grad(ia).matrix();
    for (Index r = 0; r < y.rows(); ++r) {
      const Scalar dot = g.row(r).dot(y.row(r));
      gx.row(r).array() += y.row(r).array() * (g.row(r).array() - dot);
    }
  });
}

/// log(softmax(a)) over the last dimension via a max-shifted log-sum-exp.
template <typename Scalar>
Var<Scalar> log_softmax_last(const Var<Scalar>& a) {
  Tensor<Scalar> out = a.value();
  auto m = out.matrix();
  for (Index r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    const Scalar mx = row.maxCoeff();
    row.array() -= mx + std::log((row.array() - mx).exp().sum());
  }
  const NodeId ia = a.id();
  return a.tape().record(OpKind::LogSoftmaxLast, {ia}, std::move(out), [ia](Tape<Scalar>& t, NodeId self) {
    const auto y = t.value(self).matrix();
    const auto g = t.grad(self).matrix();
    auto gx = t.grad(ia).matrix();
    for (Index r = 0; r < y.rows(); ++r) gx.row(r).array() += g.row(r).array() - y.row(r).array().exp() * g.row(r).sum();
  });
}

inline constexpr double kLayerNormEpsilon = 1e-5;

/// Layer normalization over the last dimension with learned gain and bias
/// (each holding cols() elements). Biased variance, epsilon 1e-5.
template <typename Scalar>
Var<Scalar> layernorm_last(const Var<Scalar>& x, const Var<Scalar>& gain, const Var<Scalar>& bias) {
  detail::require_same_tape(x, gain);
  detail::require_same_tape(x, bias);
  const Index cols = x.value().cols(), rows = x.value().rows();
  if (gain.value().size() != cols || bias.value().size() != cols) {
    throw DimensionError("layernorm_last: gain " + shape_string(gain.shape()) + " / bias " +
                         shape_string(bias.shape()) + " do not match last dim of " + shape_string(x.shape()));
  }
  auto xhat = std::make_shared<typename Tensor<Scalar>::Matrix>(rows, cols);
  auto inv_std = std::make_shared<typename Tensor<Scalar>::Vector>(rows);
  const auto xm = x.value().matrix();
  for (Index r = 0; r < rows; ++r) {
    const Scalar mu = xm.row(r).mean();
    xhat->row(r) = (xm.row(r).array() - mu).matrix();
    const Scalar var = xhat->row(r).squaredNorm() / static_cast<Scalar>(cols);
    (*inv_std)(r) = Scalar(1) / std::sqrt(var + static_cast<Scalar>(kLayerNormEpsilon));
    xhat->row(r) *= (*inv_std)(r);
  }
  Tensor<Scalar> out(x.shape());
  out.matrix() = (xhat->array().rowwise() * gain.value().vector().transpose().array()).matrix();
  out.matrix().rowwise() += bias.value().vector().transpose();
  const NodeId ix = x.id(), ig = gain.id(), ib = bias.id();
  return x.tape().record(OpKind::LayerNormLast, {ix, ig, ib}, std::move(out),
                         [ix, ig, ib, xhat, inv_std](Tape<Scalar>& t, NodeId self) {
                           const auto g = t.grad(self).matrix();
                           if (t.requires_grad(ig))
                             t.grad(ig).vector() += g.cwiseProduct(*xhat).colwise().sum().transpose();
                           if (t.requires_grad(ib)) t.grad(ib).vector() += g.colwise().sum().transpose();
                           if (!t.requires_grad(ix)) return;
                           const typename Tensor<Scalar>::Matrix gain_row = t.value(ig).vector().transpose();
                           auto gx = t.grad(ix).matrix();
                           const Scalar n = static_cast<Scalar>(g.cols());
                           for (Index r = 0; r < g.rows(); ++r) {
                             const auto dxhat = (g.row(r).array() * gain_row.array()).matrix().eval();
                             const Scalar mean_d = dxhat.sum() / n;
                             const Scalar mean_dx = dxhat.dot(xhat->row(r)) / n;
                             gx.row(r).array() +=
                                 (*inv_std)(r) * (dxhat.array() - mean_d - xhat->row(r).array() * mean_dx);
                           }
                         });
}

/// Scales each row (last dim) to unit Euclidean norm. A zero row is a domain
/// error rather than an arbitrary direction.
template <typename Scalar>
Var<Scalar> l2_normalize_last(const Var<Scalar>& a) {
  const auto am = a.value().matrix();
  auto norms = std::make_shared<typename Tensor<Scalar>::Vector>(am.rows());
  Tensor<Scalar> out(a.shape());
  for (Index r = 0; r < am.rows(); ++r) {
    const Scalar n = am.row(r).norm();
    if (!(n > Scalar(0))) throw DomainError("l2_normalize_last: cannot normalize a zero vector");
    (*norms)(r) = n;
    out.matrix().row(r) = am.row(r) / n;
  }
  const NodeId ia = a.id();
  return a.tape().record(OpKind::L2NormalizeLast, {ia}, std::move(out), [ia, norms](Tape<Scalar>& t, NodeId self) {
    const auto y = t.value(self).matrix();
    const auto g = t.grad(self).matrix();
    auto gx = t.grad(ia).matrix();
    for (Index r = 0; r < y.rows(); ++r) gx.row(r) += (g.row(r) - g.row(r).dot(y.row(r)) * y.row(r)) / (*norms)(r);
  });
}

/// Main diagonal of a square rank-2 tensor, shape [n].
template <typename Scalar>
Var<Scalar> diagonal(const Var<Scalar>& a) {
  detail::require_rank2("diagonal", a);
  if (a.value().rows() != a.value().cols()) {
    throw DimensionError("diagonal: expected a square matrix, got " + shape_string(a.shape()));
  }
  Tensor<Scalar> out({a.value().rows()});
  out.vector() = a.value().matrix().diagonal();
  const NodeId ia = a.id();
  return a.tape().record(OpKind::Diagonal, {ia}, std::move(out), [ia](Tape<Scalar>& t, NodeId self) {
    t.grad(ia).matrix().diagonal() += t.grad(self).vector();
  });
}

/// Multi-head scaled dot-product self-attention over packed sequences.
///
/// q, k and v are (batch * seq_len) x d with each sequence occupying seq_len
/// consecutive rows; heads split the columns into n_heads equal groups.
/// Attention never crosses sequence boundaries. No masking.
template <typename Scalar>
Var<Scalar> attention(const Var<Scalar>& q, const Var<Scalar>& k, const Var<Scalar>& v, Index seq_len,
                      Index n_heads) {
  using Matrix = typename Tensor<Scalar>::Matrix;
  detail::require_same_tape(q, k);
  detail::require_same_tape(q, v);
  detail::require_rank2("attention", q);
  detail::require_same_shape("attention", q, k);
  detail::require_same_shape("attention", q, v);
  const Index rows = q.value().rows(), d = q.value().cols();
  if (seq_len < 1 || rows % seq_len != 0) {
    throw DimensionError("attention: " + std::to_string(rows) + " rows do not split into sequences of length " +
                         std::to_string(seq_len));
  }
  if (n_heads < 1 || d % n_heads != 0) {
    throw DimensionError("attention: width " + std::to_string(d) + " not divisible by " + std::to_string(n_heads) +
                         " heads");
  }
  const Index batch = rows / seq_len, dh = d / n_heads;
  const Scalar inv_scale = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));
  auto probs = std::make_shared<std::vector<Matrix>>(static_cast<std::size_t>(batch * n_heads));
  Tensor<Scalar> out(q.shape());
  const auto qm = q.value().matrix(), km = k.value().matrix(), vm = v.value().matrix();
  auto om = out.matrix();
  for (Index b = 0; b < batch; ++b) {
    for (Index h = 0; h < n_heads; ++h) {
      const Index r0 = b * seq_len, c0 = h * dh;
      Matrix& p = (*probs)[static_cast<std::size_t>(b * n_heads + h)];
      p.noalias() = qm.block(r0, c0, seq_len, dh) * km.block(r0, c0, seq_len, dh).transpose();
      p *= inv_scale;
      detail::softmax_rows(p);
      om.block(r0, c0, seq_len, dh).noalias() = p * vm.block(r0, c0, seq_len, dh);
    }
  }
  const NodeId iq = q.id(), ik = k.id(), iv = v.id();
  return q.tape().record(
      OpKind::Attention, {iq, ik, iv}, std::move(out),
      [iq, ik, iv, probs, batch, n_heads, seq_len, dh, inv_scale](Tape<Scalar>& t, NodeId self) {
        const auto qv = t.value(iq).matrix(), kv = t.value(ik).matrix(), vv = t.value(iv).matrix();
        const auto g = t.grad(self).matrix();
        const bool gq = t.requires_grad(iq), gk = t.requires_grad(ik), gv = t.requires_grad(iv);
        Matrix dp, ds;
        for (Index b = 0; b < batch; ++b) {
          for (Index h = 0; h < n_heads; ++h) {
            const Matrix& p = (*probs)[static_cast<std::size_t>(b * n_heads + h)];
            const Index r0 = b * seq_len, c0 = h * dh;
            const auto go = g.block(r0, c0, seq_len, dh);
            if (gv) t.grad(iv).matrix().block(r0, c0, seq_len, dh).noalias() += p.transpose() * go;
            if (!gq && !gk) continue;
            dp.noalias() = go * vv.block(r0, c0, seq_len, dh).transpose();
            // softmax backward: ds = p * (dp - rowsum(p * dp))
            ds = p.cwiseProduct(dp);
            const auto row_dot = ds.rowwise().sum().eval();
            ds -= (p.array().colwise() * row_dot.array()).matrix();
            ds *= inv_scale;
            if (gq) t.grad(iq).matrix().block(r0, c0, seq_len, dh).noalias() += ds * kv.block(r0, c0, seq_len, dh);
            if (gk)
              t.grad(ik).matrix().block(r0, c0, seq_len, dh).noalias() += ds.transpose() * qv.block(r0, c0, seq_len, dh);
          }
        }
      });
}

}  // namespace mmshare
