#pragma once

// Reverse-mode automatic differentiation over dense tensors.
//
// A Tape records every primitive applied to its Vars. backward() replays the
// record in reverse, accumulating adjoints additively into every node that
// feeds a consumer. Tapes are cheap and meant to be rebuilt for every
// optimization step.

#include <Eigen/Core>

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <deque>
#include <vector>

#include "fido/errors.hpp"
#include "fido/tensor.hpp"

namespace fido {

/// Strict raises NumericError as soon as any primitive produces a non-finite
/// value. Permissive lets inf/nan propagate so overflow can be measured.
enum class NumericMode { Strict, Permissive };

template <typename Scalar>
class Tape;

/// Handle to a value recorded on a Tape.
template <typename Scalar>
class Var {
 public:
  Var() = default;

  const Tensor<Scalar>& value() const { return tape_->value(id_); }
  const Shape& shape() const { return value().shape(); }
  Index size() const { return value().size(); }
  Tape<Scalar>& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool requires_grad() const { return tape_->requires_grad(id_); }

 private:
  friend class Tape<Scalar>;
  Var(Tape<Scalar>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<Scalar>* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Adjoints of the leaves that requested gradients, keyed by leaf.
template <typename Scalar>
class Gradients {
 public:
  const Tensor<Scalar>& operator[](const Var<Scalar>& leaf) const {
    auto it = grads_.find(leaf.id());
    if (it == grads_.end()) throw std::out_of_range("no gradient recorded for this variable");
    return it->second;
  }
  bool contains(const Var<Scalar>& leaf) const { return grads_.count(leaf.id()) != 0; }

 private:
  friend class Tape<Scalar>;
  std::unordered_map<std::size_t, Tensor<Scalar>> grads_;
};

template <typename Scalar>
class Tape {
 public:
  using Array = typename Tensor<Scalar>::Array;
  using BackwardFn = std::function<void(Tape&, const Tensor<Scalar>& grad_out)>;

  explicit Tape(NumericMode mode = NumericMode::Strict) : mode_(mode) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  NumericMode mode() const { return mode_; }
  std::size_t size() const { return nodes_.size(); }

  /// Leaf that receives a gradient on backward().
  Var<Scalar> variable(Tensor<Scalar> value) { return push_leaf(std::move(value), true); }
  /// Leaf treated as a constant.
  Var<Scalar> constant(Tensor<Scalar> value) { return push_leaf(std::move(value), false); }

  /// Appends a primitive. `backward` receives the adjoint of the new node and
  /// must add the adjoints of its inputs through grad(); it is dropped when no
  /// input requires gradients.
  Var<Scalar> record(const char* op, Tensor<Scalar> value, std::initializer_list<Var<Scalar>> inputs,
                     BackwardFn backward) {
    if (mode_ == NumericMode::Strict && !value.all_finite()) {
      throw NumericError(std::string(op) + " produced non-finite values");
    }
    bool needs = false;
    for (const auto& in : inputs) {
      if (in.tape_ != this) throw std::logic_error(std::string(op) + ": operands live on different tapes");
      needs = needs || nodes_[in.id_].requires_grad;
    }
    Node node;
    node.op = op;
    node.value = std::move(value);
    node.requires_grad = needs;
    if (needs) node.backward = std::move(backward);
    nodes_.push_back(std::move(node));
    return Var<Scalar>(this, nodes_.size() - 1);
  }

  const Tensor<Scalar>& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  bool requires_grad(const Var<Scalar>& v) const { return nodes_[v.id_].requires_grad; }

  /// Adjoint accumulator of a node; zero-initialized on first touch.
  Tensor<Scalar>& grad(const Var<Scalar>& v) { return grad(v.id_); }
  Tensor<Scalar>& grad(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.has_grad) {
      n.grad = Tensor<Scalar>(n.value.shape());
      n.has_grad = true;
    }
    return n.grad;
  }

  /// Gradient of a scalar output w.r.t. every leaf variable.
  Gradients<Scalar> backward(const Var<Scalar>& output) {
    if (output.size() != 1) {
      throw ShapeError("backward() needs a scalar output, got shape " + shape_string(output.shape()));
    }
    return backward(output, Tensor<Scalar>::full(output.shape(), Scalar(1)));
  }

  /// Vector-Jacobian product: seeds the output adjoint with `seed`.
  Gradients<Scalar> backward(const Var<Scalar>& output, const Tensor<Scalar>& seed) {
    if (output.tape_ != this) throw std::logic_error("backward(): output lives on another tape");
    if (seed.shape() != output.shape()) {
      throw ShapeError("backward seed shape " + shape_string(seed.shape()) + " != output shape " +
                       shape_string(output.shape()));
    }
    for (auto& n : nodes_) {
      n.has_grad = false;
      n.grad = Tensor<Scalar>();
    }
    grad(output.id_).data() = seed.data();
    ++passes_;
    for (std::size_t i = output.id_ + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.has_grad || !n.backward) continue;
      const Tensor<Scalar>& g = n.grad;
      n.backward(*this, g);
    }
    Gradients<Scalar> out;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      const Node& n = nodes_[i];
      if (!n.is_leaf || !n.requires_grad) continue;
      out.grads_.emplace(i, n.has_grad ? n.grad : Tensor<Scalar>(n.value.shape()));
    }
    return out;
  }

  std::size_t backward_passes() const { return passes_; }

 private:
  friend class Var<Scalar>;

  struct Node {
    const char* op = "leaf";
    Tensor<Scalar> value;
    Tensor<Scalar> grad;
    bool has_grad = false;
    bool requires_grad = false;
    bool is_leaf = false;
    BackwardFn backward;
  };

  Var<Scalar> push_leaf(Tensor<Scalar> value, bool requires_grad) {
    if (mode_ == NumericMode::Strict && !value.all_finite()) {
      throw NumericError("leaf tensor holds non-finite values");
    }
    Node node;
    node.value = std::move(value);
    node.requires_grad = requires_grad;
    node.is_leaf = true;
    nodes_.push_back(std::move(node));
    return Var<Scalar>(this, nodes_.size() - 1);
  }

  NumericMode mode_;
  std::deque<Node> nodes_;  // stable references while recording
  std::size_t passes_ = 0;
};

// ---------------------------------------------------------------------------
// Elementwise primitives

namespace detail {

template <typename Scalar, typename Fwd, typename Bwd>
Var<Scalar> unary(const char* op, const Var<Scalar>& a, Fwd fwd, Bwd bwd) {
  using Array = typename Tensor<Scalar>::Array;
  Tape<Scalar>& tape = a.tape();
  Array y = fwd(a.value().data());
  const std::size_t ia = a.id();
  Tensor<Scalar> out(a.shape(), std::move(y));
  // out_id is known only after recording, so the callback reads the output
  // value through the captured index set below.
  auto out_id = std::make_shared<std::size_t>(0);
  Var<Scalar> r = tape.record(op, std::move(out), {a}, [ia, out_id, bwd](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    const Array& x = t.value(ia).data();
    const Array& y = t.value(*out_id).data();
    t.grad(ia).data() += bwd(g.data(), x, y);
  });
  *out_id = r.id();
  return r;
}

template <typename Scalar>
typename Tensor<Scalar>::Array broadcast(const Tensor<Scalar>& t, Index n) {
  using Array = typename Tensor<Scalar>::Array;
  if (t.size() == n) return t.data();
  return Array::Constant(n, t.data()[0]);
}

template <typename Scalar>
Shape broadcast_shape(const char* op, const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.shape() == b.shape()) return a.shape();
  if (b.size() == 1) return a.shape();
  if (a.size() == 1) return b.shape();
  throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                   shape_string(b.shape()));
}

template <typename Scalar>
void accumulate_broadcast(Tensor<Scalar>& slot, const typename Tensor<Scalar>::Array& g) {
  if (slot.size() == g.size()) {
    slot.data() += g;
  } else {
    slot.data()[0] += g.sum();
  }
}

// Binary op with scalar broadcasting; bwd returns (dA, dB) as full arrays.
template <typename Scalar, typename Fwd, typename BwdA, typename BwdB>
Var<Scalar> binary(const char* op, const Var<Scalar>& a, const Var<Scalar>& b, Fwd fwd, BwdA bwd_a, BwdB bwd_b) {
  using Array = typename Tensor<Scalar>::Array;
  Shape shape = broadcast_shape(op, a, b);
  const Index n = numel(shape);
  Array y = fwd(broadcast(a.value(), n), broadcast(b.value(), n));
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(op, Tensor<Scalar>(std::move(shape), std::move(y)), {a, b},
                         [ia, ib, n, bwd_a, bwd_b](Tape<Scalar>& t, const Tensor<Scalar>& g) {
                           const Array x = broadcast(t.value(ia), n);
                           const Array z = broadcast(t.value(ib), n);
                           if (t.requires_grad(ia)) accumulate_broadcast(t.grad(ia), Array(bwd_a(g.data(), x, z)));
                           if (t.requires_grad(ib)) accumulate_broadcast(t.grad(ib), Array(bwd_b(g.data(), x, z)));
                         });
}

}  // namespace detail

template <typename Scalar>
Var<Scalar> operator+(const Var<Scalar>& a, const Var<Scalar>& b) {
  return detail::binary(
      "add", a, b, [](const auto& x, const auto& y) { return x + y; },
      [](const auto& g, const auto&, const auto&) { return g; },
      [](const auto& g, const auto&, const auto&) { return g; });
}

template <typename Scalar>
Var<Scalar> operator-(const Var<Scalar>& a, const Var<Scalar>& b) {
  return detail::binary(
      "sub", a, b, [](const auto& x, const auto& y) { return x - y; },
      [](const auto& g, const auto&, const auto&) { return g; },
      [](const auto& g, const auto&, const auto&) { return -g; });
}

/// Element-wise (Hadamard) product.
template <typename Scalar>
Var<Scalar> operator*(const Var<Scalar>& a, const Var<Scalar>& b) {
  return detail::binary(
      "mul", a, b, [](const auto& x, const auto& y) { return x * y; },
      [](const auto& g, const auto&, const auto& y) { return g * y; },
      [](const auto& g, const auto& x, const auto&) { return g * x; });
}

template <typename Scalar>
Var<Scalar> operator/(const Var<Scalar>& a, const Var<Scalar>& b) {
  return detail::binary(
      "div", a, b, [](const auto& x, const auto& y) { return x / y; },
      [](const auto& g, const auto&, const auto& y) { return g / y; },
      [](const auto& g, const auto& x, const auto& y) { return -g * x / (y * y); });
}

template <typename Scalar>
Var<Scalar> operator-(const Var<Scalar>& a) {
  return detail::unary(
      "neg", a, [](const auto& x) { return -x; }, [](const auto& g, const auto&, const auto&) { return -g; });
}

template <typename Scalar>
Var<Scalar> operator+(const Var<Scalar>& a, Scalar s) {
  return detail::unary(
      "add_scalar", a, [s](const auto& x) { return x + s; },
      [](const auto& g, const auto&, const auto&) { return g; });
}
template <typename Scalar>
Var<Scalar> operator+(Scalar s, const Var<Scalar>& a) { return a + s; }

template <typename Scalar>
Var<Scalar> operator-(const Var<Scalar>& a, Scalar s) {
  return detail::unary(
      "sub_scalar", a, [s](const auto& x) { return x - s; },
      [](const auto& g, const auto&, const auto&) { return g; });
}

template <typename Scalar>
Var<Scalar> operator-(Scalar s, const Var<Scalar>& a) {
  return detail::unary(
      "rsub_scalar", a, [s](const auto& x) { return s - x; },
      [](const auto& g, const auto&, const auto&) { return -g; });
}

template <typename Scalar>
Var<Scalar> operator*(const Var<Scalar>& a, Scalar s) {
  return detail::unary(
      "mul_scalar", a, [s](const auto& x) { return x * s; },
      [s](const auto& g, const auto&, const auto&) { return g * s; });
}
template <typename Scalar>
Var<Scalar> operator*(Scalar s, const Var<Scalar>& a) { return a * s; }

template <typename Scalar>
Var<Scalar> operator/(const Var<Scalar>& a, Scalar s) {
  return detail::unary(
      "div_scalar", a, [s](const auto& x) { return x / s; },
      [s](const auto& g, const auto&, const auto&) { return g / s; });
}

template <typename Scalar>
Var<Scalar> operator/(Scalar s, const Var<Scalar>& a) {
  return detail::unary(
      "rdiv_scalar", a, [s](const auto& x) { return s / x; },
      [](const auto& g, const auto& x, const auto& y) { return -g * y / x; });
}

template <typename Scalar>
Var<Scalar> sigmoid(const Var<Scalar>& a) {
  return detail::unary(
      "sigmoid", a, [](const auto& x) { return Scalar(1) / (Scalar(1) + (-x).exp()); },
      [](const auto& g, const auto&, const auto& y) { return g * y * (Scalar(1) - y); });
}

template <typename Scalar>
Var<Scalar> log(const Var<Scalar>& a) {
  return detail::unary(
      "log", a, [](const auto& x) { return x.log(); },
      [](const auto& g, const auto& x, const auto&) { return g / x; });
}

template <typename Scalar>
Var<Scalar> exp(const Var<Scalar>& a) {
  return detail::unary(
      "exp", a, [](const auto& x) { return x.exp(); },
      [](const auto& g, const auto&, const auto& y) { return g * y; });
}

template <typename Scalar>
Var<Scalar> sqrt(const Var<Scalar>& a) {
  return detail::unary(
      "sqrt", a, [](const auto& x) { return x.sqrt(); },
      [](const auto& g, const auto&, const auto& y) { return g * Scalar(0.5) / y; });
}

template <typename Scalar>
Var<Scalar> abs(const Var<Scalar>& a) {
  return detail::unary(
      "abs", a, [](const auto& x) { return x.abs(); },
      [](const auto& g, const auto& x, const auto&) { return g * x.sign(); });
}

template <typename Scalar>
Var<Scalar> square(const Var<Scalar>& a) {
  return detail::unary(
      "square", a, [](const auto& x) { return x.square(); },
      [](const auto& g, const auto& x, const auto&) { return Scalar(2) * g * x; });
}

template <typename Scalar>
Var<Scalar> relu(const Var<Scalar>& a) {
  return detail::unary(
      "relu", a, [](const auto& x) { return x.max(Scalar(0)); },
      [](const auto& g, const auto& x, const auto&) { return (x > Scalar(0)).select(g, Scalar(0)); });
}

/// Clamps into [lo, hi]; the gradient is zero where clamping was active.
template <typename Scalar>
Var<Scalar> clamp(const Var<Scalar>& a, Scalar lo, Scalar hi) {
  return detail::unary(
      "clamp", a, [lo, hi](const auto& x) { return x.max(lo).min(hi); },
      [lo, hi](const auto& g, const auto& x, const auto&) {
        return ((x >= lo) && (x <= hi)).select(g, Scalar(0));
      });
}

template <typename Scalar>
Var<Scalar> reshape(const Var<Scalar>& a, Shape shape) {
  Tensor<Scalar> out = a.value().reshaped(std::move(shape));
  const std::size_t ia = a.id();
  return a.tape().record("reshape", std::move(out), {a}, [ia](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    t.grad(ia).data() += g.data();
  });
}

// ---------------------------------------------------------------------------
// Reductions

/// Sum of every element; rank-0 result.
template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& a) {
  const std::size_t ia = a.id();
  return a.tape().record("sum", Tensor<Scalar>::scalar(a.value().data().sum()), {a},
                         [ia](Tape<Scalar>& t, const Tensor<Scalar>& g) { t.grad(ia).data() += g[0]; });
}

template <typename Scalar>
Var<Scalar> mean(const Var<Scalar>& a) {
  return sum(a) / Scalar(a.size());
}

namespace detail {

struct AxisReduction {
  Shape out_shape;
  std::vector<Index> target;  // output flat index per input flat index
  Index count = 1;            // elements folded into each output
};

inline AxisReduction plan_reduction(const Shape& shape, std::vector<Index> axes) {
  const Index rank = Index(shape.size());
  std::vector<bool> reduced(shape.size(), false);
  for (Index ax : axes) {
    if (ax < 0) ax += rank;
    if (ax < 0 || ax >= rank) {
      throw ShapeError("reduction axis " + std::to_string(ax) + " invalid for shape " + shape_string(shape));
    }
    if (reduced[std::size_t(ax)]) throw ShapeError("reduction axis repeated");
    reduced[std::size_t(ax)] = true;
  }
  AxisReduction plan;
  std::vector<Index> out_stride(shape.size(), 0);
  Index stride = 1;
  for (Index d = rank - 1; d >= 0; --d) {
    if (reduced[std::size_t(d)]) {
      plan.count *= shape[std::size_t(d)];
    } else {
      out_stride[std::size_t(d)] = stride;
      stride *= shape[std::size_t(d)];
    }
  }
  for (Index d = 0; d < rank; ++d) {
    if (!reduced[std::size_t(d)]) plan.out_shape.push_back(shape[std::size_t(d)]);
  }
  const Index n = numel(shape);
  plan.target.resize(std::size_t(n));
  std::vector<Index> idx(shape.size(), 0);
  Index out = 0;
  for (Index i = 0; i < n; ++i) {
    plan.target[std::size_t(i)] = out;
    for (Index d = rank - 1; d >= 0; --d) {
      auto du = std::size_t(d);
      ++idx[du];
      out += out_stride[du];
      if (idx[du] < shape[du]) break;
      out -= out_stride[du] * idx[du];
      idx[du] = 0;
    }
  }
  return plan;
}

}  // namespace detail

/// Sum over the given axes (negative axes count from the back).
template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& a, std::vector<Index> axes) {
  auto plan = std::make_shared<detail::AxisReduction>(detail::plan_reduction(a.shape(), std::move(axes)));
  Tensor<Scalar> out(plan->out_shape);
  const auto& x = a.value().data();
  for (Index i = 0; i < x.size(); ++i) out[plan->target[std::size_t(i)]] += x[i];
  const std::size_t ia = a.id();
  return a.tape().record("sum_axes", std::move(out), {a}, [ia, plan](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    auto& dx = t.grad(ia).data();
    for (Index i = 0; i < dx.size(); ++i) dx[i] += g[plan->target[std::size_t(i)]];
  });
}

template <typename Scalar>
Var<Scalar> mean(const Var<Scalar>& a, std::vector<Index> axes) {
  Index count = detail::plan_reduction(a.shape(), axes).count;
  return sum(a, std::move(axes)) / Scalar(count);
}

// ---------------------------------------------------------------------------
// Network layers

struct Conv2dOptions {
  Index stride = 1;
  Index padding = 0;
};

namespace detail {

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ConvGeometry {
  Index n, c, h, w, k, kh, kw, oh, ow, stride, pad;
};

template <typename Scalar>
void im2col(const Scalar* x, const ConvGeometry& g, RowMatrix<Scalar>& col) {
  col.resize(g.c * g.kh * g.kw, g.oh * g.ow);
  for (Index c = 0; c < g.c; ++c) {
    for (Index ki = 0; ki < g.kh; ++ki) {
      for (Index kj = 0; kj < g.kw; ++kj) {
        Scalar* row = col.row((c * g.kh + ki) * g.kw + kj).data();
        for (Index oy = 0; oy < g.oh; ++oy) {
          const Index iy = oy * g.stride + ki - g.pad;
          for (Index ox = 0; ox < g.ow; ++ox) {
            const Index ix = ox * g.stride + kj - g.pad;
            const bool inside = iy >= 0 && iy < g.h && ix >= 0 && ix < g.w;
            row[oy * g.ow + ox] = inside ? x[(c * g.h + iy) * g.w + ix] : Scalar(0);
          }
        }
      }
    }
  }
}

template <typename Scalar>
void col2im_add(const RowMatrix<Scalar>& col, const ConvGeometry& g, Scalar* dx) {
  for (Index c = 0; c < g.c; ++c) {
    for (Index ki = 0; ki < g.kh; ++ki) {
      for (Index kj = 0; kj < g.kw; ++kj) {
        const Scalar* row = col.row((c * g.kh + ki) * g.kw + kj).data();
        for (Index oy = 0; oy < g.oh; ++oy) {
          const Index iy = oy * g.stride + ki - g.pad;
          if (iy < 0 || iy >= g.h) continue;
          for (Index ox = 0; ox < g.ow; ++ox) {
            const Index ix = ox * g.stride + kj - g.pad;
            if (ix < 0 || ix >= g.w) continue;
            dx[(c * g.h + iy) * g.w + ix] += row[oy * g.ow + ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// 2-D cross-correlation with zero padding.
/// input: (N,C,H,W) or (C,H,W); kernels: (K,C,kh,kw); bias: (K).
template <typename Scalar>
Var<Scalar> conv2d(const Var<Scalar>& input, const Var<Scalar>& kernels, const std::optional<Var<Scalar>>& bias,
                   Conv2dOptions opt = {}) {
  using Matrix = detail::RowMatrix<Scalar>;
  const Shape& xs = input.shape();
  const Shape& ks = kernels.shape();
  const bool batched = xs.size() == 4;
  if ((xs.size() != 3 && xs.size() != 4) || ks.size() != 4) {
    throw ShapeError("conv2d expects (N,C,H,W)/(C,H,W) input and (K,C,kh,kw) kernels, got " + shape_string(xs) +
                     " and " + shape_string(ks));
  }
  detail::ConvGeometry g{};
  g.n = batched ? xs[0] : 1;
  g.c = xs[xs.size() - 3];
  g.h = xs[xs.size() - 2];
  g.w = xs[xs.size() - 1];
  g.k = ks[0];
  g.kh = ks[2];
  g.kw = ks[3];
  g.stride = opt.stride;
  g.pad = opt.padding;
  if (ks[1] != g.c) throw ShapeError("conv2d channel mismatch: input " + shape_string(xs) + ", kernels " + shape_string(ks));
  if (g.stride < 1 || g.pad < 0) throw ShapeError("conv2d: stride must be >= 1 and padding >= 0");
  if (g.h + 2 * g.pad < g.kh || g.w + 2 * g.pad < g.kw) {
    throw ShapeError("conv2d: kernel " + shape_string(ks) + " does not fit input " + shape_string(xs));
  }
  if (bias && (bias->shape() != Shape{g.k})) throw ShapeError("conv2d: bias must have shape (K)");
  g.oh = (g.h + 2 * g.pad - g.kh) / g.stride + 1;
  g.ow = (g.w + 2 * g.pad - g.kw) / g.stride + 1;

  const Index patch = g.c * g.kh * g.kw;
  const Index plane = g.oh * g.ow;
  Eigen::Map<const Matrix> wmat(kernels.value().raw(), g.k, patch);
  Shape out_shape = batched ? Shape{g.n, g.k, g.oh, g.ow} : Shape{g.k, g.oh, g.ow};
  Tensor<Scalar> out(out_shape);
  const bool keep_cols = kernels.requires_grad();
  auto cols = std::make_shared<std::vector<Matrix>>();
  if (keep_cols) cols->resize(std::size_t(g.n));
  Matrix col;
  for (Index n = 0; n < g.n; ++n) {
    detail::im2col(input.value().raw() + n * g.c * g.h * g.w, g, col);
    Eigen::Map<Matrix> y(out.raw() + n * g.k * plane, g.k, plane);
    y.noalias() = wmat * col;
    if (bias) y.colwise() += bias->value().data().matrix();
    if (keep_cols) (*cols)[std::size_t(n)] = col;
  }

  const std::size_t ix = input.id(), iw = kernels.id();
  const std::optional<std::size_t> ib = bias ? std::optional<std::size_t>(bias->id()) : std::nullopt;
  auto bwd = [g, ix, iw, ib, cols, patch, plane](Tape<Scalar>& t, const Tensor<Scalar>& grad) {
    Eigen::Map<const Matrix> wm(t.value(iw).raw(), g.k, patch);
    Matrix dcol;
    for (Index n = 0; n < g.n; ++n) {
      Eigen::Map<const Matrix> dy(grad.raw() + n * g.k * plane, g.k, plane);
      if (t.requires_grad(iw)) {
        Eigen::Map<Matrix> dw(t.grad(iw).raw(), g.k, patch);
        dw.noalias() += dy * (*cols)[std::size_t(n)].transpose();
      }
      if (ib && t.requires_grad(*ib)) t.grad(*ib).data() += dy.rowwise().sum().array();
      if (t.requires_grad(ix)) {
        dcol.noalias() = wm.transpose() * dy;
        detail::col2im_add(dcol, g, t.grad(ix).raw() + n * g.c * g.h * g.w);
      }
    }
  };
  if (bias) return input.tape().record("conv2d", std::move(out), {input, kernels, *bias}, bwd);
  return input.tape().record("conv2d", std::move(out), {input, kernels}, bwd);
}

template <typename Scalar>
Var<Scalar> conv2d(const Var<Scalar>& input, const Var<Scalar>& kernels, Conv2dOptions opt = {}) {
  return conv2d(input, kernels, std::optional<Var<Scalar>>{}, opt);
}

/// Non-overlapping k×k average pooling on (N,C,H,W); H and W divisible by k.
template <typename Scalar>
Var<Scalar> avg_pool2d(const Var<Scalar>& input, Index k) {
  const Shape& s = input.shape();
  if (s.size() != 4 || k < 1 || s[2] % k != 0 || s[3] % k != 0) {
    throw ShapeError("avg_pool2d needs (N,C,H,W) with H,W divisible by " + std::to_string(k) + ", got " +
                     shape_string(s));
  }
  const Index planes = s[0] * s[1], h = s[2], w = s[3], oh = h / k, ow = w / k;
  const Scalar inv = Scalar(1) / Scalar(k * k);
  Tensor<Scalar> out({s[0], s[1], oh, ow});
  const Scalar* x = input.value().raw();
  Scalar* y = out.raw();
  for (Index p = 0; p < planes; ++p) {
    for (Index i = 0; i < h; ++i) {
      for (Index j = 0; j < w; ++j) y[(p * oh + i / k) * ow + j / k] += x[(p * h + i) * w + j];
    }
  }
  out.data() *= inv;
  const std::size_t ix = input.id();
  return input.tape().record("avg_pool2d", std::move(out), {input},
                             [ix, planes, h, w, k, oh, ow, inv](Tape<Scalar>& t, const Tensor<Scalar>& g) {
                               Scalar* dx = t.grad(ix).raw();
                               for (Index p = 0; p < planes; ++p) {
                                 for (Index i = 0; i < h; ++i) {
                                   for (Index j = 0; j < w; ++j) {
                                     dx[(p * h + i) * w + j] += inv * g[(p * oh + i / k) * ow + j / k];
                                   }
                                 }
                               }
                             });
}

/// Affine map: x (N,F) · wᵀ (F,O) + b (O).
template <typename Scalar>
Var<Scalar> linear(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias) {
  using Matrix = detail::RowMatrix<Scalar>;
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  if (xs.size() != 2 || ws.size() != 2 || xs[1] != ws[1] || bias.shape() != Shape{ws[0]}) {
    throw ShapeError("linear: incompatible shapes " + shape_string(xs) + ", " + shape_string(ws) + ", " +
                     shape_string(bias.shape()));
  }
  const Index n = xs[0], f = xs[1], o = ws[0];
  Tensor<Scalar> out({n, o});
  Eigen::Map<Matrix> y(out.raw(), n, o);
  y.noalias() = Eigen::Map<const Matrix>(x.value().raw(), n, f) *
                Eigen::Map<const Matrix>(weight.value().raw(), o, f).transpose();
  y.rowwise() += bias.value().data().matrix().transpose();
  const std::size_t ix = x.id(), iw = weight.id(), ib = bias.id();
  return x.tape().record("linear", std::move(out), {x, weight, bias},
                         [ix, iw, ib, n, f, o](Tape<Scalar>& t, const Tensor<Scalar>& g) {
                           Eigen::Map<const Matrix> dy(g.raw(), n, o);
                           if (t.requires_grad(ix)) {
                             Eigen::Map<Matrix>(t.grad(ix).raw(), n, f).noalias() +=
                                 dy * Eigen::Map<const Matrix>(t.value(iw).raw(), o, f);
                           }
                           if (t.requires_grad(iw)) {
                             Eigen::Map<Matrix>(t.grad(iw).raw(), o, f).noalias() +=
                                 dy.transpose() * Eigen::Map<const Matrix>(t.value(ix).raw(), n, f);
                           }
                           if (t.requires_grad(ib)) t.grad(ib).data() += dy.colwise().sum().transpose().array();
                         });
}

/// Row-wise softmax of an (N,C) tensor.
template <typename Scalar>
Var<Scalar> softmax(const Var<Scalar>& logits) {
  using Matrix = detail::RowMatrix<Scalar>;
  const Shape& s = logits.shape();
  if (s.size() != 2) throw ShapeError("softmax expects (N,C), got " + shape_string(s));
  const Index n = s[0], c = s[1];
  Tensor<Scalar> out(s);
  Eigen::Map<const Matrix> x(logits.value().raw(), n, c);
  Eigen::Map<Matrix> y(out.raw(), n, c);
  y = (x.colwise() - x.rowwise().maxCoeff()).array().exp().matrix();
  y.array().colwise() /= y.rowwise().sum().array();
  const std::size_t ix = logits.id();
  auto out_id = std::make_shared<std::size_t>(0);
  Var<Scalar> r = logits.tape().record("softmax", std::move(out), {logits},
                                       [ix, out_id, n, c](Tape<Scalar>& t, const Tensor<Scalar>& g) {
                                         Eigen::Map<const Matrix> yy(t.value(*out_id).raw(), n, c);
                                         Eigen::Map<const Matrix> gg(g.raw(), n, c);
                                         Eigen::Matrix<Scalar, Eigen::Dynamic, 1> dot =
                                             (gg.array() * yy.array()).rowwise().sum();
                                         Eigen::Map<Matrix>(t.grad(ix).raw(), n, c).array() +=
                                             yy.array() * (gg.array().colwise() - dot.array());
                                       });
  *out_id = r.id();
  return r;
}

/// Row-wise log-softmax of an (N,C) tensor.
template <typename Scalar>
Var<Scalar> log_softmax(const Var<Scalar>& logits) {
  using Matrix = detail::RowMatrix<Scalar>;
  const Shape& s = logits.shape();
  if (s.size() != 2) throw ShapeError("log_softmax expects (N,C), got " + shape_string(s));
  const Index n = s[0], c = s[1];
  Tensor<Scalar> out(s);
  Eigen::Map<const Matrix> x(logits.value().raw(), n, c);
  Eigen::Map<Matrix> y(out.raw(), n, c);
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> mx = x.rowwise().maxCoeff();
  y = x.colwise() - mx;
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> lse = y.array().exp().rowwise().sum().log().matrix();
  y.colwise() -= lse;
  const std::size_t ix = logits.id();
  auto out_id = std::make_shared<std::size_t>(0);
  Var<Scalar> r = logits.tape().record("log_softmax", std::move(out), {logits},
                                       [ix, out_id, n, c](Tape<Scalar>& t, const Tensor<Scalar>& g) {
                                         Eigen::Map<const Matrix> yy(t.value(*out_id).raw(), n, c);
                                         Eigen::Map<const Matrix> gg(g.raw(), n, c);
                                         Eigen::Matrix<Scalar, Eigen::Dynamic, 1> gs = gg.rowwise().sum();
                                         Eigen::Map<Matrix>(t.grad(ix).raw(), n, c).array() +=
                                             gg.array() - yy.array().exp().colwise() * gs.array();
                                       });
  *out_id = r.id();
  return r;
}

/// Selects one column per row of an (N,C) tensor: out[i] = a[i, index[i]].
template <typename Scalar>
Var<Scalar> pick(const Var<Scalar>& a, std::vector<Index> index) {
  const Shape& s = a.shape();
  if (s.size() != 2 || Index(index.size()) != s[0]) {
    throw ShapeError("pick expects (N,C) and N indices, got " + shape_string(s));
  }
  const Index c = s[1];
  Tensor<Scalar> out({s[0]});
  for (Index i = 0; i < s[0]; ++i) {
    const Index col = index[std::size_t(i)];
    if (col < 0 || col >= c) throw ShapeError("pick: column " + std::to_string(col) + " out of range");
    out[i] = a.value()[i * c + col];
  }
  const std::size_t ia = a.id();
  return a.tape().record("pick", std::move(out), {a},
                         [ia, c, idx = std::move(index)](Tape<Scalar>& t, const Tensor<Scalar>& g) {
                           auto& dx = t.grad(ia);
                           for (std::size_t i = 0; i < idx.size(); ++i) dx[Index(i) * c + idx[i]] += g[Index(i)];
                         });
}

/// Sum of squared horizontal and vertical neighbour differences over the last
/// two axes. The result keeps the leading axes (rank 0 for an H×W input).
template <typename Scalar>
Var<Scalar> total_variation(const Var<Scalar>& m) {
  const Shape& s = m.shape();
  if (s.size() < 2) throw ShapeError("total_variation needs at least 2 axes, got " + shape_string(s));
  const Index h = s[s.size() - 2], w = s[s.size() - 1];
  Shape lead(s.begin(), s.end() - 2);
  const Index planes = numel(lead);
  Tensor<Scalar> out(lead);
  const Scalar* x = m.value().raw();
  for (Index p = 0; p < planes; ++p) {
    const Scalar* q = x + p * h * w;
    Scalar acc = 0;
    for (Index i = 0; i < h; ++i) {
      for (Index j = 0; j < w; ++j) {
        if (j + 1 < w) acc += (q[i * w + j] - q[i * w + j + 1]) * (q[i * w + j] - q[i * w + j + 1]);
        if (i + 1 < h) acc += (q[i * w + j] - q[(i + 1) * w + j]) * (q[i * w + j] - q[(i + 1) * w + j]);
      }
    }
    out[p] = acc;
  }
  const std::size_t im = m.id();
  return m.tape().record("total_variation", std::move(out), {m},
                         [im, planes, h, w](Tape<Scalar>& t, const Tensor<Scalar>& g) {
                           const Scalar* x = t.value(im).raw();
                           Scalar* dx = t.grad(im).raw();
                           for (Index p = 0; p < planes; ++p) {
                             const Scalar gp = Scalar(2) * g[p];
                             const Index off = p * h * w;
                             for (Index i = 0; i < h; ++i) {
                               for (Index j = 0; j < w; ++j) {
                                 const Index a = off + i * w + j;
                                 if (j + 1 < w) {
                                   const Scalar d = gp * (x[a] - x[a + 1]);
                                   dx[a] += d;
                                   dx[a + 1] -= d;
                                 }
                                 if (i + 1 < h) {
                                   const Scalar d = gp * (x[a] - x[a + w]);
                                   dx[a] += d;
                                   dx[a + w] -= d;
                                 }
                               }
                             }
                           }
                         });
}

// ---------------------------------------------------------------------------

/// Central-difference gradient of a scalar function; the test-side oracle for
/// backward().
template <typename Scalar, typename F>
Tensor<Scalar> finite_difference_gradient(F&& f, const Tensor<Scalar>& x, Scalar step) {
  Tensor<Scalar> grad(x.shape());
  Tensor<Scalar> probe = x;
  for (Index i = 0; i < x.size(); ++i) {
    const Scalar orig = probe[i];
    probe[i] = orig + step;
    const Scalar up = Scalar(f(probe));
    probe[i] = orig - step;
    const Scalar down = Scalar(f(probe));
    probe[i] = orig;
    grad[i] = (up - down) / (Scalar(2) * step);
  }
  return grad;
}

}  // namespace fido
