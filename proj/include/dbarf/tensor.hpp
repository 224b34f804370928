// Reverse-mode autodiff over dense arrays. A TapeT records every primitive
// applied during a step; backward() replays the record once in reverse and
// accumulates gradients additively across fan-out. Tests instantiate the
// engine with double, training with float.
#pragma once

#include <omp.h>

#include <algorithm>
#include <deque>
#include <functional>
#include <memory>
#include <optional>

#include "dbarf/core.hpp"

namespace dbarf {

template <typename S>
struct NodeT {
  ArrayT<S> value;
  ArrayT<S> grad;  // allocated on demand, same shape as value
  bool requires_grad = false;
  bool grad_alloc = false;
  const char* op = "leaf";
  std::vector<NodeT*> parents;
  std::function<void(NodeT&)> backward;  // adds into parents' grads
  std::function<void(NodeT&)> forward;   // recomputes value from parents

  ArrayT<S>& ensure_grad() {
    if (!grad_alloc) {
      grad = ArrayT<S>::zeros(value.shape());
      grad_alloc = true;
    }
    return grad;
  }
};

template <typename S>
class TapeT;

// Lightweight handle onto a tape node.
template <typename S>
class TensorT {
 public:
  TensorT() = default;
  TensorT(NodeT<S>* n, TapeT<S>* t) : node_(n), tape_(t) {}

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->value.shape(); }
  int64_t numel() const { return node_->value.numel(); }
  int64_t dim(int i) const { return node_->value.dim(i); }
  int ndim() const { return node_->value.ndim(); }
  const ArrayT<S>& value() const { return node_->value; }
  ArrayT<S>& value() { return node_->value; }
  const ArrayT<S>& grad() const { return node_->ensure_grad(); }
  bool requires_grad() const { return node_->requires_grad; }
  S item() const {
    if (node_->value.numel() != 1) throw ShapeError("item(): tensor is not a scalar");
    return node_->value[0];
  }

  NodeT<S>* node() const { return node_; }
  TapeT<S>* tape() const { return tape_; }

 private:
  NodeT<S>* node_ = nullptr;
  TapeT<S>* tape_ = nullptr;
};

template <typename S>
class TapeT {
 public:
  TensorT<S> leaf(ArrayT<S> v, bool requires_grad = false) {
    NodeT<S>* n = alloc();
    n->value = std::move(v);
    n->requires_grad = requires_grad;
    return TensorT<S>(n, this);
  }
  TensorT<S> constant(ArrayT<S> v) { return leaf(std::move(v), false); }
  TensorT<S> scalar(S v, bool requires_grad = false) {
    return leaf(ArrayT<S>::scalar(v), requires_grad);
  }

  NodeT<S>* alloc() {
    nodes_.emplace_back();
    return &nodes_.back();
  }

  size_t size() const { return nodes_.size(); }

  // Rebind a leaf's value; invalidates downstream values until forward().
  void rebind(TensorT<S> leaf_t, ArrayT<S> v) {
    if (!leaf_t.node()->value.same_shape(v))
      throw ShapeError("rebind: shape " + shape_str(v.shape()) + " does not match leaf " +
                       shape_str(leaf_t.node()->value.shape()));
    leaf_t.node()->value = std::move(v);
    values_valid_ = false;
  }

  // Re-executes every recorded primitive in topological (recording) order.
  void forward() {
    for (auto& n : nodes_)
      if (n.forward) n.forward(n);
    values_valid_ = true;
  }

  void zero_grad() {
    for (auto& n : nodes_)
      if (n.grad_alloc) n.grad.fill(S(0));
  }

  // Reverse sweep from `out`. Seeds with ones (or `seed`), visits each node
  // exactly once in reverse recording order.
  void backward(TensorT<S> out, const ArrayT<S>* seed = nullptr) {
    if (!values_valid_) throw StateError("backward called before forward on rebound tape");
    if (out.tape() != this) throw StateError("backward: output does not belong to this tape");
    ArrayT<S>& g = out.node()->ensure_grad();
    if (seed) {
      if (!seed->same_shape(g)) throw ShapeError("backward: seed shape mismatch");
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += (*seed)[i];
    } else {
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += S(1);
    }
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      NodeT<S>& n = *it;
      if (n.backward && n.grad_alloc && n.requires_grad) n.backward(n);
    }
  }

 private:
  std::deque<NodeT<S>> nodes_;  // stable addresses
  bool values_valid_ = true;
};

// ---------------------------------------------------------------------------
// broadcasting helpers (numpy semantics, shapes right-aligned)

inline Shape broadcast_shapes(const Shape& a, const Shape& b, const char* opname) {
  Shape out(std::max(a.size(), b.size()), 1);
  for (size_t i = 0; i < out.size(); ++i) {
    int64_t da = i < out.size() - a.size() ? 1 : a[i - (out.size() - a.size())];
    int64_t db = i < out.size() - b.size() ? 1 : b[i - (out.size() - b.size())];
    if (da != db && da != 1 && db != 1)
      throw ShapeError(std::string(opname) + ": cannot broadcast " + shape_str(a) + " with " +
                       shape_str(b));
    out[i] = std::max(da, db);
  }
  return out;
}

namespace detail {

// Row-major strides with 0 on broadcast (size-1 or missing) dims, aligned to
// an output of rank `rank`.
inline std::vector<int64_t> bcast_strides(const Shape& in, size_t rank) {
  std::vector<int64_t> st(rank, 0);
  int64_t acc = 1;
  for (size_t i = 0; i < in.size(); ++i) {
    size_t j = in.size() - 1 - i;
    st[rank - 1 - i] = (in[j] == 1) ? 0 : acc;
    acc *= in[j];
  }
  return st;
}

template <typename S, typename F>
void bcast_loop(const ArrayT<S>& a, const ArrayT<S>& b, const Shape& out_shape, F&& body) {
  const size_t rank = out_shape.size();
  const int64_t n = shape_numel(out_shape);
  if (a.shape() == b.shape()) {
    for (int64_t i = 0; i < n; ++i) body(i, i, i);
    return;
  }
  const auto sa = bcast_strides(a.shape(), rank);
  const auto sb = bcast_strides(b.shape(), rank);
  std::vector<int64_t> idx(rank, 0);
  int64_t ia = 0, ib = 0;
  for (int64_t i = 0; i < n; ++i) {
    body(i, ia, ib);
    for (size_t d = rank; d-- > 0;) {
      ++idx[d];
      ia += sa[d];
      ib += sb[d];
      if (idx[d] < out_shape[d]) break;
      ia -= sa[d] * out_shape[d];
      ib -= sb[d] * out_shape[d];
      idx[d] = 0;
    }
  }
}

}  // namespace detail

// Sum `g` down to `target` shape (inverse of broadcasting).
template <typename S>
ArrayT<S> reduce_to_shape(const ArrayT<S>& g, const Shape& target) {
  if (g.shape() == target) return g;
  ArrayT<S> out = ArrayT<S>::zeros(target);
  const size_t rank = g.shape().size();
  const auto st = detail::bcast_strides(target, rank);
  std::vector<int64_t> idx(rank, 0);
  int64_t io = 0;
  const int64_t n = g.numel();
  for (int64_t i = 0; i < n; ++i) {
    out[io] += g[i];
    for (size_t d = rank; d-- > 0;) {
      ++idx[d];
      io += st[d];
      if (idx[d] < g.shape()[d]) break;
      io -= st[d] * g.shape()[d];
      idx[d] = 0;
    }
  }
  return out;
}

namespace detail {

template <typename S>
TapeT<S>* tape_of(const TensorT<S>& a, const TensorT<S>& b, const char* opname) {
  if (a.tape() != b.tape())
    throw StateError(std::string(opname) + ": operands live on different tapes");
  return a.tape();
}

// value-level binary map with broadcasting
template <typename S, typename F>
ArrayT<S> vmap2(const ArrayT<S>& a, const ArrayT<S>& b, F f, const char* opname) {
  Shape os = broadcast_shapes(a.shape(), b.shape(), opname);
  ArrayT<S> out(os);
  bcast_loop(a, b, os, [&](int64_t i, int64_t ia, int64_t ib) { out[i] = f(a[ia], b[ib]); });
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise binary primitives

template <typename S, typename FwdF, typename BwdF>
TensorT<S> make_binary(const TensorT<S>& a, const TensorT<S>& b, const char* opname, FwdF f,
                       BwdF df) {
  TapeT<S>* tape = detail::tape_of(a, b, opname);
  NodeT<S>* n = tape->alloc();
  n->op = opname;
  n->parents = {a.node(), b.node()};
  n->requires_grad = a.requires_grad() || b.requires_grad();
  n->forward = [f, opname](NodeT<S>& self) {
    self.value = detail::vmap2(self.parents[0]->value, self.parents[1]->value, f, opname);
  };
  n->forward(*n);
  n->backward = [df](NodeT<S>& self) {
    NodeT<S>* pa = self.parents[0];
    NodeT<S>* pb = self.parents[1];
    const Shape& os = self.value.shape();
    ArrayT<S> ga(os), gb(os);
    detail::bcast_loop(pa->value, pb->value, os, [&](int64_t i, int64_t ia, int64_t ib) {
      S da, db;
      df(pa->value[ia], pb->value[ib], da, db);
      ga[i] = da * self.grad[i];
      gb[i] = db * self.grad[i];
    });
    if (pa->requires_grad) {
      ArrayT<S> r = reduce_to_shape(ga, pa->value.shape());
      ArrayT<S>& dst = pa->ensure_grad();
      for (int64_t i = 0; i < r.numel(); ++i) dst[i] += r[i];
    }
    if (pb->requires_grad) {
      ArrayT<S> r = reduce_to_shape(gb, pb->value.shape());
      ArrayT<S>& dst = pb->ensure_grad();
      for (int64_t i = 0; i < r.numel(); ++i) dst[i] += r[i];
    }
  };
  return TensorT<S>(n, tape);
}

template <typename S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
  return make_binary(
      a, b, "add", [](S x, S y) { return x + y; },
      [](S, S, S& da, S& db) {
        da = S(1);
        db = S(1);
      });
}

template <typename S>
TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b) {
  return make_binary(
      a, b, "sub", [](S x, S y) { return x - y; },
      [](S, S, S& da, S& db) {
        da = S(1);
        db = S(-1);
      });
}

template <typename S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
  return make_binary(
      a, b, "mul", [](S x, S y) { return x * y; },
      [](S x, S y, S& da, S& db) {
        da = y;
        db = x;
      });
}

template <typename S>
TensorT<S> div(const TensorT<S>& a, const TensorT<S>& b) {
  return make_binary(
      a, b, "div", [](S x, S y) { return x / y; },
      [](S x, S y, S& da, S& db) {
        da = S(1) / y;
        db = -x / (y * y);
      });
}

template <typename S>
TensorT<S> operator+(const TensorT<S>& a, const TensorT<S>& b) {
  return add(a, b);
}
template <typename S>
TensorT<S> operator-(const TensorT<S>& a, const TensorT<S>& b) {
  return sub(a, b);
}
template <typename S>
TensorT<S> operator*(const TensorT<S>& a, const TensorT<S>& b) {
  return mul(a, b);
}
template <typename S>
TensorT<S> operator/(const TensorT<S>& a, const TensorT<S>& b) {
  return div(a, b);
}

// ---------------------------------------------------------------------------
// elementwise unary primitives

template <typename S, typename FwdF, typename BwdF>
TensorT<S> make_unary(const TensorT<S>& a, const char* opname, FwdF f, BwdF df) {
  TapeT<S>* tape = a.tape();
  NodeT<S>* n = tape->alloc();
  n->op = opname;
  n->parents = {a.node()};
  n->requires_grad = a.requires_grad();
  n->forward = [f](NodeT<S>& self) {
    const ArrayT<S>& x = self.parents[0]->value;
    ArrayT<S> out(x.shape());
    const int64_t m = x.numel();
    for (int64_t i = 0; i < m; ++i) out[i] = f(x[i]);
    self.value = std::move(out);
  };
  n->forward(*n);
  n->backward = [df](NodeT<S>& self) {
    NodeT<S>* p = self.parents[0];
    if (!p->requires_grad) return;
    ArrayT<S>& dst = p->ensure_grad();
    const int64_t m = self.value.numel();
    for (int64_t i = 0; i < m; ++i) dst[i] += df(p->value[i], self.value[i]) * self.grad[i];
  };
  return TensorT<S>(n, tape);
}

template <typename S>
TensorT<S> relu(const TensorT<S>& a) {
  return make_unary(
      a, "relu", [](S x) { return x > S(0) ? x : S(0); },
      [](S x, S) { return x > S(0) ? S(1) : S(0); });
}

template <typename S>
TensorT<S> sigmoid(const TensorT<S>& a) {
  return make_unary(
      a, "sigmoid", [](S x) { return S(1) / (S(1) + std::exp(-x)); },
      [](S, S y) { return y * (S(1) - y); });
}

template <typename S>
TensorT<S> tanh_op(const TensorT<S>& a) {
  return make_unary(
      a, "tanh", [](S x) { return std::tanh(x); }, [](S, S y) { return S(1) - y * y; });
}

template <typename S>
TensorT<S> exp_op(const TensorT<S>& a) {
  return make_unary(
      a, "exp", [](S x) { return std::exp(x); }, [](S, S y) { return y; });
}

template <typename S>
TensorT<S> log_op(const TensorT<S>& a) {
  for (int64_t i = 0; i < a.numel(); ++i)
    if (a.value()[i] <= S(0))
      throw DomainError("log: non-positive input at flat index " + std::to_string(i));
  return make_unary(
      a, "log", [](S x) { return std::log(x); }, [](S x, S) { return S(1) / x; });
}

template <typename S>
TensorT<S> sin_op(const TensorT<S>& a) {
  return make_unary(
      a, "sin", [](S x) { return std::sin(x); }, [](S x, S) { return std::cos(x); });
}

template <typename S>
TensorT<S> cos_op(const TensorT<S>& a) {
  return make_unary(
      a, "cos", [](S x) { return std::cos(x); }, [](S x, S) { return -std::sin(x); });
}

template <typename S>
TensorT<S> abs_op(const TensorT<S>& a) {
  return make_unary(
      a, "abs", [](S x) { return std::abs(x); },
      [](S x, S) { return x > S(0) ? S(1) : (x < S(0) ? S(-1) : S(0)); });
}

// numerically stable log(1 + exp(x)); gradient is sigmoid(x)
template <typename S>
TensorT<S> softplus(const TensorT<S>& a) {
  return make_unary(
      a, "softplus",
      [](S x) {
        if (x > S(30)) return x;
        return static_cast<S>(std::log1p(std::exp(static_cast<double>(x))));
      },
      [](S x, S) { return S(1) / (S(1) + std::exp(-x)); });
}

// x^p for constant p. Subgradient at x == 0 is taken as 0 (1 when p == 1) so
// sqrt-style norms stay exact at their zero point.
template <typename S>
TensorT<S> power(const TensorT<S>& a, double p) {
  for (int64_t i = 0; i < a.numel(); ++i) {
    const double x = static_cast<double>(a.value()[i]);
    if (x < 0.0 && p != std::floor(p))
      throw DomainError("power: negative base with fractional exponent at index " +
                        std::to_string(i));
    if (x == 0.0 && p < 0.0) throw DomainError("power: zero base with negative exponent");
  }
  return make_unary(
      a, "power", [p](S x) { return static_cast<S>(std::pow(static_cast<double>(x), p)); },
      [p](S x, S) -> S {
        if (x == S(0)) return p == 1.0 ? S(1) : S(0);
        return static_cast<S>(p * std::pow(static_cast<double>(x), p - 1.0));
      });
}

template <typename S>
TensorT<S> clamp(const TensorT<S>& a, double lo, double hi) {
  const S l = static_cast<S>(lo), h = static_cast<S>(hi);
  return make_unary(
      a, "clamp", [l, h](S x) { return x < l ? l : (x > h ? h : x); },
      [l, h](S x, S) { return (x >= l && x <= h) ? S(1) : S(0); });
}

// ---------------------------------------------------------------------------
// matmul

template <typename S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  TapeT<S>* tape = detail::tape_of(a, b, "matmul");
  NodeT<S>* n = tape->alloc();
  n->op = "matmul";
  n->parents = {a.node(), b.node()};
  n->requires_grad = a.requires_grad() || b.requires_grad();
  n->forward = [](NodeT<S>& self) {
    const ArrayT<S>& A = self.parents[0]->value;
    const ArrayT<S>& B = self.parents[1]->value;
    const int64_t M = A.dim(0), K = A.dim(1), N = B.dim(1);
    ArrayT<S> C(Shape{M, N});
    const S* ap = A.data();
    const S* bp = B.data();
    S* cp = C.data();
#pragma omp parallel for schedule(static) if (M * N * K > 16384)
    for (int64_t m = 0; m < M; ++m) {
      S* crow = cp + m * N;
      for (int64_t k = 0; k < K; ++k) {
        const S av = ap[m * K + k];
        const S* brow = bp + k * N;
        for (int64_t q = 0; q < N; ++q) crow[q] += av * brow[q];
      }
    }
    self.value = std::move(C);
  };
  n->forward(*n);
  n->backward = [](NodeT<S>& self) {
    NodeT<S>* pa = self.parents[0];
    NodeT<S>* pb = self.parents[1];
    const ArrayT<S>& A = pa->value;
    const ArrayT<S>& B = pb->value;
    const ArrayT<S>& G = self.grad;
    const int64_t M = A.dim(0), K = A.dim(1), N = B.dim(1);
    if (pa->requires_grad) {
      ArrayT<S>& dA = pa->ensure_grad();
      const S* gp = G.data();
      const S* bp = B.data();
      S* dap = dA.data();
#pragma omp parallel for schedule(static) if (M * N * K > 16384)
      for (int64_t m = 0; m < M; ++m) {
        for (int64_t k = 0; k < K; ++k) {
          const S* grow = gp + m * N;
          const S* brow = bp + k * N;
          S acc = S(0);
          for (int64_t q = 0; q < N; ++q) acc += grow[q] * brow[q];
          dap[m * K + k] += acc;
        }
      }
    }
    if (pb->requires_grad) {
      ArrayT<S>& dB = pb->ensure_grad();
      const S* gp = G.data();
      const S* ap = A.data();
      S* dbp = dB.data();
#pragma omp parallel for schedule(static) if (M * N * K > 16384)
      for (int64_t k = 0; k < K; ++k) {
        for (int64_t m = 0; m < M; ++m) {
          const S av = ap[m * K + k];
          const S* grow = gp + m * N;
          S* drow = dbp + k * N;
          for (int64_t q = 0; q < N; ++q) drow[q] += av * grow[q];
        }
      }
    }
  };
  return TensorT<S>(n, tape);
}

template <typename S>
TensorT<S> transpose2d(const TensorT<S>& a) {
  if (a.ndim() != 2) throw ShapeError("transpose2d: expected 2-d, got " + shape_str(a.shape()));
  TapeT<S>* tape = a.tape();
  NodeT<S>* n = tape->alloc();
  n->op = "transpose2d";
  n->parents = {a.node()};
  n->requires_grad = a.requires_grad();
  n->forward = [](NodeT<S>& self) {
    const ArrayT<S>& X = self.parents[0]->value;
    const int64_t R = X.dim(0), C = X.dim(1);
    ArrayT<S> Y(Shape{C, R});
    for (int64_t r = 0; r < R; ++r)
      for (int64_t c = 0; c < C; ++c) Y[c * R + r] = X[r * C + c];
    self.value = std::move(Y);
  };
  n->forward(*n);
  n->backward = [](NodeT<S>& self) {
    NodeT<S>* p = self.parents[0];
    if (!p->requires_grad) return;
    ArrayT<S>& dst = p->ensure_grad();
    const int64_t R = p->value.dim(0), C = p->value.dim(1);
    for (int64_t r = 0; r < R; ++r)
      for (int64_t c = 0; c < C; ++c) dst[r * C + c] += self.grad[c * R + r];
  };
  return TensorT<S>(n, tape);
}

namespace detail {
template <typename S>
void permute3(const ArrayT<S>& src, ArrayT<S>& dst, bool chw_to_hwc) {
  // chw_to_hwc: src [C,H,W] -> dst [H,W,C]; otherwise the inverse
  const int64_t C = chw_to_hwc ? src.dim(0) : src.dim(2);
  const int64_t H = chw_to_hwc ? src.dim(1) : src.dim(0);
  const int64_t W = chw_to_hwc ? src.dim(2) : src.dim(1);
  for (int64_t c = 0; c < C; ++c)
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = 0; x < W; ++x) {
        const int64_t chw = (c * H + y) * W + x;
        const int64_t hwc = (y * W + x) * C + c;
        if (chw_to_hwc)
          dst[hwc] = src[chw];
        else
          dst[chw] = src[hwc];
      }
}
}  // namespace detail

// [C,H,W] -> [H,W,C] layout change (and inverse); sampling wants HWC while
// convolution wants CHW.
template <typename S>
TensorT<S> hwc_from_chw(const TensorT<S>& a) {
  if (a.ndim() != 3) throw ShapeError("hwc_from_chw: expected rank-3, got " + shape_str(a.shape()));
  TapeT<S>* tape = a.tape();
  NodeT<S>* n = tape->alloc();
  n->op = "hwc_from_chw";
  n->parents = {a.node()};
  n->requires_grad = a.requires_grad();
  n->forward = [](NodeT<S>& self) {
    const ArrayT<S>& X = self.parents[0]->value;
    ArrayT<S> Y(Shape{X.dim(1), X.dim(2), X.dim(0)});
    detail::permute3(X, Y, true);
    self.value = std::move(Y);
  };
  n->forward(*n);
  n->backward = [](NodeT<S>& self) {
    NodeT<S>* p = self.parents[0];
    if (!p->requires_grad) return;
    ArrayT<S> g(p->value.shape());
    detail::permute3(self.grad, g, false);
    ArrayT<S>& dst = p->ensure_grad();
    for (int64_t i = 0; i < g.numel(); ++i) dst[i] += g[i];
  };
  return TensorT<S>(n, tape);
}

template <typename S>
TensorT<S> chw_from_hwc(const TensorT<S>& a) {
  if (a.ndim() != 3) throw ShapeError("chw_from_hwc: expected rank-3, got " + shape_str(a.shape()));
  TapeT<S>* tape = a.tape();
  NodeT<S>* n = tape->alloc();
  n->op = "chw_from_hwc";
  n->parents = {a.node()};
  n->requires_grad = a.requires_grad();
  n->forward = [](NodeT<S>& self) {
    const ArrayT<S>& X = self.parents[0]->value;
    ArrayT<S> Y(Shape{X.dim(2), X.dim(0), X.dim(1)});
    detail::permute3(X, Y, false);
    self.value = std::move(Y);
  };
  n->forward(*n);
  n->backward = [](NodeT<S>& self) {
    NodeT<S>* p = self.parents[0];
    if (!p->requires_grad) return;
    ArrayT<S> g(p->value.shape());
    detail::permute3(self.grad, g, true);
    ArrayT<S>& dst = p->ensure_grad();
    for (int64_t i = 0; i < g.numel(); ++i) dst[i] += g[i];
  };
  return TensorT<S>(n, tape);
}

// ---------------------------------------------------------------------------
// 2-d convolution, zero padding, stride 1 or 2. x: [Ci,H,W], w: [Co,Ci,kh,kw].

template <typename S>
TensorT<S> conv2d(const TensorT<S>& x, const TensorT<S>& w, std::optional<TensorT<S>> bias,
                  int stride, int pad) {
  if (x.ndim() != 3 || w.ndim() != 4 || x.dim(0) != w.dim(1))
    throw ShapeError("conv2d: incompatible shapes " + shape_str(x.shape()) + " and " +
                     shape_str(w.shape()));
  if (stride != 1 && stride != 2) throw DomainError("conv2d: stride must be 1 or 2");
  TapeT<S>* tape = x.tape();
  NodeT<S>* n = tape->alloc();
  n->op = "conv2d";
  n->parents = {x.node(), w.node()};
  if (bias) n->parents.push_back(bias->node());
  n->requires_grad = x.requires_grad() || w.requires_grad() || (bias && bias->requires_grad());
  const int64_t st = stride, pd = pad;
  n->forward = [st, pd](NodeT<S>& self) {
    const ArrayT<S>& X = self.parents[0]->value;
    const ArrayT<S>& W = self.parents[1]->value;
    const int64_t Ci = X.dim(0), H = X.dim(1), Wd = X.dim(2);
    const int64_t Co = W.dim(0), kh = W.dim(2), kw = W.dim(3);
    const int64_t Ho = (H + 2 * pd - kh) / st + 1;
    const int64_t Wo = (Wd + 2 * pd - kw) / st + 1;
    if (Ho < 1 || Wo < 1) throw ShapeError("conv2d: kernel larger than padded input");
    ArrayT<S> Y(Shape{Co, Ho, Wo});
    const bool has_bias = self.parents.size() == 3;
    const S* xp = X.data();
    const S* wp = W.data();
    S* yp = Y.data();
#pragma omp parallel for schedule(static)
    for (int64_t co = 0; co < Co; ++co) {
      S* ymap = yp + co * Ho * Wo;
      if (has_bias) {
        const S bv = self.parents[2]->value[co];
        for (int64_t i = 0; i < Ho * Wo; ++i) ymap[i] = bv;
      }
      for (int64_t ci = 0; ci < Ci; ++ci) {
        const S* xmap = xp + ci * H * Wd;
        const S* wmap = wp + (co * X.dim(0) + ci) * kh * kw;
        for (int64_t r = 0; r < kh; ++r)
          for (int64_t c = 0; c < kw; ++c) {
            const S wv = wmap[r * kw + c];
            for (int64_t oh = 0; oh < Ho; ++oh) {
              const int64_t ih = oh * st - pd + r;
              if (ih < 0 || ih >= H) continue;
              const S* xrow = xmap + ih * Wd;
              S* yrow = ymap + oh * Wo;
              for (int64_t ow = 0; ow < Wo; ++ow) {
                const int64_t iw = ow * st - pd + c;
                if (iw < 0 || iw >= Wd) continue;
                yrow[ow] += wv * xrow[iw];
              }
            }
          }
      }
    }
    self.value = std::move(Y);
  };
  n->forward(*n);
  n->backward = [st, pd](NodeT<S>& self) {
    NodeT<S>* px = self.parents[0];
    NodeT<S>* pw = self.parents[1];
    const ArrayT<S>& X = px->value;
    const ArrayT<S>& W = pw->value;
    const ArrayT<S>& G = self.grad;
    const int64_t Ci = X.dim(0), H = X.dim(1), Wd = X.dim(2);
    const int64_t Co = W.dim(0), kh = W.dim(2), kw = W.dim(3);
    const int64_t Ho = G.dim(1), Wo = G.dim(2);
    if (px->requires_grad) {
      ArrayT<S>& dX = px->ensure_grad();
      const S* gp = G.data();
      const S* wp = W.data();
      S* dxp = dX.data();
      // gather form: race-free over input channels
#pragma omp parallel for schedule(static)
      for (int64_t ci = 0; ci < Ci; ++ci) {
        S* dxmap = dxp + ci * H * Wd;
        for (int64_t co = 0; co < Co; ++co) {
          const S* gmap = gp + co * Ho * Wo;
          const S* wmap = wp + (co * Ci + ci) * kh * kw;
          for (int64_t r = 0; r < kh; ++r)
            for (int64_t c = 0; c < kw; ++c) {
              const S wv = wmap[r * kw + c];
              for (int64_t oh = 0; oh < Ho; ++oh) {
                const int64_t ih = oh * st - pd + r;
                if (ih < 0 || ih >= H) continue;
                const S* grow = gmap + oh * Wo;
                S* dxrow = dxmap + ih * Wd;
                for (int64_t ow = 0; ow < Wo; ++ow) {
                  const int64_t iw = ow * st - pd + c;
                  if (iw < 0 || iw >= Wd) continue;
                  dxrow[iw] += wv * grow[ow];
                }
              }
            }
        }
      }
    }
    if (pw->requires_grad) {
      ArrayT<S>& dW = pw->ensure_grad();
      const S* gp = G.data();
      const S* xp = X.data();
      S* dwp = dW.data();
#pragma omp parallel for schedule(static)
      for (int64_t co = 0; co < Co; ++co) {
        const S* gmap = gp + co * Ho * Wo;
        for (int64_t ci = 0; ci < Ci; ++ci) {
          const S* xmap = xp + ci * H * Wd;
          S* dwmap = dwp + (co * Ci + ci) * kh * kw;
          for (int64_t r = 0; r < kh; ++r)
            for (int64_t c = 0; c < kw; ++c) {
              S acc = S(0);
              for (int64_t oh = 0; oh < Ho; ++oh) {
                const int64_t ih = oh * st - pd + r;
                if (ih < 0 || ih >= H) continue;
                const S* grow = gmap + oh * Wo;
                const S* xrow = xmap + ih * Wd;
                for (int64_t ow = 0; ow < Wo; ++ow) {
                  const int64_t iw = ow * st - pd + c;
                  if (iw < 0 || iw >= Wd) continue;
                  acc += grow[ow] * xrow[iw];
                }
              }
              dwmap[r * kw + c] += acc;
            }
        }
      }
    }
    if (self.parents.size() == 3 && self.parents[2]->requires_grad) {
      ArrayT<S>& dB = self.parents[2]->ensure_grad();
      for (int64_t co = 0; co < Co; ++co) {
        S acc = S(0);
        const S* gmap = G.data() + co * Ho * Wo;
        for (int64_t i = 0; i < Ho * Wo; ++i) acc += gmap[i];
        dB[co] += acc;
      }
    }
  };
  return TensorT<S>(n, tape);
}

// ---------------------------------------------------------------------------
// reductions

template <typename S>
TensorT<S> sum(const TensorT<S>& a, std::optional<int> axis = std::nullopt, bool keepdim = false) {
  TapeT<S>* tape = a.tape();
  NodeT<S>* n = tape->alloc();
  n->op = "sum";
  n->parents = {a.node()};
  n->requires_grad = a.requires_grad();
  const int ax = axis ? (*axis < 0 ? *axis + a.ndim() : *axis) : -1;
  if (axis && (ax < 0 || ax >= a.ndim()))
    throw ShapeError("sum: axis out of range for " + shape_str(a.shape()));
  n->forward = [ax, keepdim](NodeT<S>& self) {
    const ArrayT<S>& X = self.parents[0]->value;
    if (ax < 0) {
      S acc = S(0);
      for (int64_t i = 0; i < X.numel(); ++i) acc += X[i];
      self.value = ArrayT<S>(keepdim ? Shape(X.shape().size(), 1) : Shape{}, std::vector<S>{acc});
      return;
    }
    Shape os = X.shape();
    const int64_t mid = os[ax];
    os[ax] = 1;
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < ax; ++i) outer *= X.dim(i);
    for (int i = ax + 1; i < X.ndim(); ++i) inner *= X.dim(i);
    if (!keepdim) os.erase(os.begin() + ax);
    ArrayT<S> Y(os);
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t m = 0; m < mid; ++m) {
        const S* src = X.data() + (o * mid + m) * inner;
        S* dst = Y.data() + o * inner;
        for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
      }
    self.value = std::move(Y);
  };
  n->forward(*n);
  n->backward = [ax](NodeT<S>& self) {
    NodeT<S>* p = self.parents[0];
    if (!p->requires_grad) return;
    ArrayT<S>& dst = p->ensure_grad();
    const ArrayT<S>& G = self.grad;
    if (ax < 0) {
      const S g = G[0];
      for (int64_t i = 0; i < dst.numel(); ++i) dst[i] += g;
      return;
    }
    const ArrayT<S>& X = p->value;
    const int64_t mid = X.dim(ax);
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < ax; ++i) outer *= X.dim(i);
    for (int i = ax + 1; i < X.ndim(); ++i) inner *= X.dim(i);
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t m = 0; m < mid; ++m) {
        S* d = dst.data() + (o * mid + m) * inner;
        const S* g = G.data() + o * inner;
        for (int64_t i = 0; i < inner; ++i) d[i] += g[i];
      }
  };
  return TensorT<S>(n, tape);
}

template <typename S>
TensorT<S> mean(const TensorT<S>& a, std::optional<int> axis = std::nullopt,
                bool keepdim = false) {
  const int64_t count = axis ? a.dim(*axis < 0 ? *axis + a.ndim() : *axis) : a.numel();
  TensorT<S> s = sum(a, axis, keepdim);
  TensorT<S> c = a.tape()->scalar(static_cast<S>(1.0 / static_cast<double>(count)));
  return mul(s, c);
}

// min/max reduction over the whole tensor; gradient routes to the first
// extremal element.
template <typename S>
TensorT<S> reduce_extremum(const TensorT<S>& a, bool take_max) {
  if (a.numel() == 0) throw ShapeError("reduce: empty tensor");
  TapeT<S>* tape = a.tape();
  NodeT<S>* n = tape->alloc();
  n->op = take_max ? "max" : "min";
  n->parents = {a.node()};
  n->requires_grad = a.requires_grad();
  auto arg = std::make_shared<int64_t>(0);
  n->forward = [take_max, arg](NodeT<S>& self) {
    const ArrayT<S>& X = self.parents[0]->value;
    int64_t best = 0;
    for (int64_t i = 1; i < X.numel(); ++i)
      if (take_max ? X[i] > X[best] : X[i] < X[best]) best = i;
    *arg = best;
    self.value = ArrayT<S>::scalar(X[best]);
  };
  n->forward(*n);
  n->backward = [arg](NodeT<S>& self) {
    NodeT<S>* p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad()[*arg] += self.grad[0];
  };
  return TensorT<S>(n, tape);
}

template <typename S>
TensorT<S> reduce_min(const TensorT<S>& a) {
  return reduce_extremum(a, false);
}
template <typename S>
TensorT<S> reduce_max(const TensorT<S>& a) {
  return reduce_extremum(a, true);
}

// ---------------------------------------------------------------------------
// shape ops

template <typename S>
TensorT<S> reshape(const TensorT<S>& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  TapeT<S>* tape = a.tape();
  NodeT<S>* n = tape->alloc();
  n->op = "reshape";
  n->parents = {a.node()};
  n->requires_grad = a.requires_grad();
  n->forward = [shape](NodeT<S>& self) {
    ArrayT<S> out = self.parents[0]->value;
    self.value = ArrayT<S>(shape, std::vector<S>(out.data(), out.data() + out.numel()));
  };
  n->forward(*n);
  n->backward = [](NodeT<S>& self) {
    NodeT<S>* p = self.parents[0];
    if (!p->requires_grad) return;
    ArrayT<S>& dst = p->ensure_grad();
    for (int64_t i = 0; i < dst.numel(); ++i) dst[i] += self.grad[i];
  };
  return TensorT<S>(n, tape);
}

template <typename S>
TensorT<S> broadcast_to(const TensorT<S>& a, Shape shape) {
  Shape check = broadcast_shapes(a.shape(), shape, "broadcast");
  if (check != shape)
    throw ShapeError("broadcast: cannot expand " + shape_str(a.shape()) + " to " +
                     shape_str(shape));
  TapeT<S>* tape = a.tape();
  NodeT<S>* n = tape->alloc();
  n->op = "broadcast";
  n->parents = {a.node()};
  n->requires_grad = a.requires_grad();
  n->forward = [shape](NodeT<S>& self) {
    const ArrayT<S>& X = self.parents[0]->value;
    ArrayT<S> Y(shape);
    detail::bcast_loop(X, Y, shape, [&](int64_t i, int64_t ia, int64_t) { Y[i] = X[ia]; });
    self.value = std::move(Y);
  };
  n->forward(*n);
  n->backward = [](NodeT<S>& self) {
    NodeT<S>* p = self.parents[0];
    if (!p->requires_grad) return;
    ArrayT<S> r = reduce_to_shape(self.grad, p->value.shape());
    ArrayT<S>& dst = p->ensure_grad();
    for (int64_t i = 0; i < r.numel(); ++i) dst[i] += r[i];
  };
  return TensorT<S>(n, tape);
}

template <typename S>
TensorT<S> concat(const std::vector<TensorT<S>>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const int nd = parts[0].ndim();
  const int ax = axis < 0 ? axis + nd : axis;
  if (ax < 0 || ax >= nd) throw ShapeError("concat: axis out of range");
  Shape os = parts[0].shape();
  os[ax] = 0;
  for (const auto& p : parts) {
    Shape ps = p.shape();
    ps[ax] = 0;
    Shape ref = os;
    ref[ax] = 0;
    if (ps != ref)
      throw ShapeError("concat: mismatched shapes " + shape_str(parts[0].shape()) + " vs " +
                       shape_str(p.shape()));
    os[ax] += p.dim(ax);
  }
  TapeT<S>* tape = parts[0].tape();
  NodeT<S>* n = tape->alloc();
  n->op = "concat";
  for (const auto& p : parts) n->parents.push_back(p.node());
  for (const auto& p : parts) n->requires_grad = n->requires_grad || p.requires_grad();
  n->forward = [os, ax](NodeT<S>& self) {
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < ax; ++i) outer *= os[i];
    for (size_t i = ax + 1; i < os.size(); ++i) inner *= os[i];
    ArrayT<S> Y(os);
    int64_t off = 0;
    for (NodeT<S>* p : self.parents) {
      const ArrayT<S>& X = p->value;
      const int64_t m = X.dim(ax);
      for (int64_t o = 0; o < outer; ++o)
        std::memcpy(Y.data() + (o * os[ax] + off) * inner, X.data() + o * m * inner,
                    sizeof(S) * static_cast<size_t>(m * inner));
      off += m;
    }
    self.value = std::move(Y);
  };
  n->forward(*n);
  n->backward = [os, ax](NodeT<S>& self) {
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < ax; ++i) outer *= os[i];
    for (size_t i = ax + 1; i < os.size(); ++i) inner *= os[i];
    int64_t off = 0;
    for (NodeT<S>* p : self.parents) {
      const int64_t m = p->value.dim(ax);
      if (p->requires_grad) {
        ArrayT<S>& dst = p->ensure_grad();
        for (int64_t o = 0; o < outer; ++o) {
          const S* g = self.grad.data() + (o * os[ax] + off) * inner;
          S* d = dst.data() + o * m * inner;
          for (int64_t i = 0; i < m * inner; ++i) d[i] += g[i];
        }
      }
      off += m;
    }
  };
  return TensorT<S>(n, tape);
}

template <typename S>
TensorT<S> slice(const TensorT<S>& a, const std::vector<int64_t>& starts,
                 const std::vector<int64_t>& sizes) {
  if (static_cast<int>(starts.size()) != a.ndim() || starts.size() != sizes.size())
    throw ShapeError("slice: starts/sizes rank mismatch for " + shape_str(a.shape()));
  for (int i = 0; i < a.ndim(); ++i)
    if (starts[i] < 0 || sizes[i] < 0 || starts[i] + sizes[i] > a.dim(i))
      throw ShapeError("slice: window out of bounds on axis " + std::to_string(i));
  TapeT<S>* tape = a.tape();
  NodeT<S>* n = tape->alloc();
  n->op = "slice";
  n->parents = {a.node()};
  n->requires_grad = a.requires_grad();
  Shape os(sizes.begin(), sizes.end());
  n->forward = [starts, os](NodeT<S>& self) {
    const ArrayT<S>& X = self.parents[0]->value;
    ArrayT<S> Y(os);
    const size_t rank = os.size();
    std::vector<int64_t> xstr(rank, 1);
    for (size_t i = rank - 1; i-- > 0;) xstr[i] = xstr[i + 1] * X.dim(static_cast<int>(i) + 1);
    std::vector<int64_t> idx(rank, 0);
    for (int64_t i = 0; i < Y.numel(); ++i) {
      int64_t src = 0;
      for (size_t d = 0; d < rank; ++d) src += (starts[d] + idx[d]) * xstr[d];
      Y[i] = X[src];
      for (size_t d = rank; d-- > 0;) {
        if (++idx[d] < os[d]) break;
        idx[d] = 0;
      }
    }
    self.value = std::move(Y);
  };
  n->forward(*n);
  n->backward = [starts, os](NodeT<S>& self) {
    NodeT<S>* p = self.parents[0];
    if (!p->requires_grad) return;
    ArrayT<S>& dst = p->ensure_grad();
    const ArrayT<S>& X = p->value;
    const size_t rank = os.size();
    std::vector<int64_t> xstr(rank, 1);
    for (size_t i = rank - 1; i-- > 0;) xstr[i] = xstr[i + 1] * X.dim(static_cast<int>(i) + 1);
    std::vector<int64_t> idx(rank, 0);
    for (int64_t i = 0; i < self.grad.numel(); ++i) {
      int64_t dsti = 0;
      for (size_t d = 0; d < rank; ++d) dsti += (starts[d] + idx[d]) * xstr[d];
      dst[dsti] += self.grad[i];
      for (size_t d = rank; d-- > 0;) {
        if (++idx[d] < os[d]) break;
        idx[d] = 0;
      }
    }
  };
  return TensorT<S>(n, tape);
}

// ---------------------------------------------------------------------------
// bilinear sampling. map: [H,W,C], coords: [N,2] as (x, y) continuous pixels.
// Out-of-bounds rows return zeros and clear the validity mask; no gradient
// flows through them (no clamping toward the border).

template <typename S>
struct SampledT {
  TensorT<S> values;            // [N,C]
  std::vector<uint8_t> valid;   // length N
};

template <typename S>
SampledT<S> bilinear_sample(const TensorT<S>& map, const TensorT<S>& coords) {
  if (map.ndim() != 3 || coords.ndim() != 2 || coords.dim(1) != 2)
    throw ShapeError("bilinear_sample: expected map [H,W,C] and coords [N,2], got " +
                     shape_str(map.shape()) + " and " + shape_str(coords.shape()));
  if (map.dim(0) < 2 || map.dim(1) < 2) throw ShapeError("bilinear_sample: map smaller than 2x2");
  for (int64_t i = 0; i < coords.numel(); ++i)
    if (!std::isfinite(static_cast<double>(coords.value()[i])))
      throw DomainError("bilinear_sample: non-finite coordinate at row " + std::to_string(i / 2));
  TapeT<S>* tape = detail::tape_of(map, coords, "bilinear_sample");
  NodeT<S>* n = tape->alloc();
  n->op = "bilinear_sample";
  n->parents = {map.node(), coords.node()};
  n->requires_grad = map.requires_grad() || coords.requires_grad();
  auto valid = std::make_shared<std::vector<uint8_t>>();
  n->forward = [valid](NodeT<S>& self) {
    const ArrayT<S>& M = self.parents[0]->value;
    const ArrayT<S>& Cd = self.parents[1]->value;
    const int64_t H = M.dim(0), W = M.dim(1), C = M.dim(2), N = Cd.dim(0);
    ArrayT<S> Y(Shape{N, C});
    valid->assign(static_cast<size_t>(N), 0);
#pragma omp parallel for schedule(static) if (N * C > 8192)
    for (int64_t i = 0; i < N; ++i) {
      const double x = static_cast<double>(Cd[i * 2 + 0]);
      const double y = static_cast<double>(Cd[i * 2 + 1]);
      if (x < 0.0 || y < 0.0 || x > static_cast<double>(W - 1) || y > static_cast<double>(H - 1))
        continue;  // row stays zero, mask stays 0
      (*valid)[static_cast<size_t>(i)] = 1;
      int64_t x0 = std::min(static_cast<int64_t>(x), W - 2);
      int64_t y0 = std::min(static_cast<int64_t>(y), H - 2);
      const S fx = static_cast<S>(x - static_cast<double>(x0));
      const S fy = static_cast<S>(y - static_cast<double>(y0));
      const S w00 = (S(1) - fx) * (S(1) - fy), w01 = fx * (S(1) - fy);
      const S w10 = (S(1) - fx) * fy, w11 = fx * fy;
      const S* p00 = M.data() + (y0 * W + x0) * C;
      const S* p01 = p00 + C;
      const S* p10 = p00 + W * C;
      const S* p11 = p10 + C;
      S* out = Y.data() + i * C;
      for (int64_t c = 0; c < C; ++c)
        out[c] = w00 * p00[c] + w01 * p01[c] + w10 * p10[c] + w11 * p11[c];
    }
    self.value = std::move(Y);
  };
  n->forward(*n);
  n->backward = [valid](NodeT<S>& self) {
    NodeT<S>* pm = self.parents[0];
    NodeT<S>* pc = self.parents[1];
    const ArrayT<S>& M = pm->value;
    const ArrayT<S>& Cd = pc->value;
    const ArrayT<S>& G = self.grad;
    const int64_t H = M.dim(0), W = M.dim(1), C = M.dim(2), N = Cd.dim(0);
    if (pm->requires_grad) {
      ArrayT<S>& dM = pm->ensure_grad();
      const int nt = omp_get_max_threads();
      std::vector<ArrayT<S>> bufs;
      bufs.reserve(static_cast<size_t>(nt));
      for (int t = 0; t < nt; ++t) bufs.emplace_back(ArrayT<S>::zeros(M.shape()));
#pragma omp parallel num_threads(nt)
      {
        ArrayT<S>& buf = bufs[static_cast<size_t>(omp_get_thread_num())];
#pragma omp for schedule(static)
        for (int64_t i = 0; i < N; ++i) {
          if (!(*valid)[static_cast<size_t>(i)]) continue;
          const double x = static_cast<double>(Cd[i * 2 + 0]);
          const double y = static_cast<double>(Cd[i * 2 + 1]);
          int64_t x0 = std::min(static_cast<int64_t>(x), W - 2);
          int64_t y0 = std::min(static_cast<int64_t>(y), H - 2);
          const S fx = static_cast<S>(x - static_cast<double>(x0));
          const S fy = static_cast<S>(y - static_cast<double>(y0));
          const S w00 = (S(1) - fx) * (S(1) - fy), w01 = fx * (S(1) - fy);
          const S w10 = (S(1) - fx) * fy, w11 = fx * fy;
          const S* g = G.data() + i * C;
          S* b00 = buf.data() + (y0 * W + x0) * C;
          S* b01 = b00 + C;
          S* b10 = b00 + W * C;
          S* b11 = b10 + C;
          for (int64_t c = 0; c < C; ++c) {
            b00[c] += w00 * g[c];
            b01[c] += w01 * g[c];
            b10[c] += w10 * g[c];
            b11[c] += w11 * g[c];
          }
        }
      }
      for (int t = 0; t < nt; ++t)  // fixed reduction order keeps runs bit-identical
        for (int64_t i = 0; i < dM.numel(); ++i) dM[i] += bufs[static_cast<size_t>(t)][i];
    }
    if (pc->requires_grad) {
      ArrayT<S>& dC = pc->ensure_grad();
#pragma omp parallel for schedule(static) if (N * C > 8192)
      for (int64_t i = 0; i < N; ++i) {
        if (!(*valid)[static_cast<size_t>(i)]) continue;
        const double x = static_cast<double>(Cd[i * 2 + 0]);
        const double y = static_cast<double>(Cd[i * 2 + 1]);
        int64_t x0 = std::min(static_cast<int64_t>(x), W - 2);
        int64_t y0 = std::min(static_cast<int64_t>(y), H - 2);
        const S fx = static_cast<S>(x - static_cast<double>(x0));
        const S fy = static_cast<S>(y - static_cast<double>(y0));
        const S* p00 = M.data() + (y0 * W + x0) * C;
        const S* p01 = p00 + C;
        const S* p10 = p00 + W * C;
        const S* p11 = p10 + C;
        const S* g = G.data() + i * C;
        S gx = S(0), gy = S(0);
        for (int64_t c = 0; c < C; ++c) {
          const S dx = (S(1) - fy) * (p01[c] - p00[c]) + fy * (p11[c] - p10[c]);
          const S dy = (S(1) - fx) * (p10[c] - p00[c]) + fx * (p11[c] - p01[c]);
          gx += dx * g[c];
          gy += dy * g[c];
        }
        dC[i * 2 + 0] += gx;
        dC[i * 2 + 1] += gy;
      }
    }
  };
  SampledT<S> out;
  out.values = TensorT<S>(n, tape);
  out.valid = *valid;
  return out;
}

// ---------------------------------------------------------------------------
// GRU cell. Standard gated update built from the primitives above:
//   z = sigmoid(x Wxz + h Whz + bz), r = sigmoid(x Wxr + h Whr + br)
//   hc = tanh(x Wxh + (r*h) Whh + bh), h' = (1-z)*h + z*hc

template <typename S>
struct GruParamsT {
  TensorT<S> wxz, whz, bz;
  TensorT<S> wxr, whr, br;
  TensorT<S> wxh, whh, bh;
};

template <typename S>
TensorT<S> gru_cell(const TensorT<S>& hidden, const TensorT<S>& input,
                    const GruParamsT<S>& p) {
  if (hidden.ndim() != 2 || input.ndim() != 2 || hidden.dim(0) != input.dim(0))
    throw ShapeError("gru_cell: expected [B,H] hidden and [B,I] input, got " +
                     shape_str(hidden.shape()) + " and " + shape_str(input.shape()));
  if (input.dim(1) != p.wxz.dim(0) || hidden.dim(1) != p.whz.dim(0))
    throw ShapeError("gru_cell: parameter widths do not match hidden " +
                     shape_str(hidden.shape()) + " / input " + shape_str(input.shape()));
  auto lin = [&](const TensorT<S>& x, const TensorT<S>& h, const TensorT<S>& wx,
                 const TensorT<S>& wh, const TensorT<S>& b) {
    return add(add(matmul(x, wx), matmul(h, wh)), b);
  };
  TensorT<S> z = sigmoid(lin(input, hidden, p.wxz, p.whz, p.bz));
  TensorT<S> r = sigmoid(lin(input, hidden, p.wxr, p.whr, p.br));
  TensorT<S> hc = tanh_op(add(add(matmul(input, p.wxh), matmul(mul(r, hidden), p.whh)), p.bh));
  TensorT<S> one = hidden.tape()->scalar(S(1));
  return add(mul(sub(one, z), hidden), mul(z, hc));
}

// ---------------------------------------------------------------------------
// misc helpers

template <typename S>
TensorT<S> neg(const TensorT<S>& a) {
  return mul(a, a.tape()->scalar(S(-1)));
}

template <typename S>
TensorT<S> square(const TensorT<S>& a) {
  return mul(a, a);
}

// sqrt with the power-op's zero-subgradient convention
template <typename S>
TensorT<S> sqrt_op(const TensorT<S>& a) {
  return power(a, 0.5);
}

template <typename S>
TensorT<S> stack_scalars(TapeT<S>& tape, const std::vector<TensorT<S>>& xs) {
  std::vector<TensorT<S>> rows;
  rows.reserve(xs.size());
  for (const auto& x : xs) rows.push_back(reshape(x, Shape{1}));
  if (rows.size() == 1) return rows[0];
  (void)tape;
  return concat(rows, 0);
}

using Tensor = TensorT<double>;
using Tape = TapeT<double>;

}  // namespace dbarf
