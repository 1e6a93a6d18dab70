#pragma once

// Reverse-mode automatic differentiation over dense row-major tensors.
// Eager graph construction: every op allocates a node holding its forward
// value and a closure that pushes gradients to its parents. Single device,
// single thread per graph; matrix products are delegated to Eigen.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "latcast/rng.hpp"

namespace latcast::ag {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < s.size(); ++i) os << s[i] << (i + 1 < s.size() ? ", " : "");
  os << ")";
  return os.str();
}

inline void check(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // sized lazily on first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node<T>>> parents;
  std::function<void(const std::vector<T>&)> backward;  // receives d(loss)/d(this)

  void accumulate(const std::vector<T>& g) {
    if (grad.empty()) grad.assign(numel(shape), T(0));
    for (std::size_t i = 0; i < g.size(); ++i) grad[i] += g[i];
  }
};

// Value-semantic handle to a graph node.
template <typename T>
class Tensor {
 public:
  Tensor() : n_(std::make_shared<Node<T>>()) {}

  explicit Tensor(Shape shape, T fill = T(0), bool requires_grad = false)
      : n_(std::make_shared<Node<T>>()) {
    n_->shape = std::move(shape);
    n_->value.assign(numel(n_->shape), fill);
    n_->requires_grad = requires_grad;
  }

  static Tensor from(Shape shape, std::vector<T> data, bool requires_grad = false) {
    check(numel(shape) == data.size(), "tensor data length does not match shape " + shape_str(shape));
    Tensor t;
    t.n_->shape = std::move(shape);
    t.n_->value = std::move(data);
    t.n_->requires_grad = requires_grad;
    return t;
  }

  static Tensor scalar(T v) { return from({1}, {v}); }

  static Tensor randn(Shape shape, Rng& rng, T stddev = T(1), bool requires_grad = false) {
    Tensor t(shape, T(0), requires_grad);
    for (auto& v : t.data()) v = static_cast<T>(rng.normal(0.0, static_cast<double>(stddev)));
    return t;
  }

  const Shape& shape() const { return n_->shape; }
  std::size_t size() const { return n_->value.size(); }
  std::size_t ndim() const { return n_->shape.size(); }
  std::size_t dim(std::size_t i) const { return n_->shape[i]; }

  std::vector<T>& data() { return n_->value; }
  const std::vector<T>& data() const { return n_->value; }
  std::vector<T>& grad() { return n_->grad; }
  const std::vector<T>& grad() const { return n_->grad; }

  bool requires_grad() const { return n_->requires_grad; }
  void set_requires_grad(bool rg) { n_->requires_grad = rg; }
  void zero_grad() { n_->grad.clear(); }

  T item() const {
    check(size() == 1, "item() called on non-scalar tensor " + shape_str(shape()));
    return n_->value[0];
  }

  std::shared_ptr<Node<T>> node() const { return n_; }

 private:
  std::shared_ptr<Node<T>> n_;
};

// ---------------------------------------------------------------------------
// Broadcasting helpers (numpy trailing-dimension rules).

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t nd = std::max(a.size(), b.size());
  Shape out(nd, 1);
  for (std::size_t i = 0; i < nd; ++i) {
    const std::size_t da = i < nd - a.size() ? 1 : a[i - (nd - a.size())];
    const std::size_t db = i < nd - b.size() ? 1 : b[i - (nd - b.size())];
    check(da == db || da == 1 || db == 1,
          "shapes not broadcastable: " + shape_str(a) + " vs " + shape_str(b));
    out[i] = std::max(da, db);
  }
  return out;
}

// Row-major strides of `s` aligned (right) to an out shape of `nd` dims,
// with zero stride on broadcast dimensions.
inline std::vector<std::size_t> broadcast_strides(const Shape& s, const Shape& out) {
  const std::size_t nd = out.size();
  std::vector<std::size_t> full(nd, 0);
  std::size_t stride = 1;
  for (std::size_t i = s.size(); i-- > 0;) {
    const std::size_t oi = i + (nd - s.size());
    full[oi] = (s[i] == 1 && out[oi] != 1) ? 0 : stride;
    stride *= s[i];
  }
  return full;
}

template <typename Fn>
void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa,
                        const std::vector<std::size_t>& sb, Fn&& fn) {
  const std::size_t n = numel(out);
  const std::size_t nd = out.size();
  std::vector<std::size_t> idx(nd, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t o = 0; o < n; ++o) {
    fn(o, ia, ib);
    for (std::size_t d = nd; d-- > 0;) {
      idx[d]++;
      ia += sa[d];
      ib += sb[d];
      if (idx[d] < out[d]) break;
      ia -= sa[d] * out[d];
      ib -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

// Sum a gradient computed at `from` shape down to `to` shape (undo broadcast).
template <typename T>
std::vector<T> reduce_to_shape(const std::vector<T>& g, const Shape& from, const Shape& to) {
  if (from == to) return g;
  std::vector<T> out(numel(to), T(0));
  const auto st = broadcast_strides(to, from);
  const auto sf = broadcast_strides(from, from);
  for_each_broadcast(from, st, sf, [&](std::size_t, std::size_t it, std::size_t ifrom) {
    out[it] += g[ifrom];
  });
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise binary operations.

namespace detail {

template <typename T, typename FwdFn, typename BwdFn>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, FwdFn fwd, BwdFn bwd) {
  const Shape out_shape = broadcast_shape(a.shape(), b.shape());
  Tensor<T> out(out_shape);
  auto an = a.node();
  auto bn = b.node();
  const auto sa = broadcast_strides(a.shape(), out_shape);
  const auto sb = broadcast_strides(b.shape(), out_shape);
  if (a.shape() == b.shape()) {
    for (std::size_t i = 0; i < out.size(); ++i)
      out.data()[i] = fwd(a.data()[i], b.data()[i]);
  } else {
    for_each_broadcast(out_shape, sa, sb, [&](std::size_t o, std::size_t ia, std::size_t ib) {
      out.data()[o] = fwd(an->value[ia], bn->value[ib]);
    });
  }
  if (a.requires_grad() || b.requires_grad()) {
    out.set_requires_grad(true);
    auto on = out.node();
    on->parents = {an, bn};
    Shape ash = a.shape(), bsh = b.shape();
    on->backward = [an, bn, sa, sb, out_shape, ash, bsh, bwd](const std::vector<T>& g) {
      std::vector<T> ga, gb;
      if (an->requires_grad) ga.assign(g.size(), T(0));
      if (bn->requires_grad) gb.assign(g.size(), T(0));
      for_each_broadcast(out_shape, sa, sb, [&](std::size_t o, std::size_t ia, std::size_t ib) {
        T da, db;
        bwd(an->value[ia], bn->value[ib], g[o], da, db);
        if (!ga.empty()) ga[o] = da;
        if (!gb.empty()) gb[o] = db;
      });
      if (!ga.empty()) an->accumulate(reduce_to_shape(ga, out_shape, ash));
      if (!gb.empty()) bn->accumulate(reduce_to_shape(gb, out_shape, bsh));
    };
  }
  return out;
}

template <typename T, typename FwdFn, typename BwdFn>
Tensor<T> unary_op(const Tensor<T>& a, FwdFn fwd, BwdFn bwd) {
  Tensor<T> out(a.shape());
  auto an = a.node();
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] = fwd(a.data()[i]);
  if (a.requires_grad()) {
    out.set_requires_grad(true);
    auto on = out.node();
    Node<T>* self = on.get();  // raw: the closure lives inside this node
    on->parents = {an};
    on->backward = [an, self, bwd](const std::vector<T>& g) {
      std::vector<T> ga(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] = bwd(an->value[i], self->value[i]) * g[i];
      an->accumulate(ga);
    };
  }
  return out;
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(
      a, b, [](T x, T y) { return x + y; },
      [](T, T, T g, T& da, T& db) { da = g; db = g; });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(
      a, b, [](T x, T y) { return x - y; },
      [](T, T, T g, T& da, T& db) { da = g; db = -g; });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(
      a, b, [](T x, T y) { return x * y; },
      [](T x, T y, T g, T& da, T& db) { da = g * y; db = g * x; });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(
      a, b, [](T x, T y) { return x / y; },
      [](T x, T y, T g, T& da, T& db) {
        da = g / y;
        db = -g * x / (y * y);
      });
}

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <typename T>
Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) { return div(a, b); }

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  return detail::unary_op(
      a, [c](T x) { return c * x; }, [c](T, T) { return c; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
  return detail::unary_op(
      a, [c](T x) { return x + c; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) { return scale(a, T(-1)); }

// ---------------------------------------------------------------------------
// Elementwise nonlinearities.

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  return detail::unary_op(
      a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
  return detail::unary_op(
      a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <typename T>
Tensor<T> sqrt(const Tensor<T>& a) {
  return detail::unary_op(
      a, [](T x) { return std::sqrt(x); },
      [](T, T y) { return T(0.5) / y; });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  return detail::unary_op(
      a, [](T x) { return x > T(0) ? x : T(0); },
      [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  // Exact erf formulation; derivative is Phi(x) + x * phi(x).
  constexpr T inv_sqrt2 = T(0.7071067811865475244);
  constexpr T inv_sqrt_2pi = T(0.3989422804014326779);
  return detail::unary_op(
      a,
      [=](T x) { return T(0.5) * x * (T(1) + std::erf(x * inv_sqrt2)); },
      [=](T x, T) {
        const T cdf = T(0.5) * (T(1) + std::erf(x * inv_sqrt2));
        const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * x * x);
        return cdf + x * pdf;
      });
}

// ---------------------------------------------------------------------------
// Reductions.

template <typename T>
Tensor<T> sum_axis(const Tensor<T>& a, std::size_t axis, bool keepdim = false) {
  check(axis < a.ndim(), "sum axis out of range for " + shape_str(a.shape()));
  const Shape& s = a.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t n = s[axis];
  Shape out_shape;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i == axis) {
      if (keepdim) out_shape.push_back(1);
    } else {
      out_shape.push_back(s[i]);
    }
  }
  if (out_shape.empty()) out_shape = {1};
  Tensor<T> out(out_shape);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t i = 0; i < inner; ++i)
        out.data()[o * inner + i] += a.data()[(o * n + k) * inner + i];
  if (a.requires_grad()) {
    out.set_requires_grad(true);
    auto an = a.node();
    auto on = out.node();
    on->parents = {an};
    on->backward = [an, outer, n, inner](const std::vector<T>& g) {
      std::vector<T> ga(outer * n * inner);
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t k = 0; k < n; ++k)
          for (std::size_t i = 0; i < inner; ++i)
            ga[(o * n + k) * inner + i] = g[o * inner + i];
      an->accumulate(ga);
    };
  }
  return out;
}

template <typename T>
Tensor<T> mean_axis(const Tensor<T>& a, std::size_t axis, bool keepdim = false) {
  return scale(sum_axis(a, axis, keepdim), T(1) / T(a.shape()[axis]));
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
  Tensor<T> out(Shape{1});
  T acc = 0;
  for (T v : a.data()) acc += v;
  out.data()[0] = acc;
  if (a.requires_grad()) {
    out.set_requires_grad(true);
    auto an = a.node();
    auto on = out.node();
    on->parents = {an};
    on->backward = [an](const std::vector<T>& g) {
      std::vector<T> ga(numel(an->shape), g[0]);
      an->accumulate(ga);
    };
  }
  return out;
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& a) {
  return scale(sum_all(a), T(1) / T(a.size()));
}

// ---------------------------------------------------------------------------
// Softmax family (over the last axis).

template <typename T>
Tensor<T> softmax(const Tensor<T>& a) {
  check(a.ndim() >= 1, "softmax needs at least 1-D input");
  const std::size_t cols = a.shape().back();
  const std::size_t rows = a.size() / cols;
  Tensor<T> out(a.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = a.data().data() + r * cols;
    T* y = out.data().data() + r * cols;
    T mx = x[0];
    for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, x[c]);
    T z = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      y[c] = std::exp(x[c] - mx);
      z += y[c];
    }
    for (std::size_t c = 0; c < cols; ++c) y[c] /= z;
  }
  if (a.requires_grad()) {
    out.set_requires_grad(true);
    auto an = a.node();
    auto on = out.node();
    Node<T>* self = on.get();
    on->parents = {an};
    on->backward = [an, self, rows, cols](const std::vector<T>& g) {
      std::vector<T> ga(rows * cols);
      for (std::size_t r = 0; r < rows; ++r) {
        const T* y = self->value.data() + r * cols;
        const T* gr = g.data() + r * cols;
        T dot = 0;
        for (std::size_t c = 0; c < cols; ++c) dot += gr[c] * y[c];
        for (std::size_t c = 0; c < cols; ++c) ga[r * cols + c] = y[c] * (gr[c] - dot);
      }
      an->accumulate(ga);
    };
  }
  return out;
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& a) {
  const std::size_t cols = a.shape().back();
  const std::size_t rows = a.size() / cols;
  Tensor<T> out(a.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = a.data().data() + r * cols;
    T* y = out.data().data() + r * cols;
    T mx = x[0];
    for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, x[c]);
    T z = 0;
    for (std::size_t c = 0; c < cols; ++c) z += std::exp(x[c] - mx);
    const T lz = mx + std::log(z);
    for (std::size_t c = 0; c < cols; ++c) y[c] = x[c] - lz;
  }
  if (a.requires_grad()) {
    out.set_requires_grad(true);
    auto an = a.node();
    auto on = out.node();
    Node<T>* self = on.get();
    on->parents = {an};
    on->backward = [an, self, rows, cols](const std::vector<T>& g) {
      std::vector<T> ga(rows * cols);
      for (std::size_t r = 0; r < rows; ++r) {
        const T* y = self->value.data() + r * cols;
        const T* gr = g.data() + r * cols;
        T gsum = 0;
        for (std::size_t c = 0; c < cols; ++c) gsum += gr[c];
        for (std::size_t c = 0; c < cols; ++c)
          ga[r * cols + c] = gr[c] - std::exp(y[c]) * gsum;
      }
      an->accumulate(ga);
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Matrix product. Supports (M,K)x(K,N), (...,M,K)x(K,N) with folded leading
// dims, and batched (...,M,K)x(...,K,N) with identical leading dims.

namespace detail {

template <typename T>
using EigenMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<EigenMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const EigenMat<T>>;

}  // namespace detail

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  check(a.ndim() >= 2 && b.ndim() >= 2,
        "matmul needs >=2-D operands, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  const std::size_t M = as[as.size() - 2], K = as[as.size() - 1];
  const std::size_t Kb = bs[bs.size() - 2], N = bs[bs.size() - 1];
  check(K == Kb, "matmul inner dims mismatch: " + shape_str(as) + " x " + shape_str(bs));

  std::size_t batch = 1;
  for (std::size_t i = 0; i + 2 < as.size(); ++i) batch *= as[i];
  bool b_batched = bs.size() > 2;
  if (b_batched) {
    check(as.size() == bs.size(), "matmul batch rank mismatch: " + shape_str(as) + " x " + shape_str(bs));
    for (std::size_t i = 0; i + 2 < bs.size(); ++i)
      check(as[i] == bs[i], "matmul batch dims mismatch: " + shape_str(as) + " x " + shape_str(bs));
  }

  Shape out_shape(as.begin(), as.end() - 2);
  out_shape.push_back(M);
  out_shape.push_back(N);
  Tensor<T> out(out_shape);

  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* pc = out.data().data();
  for (std::size_t i = 0; i < batch; ++i) {
    detail::ConstMatMap<T> A(pa + i * M * K, M, K);
    detail::ConstMatMap<T> B(pb + (b_batched ? i * K * N : 0), K, N);
    detail::MatMap<T> C(pc + i * M * N, M, N);
    C.noalias() = A * B;
  }

  if (a.requires_grad() || b.requires_grad()) {
    out.set_requires_grad(true);
    auto an = a.node();
    auto bn = b.node();
    auto on = out.node();
    on->parents = {an, bn};
    on->backward = [an, bn, batch, b_batched, M, K, N](const std::vector<T>& g) {
      if (an->requires_grad) {
        std::vector<T> ga(batch * M * K, T(0));
        for (std::size_t i = 0; i < batch; ++i) {
          detail::ConstMatMap<T> G(g.data() + i * M * N, M, N);
          detail::ConstMatMap<T> B(bn->value.data() + (b_batched ? i * K * N : 0), K, N);
          detail::MatMap<T> GA(ga.data() + i * M * K, M, K);
          GA.noalias() = G * B.transpose();
        }
        an->accumulate(ga);
      }
      if (bn->requires_grad) {
        std::vector<T> gb(numel(bn->shape), T(0));
        for (std::size_t i = 0; i < batch; ++i) {
          detail::ConstMatMap<T> G(g.data() + i * M * N, M, N);
          detail::ConstMatMap<T> A(an->value.data() + i * M * K, M, K);
          detail::MatMap<T> GB(gb.data() + (b_batched ? i * K * N : 0), K, N);
          GB.noalias() += A.transpose() * G;
        }
        bn->accumulate(gb);
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shape manipulation.

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape new_shape) {
  check(numel(new_shape) == a.size(),
        "reshape " + shape_str(a.shape()) + " -> " + shape_str(new_shape) + " changes element count");
  Tensor<T> out = Tensor<T>::from(std::move(new_shape), a.data());
  if (a.requires_grad()) {
    out.set_requires_grad(true);
    auto an = a.node();
    auto on = out.node();
    on->parents = {an};
    on->backward = [an](const std::vector<T>& g) { an->accumulate(g); };
  }
  return out;
}

template <typename T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<std::size_t>& perm) {
  check(perm.size() == a.ndim(), "permute rank mismatch for " + shape_str(a.shape()));
  const Shape& s = a.shape();
  Shape out_shape(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) out_shape[i] = s[perm[i]];

  std::vector<std::size_t> in_strides(s.size(), 1);
  for (std::size_t i = s.size() - 1; i-- > 0;) in_strides[i] = in_strides[i + 1] * s[i + 1];
  std::vector<std::size_t> gather(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) gather[i] = in_strides[perm[i]];

  Tensor<T> out(out_shape);
  const std::size_t n = out.size();
  std::vector<std::size_t> idx(perm.size(), 0);
  std::size_t src = 0;
  for (std::size_t o = 0; o < n; ++o) {
    out.data()[o] = a.data()[src];
    for (std::size_t d = perm.size(); d-- > 0;) {
      idx[d]++;
      src += gather[d];
      if (idx[d] < out_shape[d]) break;
      src -= gather[d] * out_shape[d];
      idx[d] = 0;
    }
  }
  if (a.requires_grad()) {
    out.set_requires_grad(true);
    auto an = a.node();
    auto on = out.node();
    on->parents = {an};
    on->backward = [an, gather, out_shape, perm](const std::vector<T>& g) {
      std::vector<T> ga(numel(an->shape), T(0));
      std::vector<std::size_t> idx(perm.size(), 0);
      std::size_t src = 0;
      for (std::size_t o = 0; o < g.size(); ++o) {
        ga[src] += g[o];
        for (std::size_t d = perm.size(); d-- > 0;) {
          idx[d]++;
          src += gather[d];
          if (idx[d] < out_shape[d]) break;
          src -= gather[d] * out_shape[d];
          idx[d] = 0;
        }
      }
      an->accumulate(ga);
    };
  }
  return out;
}

template <typename T>
Tensor<T> transpose_last2(const Tensor<T>& a) {
  std::vector<std::size_t> perm(a.ndim());
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  std::swap(perm[perm.size() - 1], perm[perm.size() - 2]);
  return permute(a, perm);
}

template <typename T>
Tensor<T> slice(const Tensor<T>& a, std::size_t axis, std::size_t start, std::size_t len) {
  check(axis < a.ndim(), "slice axis out of range for " + shape_str(a.shape()));
  const Shape& s = a.shape();
  check(start + len <= s[axis], "slice out of bounds on axis for " + shape_str(s));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  Shape out_shape = s;
  out_shape[axis] = len;
  Tensor<T> out(out_shape);
  const std::size_t n_in = s[axis];
  for (std::size_t o = 0; o < outer; ++o)
    std::copy(a.data().begin() + (o * n_in + start) * inner,
              a.data().begin() + (o * n_in + start + len) * inner,
              out.data().begin() + o * len * inner);
  if (a.requires_grad()) {
    out.set_requires_grad(true);
    auto an = a.node();
    auto on = out.node();
    on->parents = {an};
    on->backward = [an, outer, inner, n_in, start, len](const std::vector<T>& g) {
      std::vector<T> ga(outer * n_in * inner, T(0));
      for (std::size_t o = 0; o < outer; ++o)
        std::copy(g.begin() + o * len * inner, g.begin() + (o + 1) * len * inner,
                  ga.begin() + (o * n_in + start) * inner);
      an->accumulate(ga);
    };
  }
  return out;
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  check(!parts.empty(), "concat of zero tensors");
  const Shape& s0 = parts[0].shape();
  check(axis < s0.size(), "concat axis out of range for " + shape_str(s0));
  std::size_t total = 0;
  for (const auto& p : parts) {
    check(p.ndim() == s0.size(), "concat rank mismatch");
    for (std::size_t i = 0; i < s0.size(); ++i)
      check(i == axis || p.shape()[i] == s0[i],
            "concat shape mismatch: " + shape_str(p.shape()) + " vs " + shape_str(s0));
    total += p.shape()[axis];
  }
  Shape out_shape = s0;
  out_shape[axis] = total;
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s0[i];
  for (std::size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];

  Tensor<T> out(out_shape);
  std::size_t off = 0;
  bool rg = false;
  for (const auto& p : parts) {
    const std::size_t n = p.shape()[axis];
    for (std::size_t o = 0; o < outer; ++o)
      std::copy(p.data().begin() + o * n * inner, p.data().begin() + (o + 1) * n * inner,
                out.data().begin() + (o * total + off) * inner);
    off += n;
    rg = rg || p.requires_grad();
  }
  if (rg) {
    out.set_requires_grad(true);
    auto on = out.node();
    std::vector<std::shared_ptr<Node<T>>> pn;
    std::vector<std::size_t> sizes;
    for (const auto& p : parts) {
      pn.push_back(p.node());
      sizes.push_back(p.shape()[axis]);
    }
    on->parents = pn;
    on->backward = [pn, sizes, outer, inner, total](const std::vector<T>& g) {
      std::size_t off = 0;
      for (std::size_t k = 0; k < pn.size(); ++k) {
        const std::size_t n = sizes[k];
        if (pn[k]->requires_grad) {
          std::vector<T> gp(outer * n * inner);
          for (std::size_t o = 0; o < outer; ++o)
            std::copy(g.begin() + (o * total + off) * inner,
                      g.begin() + (o * total + off + n) * inner, gp.begin() + o * n * inner);
          pn[k]->accumulate(gp);
        }
        off += n;
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Causal dilated depthwise 1-D convolution.
// x: (B, S, C), w: (C, K); y[b,s,c] = sum_k w[c,k] * x[b, s - k*dilation, c]
// with implicit zero left-padding (no forward-looking taps).

template <typename T>
Tensor<T> causal_dconv1d(const Tensor<T>& x, const Tensor<T>& w, std::size_t dilation) {
  check(x.ndim() == 3, "causal_dconv1d expects (B,S,C) input, got " + shape_str(x.shape()));
  check(w.ndim() == 2, "causal_dconv1d expects (C,K) kernel, got " + shape_str(w.shape()));
  check(x.shape()[2] == w.shape()[0],
        "causal_dconv1d channel mismatch: " + shape_str(x.shape()) + " vs " + shape_str(w.shape()));
  check(dilation >= 1, "dilation must be >= 1");
  const std::size_t B = x.shape()[0], S = x.shape()[1], C = x.shape()[2], K = w.shape()[1];
  Tensor<T> out(x.shape());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t s = 0; s < S; ++s) {
      T* y = out.data().data() + (b * S + s) * C;
      for (std::size_t k = 0; k < K; ++k) {
        const std::ptrdiff_t sp = static_cast<std::ptrdiff_t>(s) - static_cast<std::ptrdiff_t>(k * dilation);
        if (sp < 0) break;
        const T* xv = x.data().data() + (b * S + static_cast<std::size_t>(sp)) * C;
        for (std::size_t c = 0; c < C; ++c) y[c] += w.data()[c * K + k] * xv[c];
      }
    }
  if (x.requires_grad() || w.requires_grad()) {
    out.set_requires_grad(true);
    auto xn = x.node();
    auto wn = w.node();
    auto on = out.node();
    on->parents = {xn, wn};
    on->backward = [xn, wn, B, S, C, K, dilation](const std::vector<T>& g) {
      if (xn->requires_grad) {
        std::vector<T> gx(B * S * C, T(0));
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t s = 0; s < S; ++s)
            for (std::size_t k = 0; k < K; ++k) {
              const std::ptrdiff_t sp =
                  static_cast<std::ptrdiff_t>(s) - static_cast<std::ptrdiff_t>(k * dilation);
              if (sp < 0) break;
              const T* gr = g.data() + (b * S + s) * C;
              T* gxp = gx.data() + (b * S + static_cast<std::size_t>(sp)) * C;
              for (std::size_t c = 0; c < C; ++c) gxp[c] += wn->value[c * K + k] * gr[c];
            }
        xn->accumulate(gx);
      }
      if (wn->requires_grad) {
        std::vector<T> gw(C * K, T(0));
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t s = 0; s < S; ++s)
            for (std::size_t k = 0; k < K; ++k) {
              const std::ptrdiff_t sp =
                  static_cast<std::ptrdiff_t>(s) - static_cast<std::ptrdiff_t>(k * dilation);
              if (sp < 0) break;
              const T* gr = g.data() + (b * S + s) * C;
              const T* xv = xn->value.data() + (b * S + static_cast<std::size_t>(sp)) * C;
              for (std::size_t c = 0; c < C; ++c) gw[c * K + k] += gr[c] * xv[c];
            }
        wn->accumulate(gw);
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Gradient flow control.

// Forward identity with a severed gradient path: the result is a fresh leaf.
template <typename T>
Tensor<T> stop_gradient(const Tensor<T>& a) {
  return Tensor<T>::from(a.shape(), a.data(), false);
}

// ---------------------------------------------------------------------------
// Composite helpers used throughout the model.

// x: (..., in), w: (in, out), b: (out)
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  return add(matmul(x, w), b);
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5)) {
  const std::size_t last = x.ndim() - 1;
  auto mu = mean_axis(x, last, /*keepdim=*/true);
  auto xc = sub(x, mu);
  auto var = mean_axis(mul(xc, xc), last, /*keepdim=*/true);
  auto norm = div(xc, sqrt(add_scalar(var, eps)));
  return add(mul(norm, gamma), beta);
}

// ---------------------------------------------------------------------------
// Backward pass: reverse topological traversal from a scalar loss.

template <typename T>
void backward(const Tensor<T>& loss) {
  check(loss.size() == 1, "backward requires a scalar loss, got " + shape_str(loss.shape()));
  // Iterative DFS for topological order.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  loss.node()->accumulate({T(1)});
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = *it;
    if (node->backward && !node->grad.empty()) node->backward(node->grad);
  }
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check. `f` must rebuild the graph from the
// current contents of `inputs` on every call. Run at 64-bit.

template <typename T>
T gradcheck(const std::function<Tensor<T>()>& f, std::vector<Tensor<T>> inputs, T eps = T(1e-4)) {
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  Tensor<T> loss = f();
  backward(loss);
  std::vector<std::vector<T>> analytic;
  for (auto& t : inputs)
    analytic.push_back(t.grad().empty() ? std::vector<T>(t.size(), T(0)) : t.grad());

  T max_err = 0;
  for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
    auto& t = inputs[ti];
    for (std::size_t i = 0; i < t.size(); ++i) {
      const T orig = t.data()[i];
      t.data()[i] = orig + eps;
      const T fp = f().item();
      t.data()[i] = orig - eps;
      const T fm = f().item();
      t.data()[i] = orig;
      const T numeric = (fp - fm) / (T(2) * eps);
      const T err = std::abs(analytic[ti][i] - numeric) / std::max(T(1), std::abs(numeric));
      max_err = std::max(max_err, err);
    }
  }
  return max_err;
}

}  // namespace latcast::ag
