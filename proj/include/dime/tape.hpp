#pragma once

#include <cmath>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dime/kernels.hpp"
#include "dime/rng.hpp"
#include "dime/tensor.hpp"

namespace dime {

// A named, trainable value living outside any tape. Gradients accumulate into
// `grad` when a tape that references the parameter runs backward().
template <class T>
struct Parameter {
  std::string name;
  TensorData<T> value;
  std::vector<T> grad;

  Parameter() = default;
  Parameter(std::string n, TensorData<T> v)
      : name(std::move(n)), value(std::move(v)), grad(value.data.size(), T(0)) {}

  void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }
};

// Handle to a node on a Tape.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// Records the forward computation as a topologically ordered list of nodes;
// backward() replays it in reverse, visiting each node exactly once.
// Construction and backward are single-threaded per tape; kernels may use
// internal data parallelism (bitwise deterministic, see kernels.hpp).
template <class T>
class Tape {
 public:
  using BackFn = std::function<void(Tape&, const TensorData<T>&)>;

  Var leaf(TensorData<T> value, bool requires_grad = false) {
    return emit(std::move(value), requires_grad, nullptr);
  }

  Var scalar(T v) { return leaf(TensorData<T>::scalar(v)); }

  // Leaf bound to an external parameter: backward accumulates into p.grad.
  Var param(Parameter<T>& p) {
    Var v = emit(p.value, true, nullptr);
    nodes_[v.id].bound = &p;
    return v;
  }

  Var emit(TensorData<T> value, bool needs, BackFn back) {
    nodes_.push_back(Node{std::move(value), {}, needs ? std::move(back) : nullptr, nullptr, needs});
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  const TensorData<T>& val(Var v) const { return node(v).value; }

  bool needs_grad(Var v) const { return node(v).needs; }

  // Gradient of the last backward() root w.r.t. v (zeros if v is off-path).
  TensorData<T> grad_of(Var v) const {
    const Node& n = node(v);
    if (n.grad.data.empty()) return TensorData<T>(n.value.shape);
    return n.grad;
  }

  // Accumulate a gradient contribution into node v (no-op for nodes that do
  // not require gradients).
  void accum(Var v, std::span<const T> g) {
    Node& n = node(v);
    if (!n.needs) return;
    if (n.grad.data.empty()) n.grad = TensorData<T>(n.value.shape);
    T* dst = n.grad.data.data();
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
  }

  void backward(Var root) {
    Node& r = node(root);
    if (r.value.size() != 1 || r.value.rank() != 0)
      throw ValueError("backward: root must be a scalar, got shape " + shape_str(r.value.shape));
    if (r.grad.data.empty()) r.grad = TensorData<T>(Shape{});
    r.grad.data[0] += T(1);
    for (int i = root.id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (n.grad.data.empty()) continue;
      if (n.back) {
        n.back(*this, n.grad);
      } else if (n.bound) {
        T* dst = n.bound->grad.data();
        for (std::size_t j = 0; j < n.grad.data.size(); ++j) dst[j] += n.grad.data[j];
      }
    }
  }

  std::size_t size() const { return nodes_.size(); }

  void clear() { nodes_.clear(); }

 private:
  struct Node {
    TensorData<T> value;
    TensorData<T> grad;
    BackFn back;
    Parameter<T>* bound = nullptr;
    bool needs = false;
  };

  Node& node(Var v) {
    if (v.id < 0 || v.id >= static_cast<int>(nodes_.size()))
      throw ValueError("invalid tape handle");
    return nodes_[v.id];
  }
  const Node& node(Var v) const { return const_cast<Tape*>(this)->node(v); }

  // deque: node references stay valid while new nodes are appended
  std::deque<Node> nodes_;
};

namespace detail {

inline void require(bool cond, const char* op, const std::string& msg) {
  if (!cond) throw ShapeError(std::string(op) + ": " + msg);
}

template <class T>
void check_same_shape(const char* op, const TensorData<T>& a, const TensorData<T>& b) {
  if (a.shape != b.shape)
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape) + " vs " +
                     shape_str(b.shape));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

template <class T>
Var add(Tape<T>& tp, Var a, Var b) {
  const auto& av = tp.val(a);
  const auto& bv = tp.val(b);
  detail::check_same_shape("add", av, bv);
  TensorData<T> out(av.shape);
  for (std::int64_t i = 0; i < av.size(); ++i) out.data[i] = av.data[i] + bv.data[i];
  bool needs = tp.needs_grad(a) || tp.needs_grad(b);
  return tp.emit(std::move(out), needs, [a, b](Tape<T>& t, const TensorData<T>& g) {
    t.accum(a, g.data);
    t.accum(b, g.data);
  });
}

template <class T>
Var sub(Tape<T>& tp, Var a, Var b) {
  const auto& av = tp.val(a);
  const auto& bv = tp.val(b);
  detail::check_same_shape("sub", av, bv);
  TensorData<T> out(av.shape);
  for (std::int64_t i = 0; i < av.size(); ++i) out.data[i] = av.data[i] - bv.data[i];
  bool needs = tp.needs_grad(a) || tp.needs_grad(b);
  return tp.emit(std::move(out), needs, [a, b](Tape<T>& t, const TensorData<T>& g) {
    t.accum(a, g.data);
    std::vector<T> neg(g.data.size());
    for (std::size_t i = 0; i < neg.size(); ++i) neg[i] = -g.data[i];
    t.accum(b, neg);
  });
}

template <class T>
Var mul(Tape<T>& tp, Var a, Var b) {
  const auto& av = tp.val(a);
  const auto& bv = tp.val(b);
  detail::check_same_shape("mul", av, bv);
  TensorData<T> out(av.shape);
  for (std::int64_t i = 0; i < av.size(); ++i) out.data[i] = av.data[i] * bv.data[i];
  bool needs = tp.needs_grad(a) || tp.needs_grad(b);
  return tp.emit(std::move(out), needs, [a, b](Tape<T>& t, const TensorData<T>& g) {
    const auto& avv = t.val(a);
    const auto& bvv = t.val(b);
    std::vector<T> buf(g.data.size());
    for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = g.data[i] * bvv.data[i];
    t.accum(a, buf);
    for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = g.data[i] * avv.data[i];
    t.accum(b, buf);
  });
}

template <class T>
Var scale(Tape<T>& tp, Var a, T c) {
  const auto& av = tp.val(a);
  TensorData<T> out(av.shape);
  for (std::int64_t i = 0; i < av.size(); ++i) out.data[i] = av.data[i] * c;
  return tp.emit(std::move(out), tp.needs_grad(a), [a, c](Tape<T>& t, const TensorData<T>& g) {
    std::vector<T> buf(g.data.size());
    for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = g.data[i] * c;
    t.accum(a, buf);
  });
}

template <class T>
Var add_const(Tape<T>& tp, Var a, T c) {
  const auto& av = tp.val(a);
  TensorData<T> out(av.shape);
  for (std::int64_t i = 0; i < av.size(); ++i) out.data[i] = av.data[i] + c;
  return tp.emit(std::move(out), tp.needs_grad(a),
                 [a](Tape<T>& t, const TensorData<T>& g) { t.accum(a, g.data); });
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

// [m x k] * [k x n] -> [m x n]
template <class T>
Var matmul(Tape<T>& tp, Var a, Var b) {
  const auto& av = tp.val(a);
  const auto& bv = tp.val(b);
  if (av.rank() != 2 || bv.rank() != 2 || av.shape[1] != bv.shape[0])
    throw ShapeError("matmul: incompatible shapes " + shape_str(av.shape) + " x " +
                     shape_str(bv.shape));
  int m = av.shape[0], k = av.shape[1], n = bv.shape[1];
  TensorData<T> out(Shape{m, n});
  kernels::matmul_nn(av.data.data(), bv.data.data(), out.data.data(), m, k, n);
  bool needs = tp.needs_grad(a) || tp.needs_grad(b);
  return tp.emit(std::move(out), needs, [a, b, m, k, n](Tape<T>& t, const TensorData<T>& g) {
    const auto& avv = t.val(a);
    const auto& bvv = t.val(b);
    if (t.needs_grad(a)) {
      std::vector<T> da(static_cast<std::size_t>(m) * k);
      kernels::matmul_nt(g.data.data(), bvv.data.data(), da.data(), m, n, k);  // g * B^T
      t.accum(a, da);
    }
    if (t.needs_grad(b)) {
      std::vector<T> db(static_cast<std::size_t>(k) * n);
      kernels::matmul_tn(avv.data.data(), g.data.data(), db.data(), m, k, n);  // A^T * g
      t.accum(b, db);
    }
  });
}

// [m x k] * [n x k]^T -> [m x n]
template <class T>
Var matmul_nt(Tape<T>& tp, Var a, Var b) {
  const auto& av = tp.val(a);
  const auto& bv = tp.val(b);
  if (av.rank() != 2 || bv.rank() != 2 || av.shape[1] != bv.shape[1])
    throw ShapeError("matmul_nt: incompatible shapes " + shape_str(av.shape) + " x " +
                     shape_str(bv.shape) + "^T");
  int m = av.shape[0], k = av.shape[1], n = bv.shape[0];
  TensorData<T> out(Shape{m, n});
  kernels::matmul_nt(av.data.data(), bv.data.data(), out.data.data(), m, k, n);
  bool needs = tp.needs_grad(a) || tp.needs_grad(b);
  return tp.emit(std::move(out), needs, [a, b, m, k, n](Tape<T>& t, const TensorData<T>& g) {
    const auto& avv = t.val(a);
    const auto& bvv = t.val(b);
    if (t.needs_grad(a)) {
      std::vector<T> da(static_cast<std::size_t>(m) * k);
      kernels::matmul_nn(g.data.data(), bvv.data.data(), da.data(), m, n, k);  // g * B
      t.accum(a, da);
    }
    if (t.needs_grad(b)) {
      std::vector<T> db(static_cast<std::size_t>(n) * k);
      kernels::matmul_tn(g.data.data(), avv.data.data(), db.data(), m, n, k);  // g^T * A
      t.accum(b, db);
    }
  });
}

// [m x n] * [n] -> [m]
template <class T>
Var matvec(Tape<T>& tp, Var mat, Var x) {
  const auto& mv = tp.val(mat);
  const auto& xv = tp.val(x);
  if (mv.rank() != 2 || xv.rank() != 1 || mv.shape[1] != xv.shape[0])
    throw ShapeError("matvec: incompatible shapes " + shape_str(mv.shape) + " x " +
                     shape_str(xv.shape));
  int m = mv.shape[0], n = mv.shape[1];
  TensorData<T> out(Shape{m});
  kernels::matmul_nn(mv.data.data(), xv.data.data(), out.data.data(), m, n, 1);
  bool needs = tp.needs_grad(mat) || tp.needs_grad(x);
  return tp.emit(std::move(out), needs, [mat, x, m, n](Tape<T>& t, const TensorData<T>& g) {
    const auto& mvv = t.val(mat);
    const auto& xvv = t.val(x);
    if (t.needs_grad(mat)) {
      std::vector<T> dm(static_cast<std::size_t>(m) * n);
      kernels::matmul_nt(g.data.data(), xvv.data.data(), dm.data(), m, 1, n);  // g x^T
      t.accum(mat, dm);
    }
    if (t.needs_grad(x)) {
      std::vector<T> dx(static_cast<std::size_t>(n));
      kernels::matmul_tn(mvv.data.data(), g.data.data(), dx.data(), m, n, 1);  // M^T g
      t.accum(x, dx);
    }
  });
}

// ---------------------------------------------------------------------------
// Structure ops
// ---------------------------------------------------------------------------

template <class T>
Var stack_rows(Tape<T>& tp, std::span<const Var> rows) {
  detail::require(!rows.empty(), "stack_rows", "needs at least one row");
  int n = tp.val(rows[0]).cols();
  bool needs = false;
  for (Var r : rows) {
    const auto& rv = tp.val(r);
    detail::require(rv.rank() == 1 && rv.shape[0] == n, "stack_rows",
                    "rows must be equal-length vectors");
    needs = needs || tp.needs_grad(r);
  }
  int k = static_cast<int>(rows.size());
  TensorData<T> out(Shape{k, n});
  for (int r = 0; r < k; ++r) {
    const auto& rv = tp.val(rows[r]);
    std::copy(rv.data.begin(), rv.data.end(), out.data.begin() + static_cast<std::size_t>(r) * n);
  }
  std::vector<Var> owned(rows.begin(), rows.end());
  return tp.emit(std::move(out), needs,
                 [owned = std::move(owned), n](Tape<T>& t, const TensorData<T>& g) {
                   for (std::size_t r = 0; r < owned.size(); ++r)
                     t.accum(owned[r], std::span<const T>(g.data.data() + r * n, n));
                 });
}

template <class T>
Var stack_rows(Tape<T>& tp, std::initializer_list<Var> rows) {
  std::vector<Var> v(rows);
  return stack_rows(tp, std::span<const Var>(v));
}

template <class T>
Var mean_rows(Tape<T>& tp, Var x) {
  const auto& xv = tp.val(x);
  detail::require(xv.rank() == 2, "mean_rows", "expects a matrix, got " + shape_str(xv.shape));
  int k = xv.shape[0], n = xv.shape[1];
  TensorData<T> out(Shape{n});
  for (int r = 0; r < k; ++r)
    for (int j = 0; j < n; ++j) out.data[j] += xv.at(r, j);
  for (int j = 0; j < n; ++j) out.data[j] /= T(k);
  return tp.emit(std::move(out), tp.needs_grad(x), [x, k, n](Tape<T>& t, const TensorData<T>& g) {
    std::vector<T> dx(static_cast<std::size_t>(k) * n);
    for (int r = 0; r < k; ++r)
      for (int j = 0; j < n; ++j) dx[static_cast<std::size_t>(r) * n + j] = g.data[j] / T(k);
    t.accum(x, dx);
  });
}

template <class T>
Var concat(Tape<T>& tp, Var a, Var b) {
  const auto& av = tp.val(a);
  const auto& bv = tp.val(b);
  detail::require(av.rank() == 1 && bv.rank() == 1, "concat", "expects vectors");
  int na = av.shape[0], nb = bv.shape[0];
  TensorData<T> out(Shape{na + nb});
  std::copy(av.data.begin(), av.data.end(), out.data.begin());
  std::copy(bv.data.begin(), bv.data.end(), out.data.begin() + na);
  bool needs = tp.needs_grad(a) || tp.needs_grad(b);
  return tp.emit(std::move(out), needs, [a, b, na, nb](Tape<T>& t, const TensorData<T>& g) {
    t.accum(a, std::span<const T>(g.data.data(), na));
    t.accum(b, std::span<const T>(g.data.data() + na, nb));
  });
}

template <class T>
Var slice(Tape<T>& tp, Var x, int start, int len) {
  const auto& xv = tp.val(x);
  detail::require(xv.rank() == 1, "slice", "expects a vector");
  detail::require(start >= 0 && len >= 1 && start + len <= xv.shape[0], "slice",
                  "range out of bounds for " + shape_str(xv.shape));
  TensorData<T> out(Shape{len});
  std::copy(xv.data.begin() + start, xv.data.begin() + start + len, out.data.begin());
  int n = xv.shape[0];
  return tp.emit(std::move(out), tp.needs_grad(x),
                 [x, start, len, n](Tape<T>& t, const TensorData<T>& g) {
                   std::vector<T> dx(static_cast<std::size_t>(n), T(0));
                   for (int i = 0; i < len; ++i) dx[start + i] = g.data[i];
                   t.accum(x, dx);
                 });
}

template <class T>
Var slice_cols(Tape<T>& tp, Var x, int start, int len) {
  const auto& xv = tp.val(x);
  detail::require(xv.rank() == 2, "slice_cols", "expects a matrix");
  int k = xv.shape[0], n = xv.shape[1];
  detail::require(start >= 0 && len >= 1 && start + len <= n, "slice_cols",
                  "column range out of bounds for " + shape_str(xv.shape));
  TensorData<T> out(Shape{k, len});
  for (int r = 0; r < k; ++r)
    for (int j = 0; j < len; ++j) out.at(r, j) = xv.at(r, start + j);
  return tp.emit(std::move(out), tp.needs_grad(x),
                 [x, start, len, k, n](Tape<T>& t, const TensorData<T>& g) {
                   std::vector<T> dx(static_cast<std::size_t>(k) * n, T(0));
                   for (int r = 0; r < k; ++r)
                     for (int j = 0; j < len; ++j)
                       dx[static_cast<std::size_t>(r) * n + start + j] = g.data[static_cast<std::size_t>(r) * len + j];
                   t.accum(x, dx);
                 });
}

template <class T>
Var concat_cols(Tape<T>& tp, std::span<const Var> parts) {
  detail::require(!parts.empty(), "concat_cols", "needs at least one part");
  int k = tp.val(parts[0]).rows();
  int total = 0;
  bool needs = false;
  for (Var p : parts) {
    const auto& pv = tp.val(p);
    detail::require(pv.rank() == 2 && pv.shape[0] == k, "concat_cols",
                    "parts must be matrices with equal row counts");
    total += pv.shape[1];
    needs = needs || tp.needs_grad(p);
  }
  TensorData<T> out(Shape{k, total});
  int col = 0;
  std::vector<std::pair<Var, int>> layout;  // (part, width)
  for (Var p : parts) {
    const auto& pv = tp.val(p);
    int w = pv.shape[1];
    for (int r = 0; r < k; ++r)
      for (int j = 0; j < w; ++j) out.at(r, col + j) = pv.at(r, j);
    layout.emplace_back(p, w);
    col += w;
  }
  return tp.emit(std::move(out), needs,
                 [layout = std::move(layout), k, total](Tape<T>& t, const TensorData<T>& g) {
                   int col = 0;
                   for (auto [p, w] : layout) {
                     std::vector<T> dp(static_cast<std::size_t>(k) * w);
                     for (int r = 0; r < k; ++r)
                       for (int j = 0; j < w; ++j)
                         dp[static_cast<std::size_t>(r) * w + j] =
                             g.data[static_cast<std::size_t>(r) * total + col + j];
                     t.accum(p, dp);
                     col += w;
                   }
                 });
}

// [k x n] + [n], bias broadcast over rows.
template <class T>
Var add_row_bias(Tape<T>& tp, Var x, Var bias) {
  const auto& xv = tp.val(x);
  const auto& bv = tp.val(bias);
  detail::require(xv.rank() == 2 && bv.rank() == 1 && bv.shape[0] == xv.shape[1], "add_row_bias",
                  "incompatible shapes " + shape_str(xv.shape) + " + " + shape_str(bv.shape));
  int k = xv.shape[0], n = xv.shape[1];
  TensorData<T> out(xv.shape);
  for (int r = 0; r < k; ++r)
    for (int j = 0; j < n; ++j) out.at(r, j) = xv.at(r, j) + bv.data[j];
  bool needs = tp.needs_grad(x) || tp.needs_grad(bias);
  return tp.emit(std::move(out), needs, [x, bias, k, n](Tape<T>& t, const TensorData<T>& g) {
    t.accum(x, g.data);
    std::vector<T> db(static_cast<std::size_t>(n), T(0));
    for (int r = 0; r < k; ++r)
      for (int j = 0; j < n; ++j) db[j] += g.data[static_cast<std::size_t>(r) * n + j];
    t.accum(bias, db);
  });
}

// ---------------------------------------------------------------------------
// Nonlinearities and normalization
// ---------------------------------------------------------------------------

// Softmax with temperature over the last axis (whole vector for rank 1, each
// row for rank 2). Max-subtracted for stability.
template <class T>
Var softmax_with_temperature(Tape<T>& tp, Var z, T tau) {
  if (!(tau > T(0))) throw ValueError("softmax_with_temperature: tau must be positive");
  const auto& zv = tp.val(z);
  detail::require(zv.rank() >= 1, "softmax_with_temperature", "expects vector or matrix");
  if (!zv.finite())
    throw ValueError("softmax_with_temperature: input contains a non-finite value");
  int rows = zv.rows(), n = zv.cols();
  TensorData<T> out(zv.shape);
  for (int r = 0; r < rows; ++r) {
    const T* src = zv.data.data() + static_cast<std::size_t>(r) * n;
    T* dst = out.data.data() + static_cast<std::size_t>(r) * n;
    T mx = src[0];
    for (int i = 1; i < n; ++i) mx = std::max(mx, src[i]);
    T sum = T(0);
    for (int i = 0; i < n; ++i) {
      dst[i] = std::exp((src[i] - mx) / tau);
      sum += dst[i];
    }
    for (int i = 0; i < n; ++i) dst[i] /= sum;
  }
  TensorData<T> saved = out;
  return tp.emit(std::move(out), tp.needs_grad(z),
                 [z, tau, rows, n, y = std::move(saved)](Tape<T>& t, const TensorData<T>& g) {
                   std::vector<T> dz(y.data.size());
                   for (int r = 0; r < rows; ++r) {
                     const T* yr = y.data.data() + static_cast<std::size_t>(r) * n;
                     const T* gr = g.data.data() + static_cast<std::size_t>(r) * n;
                     T dotgy = T(0);
                     for (int i = 0; i < n; ++i) dotgy += gr[i] * yr[i];
                     T* dr = dz.data() + static_cast<std::size_t>(r) * n;
                     for (int i = 0; i < n; ++i) dr[i] = yr[i] * (gr[i] - dotgy) / tau;
                   }
                   t.accum(z, dz);
                 });
}

// Layer normalization over the last axis with population variance.
template <class T>
Var layer_norm(Tape<T>& tp, Var x, Var gamma, Var beta, T eps) {
  if (!(eps > T(0))) throw ValueError("layer_norm: eps must be positive");
  const auto& xv = tp.val(x);
  const auto& gv = tp.val(gamma);
  const auto& bv = tp.val(beta);
  int rows = xv.rows(), n = xv.cols();
  detail::require(gv.rank() == 1 && gv.shape[0] == n, "layer_norm",
                  "gamma shape " + shape_str(gv.shape) + " does not match width " + std::to_string(n));
  detail::check_same_shape("layer_norm", gv, bv);
  TensorData<T> out(xv.shape);
  TensorData<T> xhat(xv.shape);
  std::vector<T> istd(rows);
  for (int r = 0; r < rows; ++r) {
    const T* src = xv.data.data() + static_cast<std::size_t>(r) * n;
    T mean = T(0);
    for (int i = 0; i < n; ++i) mean += src[i];
    mean /= T(n);
    T var = T(0);
    for (int i = 0; i < n; ++i) var += (src[i] - mean) * (src[i] - mean);
    var /= T(n);
    istd[r] = T(1) / std::sqrt(var + eps);
    T* xh = xhat.data.data() + static_cast<std::size_t>(r) * n;
    T* dst = out.data.data() + static_cast<std::size_t>(r) * n;
    for (int i = 0; i < n; ++i) {
      xh[i] = (src[i] - mean) * istd[r];
      dst[i] = gv.data[i] * xh[i] + bv.data[i];
    }
  }
  bool needs = tp.needs_grad(x) || tp.needs_grad(gamma) || tp.needs_grad(beta);
  return tp.emit(
      std::move(out), needs,
      [x, gamma, beta, rows, n, xh = std::move(xhat), istd = std::move(istd)](
          Tape<T>& t, const TensorData<T>& g) {
        const auto& gv2 = t.val(gamma);
        std::vector<T> dgamma(n, T(0)), dbeta(n, T(0)), dx(static_cast<std::size_t>(rows) * n);
        for (int r = 0; r < rows; ++r) {
          const T* gr = g.data.data() + static_cast<std::size_t>(r) * n;
          const T* xr = xh.data.data() + static_cast<std::size_t>(r) * n;
          T mean_q = T(0), mean_qx = T(0);
          for (int i = 0; i < n; ++i) {
            T q = gr[i] * gv2.data[i];
            dgamma[i] += gr[i] * xr[i];
            dbeta[i] += gr[i];
            mean_q += q;
            mean_qx += q * xr[i];
          }
          mean_q /= T(n);
          mean_qx /= T(n);
          T* dr = dx.data() + static_cast<std::size_t>(r) * n;
          for (int i = 0; i < n; ++i) {
            T q = gr[i] * gv2.data[i];
            dr[i] = istd[r] * (q - mean_q - xr[i] * mean_qx);
          }
        }
        t.accum(x, dx);
        t.accum(gamma, dgamma);
        t.accum(beta, dbeta);
      });
}

enum class Activation { relu, gelu };

template <class T>
Var relu(Tape<T>& tp, Var x) {
  const auto& xv = tp.val(x);
  TensorData<T> out(xv.shape);
  for (std::int64_t i = 0; i < xv.size(); ++i) out.data[i] = xv.data[i] > T(0) ? xv.data[i] : T(0);
  // subgradient at 0 is 0 (hinge convention)
  return tp.emit(std::move(out), tp.needs_grad(x), [x](Tape<T>& t, const TensorData<T>& g) {
    const auto& xvv = t.val(x);
    std::vector<T> dx(g.data.size());
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] = xvv.data[i] > T(0) ? g.data[i] : T(0);
    t.accum(x, dx);
  });
}

namespace detail {
// Standard normal CDF, exact form (no tanh approximation).
template <class T>
T normal_cdf(T x) {
  return T(0.5) * std::erfc(-x / std::sqrt(T(2)));
}
template <class T>
T normal_pdf(T x) {
  return std::exp(-x * x / T(2)) / std::sqrt(T(2) * T(3.14159265358979323846));
}
}  // namespace detail

// Exact GELU: x * Phi(x).
template <class T>
Var gelu(Tape<T>& tp, Var x) {
  const auto& xv = tp.val(x);
  TensorData<T> out(xv.shape);
  for (std::int64_t i = 0; i < xv.size(); ++i)
    out.data[i] = xv.data[i] * detail::normal_cdf(xv.data[i]);
  return tp.emit(std::move(out), tp.needs_grad(x), [x](Tape<T>& t, const TensorData<T>& g) {
    const auto& xvv = t.val(x);
    std::vector<T> dx(g.data.size());
    for (std::size_t i = 0; i < dx.size(); ++i) {
      T v = xvv.data[i];
      dx[i] = g.data[i] * (detail::normal_cdf(v) + v * detail::normal_pdf(v));
    }
    t.accum(x, dx);
  });
}

template <class T>
Var activation(Tape<T>& tp, Activation kind, Var x) {
  return kind == Activation::relu ? relu(tp, x) : gelu(tp, x);
}

// Inverted dropout: survivors are scaled by 1/(1-p) so eval is the identity.
template <class T>
Var dropout(Tape<T>& tp, Var x, T p, bool training, Rng& rng) {
  if (!(p >= T(0) && p < T(1)))
    throw ValueError("dropout: p must lie in [0, 1), got " + std::to_string(static_cast<double>(p)));
  if (!training || p == T(0)) return x;
  const auto& xv = tp.val(x);
  T keep_scale = T(1) / (T(1) - p);
  std::vector<T> mask(xv.data.size());
  for (auto& m : mask) m = rng.uniform() >= static_cast<double>(p) ? keep_scale : T(0);
  TensorData<T> out(xv.shape);
  for (std::int64_t i = 0; i < xv.size(); ++i) out.data[i] = xv.data[i] * mask[i];
  return tp.emit(std::move(out), tp.needs_grad(x),
                 [x, mask = std::move(mask)](Tape<T>& t, const TensorData<T>& g) {
                   std::vector<T> dx(g.data.size());
                   for (std::size_t i = 0; i < dx.size(); ++i) dx[i] = g.data[i] * mask[i];
                   t.accum(x, dx);
                 });
}

// x / max(||x||, eps). Near-zero inputs pass through scaled by 1/eps.
template <class T>
Var l2_normalize(Tape<T>& tp, Var x, T eps) {
  if (!(eps > T(0))) throw ValueError("l2_normalize: eps must be positive");
  const auto& xv = tp.val(x);
  detail::require(xv.rank() == 1, "l2_normalize", "expects a vector");
  T norm = static_cast<T>(l2_norm(std::span<const T>(xv.data)));
  T denom = std::max(norm, eps);
  TensorData<T> out(xv.shape);
  for (std::int64_t i = 0; i < xv.size(); ++i) out.data[i] = xv.data[i] / denom;
  TensorData<T> y = out;
  bool guarded = norm <= eps;
  return tp.emit(std::move(out), tp.needs_grad(x),
                 [x, denom, guarded, y = std::move(y)](Tape<T>& t, const TensorData<T>& g) {
                   std::vector<T> dx(g.data.size());
                   if (guarded) {
                     for (std::size_t i = 0; i < dx.size(); ++i) dx[i] = g.data[i] / denom;
                   } else {
                     T gy = T(0);
                     for (std::size_t i = 0; i < dx.size(); ++i) gy += g.data[i] * y.data[i];
                     for (std::size_t i = 0; i < dx.size(); ++i)
                       dx[i] = (g.data[i] - y.data[i] * gy) / denom;
                   }
                   t.accum(x, dx);
                 });
}

// ---------------------------------------------------------------------------
// Reductions and distances
// ---------------------------------------------------------------------------

template <class T>
Var sum(Tape<T>& tp, Var x) {
  const auto& xv = tp.val(x);
  T acc = T(0);
  for (T v : xv.data) acc += v;
  Shape xshape = xv.shape;
  return tp.emit(TensorData<T>::scalar(acc), tp.needs_grad(x),
                 [x, xshape](Tape<T>& t, const TensorData<T>& g) {
                   std::vector<T> dx(numel(xshape), g.data[0]);
                   t.accum(x, dx);
                 });
}

template <class T>
Var dot(Tape<T>& tp, Var a, Var b) {
  const auto& av = tp.val(a);
  const auto& bv = tp.val(b);
  detail::check_same_shape("dot", av, bv);
  T acc = T(0);
  for (std::int64_t i = 0; i < av.size(); ++i) acc += av.data[i] * bv.data[i];
  bool needs = tp.needs_grad(a) || tp.needs_grad(b);
  return tp.emit(TensorData<T>::scalar(acc), needs, [a, b](Tape<T>& t, const TensorData<T>& g) {
    const auto& avv = t.val(a);
    const auto& bvv = t.val(b);
    std::vector<T> buf(avv.data.size());
    for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = g.data[0] * bvv.data[i];
    t.accum(a, buf);
    for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = g.data[0] * avv.data[i];
    t.accum(b, buf);
  });
}

template <class T>
Var mean_scalars(Tape<T>& tp, std::span<const Var> xs) {
  detail::require(!xs.empty(), "mean_scalars", "needs at least one input");
  T acc = T(0);
  bool needs = false;
  for (Var v : xs) {
    const auto& vv = tp.val(v);
    detail::require(vv.rank() == 0, "mean_scalars", "inputs must be scalars");
    acc += vv.data[0];
    needs = needs || tp.needs_grad(v);
  }
  T k = T(static_cast<double>(xs.size()));
  std::vector<Var> owned(xs.begin(), xs.end());
  return tp.emit(TensorData<T>::scalar(acc / k), needs,
                 [owned = std::move(owned), k](Tape<T>& t, const TensorData<T>& g) {
                   std::vector<T> contrib{g.data[0] / k};
                   for (Var v : owned) t.accum(v, contrib);
                 });
}

// ||a - b||_2. Subgradient at coincident points is 0.
template <class T>
Var euclidean_distance(Tape<T>& tp, Var a, Var b) {
  const auto& av = tp.val(a);
  const auto& bv = tp.val(b);
  detail::check_same_shape("euclidean_distance", av, bv);
  double acc = 0;
  for (std::int64_t i = 0; i < av.size(); ++i) {
    double d = static_cast<double>(av.data[i]) - static_cast<double>(bv.data[i]);
    acc += d * d;
  }
  T dist = static_cast<T>(std::sqrt(acc));
  bool needs = tp.needs_grad(a) || tp.needs_grad(b);
  return tp.emit(TensorData<T>::scalar(dist), needs,
                 [a, b, dist](Tape<T>& t, const TensorData<T>& g) {
                   if (dist == T(0)) return;
                   const auto& avv = t.val(a);
                   const auto& bvv = t.val(b);
                   std::vector<T> buf(avv.data.size());
                   for (std::size_t i = 0; i < buf.size(); ++i)
                     buf[i] = g.data[0] * (avv.data[i] - bvv.data[i]) / dist;
                   t.accum(a, buf);
                   for (auto& v : buf) v = -v;
                   t.accum(b, buf);
                 });
}

// a.b / (max(||a||,eps) * max(||b||,eps)), value clamped to [-1, 1]. The
// clamp applies to the returned value only; the backward rule uses the
// unclamped quotient, which keeps gradients exact everywhere the true cosine
// is interior and harmless at the rounding boundary.
template <class T>
Var cosine_similarity(Tape<T>& tp, Var a, Var b, T eps) {
  if (!(eps > T(0))) throw ValueError("cosine_similarity: eps must be positive");
  const auto& av = tp.val(a);
  const auto& bv = tp.val(b);
  detail::check_same_shape("cosine_similarity", av, bv);
  T na = static_cast<T>(l2_norm(std::span<const T>(av.data)));
  T nb = static_cast<T>(l2_norm(std::span<const T>(bv.data)));
  T da = std::max(na, eps), db = std::max(nb, eps);
  T d = T(0);
  for (std::int64_t i = 0; i < av.size(); ++i) d += av.data[i] * bv.data[i];
  T s = d / (da * db);
  T clamped = std::min(T(1), std::max(T(-1), s));
  bool needs = tp.needs_grad(a) || tp.needs_grad(b);
  return tp.emit(TensorData<T>::scalar(clamped), needs,
                 [a, b, na, nb, da, db, s, eps](Tape<T>& t, const TensorData<T>& g) {
                   const auto& avv = t.val(a);
                   const auto& bvv = t.val(b);
                   std::vector<T> buf(avv.data.size());
                   for (std::size_t i = 0; i < buf.size(); ++i) {
                     T term = bvv.data[i] / (da * db);
                     if (na > eps) term -= s * avv.data[i] / (na * da);
                     buf[i] = g.data[0] * term;
                   }
                   t.accum(a, buf);
                   for (std::size_t i = 0; i < buf.size(); ++i) {
                     T term = avv.data[i] / (da * db);
                     if (nb > eps) term -= s * bvv.data[i] / (nb * db);
                     buf[i] = g.data[0] * term;
                   }
                   t.accum(b, buf);
                 });
}

// weights [k] (e.g. gate probabilities) applied to k equal-length vectors:
// out = sum_i w_i * x_i.
template <class T>
Var mix(Tape<T>& tp, Var weights, std::span<const Var> xs) {
  const auto& wv = tp.val(weights);
  detail::require(wv.rank() == 1 && wv.shape[0] == static_cast<int>(xs.size()), "mix",
                  "weight count " + shape_str(wv.shape) + " does not match " +
                      std::to_string(xs.size()) + " inputs");
  detail::require(!xs.empty(), "mix", "needs at least one input");
  int n = tp.val(xs[0]).cols();
  bool needs = tp.needs_grad(weights);
  for (Var x : xs) {
    const auto& xv = tp.val(x);
    detail::require(xv.rank() == 1 && xv.shape[0] == n, "mix",
                    "inputs must be equal-length vectors");
    needs = needs || tp.needs_grad(x);
  }
  TensorData<T> out(Shape{n});
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const auto& xv = tp.val(xs[i]);
    for (int j = 0; j < n; ++j) out.data[j] += wv.data[i] * xv.data[j];
  }
  std::vector<Var> owned(xs.begin(), xs.end());
  return tp.emit(std::move(out), needs,
                 [weights, owned = std::move(owned), n](Tape<T>& t, const TensorData<T>& g) {
                   const auto& wvv = t.val(weights);
                   std::vector<T> dw(owned.size(), T(0));
                   std::vector<T> dx(static_cast<std::size_t>(n));
                   for (std::size_t i = 0; i < owned.size(); ++i) {
                     const auto& xv = t.val(owned[i]);
                     for (int j = 0; j < n; ++j) {
                       dw[i] += g.data[j] * xv.data[j];
                       dx[j] = g.data[j] * wvv.data[i];
                     }
                     t.accum(owned[i], dx);
                   }
                   t.accum(weights, dw);
                 });
}

// Mean over the batch of -log softmax(logits)[label], computed in log space.
// Accepts a [B x C] matrix with B labels or a length-C vector with 1 label.
template <class T>
Var cross_entropy_loss(Tape<T>& tp, Var logits, std::span<const int> labels) {
  const auto& lv = tp.val(logits);
  detail::require(lv.rank() == 1 || lv.rank() == 2, "cross_entropy_loss",
                  "expects vector or matrix logits");
  int batch = lv.rank() == 2 ? lv.shape[0] : 1;
  int classes = lv.cols();
  if (static_cast<int>(labels.size()) != batch)
    throw ShapeError("cross_entropy_loss: got " + std::to_string(labels.size()) +
                     " labels for batch of " + std::to_string(batch));
  for (int r = 0; r < batch; ++r)
    if (labels[r] < 0 || labels[r] >= classes)
      throw ValueError("cross_entropy_loss: label " + std::to_string(labels[r]) +
                       " out of range [0, " + std::to_string(classes) + ") at batch index " +
                       std::to_string(r));
  double total = 0;
  for (int r = 0; r < batch; ++r) {
    const T* z = lv.data.data() + static_cast<std::size_t>(r) * classes;
    double mx = static_cast<double>(z[0]);
    for (int c = 1; c < classes; ++c) mx = std::max(mx, static_cast<double>(z[c]));
    double lse = 0;
    for (int c = 0; c < classes; ++c) lse += std::exp(static_cast<double>(z[c]) - mx);
    lse = mx + std::log(lse);
    total += lse - static_cast<double>(z[labels[r]]);
  }
  std::vector<int> owned(labels.begin(), labels.end());
  return tp.emit(TensorData<T>::scalar(static_cast<T>(total / batch)), tp.needs_grad(logits),
                 [logits, batch, classes, owned = std::move(owned)](Tape<T>& t,
                                                                    const TensorData<T>& g) {
                   const auto& lvv = t.val(logits);
                   std::vector<T> dz(lvv.data.size());
                   for (int r = 0; r < batch; ++r) {
                     const T* z = lvv.data.data() + static_cast<std::size_t>(r) * classes;
                     T* d = dz.data() + static_cast<std::size_t>(r) * classes;
                     T mx = z[0];
                     for (int c = 1; c < classes; ++c) mx = std::max(mx, z[c]);
                     T sum = T(0);
                     for (int c = 0; c < classes; ++c) {
                       d[c] = std::exp(z[c] - mx);
                       sum += d[c];
                     }
                     for (int c = 0; c < classes; ++c) {
                       d[c] /= sum;
                       if (c == owned[r]) d[c] -= T(1);
                       d[c] *= g.data[0] / T(batch);
                     }
                   }
                   t.accum(logits, dz);
                 });
}

}  // namespace dime
