#pragma once

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "hft/geometry.hpp"
#include "hft/tensor.hpp"

namespace hft {

// A named trainable tensor with its gradient and AdamW moments.
template <class T>
struct Param {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  Tensor<T> m;  // first moment
  Tensor<T> v;  // second moment

  explicit Param(std::string n, std::vector<int> shape)
      : name(std::move(n)), value(shape), grad(shape), m(shape), v(std::move(shape)) {}

  std::int64_t numel() const { return value.numel(); }
};

template <class T>
class ParamStore {
 public:
  Param<T>& create(const std::string& name, std::vector<int> shape) {
    params_.push_back(std::make_unique<Param<T>>(name, std::move(shape)));
    return *params_.back();
  }
  std::vector<Param<T>*> all() {
    std::vector<Param<T>*> out;
    out.reserve(params_.size());
    for (auto& p : params_) out.push_back(p.get());
    return out;
  }
  std::vector<const Param<T>*> all() const {
    std::vector<const Param<T>*> out;
    out.reserve(params_.size());
    for (auto& p : params_) out.push_back(p.get());
    return out;
  }
  Param<T>* find(const std::string& name) {
    for (auto& p : params_)
      if (p->name == name) return p.get();
    return nullptr;
  }
  void zero_grad() {
    for (auto& p : params_) p->grad.zero();
  }
  std::int64_t count(const std::string& prefix = "") const {
    std::int64_t n = 0;
    for (const auto& p : params_)
      if (p->name.rfind(prefix, 0) == 0) n += p->numel();
    return n;
  }
  size_t size() const { return params_.size(); }

 private:
  std::vector<std::unique_ptr<Param<T>>> params_;
};

struct Var {
  int id = -1;
};

namespace detail {

#if defined(__GLIBC__)
// Tape tensors are multi-megabyte and short-lived; without this glibc serves
// them via mmap/munmap and every training step pays page-fault costs.
inline void tune_allocator_once() {
  static const bool done = [] {
    mallopt(M_MMAP_THRESHOLD, 256 * 1024 * 1024);
    mallopt(M_TRIM_THRESHOLD, 256 * 1024 * 1024);
    return true;
  }();
  (void)done;
}
#else
inline void tune_allocator_once() {}
#endif

// Output-row ranges may be split across two threads. Every output element is
// written by exactly one thread with an unchanged inner loop order, so the
// result is bitwise identical to the single-threaded one for any split.
inline bool use_second_thread(std::int64_t rows, std::int64_t work) {
  static const bool multi = std::thread::hardware_concurrency() >= 2;
  return multi && rows >= 32 && work >= 400000;
}

template <class F>
void split_rows(std::int64_t rows, std::int64_t work, F&& body) {
  if (!use_second_thread(rows, work)) {
    body(std::int64_t{0}, rows);
    return;
  }
  const std::int64_t mid = rows / 2;
  std::thread worker([&body, mid, rows] { body(mid, rows); });
  body(std::int64_t{0}, mid);
  worker.join();
}

// C[m,n] += A[m,k] * B[k,n]
template <class T>
void gemm_nn_acc(const T* a, const T* b, T* c, int m, int k, int n) {
  split_rows(m, static_cast<std::int64_t>(m) * k * n, [=](std::int64_t i0, std::int64_t i1) {
    for (std::int64_t i = i0; i < i1; ++i) {
      const T* ar = a + i * k;
      T* cr = c + i * n;
      for (int p = 0; p < k; ++p) {
        const T av = ar[p];
        const T* br = b + static_cast<std::int64_t>(p) * n;
        for (int j = 0; j < n; ++j) cr[j] += av * br[j];
      }
    }
  });
}

// Row dot product with eight independent accumulators; a single chain would
// serialize on FMA latency and cannot be auto-vectorized.
template <class T>
T dot_rows(const T* x, const T* y, int n) {
  T acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  int j = 0;
  for (; j + 8 <= n; j += 8)
    for (int u = 0; u < 8; ++u) acc[u] += x[j + u] * y[j + u];
  T tail = 0;
  for (; j < n; ++j) tail += x[j] * y[j];
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail;
}

// C[m,k] += A[m,n] * B[k,n]^T  (dot products of rows). Tiled over n so the
// B tile stays cache-resident across the row loop; per-element accumulation
// order is fixed (ascending tiles), so results stay reproducible.
template <class T>
void gemm_nt_acc(const T* a, const T* b, T* c, int m, int n, int k) {
  constexpr int kTile = 512;
  split_rows(m, static_cast<std::int64_t>(m) * n * k, [=](std::int64_t i0, std::int64_t i1) {
    for (int j0 = 0; j0 < n; j0 += kTile) {
      const int jn = std::min(kTile, n - j0);
      for (std::int64_t i = i0; i < i1; ++i) {
        const T* ar = a + i * n + j0;
        T* cr = c + i * k;
        for (int p = 0; p < k; ++p)
          cr[p] += dot_rows(ar, b + static_cast<std::int64_t>(p) * n + j0, jn);
      }
    }
  });
}

// C[k,n] += A[m,k]^T * B[m,n]; output rows are indexed by p.
template <class T>
void gemm_tn_acc(const T* a, const T* b, T* c, int m, int k, int n) {
  split_rows(k, static_cast<std::int64_t>(m) * k * n, [=](std::int64_t p0, std::int64_t p1) {
    for (int i = 0; i < m; ++i) {
      const T* ar = a + static_cast<std::int64_t>(i) * k;
      const T* br = b + static_cast<std::int64_t>(i) * n;
      for (std::int64_t p = p0; p < p1; ++p) {
        const T av = ar[p];
        if (av == T(0)) continue;
        T* cr = c + p * n;
        for (int j = 0; j < n; ++j) cr[j] += av * br[j];
      }
    }
  });
}

}  // namespace detail

// Eager reverse-mode tape. Every op computes its value immediately and pushes
// a backward closure; backward() replays the tape in reverse creation order.
// Single-threaded by construction, so results are bitwise reproducible.
template <class T>
class Graph {
 public:
  Graph() { detail::tune_allocator_once(); }

  struct Node {
    Tensor<T> val;
    Tensor<T> grad;  // allocated on demand during backward
    bool needs_grad = false;
    std::function<void(Graph&)> back;
  };

  const Tensor<T>& val(Var v) const { return nodes_[static_cast<size_t>(v.id)].val; }
  const Tensor<T>& grad_of(Var v) const { return nodes_[static_cast<size_t>(v.id)].grad; }
  bool needs_grad(Var v) const { return nodes_[static_cast<size_t>(v.id)].needs_grad; }
  size_t size() const { return nodes_.size(); }

  Var input(Tensor<T> value) {
    return push(std::move(value), false, nullptr);
  }

  Var param(Param<T>& p) {
    Var out = push(p.value, true, nullptr);
    Param<T>* pp = &p;
    node(out).back = [out, pp](Graph& g) {
      const Tensor<T>& go = g.grad_ro(out);
      for (std::int64_t i = 0; i < go.numel(); ++i) pp->grad[i] += go[i];
    };
    return out;
  }

  Var stop_grad(Var a) { return push(val(a), false, nullptr); }

  Var add(Var a, Var b) {
    check_same(a, b, "add");
    Tensor<T> out = val(a);
    const Tensor<T>& bv = val(b);
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] += bv[i];
    Var o = binary(std::move(out), a, b);
    node(o).back = [o, a, b](Graph& g) {
      const Tensor<T>& go = g.grad_ro(o);
      if (g.needs_grad(a)) g.axpy(a, go, T(1));
      if (g.needs_grad(b)) g.axpy(b, go, T(1));
    };
    return o;
  }

  Var sub(Var a, Var b) {
    check_same(a, b, "sub");
    Tensor<T> out = val(a);
    const Tensor<T>& bv = val(b);
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] -= bv[i];
    Var o = binary(std::move(out), a, b);
    node(o).back = [o, a, b](Graph& g) {
      const Tensor<T>& go = g.grad_ro(o);
      if (g.needs_grad(a)) g.axpy(a, go, T(1));
      if (g.needs_grad(b)) g.axpy(b, go, T(-1));
    };
    return o;
  }

  Var mul(Var a, Var b) {
    check_same(a, b, "mul");
    Tensor<T> out = val(a);
    const Tensor<T>& bv = val(b);
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
    Var o = binary(std::move(out), a, b);
    node(o).back = [o, a, b](Graph& g) {
      const Tensor<T>& go = g.grad_ro(o);
      if (g.needs_grad(a)) {
        Tensor<T>& ga = g.grad_rw(a);
        const Tensor<T>& bv2 = g.val(b);
        for (std::int64_t i = 0; i < go.numel(); ++i) ga[i] += go[i] * bv2[i];
      }
      if (g.needs_grad(b)) {
        Tensor<T>& gb = g.grad_rw(b);
        const Tensor<T>& av2 = g.val(a);
        for (std::int64_t i = 0; i < go.numel(); ++i) gb[i] += go[i] * av2[i];
      }
    };
    return o;
  }

  Var scale(Var a, T k) {
    Tensor<T> out = val(a);
    for (auto& x : out.data) x *= k;
    Var o = unary(std::move(out), a);
    node(o).back = [o, a, k](Graph& g) {
      if (g.needs_grad(a)) g.axpy(a, g.grad_ro(o), k);
    };
    return o;
  }

  Var add_const(Var a, T c) {
    Tensor<T> out = val(a);
    for (auto& x : out.data) x += c;
    Var o = unary(std::move(out), a);
    node(o).back = [o, a](Graph& g) {
      if (g.needs_grad(a)) g.axpy(a, g.grad_ro(o), T(1));
    };
    return o;
  }

  Var relu(Var a) {
    Tensor<T> out = val(a);
    for (auto& x : out.data)
      if (x < T(0)) x = T(0);
    Var o = unary(std::move(out), a);
    node(o).back = [o, a](Graph& g) {
      if (!g.needs_grad(a)) return;
      const Tensor<T>& go = g.grad_ro(o);
      const Tensor<T>& av = g.val(a);
      Tensor<T>& ga = g.grad_rw(a);
      for (std::int64_t i = 0; i < go.numel(); ++i)
        if (av[i] > T(0)) ga[i] += go[i];
    };
    return o;
  }

  Var sigmoid(Var a) {
    Tensor<T> out = val(a);
    for (auto& x : out.data) {
      if (x >= T(0)) {
        const T e = std::exp(-x);
        x = T(1) / (T(1) + e);
      } else {
        const T e = std::exp(x);
        x = e / (T(1) + e);
      }
    }
    Var o = unary(std::move(out), a);
    node(o).back = [o, a](Graph& g) {
      if (!g.needs_grad(a)) return;
      const Tensor<T>& go = g.grad_ro(o);
      const Tensor<T>& ov = g.val(o);
      Tensor<T>& ga = g.grad_rw(a);
      for (std::int64_t i = 0; i < go.numel(); ++i) ga[i] += go[i] * ov[i] * (T(1) - ov[i]);
    };
    return o;
  }

  // Natural log; callers clamp their inputs away from zero.
  Var log_(Var a) {
    Tensor<T> out = val(a);
    for (auto& x : out.data) x = std::log(x);
    Var o = unary(std::move(out), a);
    node(o).back = [o, a](Graph& g) {
      if (!g.needs_grad(a)) return;
      const Tensor<T>& go = g.grad_ro(o);
      const Tensor<T>& av = g.val(a);
      Tensor<T>& ga = g.grad_rw(a);
      for (std::int64_t i = 0; i < go.numel(); ++i) ga[i] += go[i] / av[i];
    };
    return o;
  }

  Var sqrt_(Var a) {
    Tensor<T> out = val(a);
    for (auto& x : out.data) x = std::sqrt(x);
    Var o = unary(std::move(out), a);
    node(o).back = [o, a](Graph& g) {
      if (!g.needs_grad(a)) return;
      const Tensor<T>& go = g.grad_ro(o);
      const Tensor<T>& ov = g.val(o);
      Tensor<T>& ga = g.grad_rw(a);
      for (std::int64_t i = 0; i < go.numel(); ++i) ga[i] += go[i] / (T(2) * ov[i]);
    };
    return o;
  }

  // Clamp with pass-through gradient strictly inside the interval.
  Var clamp(Var a, T lo, T hi) {
    Tensor<T> out = val(a);
    for (auto& x : out.data) x = std::min(hi, std::max(lo, x));
    Var o = unary(std::move(out), a);
    node(o).back = [o, a, lo, hi](Graph& g) {
      if (!g.needs_grad(a)) return;
      const Tensor<T>& go = g.grad_ro(o);
      const Tensor<T>& av = g.val(a);
      Tensor<T>& ga = g.grad_rw(a);
      for (std::int64_t i = 0; i < go.numel(); ++i)
        if (av[i] > lo && av[i] < hi) ga[i] += go[i];
    };
    return o;
  }

  Var matmul(Var a, Var b) {
    const Tensor<T>& av = val(a);
    const Tensor<T>& bv = val(b);
    if (av.ndim() != 2 || bv.ndim() != 2 || av.dim(1) != bv.dim(0))
      throw ContractError("matmul: incompatible shapes " + shape_str(av.shape) + " x " + shape_str(bv.shape));
    const int m = av.dim(0), k = av.dim(1), n = bv.dim(1);
    Tensor<T> out({m, n});
    detail::gemm_nn_acc(av.ptr(), bv.ptr(), out.ptr(), m, k, n);
    Var o = binary(std::move(out), a, b);
    node(o).back = [o, a, b, m, k, n](Graph& g) {
      const Tensor<T>& go = g.grad_ro(o);
      if (g.needs_grad(a))
        detail::gemm_nt_acc(go.ptr(), g.val(b).ptr(), g.grad_rw(a).ptr(), m, n, k);
      if (g.needs_grad(b))
        detail::gemm_tn_acc(g.val(a).ptr(), go.ptr(), g.grad_rw(b).ptr(), m, k, n);
    };
    return o;
  }

  // a[m,n] + bias[m], broadcast across columns.
  Var add_bias_rows(Var a, Var bias) {
    const Tensor<T>& av = val(a);
    const Tensor<T>& bv = val(bias);
    if (av.ndim() != 2 || bv.numel() != av.dim(0)) throw ContractError("add_bias_rows: shape mismatch");
    Tensor<T> out = av;
    const int m = av.dim(0), n = av.dim(1);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) out.at2(i, j) += bv[i];
    Var o = binary(std::move(out), a, bias);
    node(o).back = [o, a, bias, m, n](Graph& g) {
      const Tensor<T>& go = g.grad_ro(o);
      if (g.needs_grad(a)) g.axpy(a, go, T(1));
      if (g.needs_grad(bias)) {
        Tensor<T>& gb = g.grad_rw(bias);
        for (int i = 0; i < m; ++i) {
          T acc = 0;
          for (int j = 0; j < n; ++j) acc += go.at2(i, j);
          gb[i] += acc;
        }
      }
    };
    return o;
  }

  // a[m,n] + bias[n], broadcast across rows.
  Var add_bias_cols(Var a, Var bias) {
    const Tensor<T>& av = val(a);
    const Tensor<T>& bv = val(bias);
    if (av.ndim() != 2 || bv.numel() != av.dim(1)) throw ContractError("add_bias_cols: shape mismatch");
    Tensor<T> out = av;
    const int m = av.dim(0), n = av.dim(1);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) out.at2(i, j) += bv[j];
    Var o = binary(std::move(out), a, bias);
    node(o).back = [o, a, bias, m, n](Graph& g) {
      const Tensor<T>& go = g.grad_ro(o);
      if (g.needs_grad(a)) g.axpy(a, go, T(1));
      if (g.needs_grad(bias)) {
        Tensor<T>& gb = g.grad_rw(bias);
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j) gb[j] += go.at2(i, j);
      }
    };
    return o;
  }

  // 2-D convolution, NCHW single sample: x[C,H,W], w[O,C,kh,kw], b[O].
  // Lowered to im2col + GEMM; the column matrix is kept for the backward pass.
  Var conv2d(Var x, Var w, Var b, int stride, int pad) {
    const Tensor<T>& xv = val(x);
    const Tensor<T>& wv = val(w);
    if (xv.ndim() != 3 || wv.ndim() != 4 || wv.dim(1) != xv.dim(0))
      throw ContractError("conv2d: incompatible shapes");
    const int ci = xv.dim(0), h = xv.dim(1), wd = xv.dim(2);
    const int co = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
    const int ho = (h + 2 * pad - kh) / stride + 1;
    const int wo = (wd + 2 * pad - kw) / stride + 1;
    if (ho <= 0 || wo <= 0) throw ContractError("conv2d: output would be empty");

    auto col = std::make_shared<Tensor<T>>(std::vector<int>{ci * kh * kw, ho * wo});
    im2col(xv, *col, kh, kw, stride, pad, ho, wo);
    Tensor<T> out({co, ho, wo});
    detail::gemm_nn_acc(wv.ptr(), col->ptr(), out.ptr(), co, ci * kh * kw, ho * wo);
    const Tensor<T>& bv = val(b);
    if (bv.numel() != co) throw ContractError("conv2d: bias size mismatch");
    for (int oc = 0; oc < co; ++oc) {
      T* op = out.ptr() + static_cast<std::int64_t>(oc) * ho * wo;
      for (int i = 0; i < ho * wo; ++i) op[i] += bv[oc];
    }

    Var o = push(std::move(out), needs_grad(x) || needs_grad(w) || needs_grad(b), nullptr);
    node(o).back = [o, x, w, b, col, ci, h, wd, co, kh, kw, ho, wo, stride, pad](Graph& g) {
      const Tensor<T>& go = g.grad_ro(o);
      const int kdim = ci * kh * kw, cells = ho * wo;
      if (g.needs_grad(b)) {
        Tensor<T>& gb = g.grad_rw(b);
        for (int oc = 0; oc < co; ++oc) {
          const T* gp = go.ptr() + static_cast<std::int64_t>(oc) * cells;
          T acc = 0;
          for (int i = 0; i < cells; ++i) acc += gp[i];
          gb[oc] += acc;
        }
      }
      if (g.needs_grad(w))
        detail::gemm_nt_acc(go.ptr(), col->ptr(), g.grad_rw(w).ptr(), co, cells, kdim);
      if (g.needs_grad(x)) {
        Tensor<T> dcol({kdim, cells});
        detail::gemm_tn_acc(g.val(w).ptr(), go.ptr(), dcol.ptr(), co, kdim, cells);
        col2im_acc(dcol, g.grad_rw(x), ci, h, wd, kh, kw, stride, pad, ho, wo);
      }
    };
    return o;
  }

  Var reshape(Var a, std::vector<int> shape) {
    if (Tensor<T>::numel_of(shape) != val(a).numel()) throw ContractError("reshape: element count mismatch");
    Tensor<T> out(std::move(shape), val(a).data);
    Var o = unary(std::move(out), a);
    node(o).back = [o, a](Graph& g) {
      if (g.needs_grad(a)) g.axpy(a, g.grad_ro(o), T(1));
    };
    return o;
  }

  Var transpose(Var a) {
    const Tensor<T>& av = val(a);
    if (av.ndim() != 2) throw ContractError("transpose: 2-D only");
    const int m = av.dim(0), n = av.dim(1);
    Tensor<T> out({n, m});
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) out.at2(j, i) = av.at2(i, j);
    Var o = unary(std::move(out), a);
    node(o).back = [o, a, m, n](Graph& g) {
      if (!g.needs_grad(a)) return;
      const Tensor<T>& go = g.grad_ro(o);
      Tensor<T>& ga = g.grad_rw(a);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) ga.at2(i, j) += go.at2(j, i);
    };
    return o;
  }

  // Concatenate 3-D tensors along axis 0 (channels) or axis 1 (depth rows).
  Var concat(const std::vector<Var>& parts, int axis) {
    if (parts.empty()) throw ContractError("concat: no inputs");
    if (axis != 0 && axis != 1) throw ContractError("concat: axis must be 0 or 1");
    const Tensor<T>& first = val(parts[0]);
    if (first.ndim() != 3) throw ContractError("concat: 3-D tensors only");
    int total = 0;
    bool any_grad = false;
    for (Var p : parts) {
      const Tensor<T>& pv = val(p);
      for (int d = 0; d < 3; ++d)
        if (d != axis && pv.dim(d) != first.dim(d)) throw ContractError("concat: shape mismatch");
      total += pv.dim(axis);
      any_grad = any_grad || needs_grad(p);
    }
    std::vector<int> oshape = first.shape;
    oshape[static_cast<size_t>(axis)] = total;
    Tensor<T> out(oshape);
    std::int64_t offset = 0;
    if (axis == 0) {
      for (Var p : parts) {
        const Tensor<T>& pv = val(p);
        std::copy(pv.data.begin(), pv.data.end(), out.data.begin() + offset);
        offset += pv.numel();
      }
    } else {
      const int c = first.dim(0), w = first.dim(2);
      for (Var p : parts) {
        const Tensor<T>& pv = val(p);
        const int zp = pv.dim(1);
        for (int cc = 0; cc < c; ++cc)
          std::copy(pv.ptr() + static_cast<std::int64_t>(cc) * zp * w,
                    pv.ptr() + static_cast<std::int64_t>(cc + 1) * zp * w,
                    out.ptr() + (static_cast<std::int64_t>(cc) * total * w) + offset * w);
        offset += zp;
      }
    }
    std::vector<Var> ps = parts;
    Var o = push(std::move(out), any_grad, nullptr);
    node(o).back = [o, ps, axis](Graph& g) {
      const Tensor<T>& go = g.grad_ro(o);
      std::int64_t offset = 0;
      if (axis == 0) {
        for (Var p : ps) {
          const std::int64_t n = g.val(p).numel();
          if (g.needs_grad(p)) {
            Tensor<T>& gp = g.grad_rw(p);
            for (std::int64_t i = 0; i < n; ++i) gp[i] += go[offset + i];
          }
          offset += n;
        }
      } else {
        const int c = go.dim(0), total = go.dim(1), w = go.dim(2);
        for (Var p : ps) {
          const Tensor<T>& pv = g.val(p);
          const int zp = pv.dim(1);
          if (g.needs_grad(p)) {
            Tensor<T>& gp = g.grad_rw(p);
            for (int cc = 0; cc < c; ++cc) {
              const T* src = go.ptr() + static_cast<std::int64_t>(cc) * total * w + offset * w;
              T* dst = gp.ptr() + static_cast<std::int64_t>(cc) * zp * w;
              for (std::int64_t i = 0; i < static_cast<std::int64_t>(zp) * w; ++i) dst[i] += src[i];
            }
          }
          offset += zp;
        }
      }
    };
    return o;
  }

  // Differentiable application of a precomputed resample map (see geometry.hpp).
  Var bilinear(Var src, const ResampleMap& m) {
    Tensor<T> out = bilinear_sample(val(src), m);
    const ResampleMap* mp = &m;
    Var o = unary(std::move(out), src);
    node(o).back = [o, src, mp](Graph& g) {
      if (!g.needs_grad(src)) return;
      const Tensor<T>& go = g.grad_ro(o);
      Tensor<T>& gs = g.grad_rw(src);
      const int channels = g.val(src).dim(0);
      const std::int64_t cells = mp->cells();
      const std::int64_t plane = static_cast<std::int64_t>(mp->depth_bins) * mp->src_cols;
      for (std::int64_t k = 0; k < cells; ++k) {
        if (!mp->valid[static_cast<size_t>(k)]) continue;
        double df = mp->d_f[static_cast<size_t>(k)];
        double uf = mp->u_f[static_cast<size_t>(k)];
        int d0 = static_cast<int>(std::floor(df));
        int u0 = static_cast<int>(std::floor(uf));
        if (d0 >= mp->depth_bins - 1) d0 = mp->depth_bins - 2;
        if (u0 >= mp->src_cols - 1) u0 = mp->src_cols - 2;
        if (d0 < 0) d0 = 0;
        if (u0 < 0) u0 = 0;
        const double fd = df - d0, fu = uf - u0;
        const T w00 = static_cast<T>((1 - fd) * (1 - fu)), w01 = static_cast<T>((1 - fd) * fu);
        const T w10 = static_cast<T>(fd * (1 - fu)), w11 = static_cast<T>(fd * fu);
        const std::int64_t s00 = static_cast<std::int64_t>(d0) * mp->src_cols + u0;
        const bool has_d1 = mp->depth_bins > 1, has_u1 = mp->src_cols > 1;
        for (int c = 0; c < channels; ++c) {
          const T gv = go.ptr()[c * cells + k];
          T* gp = gs.ptr() + c * plane;
          gp[s00] += w00 * gv;
          if (has_u1) gp[s00 + 1] += w01 * gv;
          if (has_d1) gp[s00 + mp->src_cols] += w10 * gv;
          if (has_d1 && has_u1) gp[s00 + mp->src_cols + 1] += w11 * gv;
        }
      }
    };
    return o;
  }

  // Flat gather: out[k] = a.data[idx[k]]. Used for validity masking and the
  // hard-mined negative set; the index set is fixed at selection time.
  Var gather(Var a, std::vector<std::int64_t> idx) {
    const Tensor<T>& av = val(a);
    Tensor<T> out({static_cast<int>(idx.size())});
    for (size_t i = 0; i < idx.size(); ++i) {
      if (idx[i] < 0 || idx[i] >= av.numel()) throw ContractError("gather: index out of range");
      out[static_cast<std::int64_t>(i)] = av[idx[i]];
    }
    auto ids = std::make_shared<std::vector<std::int64_t>>(std::move(idx));
    Var o = unary(std::move(out), a);
    node(o).back = [o, a, ids](Graph& g) {
      if (!g.needs_grad(a)) return;
      const Tensor<T>& go = g.grad_ro(o);
      Tensor<T>& ga = g.grad_rw(a);
      for (size_t i = 0; i < ids->size(); ++i) ga[(*ids)[i]] += go[static_cast<std::int64_t>(i)];
    };
    return o;
  }

  Var sum(Var a) {
    T acc = 0;
    for (const T& x : val(a).data) acc += x;
    Var o = unary(Tensor<T>({1}, std::vector<T>{acc}), a);
    node(o).back = [o, a](Graph& g) {
      if (!g.needs_grad(a)) return;
      const T gv = g.grad_ro(o)[0];
      Tensor<T>& ga = g.grad_rw(a);
      for (auto& x : ga.data) x += gv;
    };
    return o;
  }

  Var mean(Var a) {
    const std::int64_t n = val(a).numel();
    if (n == 0) throw ContractError("mean: empty tensor");
    return scale(sum(a), T(1) / static_cast<T>(n));
  }

  // Weighted sum with constant weights.
  Var weighted_sum(Var a, Tensor<T> w) {
    const Tensor<T>& av = val(a);
    if (av.numel() != w.numel()) throw ContractError("weighted_sum: size mismatch");
    T acc = 0;
    for (std::int64_t i = 0; i < av.numel(); ++i) acc += av[i] * w[i];
    auto wp = std::make_shared<Tensor<T>>(std::move(w));
    Var o = unary(Tensor<T>({1}, std::vector<T>{acc}), a);
    node(o).back = [o, a, wp](Graph& g) {
      if (!g.needs_grad(a)) return;
      const T gv = g.grad_ro(o)[0];
      Tensor<T>& ga = g.grad_rw(a);
      for (std::int64_t i = 0; i < ga.numel(); ++i) ga[i] += gv * (*wp)[i];
    };
    return o;
  }

  // Row-wise softmax of a 2-D tensor.
  Var softmax_rows(Var a) {
    const Tensor<T>& av = val(a);
    if (av.ndim() != 2) throw ContractError("softmax_rows: 2-D only");
    const int m = av.dim(0), n = av.dim(1);
    Tensor<T> out({m, n});
    for (int i = 0; i < m; ++i) {
      T mx = av.at2(i, 0);
      for (int j = 1; j < n; ++j) mx = std::max(mx, av.at2(i, j));
      T z = 0;
      for (int j = 0; j < n; ++j) {
        const T e = std::exp(av.at2(i, j) - mx);
        out.at2(i, j) = e;
        z += e;
      }
      for (int j = 0; j < n; ++j) out.at2(i, j) /= z;
    }
    Var o = unary(std::move(out), a);
    node(o).back = [o, a, m, n](Graph& g) {
      if (!g.needs_grad(a)) return;
      const Tensor<T>& go = g.grad_ro(o);
      const Tensor<T>& ov = g.val(o);
      Tensor<T>& ga = g.grad_rw(a);
      for (int i = 0; i < m; ++i) {
        T dot = 0;
        for (int j = 0; j < n; ++j) dot += go.at2(i, j) * ov.at2(i, j);
        for (int j = 0; j < n; ++j) ga.at2(i, j) += ov.at2(i, j) * (go.at2(i, j) - dot);
      }
    };
    return o;
  }

  // Reverse sweep from a scalar root. Gradient buffers stay valid until the
  // next backward() call on this graph.
  void backward(Var root) {
    if (val(root).numel() != 1) throw ContractError("backward: root must be a scalar");
    for (auto& nd : nodes_) {
      if (nd.grad.numel() != 0) nd.grad = Tensor<T>();
    }
    grad_rw(root)[0] = T(1);
    for (int i = root.id; i >= 0; --i) {
      Node& nd = nodes_[static_cast<size_t>(i)];
      if (nd.back && nd.grad.numel() != 0) nd.back(*this);
    }
  }

  Tensor<T>& grad_rw(Var v) {
    Node& nd = nodes_[static_cast<size_t>(v.id)];
    if (nd.grad.numel() == 0) nd.grad = Tensor<T>(nd.val.shape);
    return nd.grad;
  }

 private:
  Node& node(Var v) { return nodes_[static_cast<size_t>(v.id)]; }

  const Tensor<T>& grad_ro(Var v) const { return nodes_[static_cast<size_t>(v.id)].grad; }

  void axpy(Var v, const Tensor<T>& g, T k) {
    Tensor<T>& dst = grad_rw(v);
    for (std::int64_t i = 0; i < g.numel(); ++i) dst[i] += k * g[i];
  }

  void check_same(Var a, Var b, const char* what) const {
    if (!val(a).same_shape(val(b)))
      throw ContractError(std::string(what) + ": shape mismatch " + shape_str(val(a).shape) + " vs " +
                          shape_str(val(b).shape));
  }

  Var push(Tensor<T> v, bool needs, std::function<void(Graph&)> back) {
    nodes_.push_back(Node{std::move(v), Tensor<T>(), needs, std::move(back)});
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  Var unary(Tensor<T> out, Var a) { return push(std::move(out), needs_grad(a), nullptr); }
  Var binary(Tensor<T> out, Var a, Var b) {
    return push(std::move(out), needs_grad(a) || needs_grad(b), nullptr);
  }

  static void im2col(const Tensor<T>& x, Tensor<T>& col, int kh, int kw, int stride, int pad, int ho,
                     int wo) {
    const int ci = x.dim(0), h = x.dim(1), w = x.dim(2);
    T* cp = col.ptr();
    for (int c = 0; c < ci; ++c) {
      const T* xp = x.ptr() + static_cast<std::int64_t>(c) * h * w;
      for (int ki = 0; ki < kh; ++ki) {
        for (int kj = 0; kj < kw; ++kj) {
          for (int oi = 0; oi < ho; ++oi) {
            const int ii = oi * stride + ki - pad;
            for (int oj = 0; oj < wo; ++oj) {
              const int jj = oj * stride + kj - pad;
              *cp++ = (ii >= 0 && ii < h && jj >= 0 && jj < w) ? xp[ii * w + jj] : T(0);
            }
          }
        }
      }
    }
  }

  static void col2im_acc(const Tensor<T>& col, Tensor<T>& gx, int ci, int h, int w, int kh, int kw,
                         int stride, int pad, int ho, int wo) {
    const T* cp = col.ptr();
    for (int c = 0; c < ci; ++c) {
      T* gp = gx.ptr() + static_cast<std::int64_t>(c) * h * w;
      for (int ki = 0; ki < kh; ++ki) {
        for (int kj = 0; kj < kw; ++kj) {
          for (int oi = 0; oi < ho; ++oi) {
            const int ii = oi * stride + ki - pad;
            for (int oj = 0; oj < wo; ++oj) {
              const int jj = oj * stride + kj - pad;
              if (ii >= 0 && ii < h && jj >= 0 && jj < w) gp[ii * w + jj] += *cp;
              ++cp;
            }
          }
        }
      }
    }
  }

  std::vector<Node> nodes_;
};

}  // namespace hft
