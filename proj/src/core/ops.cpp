#include "pmf/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "pmf/tape.hpp"

namespace pmf::ops {

namespace {

using detail::TensorImpl;
using ImplPtr = std::shared_ptr<TensorImpl>;

bool needs_grad(const Tensor& t) { return t.defined() && t.requires_grad(); }

// The tape to record onto, if any input needs grad and recording is live.
Tape* recorder(std::initializer_list<const Tensor*> inputs) {
  Tape* tape = active_tape();
  if (!tape) return nullptr;
  for (const Tensor* t : inputs) {
    if (needs_grad(*t)) return tape;
  }
  return nullptr;
}

void record(Tape* tape, OpKind kind, Tensor& out, std::vector<ImplPtr> inputs,
            std::size_t saved_bytes, std::function<void(const Buffer&)> adjoint) {
  out.impl()->requires_grad = true;
  out.impl()->leaf = false;
  tape->append(TapeNode{kind, std::move(inputs), out.impl(), saved_bytes, std::move(adjoint)});
}

template <class T>
std::span<T> grad_of(TensorImpl& impl) {
  if (!impl.grad) impl.grad = std::vector<T>(shape_numel(impl.shape), T(0));
  return std::get<std::vector<T>>(*impl.grad);
}

template <class T>
std::span<const T> view(const Buffer& b) {
  return std::get<std::vector<T>>(b);
}

template <class T>
std::span<const T> vals(const ImplPtr& p) {
  return p->buf<T>();
}

void require_2d(const Tensor& t, const char* op) {
  if (!t.defined()) throw Error(std::string(op) + ": undefined input");
  if (t.dim() != 2) {
    throw Error(std::string(op) + ": expected a 2-D tensor, got " + shape_str(t.shape()));
  }
}

void require_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
  if (a.dtype() != b.dtype()) throw Error(std::string(op) + ": dtype mismatch");
}

template <class T>
Tensor empty_like(std::size_t rows, std::size_t cols) {
  return Tensor::from_buffer(std::vector<T>(rows * cols, T(0)), Shape{rows, cols});
}

// c(n x m) += a(n x k) * b(k x m)
template <class T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    T* ci = c + i * m;
    const T* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T s = ai[p];
      const T* bp = b + p * m;
      for (std::size_t j = 0; j < m; ++j) ci[j] += s * bp[j];
    }
  }
}

template <class T>
std::vector<T> transpose(const T* a, std::size_t rows, std::size_t cols) {
  std::vector<T> t(rows * cols);
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) t[j * rows + i] = a[i * cols + j];
  }
  return t;
}

// c(n x k) += a(n x m) * b(k x m)^T
template <class T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t n, std::size_t m, std::size_t k) {
  const auto bt = transpose(b, k, m);
  gemm_nn(a, bt.data(), c, n, m, k);
}

// c(k x m) += a(n x k)^T * b(n x m)
template <class T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    const T* ai = a + i * k;
    const T* bi = b + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const T s = ai[p];
      T* cp = c + p * m;
      for (std::size_t j = 0; j < m; ++j) cp[j] += s * bi[j];
    }
  }
}

template <class T>
void check_finite(std::span<const T> v, const char* op) {
  for (T x : v) {
    if (!std::isfinite(x)) throw Error(std::string(op) + ": non-finite input");
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  require_same_dtype(a, b, "matmul");
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  if (b.rows() != k) {
    throw Error("matmul: inner dims differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  return visit_dtype(a.dtype(), [&]<class T>() {
    Tensor out = empty_like<T>(n, m);
    gemm_nn(a.data<T>().data(), b.data<T>().data(), out.data<T>().data(), n, k, m);
    if (Tape* tape = recorder({&a, &b})) {
      const bool ga = needs_grad(a), gb = needs_grad(b);
      const std::size_t saved = (ga ? b.nbytes() : 0) + (gb ? a.nbytes() : 0);
      ImplPtr pa = a.impl(), pb = b.impl();
      record(tape, OpKind::matmul, out, {pa, pb}, saved, [pa, pb, n, k, m](const Buffer& gbuf) {
        auto g = view<T>(gbuf);
        if (pa->requires_grad) gemm_nt(g.data(), vals<T>(pb).data(), grad_of<T>(*pa).data(), n, m, k);
        if (pb->requires_grad) gemm_tn(vals<T>(pa).data(), g.data(), grad_of<T>(*pb).data(), n, k, m);
      });
    }
    return out;
  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  require_2d(x, "linear");
  require_2d(w, "linear");
  require_same_dtype(x, w, "linear");
  const std::size_t n = x.rows(), k = x.cols(), m = w.cols();
  if (w.rows() != k) {
    throw Error("linear: input width " + std::to_string(k) + " does not match weight " +
                shape_str(w.shape()));
  }
  if (bias.defined()) {
    require_same_dtype(x, bias, "linear");
    if (bias.numel() != m) throw Error("linear: bias length mismatch");
  }
  return visit_dtype(x.dtype(), [&]<class T>() {
    Tensor out = empty_like<T>(n, m);
    auto o = out.data<T>();
    if (bias.defined()) {
      auto bv = bias.data<T>();
      for (std::size_t i = 0; i < n; ++i) std::copy(bv.begin(), bv.end(), o.begin() + i * m);
    }
    gemm_nn(x.data<T>().data(), w.data<T>().data(), o.data(), n, k, m);
    if (Tape* tape = recorder({&x, &w, &bias})) {
      const bool gx = needs_grad(x), gw = needs_grad(w);
      const std::size_t saved = (gx ? w.nbytes() : 0) + (gw ? x.nbytes() : 0);
      ImplPtr px = x.impl(), pw = w.impl(), pb = bias.defined() ? bias.impl() : nullptr;
      std::vector<ImplPtr> inputs{px, pw};
      if (pb) inputs.push_back(pb);
      record(tape, OpKind::linear, out, std::move(inputs), saved,
             [px, pw, pb, n, k, m](const Buffer& gbuf) {
               auto g = view<T>(gbuf);
               if (px->requires_grad) {
                 gemm_nt(g.data(), vals<T>(pw).data(), grad_of<T>(*px).data(), n, m, k);
               }
               if (pw->requires_grad) {
                 gemm_tn(vals<T>(px).data(), g.data(), grad_of<T>(*pw).data(), n, k, m);
               }
               if (pb && pb->requires_grad) {
                 auto gb = grad_of<T>(*pb);
                 for (std::size_t i = 0; i < n; ++i) {
                   for (std::size_t j = 0; j < m; ++j) gb[j] += g[i * m + j];
                 }
               }
             });
    }
    return out;
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_dtype(a, b, "add");
  if (a.shape() != b.shape()) {
    throw Error("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  return visit_dtype(a.dtype(), [&]<class T>() {
    auto av = a.data<T>(), bv = b.data<T>();
    std::vector<T> o(av.size());
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] + bv[i];
    Tensor out = Tensor::from_buffer(std::move(o), a.shape());
    if (Tape* tape = recorder({&a, &b})) {
      ImplPtr pa = a.impl(), pb = b.impl();
      record(tape, OpKind::add, out, {pa, pb}, 0, [pa, pb](const Buffer& gbuf) {
        auto g = view<T>(gbuf);
        for (auto* p : {pa.get(), pb.get()}) {
          if (!p->requires_grad) continue;
          auto gp = grad_of<T>(*p);
          for (std::size_t i = 0; i < g.size(); ++i) gp[i] += g[i];
        }
      });
    }
    return out;
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_dtype(a, b, "mul");
  if (a.shape() != b.shape()) {
    throw Error("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  return visit_dtype(a.dtype(), [&]<class T>() {
    auto av = a.data<T>(), bv = b.data<T>();
    std::vector<T> o(av.size());
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] * bv[i];
    Tensor out = Tensor::from_buffer(std::move(o), a.shape());
    if (Tape* tape = recorder({&a, &b})) {
      const std::size_t saved = (needs_grad(a) ? b.nbytes() : 0) + (needs_grad(b) ? a.nbytes() : 0);
      ImplPtr pa = a.impl(), pb = b.impl();
      record(tape, OpKind::mul, out, {pa, pb}, saved, [pa, pb](const Buffer& gbuf) {
        auto g = view<T>(gbuf);
        if (pa->requires_grad) {
          auto gp = grad_of<T>(*pa);
          auto bv = vals<T>(pb);
          for (std::size_t i = 0; i < g.size(); ++i) gp[i] += g[i] * bv[i];
        }
        if (pb->requires_grad) {
          auto gp = grad_of<T>(*pb);
          auto av = vals<T>(pa);
          for (std::size_t i = 0; i < g.size(); ++i) gp[i] += g[i] * av[i];
        }
      });
    }
    return out;
  });
}

Tensor scale(const Tensor& a, double s) {
  return visit_dtype(a.dtype(), [&]<class T>() {
    auto av = a.data<T>();
    const T st = static_cast<T>(s);
    std::vector<T> o(av.size());
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] * st;
    Tensor out = Tensor::from_buffer(std::move(o), a.shape());
    if (Tape* tape = recorder({&a})) {
      ImplPtr pa = a.impl();
      record(tape, OpKind::scale, out, {pa}, 0, [pa, st](const Buffer& gbuf) {
        auto g = view<T>(gbuf);
        auto gp = grad_of<T>(*pa);
        for (std::size_t i = 0; i < g.size(); ++i) gp[i] += g[i] * st;
      });
    }
    return out;
  });
}

Tensor relu(const Tensor& x) {
  return visit_dtype(x.dtype(), [&]<class T>() {
    auto xv = x.data<T>();
    std::vector<T> o(xv.size());
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = xv[i] > T(0) ? xv[i] : T(0);
    Tensor out = Tensor::from_buffer(std::move(o), x.shape());
    if (Tape* tape = recorder({&x})) {
      ImplPtr px = x.impl();
      record(tape, OpKind::relu, out, {px}, x.nbytes(), [px](const Buffer& gbuf) {
        auto g = view<T>(gbuf);
        auto xv = vals<T>(px);
        auto gp = grad_of<T>(*px);
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (xv[i] > T(0)) gp[i] += g[i];
        }
      });
    }
    return out;
  });
}

Tensor gelu(const Tensor& x) {
  return visit_dtype(x.dtype(), [&]<class T>() {
    constexpr T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
    auto xv = x.data<T>();
    std::vector<T> o(xv.size());
    for (std::size_t i = 0; i < o.size(); ++i) {
      o[i] = T(0.5) * xv[i] * (T(1) + std::erf(xv[i] * inv_sqrt2));
    }
    Tensor out = Tensor::from_buffer(std::move(o), x.shape());
    if (Tape* tape = recorder({&x})) {
      ImplPtr px = x.impl();
      record(tape, OpKind::gelu, out, {px}, x.nbytes(), [px](const Buffer& gbuf) {
        constexpr T inv_sqrt_2pi = std::numbers::inv_sqrtpi_v<T> * inv_sqrt2;
        auto g = view<T>(gbuf);
        auto xv = vals<T>(px);
        auto gp = grad_of<T>(*px);
        for (std::size_t i = 0; i < g.size(); ++i) {
          const T v = xv[i];
          const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
          const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
          gp[i] += g[i] * (cdf + v * pdf);
        }
      });
    }
    return out;
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  require_2d(x, "layer_norm");
  require_same_dtype(x, gain, "layer_norm");
  require_same_dtype(x, bias, "layer_norm");
  const std::size_t n = x.rows(), d = x.cols();
  if (gain.numel() != d || bias.numel() != d) {
    throw Error("layer_norm: gain/bias length must equal " + std::to_string(d));
  }
  return visit_dtype(x.dtype(), [&]<class T>() {
    auto xv = x.data<T>();
    auto gv = gain.data<T>();
    auto bv = bias.data<T>();
    std::vector<T> o(xv.size());
    for (std::size_t i = 0; i < n; ++i) {
      const T* row = xv.data() + i * d;
      T mu = 0;
      for (std::size_t c = 0; c < d; ++c) mu += row[c];
      mu /= static_cast<T>(d);
      T var = 0;
      for (std::size_t c = 0; c < d; ++c) var += (row[c] - mu) * (row[c] - mu);
      var /= static_cast<T>(d);
      const T rstd = T(1) / std::sqrt(var + static_cast<T>(eps));
      for (std::size_t c = 0; c < d; ++c) o[i * d + c] = (row[c] - mu) * rstd * gv[c] + bv[c];
    }
    Tensor out = Tensor::from_buffer(std::move(o), x.shape());
    if (Tape* tape = recorder({&x, &gain, &bias})) {
      const std::size_t saved = x.nbytes() + (needs_grad(x) ? gain.nbytes() : 0);
      ImplPtr px = x.impl(), pg = gain.impl(), pb = bias.impl();
      record(tape, OpKind::layer_norm, out, {px, pg, pb}, saved,
             [px, pg, pb, n, d, eps](const Buffer& gbuf) {
               auto g = view<T>(gbuf);
               auto xv = vals<T>(px);
               auto gv = vals<T>(pg);
               std::vector<T> xhat(d), dxhat(d);
               for (std::size_t i = 0; i < n; ++i) {
                 const T* row = xv.data() + i * d;
                 const T* gr = g.data() + i * d;
                 T mu = 0;
                 for (std::size_t c = 0; c < d; ++c) mu += row[c];
                 mu /= static_cast<T>(d);
                 T var = 0;
                 for (std::size_t c = 0; c < d; ++c) var += (row[c] - mu) * (row[c] - mu);
                 var /= static_cast<T>(d);
                 const T rstd = T(1) / std::sqrt(var + static_cast<T>(eps));
                 for (std::size_t c = 0; c < d; ++c) xhat[c] = (row[c] - mu) * rstd;
                 if (pg->requires_grad) {
                   auto gg = grad_of<T>(*pg);
                   for (std::size_t c = 0; c < d; ++c) gg[c] += gr[c] * xhat[c];
                 }
                 if (pb->requires_grad) {
                   auto gb = grad_of<T>(*pb);
                   for (std::size_t c = 0; c < d; ++c) gb[c] += gr[c];
                 }
                 if (px->requires_grad) {
                   T mean_d = 0, mean_dx = 0;
                   for (std::size_t c = 0; c < d; ++c) {
                     dxhat[c] = gr[c] * gv[c];
                     mean_d += dxhat[c];
                     mean_dx += dxhat[c] * xhat[c];
                   }
                   mean_d /= static_cast<T>(d);
                   mean_dx /= static_cast<T>(d);
                   auto gx = grad_of<T>(*px).subspan(i * d, d);
                   for (std::size_t c = 0; c < d; ++c) {
                     gx[c] += rstd * (dxhat[c] - mean_d - xhat[c] * mean_dx);
                   }
                 }
               }
             });
    }
    return out;
  });
}

namespace {

// Attention weights for one head: probs (n x n), row-major. Masked keys get 0.
template <class T>
void head_probs(const T* q, const T* kt, std::size_t n, std::size_t d, std::size_t off,
                std::size_t dh, std::span<const std::uint8_t> key_mask, T scale, T* probs) {
  for (std::size_t i = 0; i < n; ++i) {
    T* pi = probs + i * n;
    std::fill(pi, pi + n, T(0));
    const T* qi = q + i * d + off;
    for (std::size_t c = 0; c < dh; ++c) {
      const T s = qi[c];
      const T* kc = kt + c * n;
      for (std::size_t j = 0; j < n; ++j) pi[j] += s * kc[j];
    }
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      if (key_mask[j]) mx = std::max(mx, pi[j] * scale);
    }
    T total = 0;
    for (std::size_t j = 0; j < n; ++j) {
      const T e = key_mask[j] ? std::exp(pi[j] * scale - mx) : T(0);
      pi[j] = e;
      total += e;
    }
    const T inv = T(1) / total;
    for (std::size_t j = 0; j < n; ++j) pi[j] *= inv;
  }
}

// Transposed column block [off, off+dh) of a (n x d) matrix: (dh x n).
template <class T>
std::vector<T> block_t(const T* a, std::size_t n, std::size_t d, std::size_t off, std::size_t dh) {
  std::vector<T> t(dh * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < dh; ++c) t[c * n + i] = a[i * d + off + c];
  }
  return t;
}

}  // namespace

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v,
                 std::span<const std::uint8_t> key_mask, std::size_t heads) {
  require_2d(q, "attention");
  require_same_dtype(q, k, "attention");
  require_same_dtype(q, v, "attention");
  if (q.shape() != k.shape() || q.shape() != v.shape()) {
    throw Error("attention: q, k, v shapes differ");
  }
  const std::size_t n = q.rows(), d = q.cols();
  if (heads == 0 || d % heads != 0) {
    throw Error("attention: width " + std::to_string(d) + " not divisible into " +
                std::to_string(heads) + " heads");
  }
  if (key_mask.size() != n) throw Error("attention: mask length differs from sequence length");
  if (std::none_of(key_mask.begin(), key_mask.end(), [](auto m) { return m != 0; })) {
    throw Error("attention: every key is masked");
  }
  const std::size_t dh = d / heads;
  std::vector<std::uint8_t> mask(key_mask.begin(), key_mask.end());
  return visit_dtype(q.dtype(), [&]<class T>() {
    const T sc = T(1) / std::sqrt(static_cast<T>(dh));
    auto qv = q.data<T>(), kv = k.data<T>(), vv = v.data<T>();
    std::vector<T> o(n * d, T(0));
    std::vector<T> probs(n * n);
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = h * dh;
      const auto kt = block_t(kv.data(), n, d, off, dh);
      head_probs(qv.data(), kt.data(), n, d, off, dh, mask, sc, probs.data());
      for (std::size_t i = 0; i < n; ++i) {
        T* oi = o.data() + i * d + off;
        for (std::size_t j = 0; j < n; ++j) {
          const T p = probs[i * n + j];
          if (p == T(0)) continue;
          const T* vj = vv.data() + j * d + off;
          for (std::size_t c = 0; c < dh; ++c) oi[c] += p * vj[c];
        }
      }
    }
    Tensor out = Tensor::from_buffer(std::move(o), q.shape());
    if (Tape* tape = recorder({&q, &k, &v})) {
      const std::size_t saved = q.nbytes() + k.nbytes() + v.nbytes();
      ImplPtr pq = q.impl(), pk = k.impl(), pv = v.impl();
      record(tape, OpKind::attention, out, {pq, pk, pv}, saved,
             [pq, pk, pv, mask = std::move(mask), n, d, dh, heads, sc](const Buffer& gbuf) {
               auto g = view<T>(gbuf);
               auto qv = vals<T>(pq), kv = vals<T>(pk), vv = vals<T>(pv);
               std::vector<T> probs(n * n), dp(n * n);
               for (std::size_t h = 0; h < heads; ++h) {
                 const std::size_t off = h * dh;
                 const auto kt = block_t(kv.data(), n, d, off, dh);
                 const auto vt = block_t(vv.data(), n, d, off, dh);
                 head_probs(qv.data(), kt.data(), n, d, off, dh, mask, sc, probs.data());
                 // dP = G V^T
                 std::fill(dp.begin(), dp.end(), T(0));
                 for (std::size_t i = 0; i < n; ++i) {
                   const T* gi = g.data() + i * d + off;
                   T* dpi = dp.data() + i * n;
                   for (std::size_t c = 0; c < dh; ++c) {
                     const T s = gi[c];
                     const T* vc = vt.data() + c * n;
                     for (std::size_t j = 0; j < n; ++j) dpi[j] += s * vc[j];
                   }
                 }
                 if (pv->requires_grad) {
                   auto gv = grad_of<T>(*pv);
                   for (std::size_t i = 0; i < n; ++i) {
                     const T* gi = g.data() + i * d + off;
                     for (std::size_t j = 0; j < n; ++j) {
                       const T p = probs[i * n + j];
                       if (p == T(0)) continue;
                       T* gvj = gv.data() + j * d + off;
                       for (std::size_t c = 0; c < dh; ++c) gvj[c] += p * gi[c];
                     }
                   }
                 }
                 // dS = P * (dP - rowsum(P * dP)), scaled; reuse dp storage.
                 for (std::size_t i = 0; i < n; ++i) {
                   T* dpi = dp.data() + i * n;
                   const T* pi = probs.data() + i * n;
                   T dot = 0;
                   for (std::size_t j = 0; j < n; ++j) dot += pi[j] * dpi[j];
                   for (std::size_t j = 0; j < n; ++j) dpi[j] = pi[j] * (dpi[j] - dot) * sc;
                 }
                 if (pq->requires_grad) {
                   auto gq = grad_of<T>(*pq);
                   for (std::size_t i = 0; i < n; ++i) {
                     T* gqi = gq.data() + i * d + off;
                     for (std::size_t j = 0; j < n; ++j) {
                       const T s = dp[i * n + j];
                       if (s == T(0)) continue;
                       const T* kj = kv.data() + j * d + off;
                       for (std::size_t c = 0; c < dh; ++c) gqi[c] += s * kj[c];
                     }
                   }
                 }
                 if (pk->requires_grad) {
                   auto gk = grad_of<T>(*pk);
                   for (std::size_t i = 0; i < n; ++i) {
                     const T* qi = qv.data() + i * d + off;
                     for (std::size_t j = 0; j < n; ++j) {
                       const T s = dp[i * n + j];
                       if (s == T(0)) continue;
                       T* gkj = gk.data() + j * d + off;
                       for (std::size_t c = 0; c < dh; ++c) gkj[c] += s * qi[c];
                     }
                   }
                 }
               }
             });
    }
    return out;
  });
}

Tensor mask_rows(const Tensor& x, std::span<const std::uint8_t> mask) {
  require_2d(x, "mask_rows");
  const std::size_t n = x.rows(), d = x.cols();
  if (mask.size() != n) throw Error("mask_rows: mask length differs from row count");
  std::vector<std::uint8_t> m(mask.begin(), mask.end());
  return visit_dtype(x.dtype(), [&]<class T>() {
    auto xv = x.data<T>();
    std::vector<T> o(xv.begin(), xv.end());
    for (std::size_t i = 0; i < n; ++i) {
      if (!m[i]) std::fill(o.begin() + i * d, o.begin() + (i + 1) * d, T(0));
    }
    Tensor out = Tensor::from_buffer(std::move(o), x.shape());
    if (Tape* tape = recorder({&x})) {
      ImplPtr px = x.impl();
      record(tape, OpKind::mask_rows, out, {px}, 0, [px, m = std::move(m), d](const Buffer& gbuf) {
        auto g = view<T>(gbuf);
        auto gp = grad_of<T>(*px);
        for (std::size_t i = 0; i < m.size(); ++i) {
          if (!m[i]) continue;
          for (std::size_t c = 0; c < d; ++c) gp[i * d + c] += g[i * d + c];
        }
      });
    }
    return out;
  });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  std::vector<const Tensor*> present;
  for (const auto& p : parts) {
    if (p.defined()) present.push_back(&p);
  }
  if (present.empty()) throw Error("concat_rows: no defined inputs");
  const Tensor& first = *present.front();
  require_2d(first, "concat_rows");
  const std::size_t d = first.cols();
  std::size_t n = 0;
  for (const Tensor* p : present) {
    require_2d(*p, "concat_rows");
    require_same_dtype(first, *p, "concat_rows");
    if (p->cols() != d) {
      throw Error("concat_rows: width mismatch " + std::to_string(p->cols()) + " vs " +
                  std::to_string(d));
    }
    n += p->rows();
  }
  return visit_dtype(first.dtype(), [&]<class T>() {
    std::vector<T> o;
    o.reserve(n * d);
    for (const Tensor* p : present) {
      auto pv = p->data<T>();
      o.insert(o.end(), pv.begin(), pv.end());
    }
    Tensor out = Tensor::from_buffer(std::move(o), Shape{n, d});
    Tape* tape = active_tape();
    const bool any = std::any_of(present.begin(), present.end(),
                                 [](const Tensor* p) { return needs_grad(*p); });
    if (tape && any) {
      std::vector<ImplPtr> inputs;
      for (const Tensor* p : present) inputs.push_back(p->impl());
      auto captured = inputs;
      record(tape, OpKind::concat_rows, out, std::move(inputs), 0,
             [captured = std::move(captured)](const Buffer& gbuf) {
               auto g = view<T>(gbuf);
               std::size_t pos = 0;
               for (const auto& p : captured) {
                 const std::size_t len = shape_numel(p->shape);
                 if (p->requires_grad) {
                   auto gp = grad_of<T>(*p);
                   for (std::size_t i = 0; i < len; ++i) gp[i] += g[pos + i];
                 }
                 pos += len;
               }
             });
    }
    return out;
  });
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
  require_2d(a, "concat_cols");
  require_2d(b, "concat_cols");
  require_same_dtype(a, b, "concat_cols");
  if (a.rows() != b.rows()) throw Error("concat_cols: row counts differ");
  const std::size_t n = a.rows(), da = a.cols(), db = b.cols();
  return visit_dtype(a.dtype(), [&]<class T>() {
    auto av = a.data<T>(), bv = b.data<T>();
    std::vector<T> o(n * (da + db));
    for (std::size_t i = 0; i < n; ++i) {
      std::copy_n(av.begin() + i * da, da, o.begin() + i * (da + db));
      std::copy_n(bv.begin() + i * db, db, o.begin() + i * (da + db) + da);
    }
    Tensor out = Tensor::from_buffer(std::move(o), Shape{n, da + db});
    if (Tape* tape = recorder({&a, &b})) {
      ImplPtr pa = a.impl(), pb = b.impl();
      record(tape, OpKind::concat_cols, out, {pa, pb}, 0, [pa, pb, n, da, db](const Buffer& gbuf) {
        auto g = view<T>(gbuf);
        if (pa->requires_grad) {
          auto ga = grad_of<T>(*pa);
          for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t c = 0; c < da; ++c) ga[i * da + c] += g[i * (da + db) + c];
          }
        }
        if (pb->requires_grad) {
          auto gb = grad_of<T>(*pb);
          for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t c = 0; c < db; ++c) gb[i * db + c] += g[i * (da + db) + da + c];
          }
        }
      });
    }
    return out;
  });
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  require_2d(x, "slice_rows");
  if (begin >= end || end > x.rows()) {
    throw Error("slice_rows: range [" + std::to_string(begin) + "," + std::to_string(end) +
                ") invalid for " + std::to_string(x.rows()) + " rows");
  }
  const std::size_t d = x.cols();
  return visit_dtype(x.dtype(), [&]<class T>() {
    auto xv = x.data<T>();
    std::vector<T> o(xv.begin() + begin * d, xv.begin() + end * d);
    Tensor out = Tensor::from_buffer(std::move(o), Shape{end - begin, d});
    if (Tape* tape = recorder({&x})) {
      ImplPtr px = x.impl();
      record(tape, OpKind::slice_rows, out, {px}, 0, [px, begin, d](const Buffer& gbuf) {
        auto g = view<T>(gbuf);
        auto gp = grad_of<T>(*px);
        for (std::size_t i = 0; i < g.size(); ++i) gp[begin * d + i] += g[i];
      });
    }
    return out;
  });
}

Tensor gather_rows(const Tensor& table, std::span<const std::int64_t> ids) {
  require_2d(table, "gather_rows");
  if (ids.empty()) throw Error("gather_rows: no ids");
  const std::size_t v = table.rows(), d = table.cols();
  for (auto id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= v) {
      throw Error("gather_rows: id " + std::to_string(id) + " out of range [0," +
                  std::to_string(v) + ")");
    }
  }
  std::vector<std::int64_t> idx(ids.begin(), ids.end());
  return visit_dtype(table.dtype(), [&]<class T>() {
    auto tv = table.data<T>();
    std::vector<T> o(idx.size() * d);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      std::copy_n(tv.begin() + idx[i] * d, d, o.begin() + i * d);
    }
    Tensor out = Tensor::from_buffer(std::move(o), Shape{idx.size(), d});
    if (Tape* tape = recorder({&table})) {
      ImplPtr pt = table.impl();
      record(tape, OpKind::gather_rows, out, {pt}, 0, [pt, idx = std::move(idx), d](const Buffer& gbuf) {
        auto g = view<T>(gbuf);
        auto gp = grad_of<T>(*pt);
        for (std::size_t i = 0; i < idx.size(); ++i) {
          for (std::size_t c = 0; c < d; ++c) gp[idx[i] * d + c] += g[i * d + c];
        }
      });
    }
    return out;
  });
}

namespace {

Tensor reduce(const Tensor& x, bool average) {
  return visit_dtype(x.dtype(), [&]<class T>() {
    auto xv = x.data<T>();
    T total = 0;
    for (T e : xv) total += e;
    const T factor = average ? T(1) / static_cast<T>(xv.size()) : T(1);
    Tensor out = Tensor::from_buffer(std::vector<T>{total * factor}, Shape{1, 1});
    if (Tape* tape = recorder({&x})) {
      ImplPtr px = x.impl();
      record(tape, average ? OpKind::mean : OpKind::sum, out, {px}, 0,
             [px, factor](const Buffer& gbuf) {
               const T g = view<T>(gbuf)[0] * factor;
               for (auto& e : grad_of<T>(*px)) e += g;
             });
    }
    return out;
  });
}

}  // namespace

Tensor sum(const Tensor& x) { return reduce(x, false); }

Tensor mean(const Tensor& x) { return reduce(x, true); }

Tensor cross_entropy(const Tensor& logits, std::span<const std::int64_t> labels,
                     std::span<const double> class_weights) {
  require_2d(logits, "cross_entropy");
  const std::size_t b = logits.rows(), c = logits.cols();
  if (labels.size() != b) throw Error("cross_entropy: label count differs from batch size");
  if (!class_weights.empty() && class_weights.size() != c) {
    throw Error("cross_entropy: class weight count differs from class count");
  }
  for (auto y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= c) {
      throw Error("cross_entropy: label " + std::to_string(y) + " out of range");
    }
  }
  std::vector<std::int64_t> ys(labels.begin(), labels.end());
  std::vector<double> w(class_weights.begin(), class_weights.end());
  if (w.empty()) w.assign(c, 1.0);
  return visit_dtype(logits.dtype(), [&]<class T>() {
    auto lv = logits.data<T>();
    check_finite<T>(lv, "cross_entropy");
    // Per-row softmax in double so f32 and f64 agree on the reference path.
    double total = 0;
    for (std::size_t i = 0; i < b; ++i) {
      const T* row = lv.data() + i * c;
      double mx = row[0];
      for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, static_cast<double>(row[j]));
      double z = 0;
      for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
      total += -w[ys[i]] * (row[ys[i]] - mx - std::log(z));
    }
    Tensor out = Tensor::from_buffer(std::vector<T>{static_cast<T>(total / b)}, Shape{1, 1});
    if (Tape* tape = recorder({&logits})) {
      ImplPtr pl = logits.impl();
      record(tape, OpKind::cross_entropy, out, {pl}, logits.nbytes(),
             [pl, ys = std::move(ys), w = std::move(w), b, c](const Buffer& gbuf) {
               const double g = view<T>(gbuf)[0];
               auto lv = vals<T>(pl);
               auto gl = grad_of<T>(*pl);
               for (std::size_t i = 0; i < b; ++i) {
                 const T* row = lv.data() + i * c;
                 double mx = row[0];
                 for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, static_cast<double>(row[j]));
                 double z = 0;
                 for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
                 const double coef = g * w[ys[i]] / static_cast<double>(b);
                 for (std::size_t j = 0; j < c; ++j) {
                   const double p = std::exp(row[j] - mx) / z;
                   const double onehot = static_cast<std::size_t>(ys[i]) == j ? 1.0 : 0.0;
                   gl[i * c + j] += static_cast<T>(coef * (p - onehot));
                 }
               }
             });
    }
    return out;
  });
}

Tensor bce_with_logits(const Tensor& logits, std::span<const std::uint8_t> targets,
                       std::span<const double> class_weights) {
  require_2d(logits, "bce_with_logits");
  const std::size_t b = logits.rows(), c = logits.cols();
  if (targets.size() != b * c) throw Error("bce_with_logits: target count differs from logits");
  if (!class_weights.empty() && class_weights.size() != c) {
    throw Error("bce_with_logits: class weight count differs from label count");
  }
  std::vector<std::uint8_t> ys(targets.begin(), targets.end());
  std::vector<double> w(class_weights.begin(), class_weights.end());
  if (w.empty()) w.assign(c, 1.0);
  return visit_dtype(logits.dtype(), [&]<class T>() {
    auto lv = logits.data<T>();
    check_finite<T>(lv, "bce_with_logits");
    double total = 0;
    for (std::size_t i = 0; i < b * c; ++i) {
      const double x = lv[i];
      const double y = ys[i] ? 1.0 : 0.0;
      total += w[i % c] * (std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x))));
    }
    const double count = static_cast<double>(b * c);
    Tensor out = Tensor::from_buffer(std::vector<T>{static_cast<T>(total / count)}, Shape{1, 1});
    if (Tape* tape = recorder({&logits})) {
      ImplPtr pl = logits.impl();
      record(tape, OpKind::bce_logits, out, {pl}, logits.nbytes(),
             [pl, ys = std::move(ys), w = std::move(w), c, count](const Buffer& gbuf) {
               const double g = view<T>(gbuf)[0];
               auto lv = vals<T>(pl);
               auto gl = grad_of<T>(*pl);
               for (std::size_t i = 0; i < ys.size(); ++i) {
                 const double x = lv[i];
                 const double sig = x >= 0 ? 1.0 / (1.0 + std::exp(-x))
                                           : std::exp(x) / (1.0 + std::exp(x));
                 gl[i] += static_cast<T>(g * w[i % c] * (sig - (ys[i] ? 1.0 : 0.0)) / count);
               }
             });
    }
    return out;
  });
}

}  // namespace pmf::ops
