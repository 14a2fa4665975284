// Forward + backward definitions for every primitive in the op vocabulary:
//   matmul, add, multiply, relu, exp, log, divide, reduce_sum, reduce_mean,
//   softmax_with_temperature, l2_normalize_rows, mean_center_rows,
//   batchnorm (train/eval), temporal_conv1d, reshape, transpose, concat,
//   index_select, stop_gradient
// plus primitive_forward (string dispatch), custom_op (fused-node facility)
// and finite_difference_check (gradient oracle).
//
// Elementwise binaries broadcast numpy-style. Backward accumulation is serial
// in a fixed order; heavy lifting (matmul/conv) goes through cpm::kernels,
// which is deterministic regardless of thread count.
#pragma once

#include <cmath>
#include <cstring>
#include <functional>
#include <string>
#include <vector>

#include "cpm/kernels.hpp"
#include "cpm/tensor.hpp"

namespace cpm {

// ---------------------------------------------------------------------------
// broadcasting helpers
// ---------------------------------------------------------------------------
namespace bc {

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t nd = std::max(a.size(), b.size());
  Shape out(nd);
  for (std::size_t d = 0; d < nd; ++d) {
    const std::size_t da = d < nd - a.size() ? 1 : a[d - (nd - a.size())];
    const std::size_t db = d < nd - b.size() ? 1 : b[d - (nd - b.size())];
    CPM_CHECK(da == db || da == 1 || db == 1,
              "broadcast: incompatible shapes " + shape_str(a) + " and " + shape_str(b));
    out[d] = std::max(da, db);
  }
  return out;
}

// Row-major strides of `in` aligned to `out`, 0 on broadcast dimensions.
inline std::vector<std::size_t> strides_for(const Shape& in, const Shape& out) {
  std::vector<std::size_t> st(out.size(), 0);
  std::size_t acc = 1;
  for (std::size_t d = in.size(); d-- > 0;) {
    const std::size_t od = d + (out.size() - in.size());
    st[od] = (in[d] == 1 && out[od] != 1) ? 0 : acc;
    acc *= in[d];
  }
  return st;
}

// Visits every element of `out` in flat order, handing the two input offsets
// to `f(flat_out, off_a, off_b)`.
template <class Fn>
void for_each(const Shape& out, const std::vector<std::size_t>& sa,
              const std::vector<std::size_t>& sb, Fn&& f) {
  const std::size_t nd = out.size(), n = numel(out);
  std::vector<std::size_t> idx(nd, 0);
  std::size_t oa = 0, ob = 0;
  for (std::size_t i = 0; i < n; ++i) {
    f(i, oa, ob);
    for (std::size_t d = nd; d-- > 0;) {
      ++idx[d];
      oa += sa[d];
      ob += sb[d];
      if (idx[d] < out[d]) break;
      oa -= sa[d] * out[d];
      ob -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

}  // namespace bc

namespace ops_detail {

template <class Real, class Fn>
void attach(Tensor<Real>& t, Fn&& fn) {
  if (t.node().requires_grad) t.node().backward_fn = std::forward<Fn>(fn);
}

template <class Real>
std::vector<Real>& grad_buf(const std::shared_ptr<Node<Real>>& p) {
  p->ensure_grad();
  return p->grad;
}

}  // namespace ops_detail

// ---------------------------------------------------------------------------
// elementwise binaries: add / multiply / divide
// ---------------------------------------------------------------------------
namespace ops_detail {

// kind: 0 add, 1 multiply, 2 divide
template <class Real>
Tensor<Real> binary(int kind, const char* name, const Tensor<Real>& a, const Tensor<Real>& b) {
  auto pa = a.node_ptr(), pb = b.node_ptr();
  const Shape out = bc::broadcast_shape(pa->shape, pb->shape);
  const auto sa = bc::strides_for(pa->shape, out);
  const auto sb = bc::strides_for(pb->shape, out);
  const auto& av = pa->value;
  const auto& bv = pb->value;
  std::vector<Real> y(numel(out));
  const bool same = pa->shape == pb->shape;
  if (kind == 2)
    for (const Real d : bv) CPM_CHECK(d != Real(0), "divide: division by zero");
  if (same) {
    for (std::size_t i = 0; i < y.size(); ++i)
      y[i] = kind == 0 ? av[i] + bv[i] : kind == 1 ? av[i] * bv[i] : av[i] / bv[i];
  } else {
    bc::for_each(out, sa, sb, [&](std::size_t i, std::size_t ia, std::size_t ib) {
      y[i] = kind == 0 ? av[ia] + bv[ib] : kind == 1 ? av[ia] * bv[ib] : av[ia] / bv[ib];
    });
  }
  auto t = make_node<Real>(name, out, std::move(y), {pa, pb});
  attach(t, [kind, out, sa, sb, pa, pb](Node<Real>& n) {
    const auto& g = n.grad;
    const auto& av = pa->value;
    const auto& bv = pb->value;
    const bool ga = pa->requires_grad, gb = pb->requires_grad;
    std::vector<Real>* agrad = ga ? &grad_buf(pa) : nullptr;
    std::vector<Real>* bgrad = gb ? &grad_buf(pb) : nullptr;
    bc::for_each(out, sa, sb, [&](std::size_t i, std::size_t ia, std::size_t ib) {
      if (ga) {
        const Real da = kind == 0 ? g[i] : kind == 1 ? g[i] * bv[ib] : g[i] / bv[ib];
        (*agrad)[ia] += da;
      }
      if (gb) {
        const Real db = kind == 0 ? g[i]
                        : kind == 1
                            ? g[i] * av[ia]
                            : -g[i] * av[ia] / (bv[ib] * bv[ib]);
        (*bgrad)[ib] += db;
      }
    });
  });
  return t;
}

}  // namespace ops_detail

template <class Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
  return ops_detail::binary(0, "add", a, b);
}
template <class Real>
Tensor<Real> multiply(const Tensor<Real>& a, const Tensor<Real>& b) {
  return ops_detail::binary(1, "multiply", a, b);
}
template <class Real>
Tensor<Real> divide(const Tensor<Real>& a, const Tensor<Real>& b) {
  return ops_detail::binary(2, "divide", a, b);
}

// ---------------------------------------------------------------------------
// elementwise unaries: relu / exp / log
// ---------------------------------------------------------------------------
template <class Real>
Tensor<Real> relu(const Tensor<Real>& x) {
  auto px = x.node_ptr();
  std::vector<Real> y(px->value.size());
  kernels::parallel_for(y.size(), [&](std::size_t i) {
    const Real v = px->value[i];
    y[i] = v > Real(0) ? v : Real(0);
  });
  auto t = make_node<Real>("relu", px->shape, std::move(y), {px});
  ops_detail::attach(t, [px](Node<Real>& n) {
    auto& gx = ops_detail::grad_buf(px);
    const auto& g = n.grad;
    kernels::parallel_for(g.size(), [&](std::size_t i) {
      if (px->value[i] > Real(0)) gx[i] += g[i];
    });
  });
  return t;
}

template <class Real>
Tensor<Real> exp(const Tensor<Real>& x) {
  auto px = x.node_ptr();
  std::vector<Real> y(px->value.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = std::exp(px->value[i]);
  auto t = make_node<Real>("exp", px->shape, std::move(y), {px});
  ops_detail::attach(t, [px](Node<Real>& n) {
    auto& gx = ops_detail::grad_buf(px);  // d exp = exp; reuse forward output
    for (std::size_t i = 0; i < n.grad.size(); ++i) gx[i] += n.grad[i] * n.value[i];
  });
  return t;
}

template <class Real>
Tensor<Real> log(const Tensor<Real>& x) {
  auto px = x.node_ptr();
  std::vector<Real> y(px->value.size());
  for (std::size_t i = 0; i < y.size(); ++i) {
    CPM_CHECK(px->value[i] > Real(0), "log: non-positive input");
    y[i] = std::log(px->value[i]);
  }
  auto t = make_node<Real>("log", px->shape, std::move(y), {px});
  ops_detail::attach(t, [px](Node<Real>& n) {
    auto& gx = ops_detail::grad_buf(px);
    for (std::size_t i = 0; i < n.grad.size(); ++i) gx[i] += n.grad[i] / px->value[i];
  });
  return t;
}

// ---------------------------------------------------------------------------
// matmul (2-D row-major): (M,K) x (K,N) -> (M,N)
// ---------------------------------------------------------------------------
template <class Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
  auto pa = a.node_ptr(), pb = b.node_ptr();
  CPM_CHECK(pa->shape.size() == 2 && pb->shape.size() == 2, "matmul: expects 2-D operands");
  const std::size_t m = pa->shape[0], k = pa->shape[1], n = pb->shape[1];
  CPM_CHECK(pb->shape[0] == k, "matmul: inner dimensions differ");
  std::vector<Real> y(m * n);
  kernels::gemm_nn(m, n, k, pa->value.data(), pb->value.data(), y.data());
  auto t = make_node<Real>("matmul", {m, n}, std::move(y), {pa, pb});
  ops_detail::attach(t, [pa, pb, m, k, n](Node<Real>& nd) {
    if (pa->requires_grad) {
      // dA = G B^T, computed as gemm_nn against a materialized B^T: the
      // axpy-style kernel vectorizes where the dot-style gemm_nt cannot,
      // and B is small compared to G in every call site.
      std::vector<Real> bt(n * k);
      const Real* bv = pb->value.data();
      for (std::size_t r = 0; r < k; ++r)
        for (std::size_t c = 0; c < n; ++c) bt[c * k + r] = bv[r * n + c];
      auto& ga = ops_detail::grad_buf(pa);
      kernels::gemm_nn(m, k, n, nd.grad.data(), bt.data(), ga.data(), true);
    }
    if (pb->requires_grad) {
      auto& gb = ops_detail::grad_buf(pb);  // dB = A^T G
      kernels::gemm_tn(k, n, m, pa->value.data(), nd.grad.data(), gb.data(), true);
    }
  });
  return t;
}

// ---------------------------------------------------------------------------
// reductions: axis = -1 reduces everything to a scalar
// ---------------------------------------------------------------------------
namespace ops_detail {

template <class Real>
Tensor<Real> reduce(const Tensor<Real>& x, int axis, bool mean) {
  auto px = x.node_ptr();
  const Shape& s = px->shape;
  const char* name = mean ? "reduce_mean" : "reduce_sum";
  if (axis < 0) {
    Real acc = 0;
    for (const Real v : px->value) acc += v;
    const Real cnt = static_cast<Real>(px->value.size());
    if (mean) acc /= cnt;
    auto t = make_node<Real>(name, {1}, {acc}, {px});
    attach(t, [px, mean, cnt](Node<Real>& n) {
      auto& gx = grad_buf(px);
      const Real g = mean ? n.grad[0] / cnt : n.grad[0];
      for (auto& v : gx) v += g;
    });
    return t;
  }
  const std::size_t a = static_cast<std::size_t>(axis);
  CPM_CHECK(a < s.size(), "reduce: axis out of range");
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < a; ++d) outer *= s[d];
  for (std::size_t d = a + 1; d < s.size(); ++d) inner *= s[d];
  const std::size_t mid = s[a];
  Shape os;
  for (std::size_t d = 0; d < s.size(); ++d)
    if (d != a) os.push_back(s[d]);
  if (os.empty()) os = {1};
  std::vector<Real> y(outer * inner, Real(0));
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t m2 = 0; m2 < mid; ++m2)
      for (std::size_t i = 0; i < inner; ++i)
        y[o * inner + i] += px->value[(o * mid + m2) * inner + i];
  if (mean)
    for (auto& v : y) v /= static_cast<Real>(mid);
  auto t = make_node<Real>(name, os, std::move(y), {px});
  attach(t, [px, outer, mid, inner, mean](Node<Real>& n) {
    auto& gx = grad_buf(px);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t m2 = 0; m2 < mid; ++m2)
        for (std::size_t i = 0; i < inner; ++i) {
          Real g = n.grad[o * inner + i];
          if (mean) g /= static_cast<Real>(mid);
          gx[(o * mid + m2) * inner + i] += g;
        }
  });
  return t;
}

}  // namespace ops_detail

template <class Real>
Tensor<Real> reduce_sum(const Tensor<Real>& x, int axis = -1) {
  return ops_detail::reduce(x, axis, false);
}
template <class Real>
Tensor<Real> reduce_mean(const Tensor<Real>& x, int axis = -1) {
  return ops_detail::reduce(x, axis, true);
}

// ---------------------------------------------------------------------------
// row ops: softmax_with_temperature / l2_normalize_rows / mean_center_rows
// ---------------------------------------------------------------------------

// Rows are the last dimension. Max-subtracted for stability:
// y_i = exp((x_i - max)/tau) / sum_j exp((x_j - max)/tau).
template <class Real>
Tensor<Real> softmax_with_temperature(const Tensor<Real>& x, double tau) {
  CPM_CHECK(tau > 0, "softmax: temperature must be positive");
  auto px = x.node_ptr();
  const std::size_t d = px->shape.back();
  const std::size_t rows = px->value.size() / d;
  std::vector<Real> y(px->value.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* xr = px->value.data() + r * d;
    Real* yr = y.data() + r * d;
    Real mx = xr[0];
    for (std::size_t j = 1; j < d; ++j) mx = std::max(mx, xr[j]);
    Real z = 0;
    for (std::size_t j = 0; j < d; ++j) {
      yr[j] = std::exp((xr[j] - mx) / static_cast<Real>(tau));
      z += yr[j];
    }
    for (std::size_t j = 0; j < d; ++j) yr[j] /= z;
  }
  auto t = make_node<Real>("softmax_with_temperature", px->shape, std::move(y), {px});
  ops_detail::attach(t, [px, rows, d, tau](Node<Real>& n) {
    auto& gx = ops_detail::grad_buf(px);
    for (std::size_t r = 0; r < rows; ++r) {
      const Real* yr = n.value.data() + r * d;
      const Real* gr = n.grad.data() + r * d;
      Real dot = 0;
      for (std::size_t j = 0; j < d; ++j) dot += gr[j] * yr[j];
      for (std::size_t j = 0; j < d; ++j)
        gx[r * d + j] += yr[j] * (gr[j] - dot) / static_cast<Real>(tau);
    }
  });
  return t;
}

// Row norms below 1e-12 are clamped to 1e-12 before dividing; a clamped row is
// a plain scaling, so its backward is the constant 1/1e-12.
template <class Real>
Tensor<Real> l2_normalize_rows(const Tensor<Real>& x) {
  auto px = x.node_ptr();
  CPM_CHECK(!px->shape.empty(), "l2_normalize_rows: empty shape");
  const std::size_t d = px->shape.back();
  const std::size_t rows = px->value.size() / d;
  const Real guard = static_cast<Real>(1e-12);
  std::vector<Real> y(px->value.size());
  std::vector<Real> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* xr = px->value.data() + r * d;
    Real s = 0;
    for (std::size_t j = 0; j < d; ++j) s += xr[j] * xr[j];
    Real nrm = std::sqrt(s);
    const Real div = std::max(nrm, guard);
    norms[r] = div;
    for (std::size_t j = 0; j < d; ++j) y[r * d + j] = xr[j] / div;
  }
  auto t = make_node<Real>("l2_normalize_rows", px->shape, std::move(y), {px});
  ops_detail::attach(t, [px, rows, d, norms, guard](Node<Real>& n) {
    auto& gx = ops_detail::grad_buf(px);
    for (std::size_t r = 0; r < rows; ++r) {
      const Real* xr = px->value.data() + r * d;
      const Real* gr = n.grad.data() + r * d;
      const Real nrm = norms[r];
      if (nrm <= guard) {  // clamped: y = x / guard
        for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += gr[j] / guard;
      } else {  // d/dx (x/|x|) = g/|x| - x (x.g)/|x|^3
        Real dot = 0;
        for (std::size_t j = 0; j < d; ++j) dot += xr[j] * gr[j];
        const Real n3 = nrm * nrm * nrm;
        for (std::size_t j = 0; j < d; ++j)
          gx[r * d + j] += gr[j] / nrm - xr[j] * dot / n3;
      }
    }
  });
  return t;
}

// Subtracts the per-column mean taken across rows (the batch dimension), so
// the output's per-column batch mean is 0.
template <class Real>
Tensor<Real> mean_center_rows(const Tensor<Real>& x) {
  auto px = x.node_ptr();
  CPM_CHECK(px->shape.size() == 2, "mean_center_rows: expects a 2-D batch");
  const std::size_t n = px->shape[0], d = px->shape[1];
  std::vector<Real> mu(d, Real(0));
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < d; ++j) mu[j] += px->value[r * d + j];
  for (auto& v : mu) v /= static_cast<Real>(n);
  std::vector<Real> y(px->value.size());
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < d; ++j) y[r * d + j] = px->value[r * d + j] - mu[j];
  auto t = make_node<Real>("mean_center_rows", px->shape, std::move(y), {px});
  ops_detail::attach(t, [px, n, d](Node<Real>& nd) {
    auto& gx = ops_detail::grad_buf(px);
    std::vector<Real> gmu(d, Real(0));  // d/dx = g - colmean(g)
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t j = 0; j < d; ++j) gmu[j] += nd.grad[r * d + j];
    for (auto& v : gmu) v /= static_cast<Real>(n);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += nd.grad[r * d + j] - gmu[j];
  });
  return t;
}

// ---------------------------------------------------------------------------
// batchnorm
// ---------------------------------------------------------------------------

// Per-channel batch normalization. Accepts (B,C,T,V) (stats over B,T,V) or
// (N,C) (stats over N). Train mode uses per-batch statistics (biased variance)
// and decays running stats with momentum 0.9; eval mode uses running stats.
template <class Real>
Tensor<Real> batchnorm(const Tensor<Real>& x, const Tensor<Real>& gamma, const Tensor<Real>& beta,
                       std::vector<Real>& running_mean, std::vector<Real>& running_var,
                       bool training, double momentum = 0.9, double eps = 1e-5) {
  auto px = x.node_ptr();
  auto pg = gamma.node_ptr();
  auto pb = beta.node_ptr();
  const Shape& s = px->shape;
  CPM_CHECK(s.size() == 2 || s.size() == 4, "batchnorm: expects (N,C) or (B,C,T,V)");
  const std::size_t B = s[0];
  const std::size_t C = s[1];
  const std::size_t L = s.size() == 4 ? s[2] * s[3] : 1;
  CPM_CHECK(pg->value.size() == C && pb->value.size() == C, "batchnorm: gamma/beta size != C");
  CPM_CHECK(running_mean.size() == C && running_var.size() == C,
            "batchnorm: running stats size != C");
  const std::size_t m = B * L;
  CPM_CHECK(!training || m > 1, "batchnorm: train mode needs more than one element per channel");

  std::vector<Real> mu(C), var(C);
  if (training) {
    kernels::parallel_for(C, [&](std::size_t c) {
      Real sum = 0;
      for (std::size_t b = 0; b < B; ++b) {
        const Real* xp = px->value.data() + (b * C + c) * L;
        for (std::size_t l = 0; l < L; ++l) sum += xp[l];
      }
      const Real mean = sum / static_cast<Real>(m);
      Real sq = 0;
      for (std::size_t b = 0; b < B; ++b) {
        const Real* xp = px->value.data() + (b * C + c) * L;
        for (std::size_t l = 0; l < L; ++l) {
          const Real dv = xp[l] - mean;
          sq += dv * dv;
        }
      }
      mu[c] = mean;
      var[c] = sq / static_cast<Real>(m);
    });
    for (std::size_t c = 0; c < C; ++c) {
      running_mean[c] = static_cast<Real>(momentum) * running_mean[c] +
                        static_cast<Real>(1 - momentum) * mu[c];
      running_var[c] = static_cast<Real>(momentum) * running_var[c] +
                       static_cast<Real>(1 - momentum) * var[c];
    }
  } else {
    mu.assign(running_mean.begin(), running_mean.end());
    var.assign(running_var.begin(), running_var.end());
  }

  std::vector<Real> inv(C);
  for (std::size_t c = 0; c < C; ++c)
    inv[c] = Real(1) / std::sqrt(var[c] + static_cast<Real>(eps));

  std::vector<Real> y(px->value.size());
  kernels::parallel_for(B * C, [&](std::size_t i) {
    const std::size_t c = i % C;
    const Real* xp = px->value.data() + i * L;
    Real* yp = y.data() + i * L;
    const Real g = pg->value[c], b2 = pb->value[c], mn = mu[c], iv = inv[c];
    for (std::size_t l = 0; l < L; ++l) yp[l] = (xp[l] - mn) * iv * g + b2;
  });

  auto t = make_node<Real>(training ? "batchnorm_train" : "batchnorm_eval", s, std::move(y),
                           {px, pg, pb});
  ops_detail::attach(t, [px, pg, pb, B, C, L, m, mu, inv, training](Node<Real>& nd) {
    // Per channel: s1 = sum g, s2 = sum g*xhat (xhat recomputed from x).
    std::vector<Real> s1(C), s2(C);
    kernels::parallel_for(C, [&](std::size_t c) {
      Real a1 = 0, a2 = 0;
      for (std::size_t b = 0; b < B; ++b) {
        const Real* gp = nd.grad.data() + (b * C + c) * L;
        const Real* xp = px->value.data() + (b * C + c) * L;
        for (std::size_t l = 0; l < L; ++l) {
          a1 += gp[l];
          a2 += gp[l] * (xp[l] - mu[c]) * inv[c];
        }
      }
      s1[c] = a1;
      s2[c] = a2;
    });
    if (pg->requires_grad) {
      auto& gg = ops_detail::grad_buf(pg);
      for (std::size_t c = 0; c < C; ++c) gg[c] += s2[c];
    }
    if (pb->requires_grad) {
      auto& gb = ops_detail::grad_buf(pb);
      for (std::size_t c = 0; c < C; ++c) gb[c] += s1[c];
    }
    if (px->requires_grad) {
      auto& gx = ops_detail::grad_buf(px);
      if (training) {
        // dx = gamma*inv * (g - s1/m - xhat * s2/m)
        kernels::parallel_for(B * C, [&](std::size_t i) {
          const std::size_t c = i % C;
          const Real* gp = nd.grad.data() + i * L;
          const Real* xp = px->value.data() + i * L;
          Real* o = gx.data() + i * L;
          const Real k = pg->value[c] * inv[c];
          const Real t1 = s1[c] / static_cast<Real>(m);
          const Real t2 = s2[c] / static_cast<Real>(m);
          for (std::size_t l = 0; l < L; ++l) {
            const Real xh = (xp[l] - mu[c]) * inv[c];
            o[l] += k * (gp[l] - t1 - xh * t2);
          }
        });
      } else {  // running stats are constants: dx = g * gamma * inv
        kernels::parallel_for(B * C, [&](std::size_t i) {
          const std::size_t c = i % C;
          const Real* gp = nd.grad.data() + i * L;
          Real* o = gx.data() + i * L;
          const Real k = pg->value[c] * inv[c];
          for (std::size_t l = 0; l < L; ++l) o[l] += k * gp[l];
        });
      }
    }
  });
  return t;
}

// ---------------------------------------------------------------------------
// temporal_conv1d: x (B,Cin,T,V), w (Cout,Cin,k) -> (B,Cout,To,V)
// ---------------------------------------------------------------------------
template <class Real>
Tensor<Real> temporal_conv1d(const Tensor<Real>& x, const Tensor<Real>& w, std::size_t stride = 1,
                             std::size_t pad = static_cast<std::size_t>(-1)) {
  auto px = x.node_ptr(), pw = w.node_ptr();
  CPM_CHECK(px->shape.size() == 4, "temporal_conv1d: input must be (B,C,T,V)");
  CPM_CHECK(pw->shape.size() == 3, "temporal_conv1d: weight must be (Cout,Cin,k)");
  const std::size_t B = px->shape[0], Cin = px->shape[1], T = px->shape[2], V = px->shape[3];
  const std::size_t Cout = pw->shape[0], k = pw->shape[2];
  CPM_CHECK(pw->shape[1] == Cin, "temporal_conv1d: channel mismatch");
  CPM_CHECK(stride >= 1, "temporal_conv1d: stride must be >= 1");
  if (pad == static_cast<std::size_t>(-1)) pad = (k - 1) / 2;  // "same" for stride 1
  CPM_CHECK(T + 2 * pad >= k, "temporal_conv1d: kernel longer than padded input");
  const std::size_t To = (T + 2 * pad - k) / stride + 1;
  std::vector<Real> y(B * Cout * To * V);
  kernels::conv1d_forward(B, Cin, T, V, Cout, k, stride, pad, px->value.data(), pw->value.data(),
                          y.data());
  auto t = make_node<Real>("temporal_conv1d", {B, Cout, To, V}, std::move(y), {px, pw});
  ops_detail::attach(t, [px, pw, B, Cin, T, V, Cout, k, stride, pad](Node<Real>& nd) {
    if (px->requires_grad) {
      auto& gx = ops_detail::grad_buf(px);
      std::vector<Real> scratch(gx.size());  // kernel writes; accumulate after
      kernels::conv1d_backward_data(B, Cin, T, V, Cout, k, stride, pad, nd.grad.data(),
                                    pw->value.data(), scratch.data());
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += scratch[i];
    }
    if (pw->requires_grad) {
      auto& gw = ops_detail::grad_buf(pw);
      kernels::conv1d_backward_weights(B, Cin, T, V, Cout, k, stride, pad, nd.grad.data(),
                                       px->value.data(), gw.data(), true);
    }
  });
  return t;
}

// ---------------------------------------------------------------------------
// shape ops: reshape / transpose / concat / index_select / stop_gradient
// ---------------------------------------------------------------------------
template <class Real>
Tensor<Real> reshape(const Tensor<Real>& x, Shape target) {
  auto px = x.node_ptr();
  CPM_CHECK(numel(target) == px->value.size(),
            "reshape: element count changes " + shape_str(px->shape) + " -> " + shape_str(target));
  auto t = make_node<Real>("reshape", std::move(target), px->value, {px});
  ops_detail::attach(t, [px](Node<Real>& nd) {
    auto& gx = ops_detail::grad_buf(px);
    for (std::size_t i = 0; i < nd.grad.size(); ++i) gx[i] += nd.grad[i];
  });
  return t;
}

// General axis permutation: out[idx[perm[0]],...] = in[idx[0],...].
template <class Real>
Tensor<Real> transpose(const Tensor<Real>& x, const std::vector<std::size_t>& perm) {
  auto px = x.node_ptr();
  const Shape& s = px->shape;
  CPM_CHECK(perm.size() == s.size(), "transpose: permutation rank mismatch");
  {
    std::vector<bool> hit(s.size(), false);
    for (auto p : perm) {
      CPM_CHECK(p < s.size() && !hit[p], "transpose: invalid permutation");
      hit[p] = true;
    }
  }
  Shape os(s.size());
  for (std::size_t d = 0; d < s.size(); ++d) os[d] = s[perm[d]];
  std::vector<std::size_t> istr(s.size(), 1);
  for (std::size_t d = s.size() - 1; d-- > 0;) istr[d] = istr[d + 1] * s[d + 1];
  // out flat index walks os in row-major order; map back into in offsets
  std::vector<std::size_t> step(s.size());
  for (std::size_t d = 0; d < s.size(); ++d) step[d] = istr[perm[d]];
  std::vector<Real> y(px->value.size());
  const std::size_t nd0 = s.size();
  std::vector<std::size_t> idx(nd0, 0);
  std::size_t src = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    y[i] = px->value[src];
    for (std::size_t d = nd0; d-- > 0;) {
      ++idx[d];
      src += step[d];
      if (idx[d] < os[d]) break;
      src -= step[d] * os[d];
      idx[d] = 0;
    }
  }
  auto t = make_node<Real>("transpose", os, std::move(y), {px});
  ops_detail::attach(t, [px, os, step, nd0](Node<Real>& ndd) {
    auto& gx = ops_detail::grad_buf(px);
    std::vector<std::size_t> idx(nd0, 0);
    std::size_t src = 0;
    for (std::size_t i = 0; i < ndd.grad.size(); ++i) {
      gx[src] += ndd.grad[i];
      for (std::size_t d = nd0; d-- > 0;) {
        ++idx[d];
        src += step[d];
        if (idx[d] < os[d]) break;
        src -= step[d] * os[d];
        idx[d] = 0;
      }
    }
  });
  return t;
}

template <class Real>
Tensor<Real> concat(const std::vector<Tensor<Real>>& xs, std::size_t axis) {
  CPM_CHECK(!xs.empty(), "concat: no inputs");
  const Shape& s0 = xs[0].shape();
  CPM_CHECK(axis < s0.size(), "concat: axis out of range");
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= s0[d];
  for (std::size_t d = axis + 1; d < s0.size(); ++d) inner *= s0[d];
  std::size_t total_mid = 0;
  std::vector<std::shared_ptr<Node<Real>>> parents;
  for (const auto& x : xs) {
    const Shape& s = x.shape();
    CPM_CHECK(s.size() == s0.size(), "concat: rank mismatch");
    for (std::size_t d = 0; d < s.size(); ++d)
      CPM_CHECK(d == axis || s[d] == s0[d], "concat: non-axis extent mismatch");
    total_mid += s[axis];
    parents.push_back(x.node_ptr());
  }
  Shape os = s0;
  os[axis] = total_mid;
  std::vector<Real> y(outer * total_mid * inner);
  std::size_t off = 0;
  for (const auto& p : parents) {
    const std::size_t mid = p->shape[axis];
    for (std::size_t o = 0; o < outer; ++o)
      std::memcpy(y.data() + (o * total_mid + off) * inner, p->value.data() + o * mid * inner,
                  mid * inner * sizeof(Real));
    off += mid;
  }
  auto t = make_node<Real>("concat", os, std::move(y), parents);
  ops_detail::attach(t, [parents, outer, total_mid, inner, axis](Node<Real>& nd) {
    std::size_t off = 0;
    for (const auto& p : parents) {
      const std::size_t mid = p->shape[axis];
      if (p->requires_grad) {
        auto& gx = ops_detail::grad_buf(p);
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t j = 0; j < mid * inner; ++j)
            gx[o * mid * inner + j] += nd.grad[(o * total_mid + off) * inner + j];
      }
      off += mid;
    }
  });
  return t;
}

template <class Real>
Tensor<Real> index_select(const Tensor<Real>& x, std::size_t axis,
                          const std::vector<std::size_t>& indices) {
  auto px = x.node_ptr();
  const Shape& s = px->shape;
  CPM_CHECK(axis < s.size(), "index_select: axis out of range");
  for (auto i : indices) CPM_CHECK(i < s[axis], "index_select: index out of range");
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= s[d];
  for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
  const std::size_t mid = s[axis], nsel = indices.size();
  Shape os = s;
  os[axis] = nsel;
  std::vector<Real> y(outer * nsel * inner);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t j = 0; j < nsel; ++j)
      std::memcpy(y.data() + (o * nsel + j) * inner,
                  px->value.data() + (o * mid + indices[j]) * inner, inner * sizeof(Real));
  auto t = make_node<Real>("index_select", os, std::move(y), {px});
  ops_detail::attach(t, [px, outer, mid, inner, nsel, indices](Node<Real>& nd) {
    auto& gx = ops_detail::grad_buf(px);  // scatter-add; duplicates accumulate
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t j = 0; j < nsel; ++j)
        for (std::size_t l = 0; l < inner; ++l)
          gx[(o * mid + indices[j]) * inner + l] += nd.grad[(o * nsel + j) * inner + l];
  });
  return t;
}

template <class Real>
Tensor<Real> stop_gradient(const Tensor<Real>& x) {
  auto n = std::make_shared<Node<Real>>();
  n->shape = x.shape();
  n->value = x.values();
  n->op = "stop_gradient";
  n->id = autodiff_detail::g_next_id++;
  return Tensor<Real>(std::move(n));
}

// ---------------------------------------------------------------------------
// custom_op: fused nodes (losses) supply their own backward
// ---------------------------------------------------------------------------
template <class Real>
Tensor<Real> custom_op(std::string op, Shape shape, std::vector<Real> value,
                       std::vector<std::shared_ptr<Node<Real>>> parents,
                       std::function<void(Node<Real>&)> backward_fn) {
  auto t = make_node<Real>(std::move(op), std::move(shape), std::move(value), std::move(parents));
  ops_detail::attach(t, std::move(backward_fn));
  return t;
}

// ---------------------------------------------------------------------------
// primitive_forward: string-tag dispatch over the op vocabulary
// ---------------------------------------------------------------------------
struct OpAttrs {
  double tau = 1.0;                   // softmax_with_temperature
  int axis = -1;                      // reduce_*; concat/index_select (>=0)
  Shape shape;                        // reshape target
  std::vector<std::size_t> perm;      // transpose
  std::vector<std::size_t> indices;   // index_select
  std::size_t stride = 1;             // temporal_conv1d
  bool training = true;               // batchnorm mode
};

// batchnorm expects inputs {x, gamma, beta, running_mean, running_var}; the
// running-stat tensors are mutated in place in train mode.
template <class Real>
Tensor<Real> primitive_forward(const std::string& op_tag, std::vector<Tensor<Real>> inputs,
                               const OpAttrs& attrs = {}) {
  auto need = [&](std::size_t n) {
    CPM_CHECK(inputs.size() == n,
              "primitive_forward: op '" + op_tag + "' expects " + std::to_string(n) + " inputs");
  };
  if (op_tag == "matmul") { need(2); return matmul(inputs[0], inputs[1]); }
  if (op_tag == "add") { need(2); return add(inputs[0], inputs[1]); }
  if (op_tag == "multiply") { need(2); return multiply(inputs[0], inputs[1]); }
  if (op_tag == "divide") { need(2); return divide(inputs[0], inputs[1]); }
  if (op_tag == "relu") { need(1); return relu(inputs[0]); }
  if (op_tag == "exp") { need(1); return exp(inputs[0]); }
  if (op_tag == "log") { need(1); return log(inputs[0]); }
  if (op_tag == "reduce_sum") { need(1); return reduce_sum(inputs[0], attrs.axis); }
  if (op_tag == "reduce_mean") { need(1); return reduce_mean(inputs[0], attrs.axis); }
  if (op_tag == "softmax_with_temperature") {
    need(1);
    return softmax_with_temperature(inputs[0], attrs.tau);
  }
  if (op_tag == "l2_normalize_rows") { need(1); return l2_normalize_rows(inputs[0]); }
  if (op_tag == "mean_center_rows") { need(1); return mean_center_rows(inputs[0]); }
  if (op_tag == "batchnorm") {
    need(5);
    return batchnorm(inputs[0], inputs[1], inputs[2], inputs[3].values_mut(),
                     inputs[4].values_mut(), attrs.training);
  }
  if (op_tag == "temporal_conv1d") { need(2); return temporal_conv1d(inputs[0], inputs[1], attrs.stride); }
  if (op_tag == "reshape") { need(1); return reshape(inputs[0], attrs.shape); }
  if (op_tag == "transpose") { need(1); return transpose(inputs[0], attrs.perm); }
  if (op_tag == "concat") {
    CPM_CHECK(attrs.axis >= 0, "primitive_forward: concat needs a non-negative axis");
    return concat(inputs, static_cast<std::size_t>(attrs.axis));
  }
  if (op_tag == "index_select") {
    need(1);
    CPM_CHECK(attrs.axis >= 0, "primitive_forward: index_select needs a non-negative axis");
    return index_select(inputs[0], static_cast<std::size_t>(attrs.axis), attrs.indices);
  }
  if (op_tag == "stop_gradient") { need(1); return stop_gradient(inputs[0]); }
  throw Error("primitive_forward: unknown op tag '" + op_tag + "'");
}

// ---------------------------------------------------------------------------
// finite_difference_check
// ---------------------------------------------------------------------------

// Runs backward once for analytic grads, then central differences per
// coordinate. Returns max over coordinates of
//   |analytic - numeric| / max(1, |analytic|).
// Leaves that receive no gradient at all (e.g. cut off by stop_gradient) are
// skipped: only flowing paths are compared.
template <class Real>
double finite_difference_check(
    const std::function<Tensor<Real>(const std::vector<Tensor<Real>>&)>& f,
    const std::vector<Tensor<Real>>& point, double epsilon) {
  std::vector<Tensor<Real>> leaves;
  leaves.reserve(point.size());
  for (const auto& p : point) leaves.push_back(Tensor<Real>::leaf(p.shape(), p.values(), true));
  Tensor<Real> loss = f(leaves);
  CPM_CHECK(loss.size() == 1, "finite_difference_check: f must be scalar-valued");
  loss.backward();

  double worst = 0;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    const auto& g = leaves[li].grad();
    if (g.empty()) continue;  // no gradient flowed to this leaf
    for (std::size_t i = 0; i < g.size(); ++i) {
      std::vector<Tensor<Real>> probe;
      probe.reserve(leaves.size());
      for (const auto& l : leaves) probe.push_back(Tensor<Real>::leaf(l.shape(), l.values(), false));
      double fp, fm;
      {
        NoGradScope ng;
        probe[li].values_mut()[i] = leaves[li].values()[i] + static_cast<Real>(epsilon);
        fp = static_cast<double>(f(probe).item());
        probe[li].values_mut()[i] = leaves[li].values()[i] - static_cast<Real>(epsilon);
        fm = static_cast<double>(f(probe).item());
        probe[li].values_mut()[i] = leaves[li].values()[i];
      }
      const double numeric = (fp - fm) / (2 * epsilon);
      const double analytic = static_cast<double>(g[i]);
      const double err = std::abs(analytic - numeric) / std::max(1.0, std::abs(analytic));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace cpm
