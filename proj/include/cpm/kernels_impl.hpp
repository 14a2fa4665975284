// Implementation details for kernels.hpp: OpenMP variants, convolution loops,
// and the dispatching entry points.
#pragma once

#include <algorithm>
#include <cstdint>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace cpm::kernels {

namespace omp_impl {

template <class Real>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const Real* a, const Real* b, Real* c,
             bool accumulate = false) {
  if (n == 15) {
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(m); ++i)
      detail::gemm_nn_row<Real, 15>(static_cast<std::size_t>(i), n, k, a, b, c, accumulate);
  } else {
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(m); ++i)
      detail::gemm_nn_row(static_cast<std::size_t>(i), n, k, a, b, c, accumulate);
  }
}

template <class Real>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const Real* a, const Real* b, Real* c,
             bool accumulate = false) {
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < static_cast<std::int64_t>(m); ++i)
    detail::gemm_nt_row(static_cast<std::size_t>(i), n, k, a, b, c, accumulate);
}

template <class Real>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const Real* a, const Real* b, Real* c,
             bool accumulate = false) {
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < static_cast<std::int64_t>(m); ++i)
    detail::gemm_tn_row(static_cast<std::size_t>(i), n, m, k, a, b, c, accumulate);
}

}  // namespace omp_impl

template <class Real>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const Real* a, const Real* b, Real* c,
             bool accumulate) {
  if (parallel_enabled())
    omp_impl::gemm_nn(m, n, k, a, b, c, accumulate);
  else
    serial::gemm_nn(m, n, k, a, b, c, accumulate);
}

template <class Real>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const Real* a, const Real* b, Real* c,
             bool accumulate) {
  if (parallel_enabled())
    omp_impl::gemm_nt(m, n, k, a, b, c, accumulate);
  else
    serial::gemm_nt(m, n, k, a, b, c, accumulate);
}

template <class Real>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const Real* a, const Real* b, Real* c,
             bool accumulate) {
  if (parallel_enabled())
    omp_impl::gemm_tn(m, n, k, a, b, c, accumulate);
  else
    serial::gemm_tn(m, n, k, a, b, c, accumulate);
}

namespace detail {

// t' range with 0 <= stride*t' + u - pad < t, clamped to [0, to).
inline void conv_valid_range(std::size_t t, std::size_t to, std::size_t stride, std::size_t u,
                             std::size_t pad, std::size_t& lo, std::size_t& hi) {
  std::int64_t p = static_cast<std::int64_t>(pad), uu = static_cast<std::int64_t>(u);
  std::int64_t s = static_cast<std::int64_t>(stride);
  std::int64_t lo64 = (p - uu + s - 1) / s;  // ceil((pad-u)/stride) for pad >= u, else <= 0
  if (p - uu <= 0) lo64 = 0;
  std::int64_t hi64 = (static_cast<std::int64_t>(t) - 1 + p - uu) / s;  // floor
  lo = static_cast<std::size_t>(std::max<std::int64_t>(0, lo64));
  hi = static_cast<std::size_t>(std::min<std::int64_t>(static_cast<std::int64_t>(to) - 1, hi64));
}

}  // namespace detail

namespace serial_conv {

// Every plane body is templated on the compile-time row width VC (VC = 0
// means "use the runtime v"); the entry points dispatch on common joint
// counts so the 15-element row loops vectorize (see axpy_fixed).

template <std::size_t VC, class Real>
inline void row_axpy(std::size_t v, Real a, const Real* __restrict__ x, Real* __restrict__ y) {
  if constexpr (VC != 0)
    detail::axpy_fixed<VC>(a, x, y);
  else
    detail::axpy(v, a, x, y);
}

// For stride s > 1 the source frames touched by one kernel tap u all share
// the phase (u - pad) mod s, and consecutive outputs walk that phase's frames
// consecutively. Splitting the frame axis by phase therefore turns every tap
// into one long contiguous axpy, the same shape the stride-1 fast path uses.
// phase_off[r] is the row offset of phase r inside a split plane; the split
// plane has the same t*v footprint as the original.

inline void phase_offsets(std::size_t t, std::size_t stride, std::size_t* phase_off) {
  std::size_t acc = 0;
  for (std::size_t r = 0; r < stride; ++r) {
    phase_off[r] = acc;
    acc += (t - r + stride - 1) / stride;  // number of frames with q mod s == r
  }
}

template <class Real, std::size_t VC>
inline void split_plane_by_phase(std::size_t t, std::size_t v, std::size_t stride,
                                 const std::size_t* phase_off, const Real* x, Real* xs) {
  if constexpr (VC != 0) v = VC;
  for (std::size_t q = 0; q < t; ++q) {
    const std::size_t r = q % stride, tr = q / stride;
    std::memcpy(xs + (phase_off[r] + tr) * v, x + q * v, v * sizeof(Real));
  }
}

template <class Real, std::size_t VC>
inline void fwd_one(std::size_t b, std::size_t co, std::size_t cin, std::size_t t, std::size_t v,
                    std::size_t cout, std::size_t k, std::size_t stride, std::size_t pad,
                    std::size_t to, const Real* x, const Real* w, Real* y) {
  if constexpr (VC != 0) v = VC;
  Real* yplane = y + (b * cout + co) * to * v;
  std::memset(yplane, 0, to * v * sizeof(Real));
  for (std::size_t ci = 0; ci < cin; ++ci) {
    const Real* xplane = x + (b * cin + ci) * t * v;
    for (std::size_t u = 0; u < k; ++u) {
      const Real wv = w[(co * cin + ci) * k + u];
      if (wv == Real(0)) continue;
      std::size_t lo, hi;
      detail::conv_valid_range(t, to, stride, u, pad, lo, hi);
      if (lo > hi) continue;
      // source rows are contiguous: one flat axpy across (hi-lo+1) rows
      const std::size_t src = (lo + u - pad) * v;
      detail::axpy((hi - lo + 1) * v, wv, xplane + src, yplane + lo * v);
    }
  }
}

// Strided forward for one sample: phase-split x[b] once, then every
// (co, ci, u) contribution is a single contiguous axpy.
template <class Real, std::size_t VC>
inline void fwd_strided_item(std::size_t b, std::size_t cin, std::size_t t, std::size_t v,
                             std::size_t cout, std::size_t k, std::size_t stride, std::size_t pad,
                             std::size_t to, const Real* x, const Real* w, Real* y) {
  if constexpr (VC != 0) v = VC;
  std::size_t phase_off[16];
  phase_offsets(t, stride, phase_off);
  std::vector<Real> xs(cin * t * v);
  for (std::size_t ci = 0; ci < cin; ++ci)
    split_plane_by_phase<Real, VC>(t, v, stride, phase_off, x + (b * cin + ci) * t * v,
                                   xs.data() + ci * t * v);
  for (std::size_t co = 0; co < cout; ++co) {
    Real* yplane = y + (b * cout + co) * to * v;
    std::memset(yplane, 0, to * v * sizeof(Real));
    for (std::size_t ci = 0; ci < cin; ++ci) {
      const Real* xsplane = xs.data() + ci * t * v;
      for (std::size_t u = 0; u < k; ++u) {
        const Real wv = w[(co * cin + ci) * k + u];
        if (wv == Real(0)) continue;
        std::size_t lo, hi;
        detail::conv_valid_range(t, to, stride, u, pad, lo, hi);
        if (lo > hi) continue;
        const std::size_t q0 = lo * stride + u - pad;  // source frame of output lo
        const std::size_t src = (phase_off[q0 % stride] + q0 / stride) * v;
        detail::axpy((hi - lo + 1) * v, wv, xsplane + src, yplane + lo * v);
      }
    }
  }
}

template <class Real, std::size_t VC>
inline void bwd_data_one(std::size_t b, std::size_t ci, std::size_t cin, std::size_t t,
                         std::size_t v, std::size_t cout, std::size_t k, std::size_t stride,
                         std::size_t pad, std::size_t to, const Real* g, const Real* w, Real* gx) {
  if constexpr (VC != 0) v = VC;
  Real* xplane = gx + (b * cin + ci) * t * v;
  std::memset(xplane, 0, t * v * sizeof(Real));
  for (std::size_t co = 0; co < cout; ++co) {
    const Real* gplane = g + (b * cout + co) * to * v;
    for (std::size_t u = 0; u < k; ++u) {
      const Real wv = w[(co * cin + ci) * k + u];
      if (wv == Real(0)) continue;
      std::size_t lo, hi;
      detail::conv_valid_range(t, to, stride, u, pad, lo, hi);
      if (lo > hi) continue;
      const std::size_t dst = (lo + u - pad) * v;
      detail::axpy((hi - lo + 1) * v, wv, gplane + lo * v, xplane + dst);
    }
  }
}

// Strided backward-data for one (b, ci) plane: accumulate into a phase-split
// scratch with contiguous axpys, then interleave back once.
template <class Real, std::size_t VC>
inline void bwd_data_strided_one(std::size_t b, std::size_t ci, std::size_t cin, std::size_t t,
                                 std::size_t v, std::size_t cout, std::size_t k,
                                 std::size_t stride, std::size_t pad, std::size_t to,
                                 const Real* g, const Real* w, Real* gx) {
  if constexpr (VC != 0) v = VC;
  std::size_t phase_off[16];
  phase_offsets(t, stride, phase_off);
  std::vector<Real> gxs(t * v, Real(0));
  for (std::size_t co = 0; co < cout; ++co) {
    const Real* gplane = g + (b * cout + co) * to * v;
    for (std::size_t u = 0; u < k; ++u) {
      const Real wv = w[(co * cin + ci) * k + u];
      if (wv == Real(0)) continue;
      std::size_t lo, hi;
      detail::conv_valid_range(t, to, stride, u, pad, lo, hi);
      if (lo > hi) continue;
      const std::size_t q0 = lo * stride + u - pad;
      const std::size_t dst = (phase_off[q0 % stride] + q0 / stride) * v;
      detail::axpy((hi - lo + 1) * v, wv, gplane + lo * v, gxs.data() + dst);
    }
  }
  Real* xplane = gx + (b * cin + ci) * t * v;
  for (std::size_t q = 0; q < t; ++q)
    std::memcpy(xplane + q * v, gxs.data() + (phase_off[q % stride] + q / stride) * v,
                v * sizeof(Real));
}

// Accumulates grad_w[co, :, :] in one pass over the batch. Partial sums are
// kept per joint lane (accv[(ci*k+u)*v + j]) so the inner loop is a pure
// elementwise FMA with no horizontal reduction; lanes are summed once at the
// end. The scratch stays L1/L2-resident (cin*k*v elements) and every x row is
// read exactly once per output channel.
template <class Real, std::size_t VC>
inline void bwd_weight_plane(std::size_t co, std::size_t batch, std::size_t cin, std::size_t t,
                             std::size_t v, std::size_t cout, std::size_t k, std::size_t stride,
                             std::size_t pad, std::size_t to, const Real* g, const Real* x,
                             Real* gw, bool accumulate) {
  if constexpr (VC != 0) v = VC;
  // Blocking cin keeps the scratch under ~16 KB so it stays L1-resident;
  // contributions to any single (ci, u) remain in (b, tp) order, so the
  // result does not depend on the block size.
  std::size_t ci_block = std::max<std::size_t>(1, 16384 / (k * v * sizeof(Real)));
  ci_block = std::min(ci_block, cin);
  std::vector<Real> scratch(ci_block * k * v);
  for (std::size_t c0 = 0; c0 < cin; c0 += ci_block) {
    const std::size_t c1 = std::min(cin, c0 + ci_block);
    std::fill(scratch.begin(), scratch.end(), Real(0));
    Real* accv = scratch.data();
    for (std::size_t b = 0; b < batch; ++b) {
      const Real* gplane = g + (b * cout + co) * to * v;
      const Real* xbase = x + b * cin * t * v;
      for (std::size_t tp = 0; tp < to; ++tp) {
        const Real* __restrict__ grow = gplane + tp * v;
        // valid u range: 0 <= tp*stride + u - pad < t
        const std::int64_t base =
            static_cast<std::int64_t>(tp * stride) - static_cast<std::int64_t>(pad);
        const std::size_t ulo = base < 0 ? static_cast<std::size_t>(-base) : 0;
        const std::int64_t uhi64 = static_cast<std::int64_t>(t) - 1 - base;
        if (uhi64 < 0) continue;
        const std::size_t uhi = std::min(k - 1, static_cast<std::size_t>(uhi64));
        if (ulo > uhi) continue;
        const std::size_t src0 = static_cast<std::size_t>(base + static_cast<std::int64_t>(ulo));
        for (std::size_t ci = c0; ci < c1; ++ci) {
          // x rows for consecutive u are consecutive rows of the input plane
          const Real* __restrict__ xrow = xbase + (ci * t + src0) * v;
          Real* __restrict__ arow = accv + ((ci - c0) * k + ulo) * v;
          for (std::size_t u = ulo; u <= uhi; ++u, xrow += v, arow += v) {
            if constexpr (VC != 0)
              detail::fma_rows_fixed<VC>(grow, xrow, arow);
            else
              detail::fma_rows(v, grow, xrow, arow);
          }
        }
      }
    }
    for (std::size_t ci = c0; ci < c1; ++ci)
      for (std::size_t u = 0; u < k; ++u) {
        const Real* a = accv + ((ci - c0) * k + u) * v;
        Real s = 0;
        for (std::size_t j = 0; j < v; ++j) s += a[j];
        Real& dst = gw[(co * cin + ci) * k + u];
        dst = accumulate ? dst + s : s;
      }
  }
}

}  // namespace serial_conv

namespace conv_dispatch {

template <class Real, std::size_t VC>
void fwd(std::size_t batch, std::size_t cin, std::size_t t, std::size_t v, std::size_t cout,
         std::size_t k, std::size_t stride, std::size_t pad, std::size_t to, const Real* x,
         const Real* w, Real* y) {
  if (stride == 1) {
    const std::size_t planes = batch * cout;
    if (parallel_enabled()) {
#pragma omp parallel for schedule(static)
      for (std::int64_t i = 0; i < static_cast<std::int64_t>(planes); ++i)
        serial_conv::fwd_one<Real, VC>(static_cast<std::size_t>(i) / cout,
                                       static_cast<std::size_t>(i) % cout, cin, t, v, cout, k,
                                       stride, pad, to, x, w, y);
    } else {
      for (std::size_t i = 0; i < planes; ++i)
        serial_conv::fwd_one<Real, VC>(i / cout, i % cout, cin, t, v, cout, k, stride, pad, to, x,
                                       w, y);
    }
  } else {
    if (parallel_enabled()) {
#pragma omp parallel for schedule(static)
      for (std::int64_t b = 0; b < static_cast<std::int64_t>(batch); ++b)
        serial_conv::fwd_strided_item<Real, VC>(static_cast<std::size_t>(b), cin, t, v, cout, k,
                                                stride, pad, to, x, w, y);
    } else {
      for (std::size_t b = 0; b < batch; ++b)
        serial_conv::fwd_strided_item<Real, VC>(b, cin, t, v, cout, k, stride, pad, to, x, w, y);
    }
  }
}

template <class Real, std::size_t VC>
void bwd_data(std::size_t batch, std::size_t cin, std::size_t t, std::size_t v, std::size_t cout,
              std::size_t k, std::size_t stride, std::size_t pad, std::size_t to,
              const Real* grad_out, const Real* w, Real* grad_x) {
  const std::size_t planes = batch * cin;
  if (stride == 1) {
    if (parallel_enabled()) {
#pragma omp parallel for schedule(static)
      for (std::int64_t i = 0; i < static_cast<std::int64_t>(planes); ++i)
        serial_conv::bwd_data_one<Real, VC>(static_cast<std::size_t>(i) / cin,
                                            static_cast<std::size_t>(i) % cin, cin, t, v, cout, k,
                                            stride, pad, to, grad_out, w, grad_x);
    } else {
      for (std::size_t i = 0; i < planes; ++i)
        serial_conv::bwd_data_one<Real, VC>(i / cin, i % cin, cin, t, v, cout, k, stride, pad, to,
                                            grad_out, w, grad_x);
    }
  } else {
    if (parallel_enabled()) {
#pragma omp parallel for schedule(static)
      for (std::int64_t i = 0; i < static_cast<std::int64_t>(planes); ++i)
        serial_conv::bwd_data_strided_one<Real, VC>(static_cast<std::size_t>(i) / cin,
                                                    static_cast<std::size_t>(i) % cin, cin, t, v,
                                                    cout, k, stride, pad, to, grad_out, w, grad_x);
    } else {
      for (std::size_t i = 0; i < planes; ++i)
        serial_conv::bwd_data_strided_one<Real, VC>(i / cin, i % cin, cin, t, v, cout, k, stride,
                                                    pad, to, grad_out, w, grad_x);
    }
  }
}

template <class Real, std::size_t VC>
void bwd_wt(std::size_t batch, std::size_t cin, std::size_t t, std::size_t v, std::size_t cout,
            std::size_t k, std::size_t stride, std::size_t pad, std::size_t to,
            const Real* grad_out, const Real* x, Real* grad_w, bool accumulate) {
  if (parallel_enabled()) {
#pragma omp parallel for schedule(static)
    for (std::int64_t co = 0; co < static_cast<std::int64_t>(cout); ++co)
      serial_conv::bwd_weight_plane<Real, VC>(static_cast<std::size_t>(co), batch, cin, t, v,
                                              cout, k, stride, pad, to, grad_out, x, grad_w,
                                              accumulate);
  } else {
    for (std::size_t co = 0; co < cout; ++co)
      serial_conv::bwd_weight_plane<Real, VC>(co, batch, cin, t, v, cout, k, stride, pad, to,
                                              grad_out, x, grad_w, accumulate);
  }
}

}  // namespace conv_dispatch

template <class Real>
void conv1d_forward(std::size_t batch, std::size_t cin, std::size_t t, std::size_t v,
                    std::size_t cout, std::size_t k, std::size_t stride, std::size_t pad,
                    const Real* x, const Real* w, Real* y) {
  CPM_CHECK(t + 2 * pad >= k, "conv1d: kernel longer than padded input");
  CPM_CHECK(stride >= 1 && stride <= 16, "conv1d: stride outside [1, 16]");
  const std::size_t to = (t + 2 * pad - k) / stride + 1;
  if (v == 15)
    conv_dispatch::fwd<Real, 15>(batch, cin, t, v, cout, k, stride, pad, to, x, w, y);
  else if (v == 25)
    conv_dispatch::fwd<Real, 25>(batch, cin, t, v, cout, k, stride, pad, to, x, w, y);
  else
    conv_dispatch::fwd<Real, 0>(batch, cin, t, v, cout, k, stride, pad, to, x, w, y);
}

template <class Real>
void conv1d_backward_data(std::size_t batch, std::size_t cin, std::size_t t, std::size_t v,
                          std::size_t cout, std::size_t k, std::size_t stride, std::size_t pad,
                          const Real* grad_out, const Real* w, Real* grad_x) {
  const std::size_t to = (t + 2 * pad - k) / stride + 1;
  if (v == 15)
    conv_dispatch::bwd_data<Real, 15>(batch, cin, t, v, cout, k, stride, pad, to, grad_out, w,
                                      grad_x);
  else if (v == 25)
    conv_dispatch::bwd_data<Real, 25>(batch, cin, t, v, cout, k, stride, pad, to, grad_out, w,
                                      grad_x);
  else
    conv_dispatch::bwd_data<Real, 0>(batch, cin, t, v, cout, k, stride, pad, to, grad_out, w,
                                     grad_x);
}

template <class Real>
void conv1d_backward_weights(std::size_t batch, std::size_t cin, std::size_t t, std::size_t v,
                             std::size_t cout, std::size_t k, std::size_t stride, std::size_t pad,
                             const Real* grad_out, const Real* x, Real* grad_w, bool accumulate) {
  const std::size_t to = (t + 2 * pad - k) / stride + 1;
  if (k == 1 && stride == 1 && pad == 0) {
    // Pointwise case: grad_w[co,ci] = sum_b <grad plane, x plane>, i.e. one
    // gemm_nt over the flattened (t*v) axis per sample.
    if (!accumulate) std::memset(grad_w, 0, cout * cin * sizeof(Real));
    for (std::size_t b = 0; b < batch; ++b)
      gemm_nt(cout, cin, t * v, grad_out + b * cout * t * v, x + b * cin * t * v, grad_w, true);
    return;
  }
  if (v == 15)
    conv_dispatch::bwd_wt<Real, 15>(batch, cin, t, v, cout, k, stride, pad, to, grad_out, x,
                                    grad_w, accumulate);
  else if (v == 25)
    conv_dispatch::bwd_wt<Real, 25>(batch, cin, t, v, cout, k, stride, pad, to, grad_out, x,
                                    grad_w, accumulate);
  else
    conv_dispatch::bwd_wt<Real, 0>(batch, cin, t, v, cout, k, stride, pad, to, grad_out, x,
                                   grad_w, accumulate);
}

template <class Fn>
void parallel_for(std::size_t n, Fn&& body) {
  if (parallel_enabled()) {
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(n); ++i)
      body(static_cast<std::size_t>(i));
  } else {
    for (std::size_t i = 0; i < n; ++i) body(i);
  }
}

}  // namespace cpm::kernels
