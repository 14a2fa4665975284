// Dense numeric kernels behind the tensor ops.
//
// Every kernel has a serial reference implementation and an OpenMP variant.
// The OpenMP variants parallelize only across independent outputs and keep
// the per-output accumulation order identical to the serial code, so the two
// produce bit-identical results; tests assert that and bench_kernels compares
// their throughput. The process-wide flag below selects which one runs.
#pragma once

#include <cstddef>
#include <cstring>
#include <vector>

#include "cpm/common.hpp"

namespace cpm::kernels {

bool parallel_enabled();
void set_parallel(bool on);

namespace detail {

// y[0..n) += a * x[0..n). The restrict qualifiers matter: without them the
// compiler must assume y aliases x and re-load/store every element, which
// costs ~4x at the short row lengths (V = 15) the encoder uses.
template <class Real>
inline void axpy(std::size_t n, Real a, const Real* __restrict__ x, Real* __restrict__ y) {
  for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

// Fixed-length variants: loops over a runtime n = 15 never clear the
// vectorizer's AVX-512 trip-count threshold and run scalar (~6 GF/s); with a
// compile-time length the compiler unrolls them into full-width SIMD. The
// conv/gemm entry points dispatch on the handful of row widths that occur.
template <std::size_t N, class Real>
inline void axpy_fixed(Real a, const Real* __restrict__ x, Real* __restrict__ y) {
  for (std::size_t i = 0; i < N; ++i) y[i] += a * x[i];
}

template <std::size_t N, class Real>
inline void fma_rows_fixed(const Real* __restrict__ a, const Real* __restrict__ b,
                           Real* __restrict__ acc) {
  for (std::size_t i = 0; i < N; ++i) acc[i] += a[i] * b[i];
}

template <class Real>
inline void fma_rows(std::size_t n, const Real* __restrict__ a, const Real* __restrict__ b,
                     Real* __restrict__ acc) {
  for (std::size_t i = 0; i < n; ++i) acc[i] += a[i] * b[i];
}

// NC/KC are optional compile-time row widths (0 = runtime); fixing them does
// not change the accumulation order, only lets the compiler unroll.
template <class Real, std::size_t NC = 0>
inline void gemm_nn_row(std::size_t i, std::size_t n, std::size_t k, const Real* __restrict__ a,
                        const Real* __restrict__ b, Real* __restrict__ c, bool accumulate) {
  if constexpr (NC != 0) n = NC;
  Real* __restrict__ crow = c + i * n;
  if (!accumulate) std::memset(crow, 0, n * sizeof(Real));
  const Real* __restrict__ arow = a + i * k;
  for (std::size_t kk = 0; kk < k; ++kk) {
    if constexpr (NC != 0)
      axpy_fixed<NC>(arow[kk], b + kk * n, crow);
    else
      axpy(n, arow[kk], b + kk * n, crow);
  }
}

// Dot product with 16 independent accumulator lanes summed in a fixed order
// at the end. Plain `acc += a[i]*b[i]` cannot be vectorized (float addition
// is not associative, and we do not enable -ffast-math), so it runs scalar
// and latency-bound; the lane split is the reassociation done by hand, with
// a deterministic order.
template <class Real>
inline Real dot_lanes(std::size_t n, const Real* __restrict__ a, const Real* __restrict__ b) {
  constexpr std::size_t L = 16;
  Real lane[L] = {};
  std::size_t i = 0;
  for (; i + L <= n; i += L)
    for (std::size_t j = 0; j < L; ++j) lane[j] += a[i + j] * b[i + j];
  Real tail = 0;
  for (; i < n; ++i) tail += a[i] * b[i];
  Real s = 0;
  for (std::size_t j = 0; j < L; ++j) s += lane[j];
  return s + tail;
}

template <class Real>
inline void gemm_nt_row(std::size_t i, std::size_t n, std::size_t k, const Real* __restrict__ a,
                        const Real* __restrict__ b, Real* __restrict__ c, bool accumulate) {
  const Real* __restrict__ arow = a + i * k;
  Real* __restrict__ crow = c + i * n;
  for (std::size_t j = 0; j < n; ++j) {
    const Real acc = dot_lanes(k, arow, b + j * k);
    crow[j] = accumulate ? crow[j] + acc : acc;
  }
}

template <class Real>
inline void gemm_tn_row(std::size_t i, std::size_t n, std::size_t m, std::size_t k,
                        const Real* __restrict__ a, const Real* __restrict__ b,
                        Real* __restrict__ c, bool accumulate) {
  Real* __restrict__ crow = c + i * n;
  if (!accumulate) std::memset(crow, 0, n * sizeof(Real));
  for (std::size_t kk = 0; kk < k; ++kk) axpy(n, a[kk * m + i], b + kk * n, crow);
}

}  // namespace detail

// C(m,n) = A(m,k) * B(k,n), row-major. accumulate adds into C.
template <class Real>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const Real* a, const Real* b, Real* c,
             bool accumulate = false);

// C(m,n) = A(m,k) * B(n,k)^T
template <class Real>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const Real* a, const Real* b, Real* c,
             bool accumulate = false);

// C(m,n) = A(k,m)^T * B(k,n)
template <class Real>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const Real* a, const Real* b, Real* c,
             bool accumulate = false);

// 1-D convolution over the T axis of (B, C, T, V) feature maps, channels fully
// connected, zero padding `pad`, stride `stride`. Output length
// To = (T + 2*pad - k) / stride + 1.
template <class Real>
void conv1d_forward(std::size_t batch, std::size_t cin, std::size_t t, std::size_t v,
                    std::size_t cout, std::size_t k, std::size_t stride, std::size_t pad,
                    const Real* x, const Real* w, Real* y);

template <class Real>
void conv1d_backward_data(std::size_t batch, std::size_t cin, std::size_t t, std::size_t v,
                          std::size_t cout, std::size_t k, std::size_t stride, std::size_t pad,
                          const Real* grad_out, const Real* w, Real* grad_x);

template <class Real>
void conv1d_backward_weights(std::size_t batch, std::size_t cin, std::size_t t, std::size_t v,
                             std::size_t cout, std::size_t k, std::size_t stride, std::size_t pad,
                             const Real* grad_out, const Real* x, Real* grad_w,
                             bool accumulate = false);

// Runs body(i) for i in [0, n). Bodies must write disjoint outputs.
template <class Fn>
void parallel_for(std::size_t n, Fn&& body);

namespace serial {

template <class Real>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const Real* a, const Real* b, Real* c,
             bool accumulate = false) {
  if (n == 15)
    for (std::size_t i = 0; i < m; ++i) detail::gemm_nn_row<Real, 15>(i, n, k, a, b, c, accumulate);
  else
    for (std::size_t i = 0; i < m; ++i) detail::gemm_nn_row(i, n, k, a, b, c, accumulate);
}

template <class Real>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const Real* a, const Real* b, Real* c,
             bool accumulate = false) {
  for (std::size_t i = 0; i < m; ++i) detail::gemm_nt_row(i, n, k, a, b, c, accumulate);
}

template <class Real>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const Real* a, const Real* b, Real* c,
             bool accumulate = false) {
  for (std::size_t i = 0; i < m; ++i) detail::gemm_tn_row(i, n, m, k, a, b, c, accumulate);
}

}  // namespace serial

}  // namespace cpm::kernels

#include "cpm/kernels_impl.hpp"
