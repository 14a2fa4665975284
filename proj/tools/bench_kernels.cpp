// Benchmarks the OpenMP kernels against the serial reference at the shapes
// the encoder actually uses, and reports GFLOP/s plus the max elementwise
// deviation between the two implementations.
#include <chrono>
#include <cstdio>
#include <random>
#include <string>
#include <vector>

#include "cpm/common.hpp"
#include "cpm/kernels.hpp"

using clk = std::chrono::steady_clock;

namespace {

double seconds_since(clk::time_point t0) {
  return std::chrono::duration<double>(clk::now() - t0).count();
}

template <class Real>
std::vector<Real> random_vec(std::size_t n, std::mt19937& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<Real> v(n);
  for (auto& x : v) x = static_cast<Real>(u(rng));
  return v;
}

template <class Real>
double max_abs_diff(const std::vector<Real>& a, const std::vector<Real>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return m;
}

template <class Fn>
double time_best_of(int reps, Fn&& fn) {
  double best = 1e300;
  for (int r = 0; r < reps; ++r) {
    const auto t0 = clk::now();
    fn();
    best = std::min(best, seconds_since(t0));
  }
  return best;
}

template <class Real>
void bench_gemm(std::size_t m, std::size_t n, std::size_t k, std::mt19937& rng) {
  auto a = random_vec<Real>(m * k, rng);
  auto b = random_vec<Real>(k * n, rng);
  std::vector<Real> c_par(m * n), c_ser(m * n);
  const double flop = 2.0 * double(m) * double(n) * double(k);

  cpm::kernels::set_parallel(false);
  const double ts = time_best_of(3, [&] { cpm::kernels::gemm_nn(m, n, k, a.data(), b.data(), c_ser.data()); });
  cpm::kernels::set_parallel(true);
  const double tp = time_best_of(3, [&] { cpm::kernels::gemm_nn(m, n, k, a.data(), b.data(), c_par.data()); });

  std::printf("gemm_nn %5zux%-5zu k=%-4zu %-6s serial %7.2f ms (%6.2f GF/s)  omp %7.2f ms (%6.2f GF/s)  max|d|=%.1e\n",
              m, n, k, sizeof(Real) == 4 ? "f32" : "f64", ts * 1e3, flop / ts * 1e-9, tp * 1e3,
              flop / tp * 1e-9, max_abs_diff(c_ser, c_par));
}

template <class Real>
void bench_conv(std::size_t b, std::size_t cin, std::size_t t, std::size_t v, std::size_t cout,
                std::size_t k, std::size_t stride, std::mt19937& rng) {
  const std::size_t pad = (k - 1) / 2;
  const std::size_t to = (t + 2 * pad - k) / stride + 1;
  auto x = random_vec<Real>(b * cin * t * v, rng);
  auto w = random_vec<Real>(cout * cin * k, rng);
  std::vector<Real> y_par(b * cout * to * v), y_ser(b * cout * to * v);
  const double flop = 2.0 * double(b) * double(cout) * double(to) * double(v) * double(cin) * double(k);

  cpm::kernels::set_parallel(false);
  const double ts = time_best_of(3, [&] {
    cpm::kernels::conv1d_forward(b, cin, t, v, cout, k, stride, pad, x.data(), w.data(), y_ser.data());
  });
  cpm::kernels::set_parallel(true);
  const double tp = time_best_of(3, [&] {
    cpm::kernels::conv1d_forward(b, cin, t, v, cout, k, stride, pad, x.data(), w.data(), y_par.data());
  });
  std::printf("conv1d  b%-3zu %3zu->%-3zu t=%-3zu s=%zu k=%zu %-4s serial %7.2f ms (%6.2f GF/s)  omp %7.2f ms (%6.2f GF/s)  max|d|=%.1e\n",
              b, cin, cout, t, stride, k, sizeof(Real) == 4 ? "f32" : "f64", ts * 1e3,
              flop / ts * 1e-9, tp * 1e3, flop / tp * 1e-9, max_abs_diff(y_ser, y_par));

  // backward-data / backward-weights at the same shape
  auto gy = random_vec<Real>(b * cout * to * v, rng);
  std::vector<Real> gx_par(b * cin * t * v), gx_ser(b * cin * t * v);
  cpm::kernels::set_parallel(false);
  const double tds = time_best_of(3, [&] {
    cpm::kernels::conv1d_backward_data(b, cin, t, v, cout, k, stride, pad, gy.data(), w.data(), gx_ser.data());
  });
  cpm::kernels::set_parallel(true);
  const double tdp = time_best_of(3, [&] {
    cpm::kernels::conv1d_backward_data(b, cin, t, v, cout, k, stride, pad, gy.data(), w.data(), gx_par.data());
  });
  std::vector<Real> gw_par(cout * cin * k), gw_ser(cout * cin * k);
  cpm::kernels::set_parallel(false);
  const double tws = time_best_of(3, [&] {
    cpm::kernels::conv1d_backward_weights(b, cin, t, v, cout, k, stride, pad, gy.data(), x.data(), gw_ser.data(), false);
  });
  cpm::kernels::set_parallel(true);
  const double twp = time_best_of(3, [&] {
    cpm::kernels::conv1d_backward_weights(b, cin, t, v, cout, k, stride, pad, gy.data(), x.data(), gw_par.data(), false);
  });
  std::printf("  bwd_data  serial %7.2f ms (%6.2f GF/s)  omp %7.2f ms (%6.2f GF/s)  max|d|=%.1e\n",
              tds * 1e3, flop / tds * 1e-9, tdp * 1e3, flop / tdp * 1e-9, max_abs_diff(gx_ser, gx_par));
  std::printf("  bwd_wt    serial %7.2f ms (%6.2f GF/s)  omp %7.2f ms (%6.2f GF/s)  max|d|=%.1e\n",
              tws * 1e3, flop / tws * 1e-9, twp * 1e3, flop / twp * 1e-9, max_abs_diff(gw_ser, gw_par));
}

}  // namespace

int main(int argc, char** argv) {
  const bool quick = argc > 1 && std::string(argv[1]) == "--quick";
  std::mt19937 rng(12345);

  std::puts("== gemm (spatial graph contraction shapes) ==");
  // (B*C*T, V) x (V, V) at each block, f32 and f64
  bench_gemm<float>(128 * 16 * 64, 15, 15, rng);
  bench_gemm<float>(128 * 64 * 16, 15, 15, rng);
  bench_gemm<double>(128 * 16 * 64, 15, 15, rng);
  if (!quick) {
    std::puts("\n== gemm (square reference) ==");
    bench_gemm<float>(512, 512, 512, rng);
    bench_gemm<double>(512, 512, 512, rng);
  }

  std::puts("\n== temporal conv (encoder block shapes) ==");
  bench_conv<float>(128, 16, 64, 15, 16, 9, 1, rng);
  bench_conv<float>(128, 32, 64, 15, 32, 9, 2, rng);
  bench_conv<float>(128, 64, 32, 15, 64, 9, 2, rng);
  if (!quick) {
    bench_conv<double>(128, 64, 32, 15, 64, 9, 2, rng);
    std::puts("\n== pointwise conv (spatial lift shapes) ==");
    bench_conv<float>(128, 3, 64, 15, 16, 1, 1, rng);
    bench_conv<float>(128, 32, 32, 15, 64, 1, 1, rng);
  }
  return 0;
}
