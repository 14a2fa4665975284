// Stochastic skeleton augmentations producing the two contrastive views:
// shear (one random channel transform per call, applied to every frame/joint)
// followed by temporal crop (symmetric reflection padding, random window).
#pragma once

#include <array>
#include <random>
#include <utility>

#include "cpm/skeleton.hpp"

namespace cpm {

struct AugmentationConfig {
  double shear_amplitude = 0.5;
  double crop_pad_ratio = 1.0 / 6.0;
  std::size_t output_length = 64;  // T_out
};

// A = I3 + S, zero diagonal, off-diagonals ~ U(-amplitude, amplitude) drawn in
// row-major order. Exposed so tests can recompute det(A) of the drawn matrix.
inline std::array<double, 9> draw_shear_matrix(double amplitude, std::mt19937& rng) {
  std::uniform_real_distribution<double> u(-amplitude, amplitude);
  std::array<double, 9> a{1, 0, 0, 0, 1, 0, 0, 0, 1};
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 3; ++c)
      if (r != c) a[r * 3 + c] += u(rng);
  return a;
}

inline double det3(const std::array<double, 9>& a) {
  return a[0] * (a[4] * a[8] - a[5] * a[7]) - a[1] * (a[3] * a[8] - a[5] * a[6]) +
         a[2] * (a[3] * a[7] - a[4] * a[6]);
}

// y_c(t,v) = sum_k A[c,k] x_k(t,v); computed in double, stored as f32.
inline SkeletonSequence apply_shear(const SkeletonSequence& seq, const std::array<double, 9>& a) {
  CPM_CHECK(seq.C == 3, "shear: requires C = 3");
  SkeletonSequence out = seq;
  for (std::size_t t = 0; t < seq.T; ++t)
    for (std::size_t v = 0; v < seq.V; ++v) {
      const double x0 = seq.at(0, t, v), x1 = seq.at(1, t, v), x2 = seq.at(2, t, v);
      for (std::size_t c = 0; c < 3; ++c)
        out.at(c, t, v) =
            static_cast<float>(a[c * 3 + 0] * x0 + a[c * 3 + 1] * x1 + a[c * 3 + 2] * x2);
    }
  return out;
}

inline SkeletonSequence shear(const SkeletonSequence& seq, double amplitude, std::mt19937& rng) {
  return apply_shear(seq, draw_shear_matrix(amplitude, rng));
}

// Mirror (reflect-101) index: ..3 2 1 | 0 1 2 .. T-1 | T-2 T-3..
inline std::size_t reflect_index(long long i, std::size_t t) {
  const long long n = static_cast<long long>(t);
  if (n == 1) return 0;
  while (i < 0 || i >= n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * n - 2 - i;
  }
  return static_cast<std::size_t>(i);
}

// Pads floor(T*pad_ratio) frames on each side by reflection, then takes a
// uniformly random contiguous window of t_out frames.
inline SkeletonSequence temporal_crop(const SkeletonSequence& seq, double pad_ratio,
                                      std::size_t t_out, std::mt19937& rng) {
  CPM_CHECK(pad_ratio >= 0, "temporal_crop: negative pad ratio");
  CPM_CHECK(t_out >= 1, "temporal_crop: output length must be positive");
  const std::size_t pad = static_cast<std::size_t>(static_cast<double>(seq.T) * pad_ratio);
  const std::size_t padded = seq.T + 2 * pad;
  CPM_CHECK(t_out <= padded, "temporal_crop: window impossible (T_out " + std::to_string(t_out) +
                                 " > padded length " + std::to_string(padded) + ")");
  std::uniform_int_distribution<std::size_t> start_d(0, padded - t_out);
  const std::size_t start = start_d(rng);
  SkeletonSequence out;
  out.sample_id = seq.sample_id;
  out.label = seq.label;
  out.C = seq.C;
  out.T = t_out;
  out.V = seq.V;
  out.data.resize(seq.C * t_out * seq.V);
  for (std::size_t c = 0; c < seq.C; ++c)
    for (std::size_t t = 0; t < t_out; ++t) {
      const std::size_t src =
          reflect_index(static_cast<long long>(start + t) - static_cast<long long>(pad), seq.T);
      for (std::size_t v = 0; v < seq.V; ++v) out.at(c, t, v) = seq.at(c, src, v);
    }
  return out;
}

// Two independent shear-then-crop applications -> views (x, x').
inline std::pair<SkeletonSequence, SkeletonSequence> augment_pair(const SkeletonSequence& seq,
                                                                  const AugmentationConfig& cfg,
                                                                  std::mt19937& rng) {
  auto one = [&]() {
    return temporal_crop(shear(seq, cfg.shear_amplitude, rng), cfg.crop_pad_ratio,
                         cfg.output_length, rng);
  };
  auto x = one();
  auto xp = one();
  return {std::move(x), std::move(xp)};
}

}  // namespace cpm
