#include "cpm/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <iomanip>
#include <random>
#include <sstream>

#include "cpm/common.hpp"
#include "cpm/contrastive.hpp"
#include "cpm/ops.hpp"
#include "cpm/tensor.hpp"

namespace cpm {

namespace {

using T64 = Tensor<double>;
using Leaves = std::vector<T64>;
using Fn = std::function<T64(const Leaves&)>;

constexpr double kEps = 1e-5;  // central-difference step (values are O(1))

std::vector<double> draw(std::mt19937& rng, std::size_t n, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

// Values bounded away from zero on both sides (relu kinks, divide/log poles).
std::vector<double> draw_signed_away(std::mt19937& rng, std::size_t n, double lo, double hi) {
  auto v = draw(rng, n, lo, hi);
  std::bernoulli_distribution flip(0.5);
  for (auto& x : v)
    if (flip(rng)) x = -x;
  return v;
}

// Contracts a multi-output op to a scalar through fixed random weights so
// every output coordinate influences the loss.
T64 weigh(const T64& y, const std::vector<double>& w) {
  auto wt = T64::leaf(y.shape(), w);
  return reduce_sum(multiply(y, wt), -1);
}

struct Suite {
  std::mt19937 rng;
  std::size_t points;
  GradCheckReport report;

  Suite(std::uint64_t seed, std::size_t points_per_case, double tol) : points(points_per_case) {
    rng = make_rng(mix_seed(seed, 0x67636bull));  // decoupled from model init streams
    report.tolerance = tol;
  }

  // One named case: `build` draws a fresh point and returns (f, leaves).
  void run(const std::string& name, const std::function<std::pair<Fn, Leaves>()>& build) {
    double worst = 0.0;
    for (std::size_t p = 0; p < points; ++p) {
      auto [f, leaves] = build();
      worst = std::max(worst, finite_difference_check<double>(f, leaves, kEps));
    }
    report.cases.push_back({name, points, worst});
  }
};

}  // namespace

double GradCheckReport::worst() const {
  double w = 0.0;
  for (const auto& c : cases) w = std::max(w, c.max_rel_err);
  return w;
}

bool GradCheckReport::passed() const {
  if (cases.empty()) return false;
  for (const auto& c : cases)
    if (!(c.max_rel_err < tolerance)) return false;
  return true;
}

std::string GradCheckReport::to_text() const {
  std::size_t width = 4;
  for (const auto& c : cases) width = std::max(width, c.name.size());
  std::ostringstream os;
  os << std::left << std::setw(static_cast<int>(width)) << "case"
     << "  points  max_rel_err\n";
  for (const auto& c : cases) {
    os << std::left << std::setw(static_cast<int>(width)) << c.name << "  " << std::right
       << std::setw(6) << c.points << "  " << std::scientific << std::setprecision(3)
       << c.max_rel_err << (c.max_rel_err < tolerance ? "" : "  << FAIL") << "\n";
  }
  os << (passed() ? "PASS" : "FAIL") << ": worst " << std::scientific << std::setprecision(3)
     << worst() << " vs tolerance " << tolerance << "\n";
  return os.str();
}

std::string GradCheckReport::to_json() const {
  std::ostringstream os;
  os << std::scientific << std::setprecision(17);
  os << "{\"tolerance\":" << tolerance << ",\"passed\":" << (passed() ? "true" : "false")
     << ",\"cases\":[";
  for (std::size_t i = 0; i < cases.size(); ++i) {
    if (i) os << ",";
    os << "{\"name\":\"" << cases[i].name << "\",\"points\":" << cases[i].points
       << ",\"max_rel_err\":" << cases[i].max_rel_err << "}";
  }
  os << "]}";
  return os.str();
}

GradCheckReport run_gradient_checks(std::uint64_t seed, std::size_t points_per_case,
                                    double tolerance) {
  Suite s(seed, points_per_case, tolerance);
  auto& rng = s.rng;

  // -------------------------------------------------------------------------
  // elementwise binaries (including broadcasting)
  // -------------------------------------------------------------------------
  s.run("add", [&] {
    Leaves in{T64::leaf({3, 4}, draw(rng, 12, -2, 2)), T64::leaf({1, 4}, draw(rng, 4, -2, 2))};
    auto w = draw(rng, 12, 0.5, 1.5);
    return std::pair<Fn, Leaves>([w](const Leaves& l) { return weigh(add(l[0], l[1]), w); }, in);
  });
  s.run("multiply", [&] {
    Leaves in{T64::leaf({3, 4}, draw(rng, 12, -2, 2)), T64::leaf({3, 1}, draw(rng, 3, -2, 2))};
    auto w = draw(rng, 12, 0.5, 1.5);
    return std::pair<Fn, Leaves>([w](const Leaves& l) { return weigh(multiply(l[0], l[1]), w); },
                                 in);
  });
  s.run("divide", [&] {
    Leaves in{T64::leaf({3, 4}, draw(rng, 12, -2, 2)),
              T64::leaf({3, 4}, draw_signed_away(rng, 12, 0.5, 2))};
    auto w = draw(rng, 12, 0.5, 1.5);
    return std::pair<Fn, Leaves>([w](const Leaves& l) { return weigh(divide(l[0], l[1]), w); },
                                 in);
  });

  // -------------------------------------------------------------------------
  // elementwise unaries
  // -------------------------------------------------------------------------
  s.run("relu", [&] {
    Leaves in{T64::leaf({3, 5}, draw_signed_away(rng, 15, 0.05, 2))};  // clear of the kink
    auto w = draw(rng, 15, 0.5, 1.5);
    return std::pair<Fn, Leaves>([w](const Leaves& l) { return weigh(relu(l[0]), w); }, in);
  });
  s.run("exp", [&] {
    Leaves in{T64::leaf({2, 5}, draw(rng, 10, -1.5, 1.5))};
    auto w = draw(rng, 10, 0.5, 1.5);
    return std::pair<Fn, Leaves>([w](const Leaves& l) { return weigh(exp(l[0]), w); }, in);
  });
  s.run("log", [&] {
    Leaves in{T64::leaf({2, 5}, draw(rng, 10, 0.2, 3))};
    auto w = draw(rng, 10, 0.5, 1.5);
    return std::pair<Fn, Leaves>([w](const Leaves& l) { return weigh(log(l[0]), w); }, in);
  });

  // -------------------------------------------------------------------------
  // matmul / reductions
  // -------------------------------------------------------------------------
  s.run("matmul", [&] {
    Leaves in{T64::leaf({3, 4}, draw(rng, 12, -1, 1)), T64::leaf({4, 5}, draw(rng, 20, -1, 1))};
    auto w = draw(rng, 15, 0.5, 1.5);
    return std::pair<Fn, Leaves>([w](const Leaves& l) { return weigh(matmul(l[0], l[1]), w); },
                                 in);
  });
  s.run("reduce_sum_all", [&] {
    Leaves in{T64::leaf({2, 3, 4}, draw(rng, 24, -2, 2))};
    return std::pair<Fn, Leaves>([](const Leaves& l) { return reduce_sum(l[0], -1); }, in);
  });
  s.run("reduce_sum_axis", [&] {
    const int axis = std::uniform_int_distribution<int>(0, 2)(rng);
    Leaves in{T64::leaf({2, 3, 4}, draw(rng, 24, -2, 2))};
    auto w = draw(rng, 24 / Shape{2, 3, 4}[static_cast<std::size_t>(axis)], 0.5, 1.5);
    return std::pair<Fn, Leaves>(
        [w, axis](const Leaves& l) { return weigh(reduce_sum(l[0], axis), w); }, in);
  });
  s.run("reduce_mean_axis", [&] {
    const int axis = std::uniform_int_distribution<int>(0, 2)(rng);
    Leaves in{T64::leaf({2, 3, 4}, draw(rng, 24, -2, 2))};
    auto w = draw(rng, 24 / Shape{2, 3, 4}[static_cast<std::size_t>(axis)], 0.5, 1.5);
    return std::pair<Fn, Leaves>(
        [w, axis](const Leaves& l) { return weigh(reduce_mean(l[0], axis), w); }, in);
  });

  // -------------------------------------------------------------------------
  // row ops
  // -------------------------------------------------------------------------
  s.run("softmax_with_temperature", [&] {
    const double tau = std::uniform_real_distribution<double>(0.07, 1.3)(rng);
    Leaves in{T64::leaf({3, 6}, draw(rng, 18, -1, 1))};
    auto w = draw(rng, 18, 0.5, 1.5);
    return std::pair<Fn, Leaves>(
        [w, tau](const Leaves& l) { return weigh(softmax_with_temperature(l[0], tau), w); }, in);
  });
  s.run("l2_normalize_rows", [&] {
    Leaves in{T64::leaf({4, 5}, draw_signed_away(rng, 20, 0.3, 2))};  // rows well off zero
    auto w = draw(rng, 20, 0.5, 1.5);
    return std::pair<Fn, Leaves>([w](const Leaves& l) { return weigh(l2_normalize_rows(l[0]), w); },
                                 in);
  });
  s.run("mean_center_rows", [&] {
    Leaves in{T64::leaf({4, 5}, draw(rng, 20, -2, 2))};
    auto w = draw(rng, 20, 0.5, 1.5);
    return std::pair<Fn, Leaves>([w](const Leaves& l) { return weigh(mean_center_rows(l[0]), w); },
                                 in);
  });

  // -------------------------------------------------------------------------
  // batchnorm: train/eval, 4-D (B,C,T,V) and 2-D (N,C)
  // -------------------------------------------------------------------------
  auto bn_case = [&](Shape xshape, std::size_t C, bool training) {
    const std::size_t n = numel(xshape);
    Leaves in{T64::leaf(xshape, draw(rng, n, -2, 2)),
              T64::leaf({C}, draw_signed_away(rng, C, 0.5, 1.5)),
              T64::leaf({C}, draw(rng, C, -1, 1))};
    auto rm0 = draw(rng, C, -0.5, 0.5);
    auto rv0 = draw(rng, C, 0.3, 2.0);
    auto w = draw(rng, n, 0.5, 1.5);
    Fn f = [rm0, rv0, training, w](const Leaves& l) {
      auto rm = rm0;  // fresh running stats per evaluation: train mode mutates
      auto rv = rv0;
      return weigh(batchnorm(l[0], l[1], l[2], rm, rv, training), w);
    };
    return std::pair<Fn, Leaves>(std::move(f), std::move(in));
  };
  s.run("batchnorm_train_4d", [&] { return bn_case({3, 2, 4, 3}, 2, true); });
  s.run("batchnorm_train_2d", [&] { return bn_case({8, 5}, 5, true); });
  s.run("batchnorm_eval_4d", [&] { return bn_case({3, 2, 4, 3}, 2, false); });
  s.run("batchnorm_eval_2d", [&] { return bn_case({8, 5}, 5, false); });

  // -------------------------------------------------------------------------
  // temporal convolution
  // -------------------------------------------------------------------------
  auto conv_case = [&](std::size_t stride) {
    const std::size_t B = 2, Cin = 3, T = 8, V = 4, Cout = 2, k = 3;
    Leaves in{T64::leaf({B, Cin, T, V}, draw(rng, B * Cin * T * V, -1, 1)),
              T64::leaf({Cout, Cin, k}, draw(rng, Cout * Cin * k, -1, 1))};
    const std::size_t To = (T + 2 * ((k - 1) / 2) - k) / stride + 1;
    auto w = draw(rng, B * Cout * To * V, 0.5, 1.5);
    Fn f = [w, stride](const Leaves& l) {
      return weigh(temporal_conv1d(l[0], l[1], stride), w);
    };
    return std::pair<Fn, Leaves>(std::move(f), std::move(in));
  };
  s.run("temporal_conv1d_s1", [&] { return conv_case(1); });
  s.run("temporal_conv1d_s2", [&] { return conv_case(2); });

  // -------------------------------------------------------------------------
  // shape ops
  // -------------------------------------------------------------------------
  s.run("reshape", [&] {
    Leaves in{T64::leaf({2, 6}, draw(rng, 12, -2, 2))};
    auto w = draw(rng, 12, 0.5, 1.5);
    return std::pair<Fn, Leaves>(
        [w](const Leaves& l) { return weigh(reshape(l[0], {3, 4}), w); }, in);
  });
  s.run("transpose", [&] {
    std::vector<std::size_t> perm{0, 1, 2};
    std::shuffle(perm.begin(), perm.end(), rng);
    Leaves in{T64::leaf({2, 3, 4}, draw(rng, 24, -2, 2))};
    auto w = draw(rng, 24, 0.5, 1.5);
    return std::pair<Fn, Leaves>(
        [w, perm](const Leaves& l) { return weigh(transpose(l[0], perm), w); }, in);
  });
  s.run("concat", [&] {
    const std::size_t axis = std::uniform_int_distribution<std::size_t>(0, 1)(rng);
    Leaves in{T64::leaf({2, 3}, draw(rng, 6, -2, 2)), T64::leaf({2, 3}, draw(rng, 6, -2, 2))};
    auto w = draw(rng, 12, 0.5, 1.5);
    return std::pair<Fn, Leaves>(
        [w, axis](const Leaves& l) { return weigh(concat<double>({l[0], l[1]}, axis), w); }, in);
  });
  s.run("index_select", [&] {
    const std::size_t axis = std::uniform_int_distribution<std::size_t>(0, 1)(rng);
    const std::size_t extent = axis == 0 ? 4 : 5;
    std::uniform_int_distribution<std::size_t> pick(0, extent - 1);
    std::vector<std::size_t> idx(6);
    for (auto& i : idx) i = pick(rng);  // repeats on purpose: gradients accumulate
    Leaves in{T64::leaf({4, 5}, draw(rng, 20, -2, 2))};
    const std::size_t out = 6 * (axis == 0 ? 5 : 4);
    auto w = draw(rng, out, 0.5, 1.5);
    return std::pair<Fn, Leaves>(
        [w, axis, idx](const Leaves& l) { return weigh(index_select(l[0], axis, idx), w); }, in);
  });
  // Flow cut: the first factor is behind stop_gradient, so only the second
  // leaf receives a gradient and differentiation treats the first as data.
  s.run("stop_gradient", [&] {
    Leaves in{T64::leaf({3, 4}, draw(rng, 12, -2, 2)), T64::leaf({3, 4}, draw(rng, 12, -2, 2))};
    return std::pair<Fn, Leaves>(
        [](const Leaves& l) { return reduce_sum(multiply(stop_gradient(l[0]), l[1]), -1); }, in);
  });

  // -------------------------------------------------------------------------
  // losses: plain distribution matching (Eq. 4) and enhanced target (Eq. 8),
  // both through center_and_normalize as in training
  // -------------------------------------------------------------------------
  const std::size_t B = 4, d = 6, N = 12;
  auto unit_rows = [&](std::size_t rows, std::size_t dim) {
    auto v = draw_signed_away(rng, rows * dim, 0.3, 1.5);
    for (std::size_t r = 0; r < rows; ++r) {
      double nrm = 0;
      for (std::size_t j = 0; j < dim; ++j) nrm += v[r * dim + j] * v[r * dim + j];
      nrm = std::sqrt(nrm);
      for (std::size_t j = 0; j < dim; ++j) v[r * dim + j] /= nrm;
    }
    return v;
  };
  s.run("loss_distribution_matching", [&] {
    auto queue = unit_rows(N, d);
    std::vector<double> targets;
    targets.reserve(B * N);
    for (std::size_t b = 0; b < B; ++b) {
      auto row = similarity_distribution(draw(rng, N, -1, 1), 0.05);
      targets.insert(targets.end(), row.begin(), row.end());
    }
    Leaves in{T64::leaf({B, d}, draw(rng, B * d, -1, 1))};
    Fn f = [queue, targets, N](const Leaves& l) {
      return distribution_matching_loss(center_and_normalize(l[0], true), queue, N, targets, 0.1);
    };
    return std::pair<Fn, Leaves>(std::move(f), std::move(in));
  });
  s.run("loss_enhanced_target", [&] {
    auto queue = unit_rows(N, d);
    std::uniform_int_distribution<std::size_t> kd(1, 4);
    std::vector<double> targets;
    targets.reserve(B * N);
    for (std::size_t b = 0; b < B; ++b) {
      auto dots = draw(rng, N, -1, 1);
      std::vector<std::size_t> order(N);
      for (std::size_t i = 0; i < N; ++i) order[i] = i;
      std::shuffle(order.begin(), order.end(), rng);
      order.resize(kd(rng));  // distinct positive indices
      auto row = enhance_target(dots, order, 0.05, false);
      targets.insert(targets.end(), row.begin(), row.end());
    }
    Leaves in{T64::leaf({B, d}, draw(rng, B * d, -1, 1))};
    Fn f = [queue, targets, N](const Leaves& l) {
      return distribution_matching_loss(center_and_normalize(l[0], true), queue, N, targets, 0.1);
    };
    return std::pair<Fn, Leaves>(std::move(f), std::move(in));
  });

  return s.report;
}

}  // namespace cpm
