// Contextual queue, similarity distributions, KL matching loss, top-K
// positive mining, and the positive-enhanced target distribution.
//
// Distribution/loss math runs in 64-bit regardless of model precision
// (tau' = 0.05 puts exp arguments near 20, which is marginal in 32-bit).
// Stage 1 and stage 2 share one loss kernel: the stage-2 target with an empty
// positive set reduces to the stage-1 target bit-for-bit.
#pragma once

#include <atomic>
#include <cstdint>
#include <string>
#include <vector>

#include "cpm/kernels.hpp"
#include "cpm/ops.hpp"

namespace cpm {

// ---------------------------------------------------------------------------
// instrumentation
// ---------------------------------------------------------------------------
// Counts of degenerate (all-zero after centering) rows, mining invocations,
// and enhancement invocations; tests use these to pin stage behavior.
std::uint64_t degenerate_row_count();
std::uint64_t mine_call_count();
std::uint64_t enhance_call_count();
void reset_instrumentation();
namespace instrument_detail {
void count_degenerate(std::uint64_t n);
void count_mine();
void count_enhance();
}  // namespace instrument_detail

// ---------------------------------------------------------------------------
// ContextQueue: FIFO ring of unit-norm embeddings + originating sample ids
// ---------------------------------------------------------------------------
class ContextQueue {
 public:
  ContextQueue() = default;
  ContextQueue(std::size_t capacity, std::size_t dim);

  std::size_t capacity() const { return capacity_; }
  std::size_t dim() const { return dim_; }
  std::size_t size() const { return size_; }
  bool full() const { return size_ == capacity_; }

  // Entries are re-normalized on insertion (norms below 1e-12 are clamped, so
  // a collapsed embedding stays near zero rather than becoming NaN).
  void push(const double* v, const std::string& sample_id);

  // Oldest-first linearization: entries (size*dim) and matching sample ids.
  void snapshot(std::vector<double>& entries, std::vector<std::string>& ids) const;

  // Raw ring access for checkpointing.
  const std::vector<double>& ring() const { return ring_; }
  const std::vector<std::string>& ring_ids() const { return ids_; }
  std::size_t cursor() const { return cursor_; }
  void restore(std::vector<double> ring, std::vector<std::string> ids, std::size_t cursor,
               std::size_t size);

 private:
  std::size_t capacity_ = 0, dim_ = 0;
  std::size_t cursor_ = 0;  // next write slot
  std::size_t size_ = 0;
  std::vector<double> ring_;        // capacity*dim
  std::vector<std::string> ids_;    // capacity
};

// ---------------------------------------------------------------------------
// distribution primitives (pure 64-bit math)
// ---------------------------------------------------------------------------

// Max-subtracted softmax of dots/tau; invariant to adding a constant to all
// dots. Errors: empty input; tau <= 0.
std::vector<double> similarity_distribution(const std::vector<double>& dots, double tau);

// sum_i t_i log(t_i/s_i) with 0 log 0 == 0; error when s_i = 0 and t_i > 0.
double kl_divergence(const std::vector<double>& target, const std::vector<double>& student);

// H(t,s) - H(t) = sum_i t_i (log t_i - log s_i), evaluated verbatim even when
// sum t != 1 (the enhanced target is intentionally unnormalized).
double cross_entropy_gap(const std::vector<double>& target, const std::vector<double>& student);

struct MiningResult {
  std::vector<std::size_t> indices;  // selected, highest score first
  std::vector<double> scores;        // scores of the selected, same order
};

// Indices of the K largest scores; ties broken by lower index; entries whose
// index appears in `excluded` are never selected (self-exclusion). K larger
// than the number of eligible entries is an error.
MiningResult mine_topk(const std::vector<double>& scores, std::size_t k,
                       const std::vector<std::size_t>& excluded = {});

// Eq.-style enhancement, verbatim by default: with Z = sum_j exp(dots_j/tau')
// over the ORIGINAL dots, d^e_i = exp(1/tau')/Z for i in positives, else
// exp(dots_i/tau')/Z. Entries outside the positive set equal the plain
// distribution exactly. renormalize=true divides by sum d^e afterwards.
std::vector<double> enhance_target(const std::vector<double>& raw_dots,
                                   const std::vector<std::size_t>& positives, double tau_prime,
                                   bool renormalize = false);

// ---------------------------------------------------------------------------
// center_and_normalize: p(z) -> p_bar(z), z' -> z_bar'
// ---------------------------------------------------------------------------

// Subtract the per-dimension batch mean, then l2-normalize rows (1e-12
// guard). Rows that center to (near) zero bump the degenerate counter.
// Batch size 1 is an error in train mode.
template <class Real>
Tensor<Real> center_and_normalize(const Tensor<Real>& batch, bool training) {
  CPM_CHECK(batch.shape().size() == 2, "center_and_normalize: expects (B, d)");
  CPM_CHECK(!training || batch.shape()[0] >= 2,
            "center_and_normalize: batch size 1 in train mode");
  auto centered = mean_center_rows(batch);
  const std::size_t n = centered.shape()[0], d = centered.shape()[1];
  std::uint64_t degenerate = 0;
  for (std::size_t r = 0; r < n; ++r) {
    double s = 0;
    for (std::size_t j = 0; j < d; ++j) {
      const double v = static_cast<double>(centered.values()[r * d + j]);
      s += v * v;
    }
    if (std::sqrt(s) <= 1e-12) ++degenerate;
  }
  if (degenerate) instrument_detail::count_degenerate(degenerate);
  return l2_normalize_rows(centered);
}

// ---------------------------------------------------------------------------
// fused distribution-matching loss (stage 1 and stage 2)
// ---------------------------------------------------------------------------

// Batch-mean of per-sample H(t, s) - H(t) where s = softmax(dots(student_b,
// queue)/tau). `target_weights` holds one (possibly unnormalized) target row
// per sample, built by the caller from the plain or enhanced distribution.
// All internal arithmetic is double; the gradient
//   dL/d student_b = (1/B)(1/tau) * sum_j ((T_sum * s_j) - t_j) * a_j
// uses the computed row sum T_sum, so a normalized target reproduces the
// classic softmax-cross-entropy form s - t.
template <class Real>
Tensor<Real> distribution_matching_loss(const Tensor<Real>& student_norm,
                                        const std::vector<double>& queue_entries,
                                        std::size_t queue_size,
                                        const std::vector<double>& target_weights, double tau) {
  CPM_CHECK(student_norm.shape().size() == 2, "loss: student batch must be (B, d)");
  const std::size_t B = student_norm.shape()[0], d = student_norm.shape()[1];
  CPM_CHECK(queue_size > 0, "loss: empty queue");
  CPM_CHECK(tau > 0, "loss: tau must be positive");
  CPM_CHECK(queue_entries.size() == queue_size * d, "loss: queue entry dim mismatch");
  CPM_CHECK(target_weights.size() == B * queue_size, "loss: target row count mismatch");
  const std::size_t N = queue_size;

  auto ps = student_norm.node_ptr();
  // Cache student distributions, target rows, and row sums for the backward.
  auto s_cache = std::make_shared<std::vector<double>>(B * N);
  auto t_cache = std::make_shared<std::vector<double>>(target_weights);
  auto tsum_cache = std::make_shared<std::vector<double>>(B);
  std::vector<double> per_sample(B);

  std::atomic<bool> underflow{false};  // cannot throw inside the parallel region
  kernels::parallel_for(B, [&](std::size_t b) {
    const Real* vrow = ps->value.data() + b * d;
    std::vector<double> dots(N);
    for (std::size_t i = 0; i < N; ++i) {
      const double* a = queue_entries.data() + i * d;
      double acc = 0;
      for (std::size_t j = 0; j < d; ++j) acc += static_cast<double>(vrow[j]) * a[j];
      dots[i] = acc;
    }
    double mx = dots[0];
    for (std::size_t i = 1; i < N; ++i) mx = std::max(mx, dots[i]);
    double z = 0;
    double* srow = s_cache->data() + b * N;
    for (std::size_t i = 0; i < N; ++i) {
      srow[i] = std::exp((dots[i] - mx) / tau);
      z += srow[i];
    }
    double loss = 0, tsum = 0;
    const double* trow = target_weights.data() + b * N;
    for (std::size_t i = 0; i < N; ++i) {
      srow[i] /= z;
      const double t = trow[i];
      if (t > 0) {
        if (srow[i] <= 0) {
          underflow.store(true, std::memory_order_relaxed);
          continue;
        }
        loss += t * (std::log(t) - std::log(srow[i]));
      }
      tsum += t;
    }
    per_sample[b] = loss;
    (*tsum_cache)[b] = tsum;
  });
  CPM_CHECK(!underflow.load(), "loss: a student weight underflowed to zero where target > 0");
  double total = 0;
  for (std::size_t b = 0; b < B; ++b) total += per_sample[b];
  total /= static_cast<double>(B);

  // Copies the queue (N*d doubles) into the node; acceptable at desk scale.
  auto backward = [ps, s_cache, t_cache, tsum_cache, queue_entries, B, N, d,
                   tau](Node<Real>& nd) {
    if (!ps->requires_grad) return;
    ps->ensure_grad();
    const double g = static_cast<double>(nd.grad[0]);
    kernels::parallel_for(B, [&](std::size_t b) {
      Real* grow = ps->grad.data() + b * d;
      const double* srow = s_cache->data() + b * N;
      const double* trow = t_cache->data() + b * N;
      const double tsum = (*tsum_cache)[b];
      const double scale = g / (static_cast<double>(B) * tau);
      std::vector<double> acc(d, 0.0);
      for (std::size_t i = 0; i < N; ++i) {
        const double coeff = (tsum * srow[i] - trow[i]) * scale;
        if (coeff == 0.0) continue;
        const double* a = queue_entries.data() + i * d;
        for (std::size_t j = 0; j < d; ++j) acc[j] += coeff * a[j];
      }
      for (std::size_t j = 0; j < d; ++j) grow[j] += static_cast<Real>(acc[j]);
    });
  };
  auto t = custom_op<Real>("distribution_matching_loss", {1},
                           {static_cast<Real>(total)}, {ps}, backward);
  return t;
}

}  // namespace cpm
