#include "cpm/contrastive.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace cpm {

// ---------------------------------------------------------------------------
// instrumentation
// ---------------------------------------------------------------------------
namespace {
std::atomic<std::uint64_t> g_degenerate{0};
std::atomic<std::uint64_t> g_mine{0};
std::atomic<std::uint64_t> g_enhance{0};
}  // namespace

std::uint64_t degenerate_row_count() { return g_degenerate.load(); }
std::uint64_t mine_call_count() { return g_mine.load(); }
std::uint64_t enhance_call_count() { return g_enhance.load(); }
void reset_instrumentation() {
  g_degenerate = 0;
  g_mine = 0;
  g_enhance = 0;
}

namespace instrument_detail {
void count_degenerate(std::uint64_t n) { g_degenerate += n; }
void count_mine() { ++g_mine; }
void count_enhance() { ++g_enhance; }
}  // namespace instrument_detail

// ---------------------------------------------------------------------------
// ContextQueue
// ---------------------------------------------------------------------------

ContextQueue::ContextQueue(std::size_t capacity, std::size_t dim)
    : capacity_(capacity), dim_(dim) {
  CPM_CHECK(capacity >= 1, "queue: capacity must be positive");
  CPM_CHECK(dim >= 1, "queue: dim must be positive");
  ring_.resize(capacity * dim, 0.0);
  ids_.resize(capacity);
}

void ContextQueue::push(const double* v, const std::string& sample_id) {
  CPM_CHECK(capacity_ > 0, "queue: not initialized");
  double s = 0;
  for (std::size_t j = 0; j < dim_; ++j) s += v[j] * v[j];
  const double norm = std::max(std::sqrt(s), 1e-12);
  double* slot = ring_.data() + cursor_ * dim_;
  for (std::size_t j = 0; j < dim_; ++j) slot[j] = v[j] / norm;
  ids_[cursor_] = sample_id;
  cursor_ = (cursor_ + 1) % capacity_;
  if (size_ < capacity_) ++size_;
}

void ContextQueue::snapshot(std::vector<double>& entries, std::vector<std::string>& ids) const {
  entries.resize(size_ * dim_);
  ids.resize(size_);
  // Oldest entry sits at the cursor once the ring has wrapped, else at 0.
  const std::size_t start = size_ == capacity_ ? cursor_ : 0;
  for (std::size_t k = 0; k < size_; ++k) {
    const std::size_t src = (start + k) % capacity_;
    std::copy_n(ring_.data() + src * dim_, dim_, entries.data() + k * dim_);
    ids[k] = ids_[src];
  }
}

void ContextQueue::restore(std::vector<double> ring, std::vector<std::string> ids,
                           std::size_t cursor, std::size_t size) {
  CPM_CHECK(ring.size() == capacity_ * dim_ && ids.size() == capacity_,
            "queue: restore size mismatch");
  CPM_CHECK(cursor < capacity_ && size <= capacity_, "queue: restore cursor/size out of range");
  ring_ = std::move(ring);
  ids_ = std::move(ids);
  cursor_ = cursor;
  size_ = size;
}

// ---------------------------------------------------------------------------
// distributions
// ---------------------------------------------------------------------------

std::vector<double> similarity_distribution(const std::vector<double>& dots, double tau) {
  CPM_CHECK(!dots.empty(), "similarity_distribution: empty queue");
  CPM_CHECK(tau > 0, "similarity_distribution: tau must be positive");
  double mx = dots[0];
  for (const double v : dots) mx = std::max(mx, v);
  std::vector<double> d(dots.size());
  double z = 0;
  for (std::size_t i = 0; i < dots.size(); ++i) {
    d[i] = std::exp((dots[i] - mx) / tau);
    z += d[i];
  }
  for (auto& v : d) v /= z;
  return d;
}

double kl_divergence(const std::vector<double>& target, const std::vector<double>& student) {
  CPM_CHECK(target.size() == student.size(), "kl: distribution sizes differ");
  double acc = 0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    const double t = target[i];
    if (t > 0) {
      CPM_CHECK(student[i] > 0, "kl: student weight is zero where target > 0");
      acc += t * (std::log(t) - std::log(student[i]));
    }
  }
  return acc;
}

double cross_entropy_gap(const std::vector<double>& target, const std::vector<double>& student) {
  // Same contraction; kept as its own name because the enhanced target may be
  // unnormalized and the result is then not a proper KL divergence.
  return kl_divergence(target, student);
}

MiningResult mine_topk(const std::vector<double>& scores, std::size_t k,
                       const std::vector<std::size_t>& excluded) {
  instrument_detail::count_mine();
  std::vector<char> skip(scores.size(), 0);
  for (const auto e : excluded) {
    CPM_CHECK(e < scores.size(), "mine_topk: excluded index out of range");
    skip[e] = 1;
  }
  std::vector<std::size_t> idx;
  idx.reserve(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i)
    if (!skip[i]) idx.push_back(i);
  CPM_CHECK(k <= idx.size(), "mine_topk: K = " + std::to_string(k) + " exceeds eligible entries (" +
                                 std::to_string(idx.size()) + ")");
  MiningResult out;
  if (k == 0) return out;
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) {
                      if (scores[a] != scores[b]) return scores[a] > scores[b];
                      return a < b;  // ties: lower (older) index wins
                    });
  out.indices.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k));
  out.scores.reserve(k);
  for (const auto i : out.indices) out.scores.push_back(scores[i]);
  return out;
}

std::vector<double> enhance_target(const std::vector<double>& raw_dots,
                                   const std::vector<std::size_t>& positives, double tau_prime,
                                   bool renormalize) {
  instrument_detail::count_enhance();
  // Shares the softmax routine with similarity_distribution so that an empty
  // positive set reproduces the plain distribution bit-for-bit; with
  // max-subtraction, overwriting index i with exp((1-mx)/tau')/Z' equals the
  // verbatim exp(1/tau')/Z.
  std::vector<double> d = similarity_distribution(raw_dots, tau_prime);
  if (!positives.empty()) {
    double mx = raw_dots[0];
    for (const double v : raw_dots) mx = std::max(mx, v);
    double z = 0;
    for (const double v : raw_dots) z += std::exp((v - mx) / tau_prime);
    const double boosted = std::exp((1.0 - mx) / tau_prime) / z;
    for (const auto i : positives) {
      CPM_CHECK(i < d.size(), "enhance_target: positive index out of range");
      d[i] = boosted;
    }
  }
  if (renormalize) {
    double s = 0;
    for (const double v : d) s += v;
    CPM_CHECK(s > 0, "enhance_target: renormalization over zero mass");
    for (auto& v : d) v /= s;
  }
  return d;
}

}  // namespace cpm
