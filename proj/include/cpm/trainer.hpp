// Two-stage pre-training driver. Stage 1 matches the student's similarity
// distribution over the queue against the target's sharper distribution;
// stage 2 keeps the same loss shape but enhances the target at the mined
// top-K non-self positions. One optimizer step at a time; the queue is filled
// by forward-only passes before epoch 0 so every training step sees a full
// context. All randomness flows through a single std::mt19937 owned by the
// state, so equal seeds reproduce equal metric logs (bit-exact in f64).
#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <memory>
#include <random>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "cpm/augment.hpp"
#include "cpm/checkpoint.hpp"
#include "cpm/contrastive.hpp"
#include "cpm/kernels.hpp"
#include "cpm/model.hpp"
#include "cpm/skeleton.hpp"

namespace cpm {

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

struct TrainConfig {
  std::string precision = "f64";  // "f32" or "f64"
  std::uint64_t seed = 7;
  std::size_t epochs = 60;
  std::size_t stage_switch_epoch = 45;  // first epoch that mines positives
  std::size_t batch_size = 128;
  double peak_lr = 0.1;
  double floor_lr = 1e-4;
  std::size_t warmup_epochs = 5;  // learning-rate warmup, not the queue fill
  double tau = 0.1;               // student temperature
  double tau_prime = 0.05;        // target temperature
  std::size_t K = 16;             // positives mined per sample in stage 2
  std::size_t queue_capacity = 4096;
  bool symmetrize = false;
  bool ema = false;  // momentum target network instead of shared weights
  double ema_decay = 0.99;
  bool renormalize = false;  // renormalize the enhanced target distribution
  AugmentationConfig augment;
  EncoderConfig encoder;  // adjacency is attached from the dataset at run time

  void validate() const;  // scalar invariants; encoder checked once adjacency is set
};

// Strict parse: unknown keys at any nesting level are errors, as are JSON
// syntax errors (both throw cpm::Error). Serialization emits every resolved
// field, so round-tripping a default config is the full schema.
TrainConfig parse_train_config(const std::string& json_text);
TrainConfig load_train_config(const std::string& path);
std::string train_config_to_json(const TrainConfig& cfg);

// ---------------------------------------------------------------------------
// learning-rate schedule
// ---------------------------------------------------------------------------

// Linear warmup from 0 to peak over warmup_steps, then one cosine decay to
// floor across the remaining horizon (the schedule does not restart at the
// stage switch). Exact anchors: lr(0) = 0 when warmup_steps > 0,
// lr(warmup_steps) = peak, lr(total_steps - 1) = floor.
double lr_schedule(std::size_t step, std::size_t total_steps, std::size_t warmup_steps,
                   double peak, double floor);

// ---------------------------------------------------------------------------
// per-step metrics
// ---------------------------------------------------------------------------

struct StepMetrics {
  std::size_t step = 0;
  std::size_t epoch = 0;
  int stage = 0;  // 0 = queue warm-up fill, 1 = distribution matching, 2 = enhanced
  double lr = 0.0;
  double loss = 0.0;
  double mean_top1_sim = 0.0;  // batch mean of the best non-self queue similarity
  std::size_t queue_fill = 0;
  double wall_ms = 0.0;
};

std::string metrics_to_jsonl(const StepMetrics& m);  // one line, no newline

// ---------------------------------------------------------------------------
// trainer state
// ---------------------------------------------------------------------------

template <class Real>
struct TrainState {
  TrainConfig config;  // with adjacency attached
  ModelParams<Real> params;
  std::shared_ptr<ModelParams<Real>> ema_target;  // set iff config.ema
  std::vector<std::vector<Real>> momentum;        // aligned with named_params()
  ContextQueue queue;
  std::size_t epoch = 0;  // current epoch while running; next epoch in a checkpoint
  std::size_t step = 0;   // batches processed, queue warm-up included
  std::mt19937 rng;

  TrainState(const TrainConfig& cfg, const GraphAdjacency& adj)
      : config(cfg), queue(cfg.queue_capacity, cfg.encoder.projector_out) {
    config.validate();
    config.encoder.adjacency = adj;
    config.encoder.validate();
    params = ModelParams<Real>(config.encoder, config.seed);
    if (config.ema)  // same seed: the target starts as an exact copy
      ema_target = std::make_shared<ModelParams<Real>>(config.encoder, config.seed);
    for (auto& [name, t] : params.named_params())
      momentum.emplace_back(t.size(), Real(0));
    // Decoupled from the weight-init stream so reordering one cannot shift
    // the other.
    rng = make_rng(mix_seed(config.seed, 0x747261696eull));
  }
};

// ---------------------------------------------------------------------------
// optimizer: SGD with momentum and coupled weight decay
// g = grad + wd * p;  buf = m * buf + g;  p -= lr * buf
// ---------------------------------------------------------------------------

template <class Real>
void sgd_update(ModelParams<Real>& params, std::vector<std::vector<Real>>& momentum, double lr,
                double momentum_coef = 0.9, double weight_decay = 1e-4) {
  auto named = params.named_params();
  CPM_CHECK(momentum.size() == named.size(), "sgd: momentum buffer count mismatch");
  for (std::size_t i = 0; i < named.size(); ++i) {
    auto& p = named[i].second.values_mut();
    const auto& g = named[i].second.grad();
    CPM_CHECK(g.size() == p.size(), "sgd: parameter '" + named[i].first + "' has no gradient");
    auto& buf = momentum[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      const Real gj = g[j] + Real(weight_decay) * p[j];
      buf[j] = Real(momentum_coef) * buf[j] + gj;
      p[j] -= Real(lr) * buf[j];
    }
  }
}

// ---------------------------------------------------------------------------
// batch assembly
// ---------------------------------------------------------------------------

namespace trainer_detail {

inline std::vector<std::size_t> shuffled(std::vector<std::size_t> v, std::mt19937& rng) {
  std::shuffle(v.begin(), v.end(), rng);
  return v;
}

// Augments every sample in the batch into a view pair and packs the views
// into (B, C, T, V) tensors. Draws stay strictly serial in batch order.
template <class Real>
void build_pair_batch(const Dataset& ds, const std::vector<std::size_t>& batch,
                      const AugmentationConfig& acfg, std::mt19937& rng, Tensor<Real>& x,
                      Tensor<Real>& xp, std::vector<std::string>& ids) {
  const std::size_t B = batch.size();
  CPM_CHECK(B > 0, "batch: empty");
  const std::size_t C = ds.sequences.at(batch[0]).C;
  const std::size_t T = acfg.output_length;
  const std::size_t V = ds.manifest.V;
  std::vector<Real> xv(B * C * T * V), xpv(B * C * T * V);
  ids.resize(B);
  for (std::size_t b = 0; b < B; ++b) {
    const SkeletonSequence& seq = ds.sequences.at(batch[b]);
    CPM_CHECK(seq.C == C && seq.V == V, "batch: inconsistent sample shape");
    auto [va, vb] = augment_pair(seq, acfg, rng);
    const std::size_t off = b * C * T * V;
    for (std::size_t i = 0; i < C * T * V; ++i) {
      xv[off + i] = static_cast<Real>(va.data[i]);
      xpv[off + i] = static_cast<Real>(vb.data[i]);
    }
    ids[b] = ds.manifest.samples.at(batch[b]).id;
  }
  x = Tensor<Real>::leaf({B, C, T, V}, std::move(xv));
  xp = Tensor<Real>::leaf({B, C, T, V}, std::move(xpv));
}

inline std::string join_lines(const std::vector<std::string>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out.push_back('\n');
    out += v[i];
  }
  return out;
}

inline std::vector<std::string> split_lines(const std::string& s, std::size_t expect) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (out.size() + 1 < expect) {
    const std::size_t nl = s.find('\n', start);
    CPM_CHECK(nl != std::string::npos, "checkpoint: queue id list is truncated");
    out.emplace_back(s, start, nl - start);
    start = nl + 1;
  }
  out.emplace_back(s, start, std::string::npos);
  return out;
}

}  // namespace trainer_detail

// ---------------------------------------------------------------------------
// one optimizer step
// ---------------------------------------------------------------------------

// stage 1: target weights are the plain sharpened distribution over the
// queue; stage 2: top-K non-self positions are enhanced first. The queue
// snapshot taken at entry stays immutable for the whole step; the fresh
// target batch is pushed only after the parameter update.
template <class Real>
StepMetrics train_step(TrainState<Real>& state, const Dataset& ds,
                       const std::vector<std::size_t>& batch, int stage, double lr) {
  const auto t0 = std::chrono::steady_clock::now();
  const TrainConfig& cfg = state.config;
  CPM_CHECK(stage == 1 || stage == 2, "train_step: stage must be 1 or 2");
  CPM_CHECK(state.queue.full(), "train_step: queue not full (run the warm-up fill first)");

  Tensor<Real> x, xp;
  std::vector<std::string> ids;
  trainer_detail::build_pair_batch<Real>(ds, batch, cfg.augment, state.rng, x, xp, ids);
  const std::size_t B = batch.size();

  // Immutable snapshot (oldest first) shared by both loss directions.
  std::vector<double> entries;
  std::vector<std::string> entry_ids;
  state.queue.snapshot(entries, entry_ids);
  const std::size_t N = state.queue.size();
  const std::size_t dp = state.queue.dim();
  std::unordered_map<std::string, std::vector<std::size_t>> positions;
  for (std::size_t j = 0; j < N; ++j) positions[entry_ids[j]].push_back(j);

  auto fwd = state.params.forward_views(x, xp, /*training=*/true, cfg.symmetrize,
                                        cfg.ema ? state.ema_target.get() : nullptr);
  auto pbar = center_and_normalize(fwd.p_student, true);
  auto tbar = center_and_normalize(fwd.z_target, true);

  // Builds the per-sample target weights for one (student, target) direction
  // and returns the scalar loss. top1 != nullptr also accumulates the batch
  // mean of the best non-self similarity.
  auto one_direction = [&](const Tensor<Real>& student_norm, const Tensor<Real>& target_norm,
                           double* top1) {
    std::vector<double> trows(B * dp);
    const auto& tv = target_norm.values();
    CPM_CHECK(tv.size() == B * dp, "train_step: target width does not match the queue");
    for (std::size_t i = 0; i < trows.size(); ++i) trows[i] = static_cast<double>(tv[i]);
    std::vector<double> dots(B * N);
    kernels::gemm_nt(B, N, dp, trows.data(), entries.data(), dots.data());

    std::vector<double> weights(B * N);
    for (std::size_t b = 0; b < B; ++b) {
      std::vector<double> row(dots.begin() + b * N, dots.begin() + (b + 1) * N);
      static const std::vector<std::size_t> kNoSelf;
      auto self_it = positions.find(ids[b]);
      const std::vector<std::size_t>& self = self_it == positions.end() ? kNoSelf : self_it->second;
      if (top1) {
        double best = 0.0;
        bool any = false;
        std::size_t skip = 0;
        for (std::size_t j = 0; j < N; ++j) {
          if (skip < self.size() && self[skip] == j) {
            ++skip;
            continue;
          }
          if (!any || row[j] > best) best = row[j], any = true;
        }
        if (any) *top1 += best / static_cast<double>(B);
      }
      std::vector<double> w;
      if (stage == 1) {
        w = similarity_distribution(row, cfg.tau_prime);
      } else {
        auto mined = mine_topk(row, cfg.K, self);
        w = enhance_target(row, mined.indices, cfg.tau_prime, cfg.renormalize);
      }
      std::copy(w.begin(), w.end(), weights.begin() + b * N);
    }
    return distribution_matching_loss(student_norm, entries, N, weights, cfg.tau);
  };

  double top1 = 0.0;
  Tensor<Real> loss = one_direction(pbar, tbar, &top1);
  if (cfg.symmetrize) {
    auto pbar2 = center_and_normalize(fwd.p_student_sym, true);
    auto tbar2 = center_and_normalize(fwd.z_target_sym, true);
    auto second = one_direction(pbar2, tbar2, nullptr);
    loss = multiply(add(loss, second), Tensor<Real>::scalar(Real(0.5)));
  }

  const double loss_value = static_cast<double>(loss.item());
  if (!std::isfinite(loss_value)) {
    std::string dump = "train_step: non-finite loss at step " + std::to_string(state.step) +
                       " epoch " + std::to_string(state.epoch) + " stage " +
                       std::to_string(stage) + "; batch:";
    for (const auto& id : ids) dump += " " + id;
    throw Error(dump);
  }

  loss.backward();
  sgd_update(state.params, state.momentum, lr);
  for (auto& [name, t] : state.params.named_params()) t.zero_grad();
  if (cfg.ema) ema_update(*state.ema_target, state.params, cfg.ema_decay);

  {  // push the (already normalized) target batch; push re-normalizes defensively
    const auto& tv = tbar.values();
    std::vector<double> rowd(dp);
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t d = 0; d < dp; ++d) rowd[d] = static_cast<double>(tv[b * dp + d]);
      state.queue.push(rowd.data(), ids[b]);
    }
  }

  StepMetrics m;
  m.step = state.step;
  m.epoch = state.epoch;
  m.stage = stage;
  m.lr = lr;
  m.loss = loss_value;
  m.mean_top1_sim = top1;
  m.queue_fill = state.queue.size();
  m.wall_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  state.step += 1;
  return m;
}

// ---------------------------------------------------------------------------
// queue warm-up: forward-only target passes until the ring is full
// ---------------------------------------------------------------------------

template <class Real>
std::vector<StepMetrics> queue_warmup(TrainState<Real>& state, const Dataset& ds,
                                      const std::vector<std::size_t>& train_idx) {
  const TrainConfig& cfg = state.config;
  const std::size_t B = cfg.batch_size;
  const std::size_t fills = (cfg.queue_capacity + B - 1) / B;
  std::vector<std::size_t> stream;
  while (stream.size() < fills * B) {  // cycle reshuffled permutations as needed
    auto p = trainer_detail::shuffled(train_idx, state.rng);
    stream.insert(stream.end(), p.begin(), p.end());
  }
  std::vector<StepMetrics> out;
  out.reserve(fills);
  ModelParams<Real>& net = cfg.ema ? *state.ema_target : state.params;
  for (std::size_t f = 0; f < fills; ++f) {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<std::size_t> batch(stream.begin() + f * B, stream.begin() + (f + 1) * B);
    Tensor<Real> x, xp;
    std::vector<std::string> ids;
    trainer_detail::build_pair_batch<Real>(ds, batch, cfg.augment, state.rng, x, xp, ids);
    {
      NoGradScope ng;
      auto zb = center_and_normalize(net.project(net.encode(xp, true), true), true);
      const auto& zv = zb.values();
      const std::size_t dp = state.queue.dim();
      std::vector<double> rowd(dp);
      for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t d = 0; d < dp; ++d) rowd[d] = static_cast<double>(zv[b * dp + d]);
        state.queue.push(rowd.data(), ids[b]);
      }
    }
    StepMetrics m;
    m.step = state.step;
    m.epoch = state.epoch;
    m.stage = 0;
    m.queue_fill = state.queue.size();
    m.wall_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    state.step += 1;
    out.push_back(m);
  }
  CPM_CHECK(state.queue.full(), "queue_warmup: ring still not full");
  return out;
}

// ---------------------------------------------------------------------------
// trainer state <-> checkpoint
// ---------------------------------------------------------------------------

template <class Real>
void save_train_state(TrainState<Real>& st, const std::string& path) {
  Checkpoint ck;
  ck.config_json = train_config_to_json(st.config);
  save_model_params(ck, st.params);
  if (st.ema_target) save_model_params(ck, *st.ema_target, "ema.");
  auto named = st.params.named_params();
  CPM_CHECK(st.momentum.size() == named.size(), "checkpoint: momentum buffer count mismatch");
  for (std::size_t i = 0; i < named.size(); ++i)
    ckpt_detail::add_real<Real>(ck, "momentum." + named[i].first, named[i].second.shape(),
                                st.momentum[i]);
  ck.add_f64("queue.ring",
             {static_cast<std::uint32_t>(st.queue.capacity()),
              static_cast<std::uint32_t>(st.queue.dim())},
             st.queue.ring());
  ck.add_text("queue.ids", trainer_detail::join_lines(st.queue.ring_ids()));
  ck.add_i64("queue.cursor", {static_cast<std::int64_t>(st.queue.cursor())});
  ck.add_i64("queue.size", {static_cast<std::int64_t>(st.queue.size())});
  ck.add_i64("trainer.epoch", {static_cast<std::int64_t>(st.epoch)});
  ck.add_i64("trainer.step", {static_cast<std::int64_t>(st.step)});
  std::ostringstream rng_text;
  rng_text << st.rng;
  ck.add_text("trainer.rng", rng_text.str());
  ck.save(path);
}

// Rebuilds the state under `cfg` (which may differ from the stored config in
// loop knobs such as K or stage_switch_epoch, e.g. when branching an ablation
// off a shared stage-1 prefix) and restores every stored tensor, the queue,
// the counters, and the rng stream. Structural mismatches surface as record
// shape/precision errors.
template <class Real>
TrainState<Real> load_train_state(const std::string& path, const TrainConfig& cfg,
                                  const GraphAdjacency& adj) {
  Checkpoint ck = Checkpoint::load(path);
  TrainConfig stored = parse_train_config(ck.config_json);
  CPM_CHECK(stored.precision == cfg.precision,
            "resume: checkpoint precision " + stored.precision + " != config " + cfg.precision);
  CPM_CHECK(stored.batch_size == cfg.batch_size, "resume: batch size differs from checkpoint");
  TrainState<Real> st(cfg, adj);
  load_model_params(ck, st.params);
  if (st.ema_target) load_model_params(ck, *st.ema_target, "ema.");
  auto named = st.params.named_params();
  for (std::size_t i = 0; i < named.size(); ++i)
    st.momentum[i] =
        ckpt_detail::get_real<Real>(ck, "momentum." + named[i].first, named[i].second.size());
  const Record& ring = ck.get("queue.ring");
  CPM_CHECK(ring.dtype == Record::F64 && ring.count() == st.queue.capacity() * st.queue.dim(),
            "resume: queue ring does not match capacity " + std::to_string(cfg.queue_capacity));
  st.queue.restore(ring.f64,
                   trainer_detail::split_lines(ck.get("queue.ids").text, st.queue.capacity()),
                   static_cast<std::size_t>(ck.get("queue.cursor").i64.at(0)),
                   static_cast<std::size_t>(ck.get("queue.size").i64.at(0)));
  st.epoch = static_cast<std::size_t>(ck.get("trainer.epoch").i64.at(0));
  st.step = static_cast<std::size_t>(ck.get("trainer.step").i64.at(0));
  std::istringstream rng_text(ck.get("trainer.rng").text);
  rng_text >> st.rng;
  CPM_CHECK(!rng_text.fail(), "resume: malformed rng state record");
  return st;
}

// ---------------------------------------------------------------------------
// full run
// ---------------------------------------------------------------------------

struct PretrainResult {
  std::string checkpoint_path;  // final.cpmp, or last.cpmp when stopped early
  std::string metrics_path;
  std::size_t steps = 0;  // total batches processed, warm-up included
  double final_loss = 0.0;
};

inline constexpr std::size_t kRunToEnd = static_cast<std::size_t>(-1);

// Warm-up fill (fresh runs), then stage 1 until stage_switch_epoch and
// stage 2 after it. Writes metrics.jsonl, a config echo, and a rolling
// last.cpmp every epoch; final.cpmp only when the horizon completes.
// `resume_from` continues a checkpoint bit-exactly (f64); `stop_after_epoch`
// ends the run once that many epochs are done, e.g. to share a stage-1
// prefix between ablation branches.
PretrainResult run_pretrain(const TrainConfig& cfg, const Dataset& ds, const std::string& out_dir,
                            const std::string& resume_from = std::string(),
                            std::size_t stop_after_epoch = kRunToEnd);

}  // namespace cpm
