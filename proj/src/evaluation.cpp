#include "cpm/evaluation.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <unordered_map>

#include <nlohmann/json.hpp>

#include "cpm/checkpoint.hpp"
#include "cpm/contrastive.hpp"
#include "cpm/ops.hpp"
#include "cpm/trainer.hpp"

namespace cpm {

using nlohmann::json;

namespace {

// ---------------------------------------------------------------------------
// shared plumbing
// ---------------------------------------------------------------------------

std::size_t class_count(const Dataset& ds) {
  int mx = -1;
  for (const auto& s : ds.manifest.samples) {
    CPM_CHECK(s.label >= 0, "eval: dataset has unlabeled samples");
    mx = std::max(mx, s.label);
  }
  return static_cast<std::size_t>(mx) + 1;
}

// Cosine decay from peak to zero with the final step anchored at zero.
double cosine_lr(double peak, std::size_t step, std::size_t total) {
  if (total <= 1) return peak;
  const double t = static_cast<double>(step) / (total - 1);
  return 0.5 * peak * (1.0 + std::cos(std::numbers::pi * t));
}

template <class Real>
ModelParams<Real> build_net(const Checkpoint* ck, const TrainConfig* stored,
                            const EvalOptions& opt, const Dataset& ds) {
  EncoderConfig ec = ck ? stored->encoder : opt.encoder;
  ec.adjacency = build_adjacency(ds.manifest.V, ds.manifest.edges);
  ec.validate();
  ModelParams<Real> net(ec, ck ? stored->seed : opt.seed);
  if (ck) load_model_params(*ck, net);
  return net;
}

// Packs raw (un-augmented) sequences into a (B, C, T, V) leaf. Evaluation
// protocols run on full-length inputs; the temporal convolutions accept any
// T, but one batch must share a single length.
template <class Real>
Tensor<Real> pack_batch(const Dataset& ds, const std::size_t* idx, std::size_t B) {
  const SkeletonSequence& first = ds.sequences.at(idx[0]);
  const std::size_t C = first.C, T = first.T, V = first.V;
  std::vector<Real> xv(B * C * T * V);
  for (std::size_t b = 0; b < B; ++b) {
    const SkeletonSequence& seq = ds.sequences.at(idx[b]);
    CPM_CHECK(seq.C == C && seq.T == T && seq.V == V,
              "eval: sequences in one batch must share one shape");
    for (std::size_t i = 0; i < C * T * V; ++i)
      xv[b * C * T * V + i] = static_cast<Real>(seq.data[i]);
  }
  return Tensor<Real>::leaf({B, C, T, V}, std::move(xv));
}

// Eval-mode embedding table over `idx`: pooled features h, or projector
// output z when with_projector is set. Rows come back as doubles.
template <class Real>
std::vector<double> encode_table(ModelParams<Real>& net, const Dataset& ds,
                                 const std::vector<std::size_t>& idx, std::size_t batch,
                                 bool with_projector, std::size_t* dim_out) {
  NoGradScope ng;
  std::vector<double> rows;
  std::size_t dim = 0;
  for (std::size_t at = 0; at < idx.size(); at += batch) {
    const std::size_t B = std::min(batch, idx.size() - at);
    auto x = pack_batch<Real>(ds, idx.data() + at, B);
    auto h = net.encode(x, false);
    if (with_projector) h = net.project(h, false);
    dim = h.shape()[1];
    const auto& hv = h.values();
    rows.reserve(rows.size() + hv.size());
    for (const Real v : hv) rows.push_back(static_cast<double>(v));
  }
  *dim_out = dim;
  return rows;
}

// ---------------------------------------------------------------------------
// softmax classifier head
// ---------------------------------------------------------------------------

template <class Real>
struct Head {
  Tensor<Real> w, b;
};

template <class Real>
Head<Real> make_head(std::size_t feature_dim, std::size_t classes) {
  // Zero init: softmax cross-entropy over a linear map is convex, so the
  // start point is a determinism choice, not a tuning one.
  return {Tensor<Real>::zeros({feature_dim, classes}, true),
          Tensor<Real>::zeros({classes}, true)};
}

// Fused stable softmax cross-entropy: the forward goes through the
// max-subtracted log-sum-exp, the backward is (softmax - onehot) / B.
// Composing log(softmax(...)) from primitives underflows to log(0) once a
// logit gap passes ~745, which a confidently fit head reaches easily.
template <class Real>
Tensor<Real> softmax_ce(const Tensor<Real>& logits, const int* labels, std::size_t classes) {
  auto pl = logits.node_ptr();
  CPM_CHECK(pl->shape.size() == 2 && pl->shape[1] == classes, "eval: logits shape mismatch");
  const std::size_t B = pl->shape[0];
  auto probs = std::make_shared<std::vector<double>>(B * classes);
  auto onehot = std::make_shared<std::vector<std::size_t>>(B);
  double total = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    CPM_CHECK(labels[b] >= 0 && static_cast<std::size_t>(labels[b]) < classes,
              "eval: label outside the class range");
    (*onehot)[b] = static_cast<std::size_t>(labels[b]);
    const Real* lrow = pl->value.data() + b * classes;
    double mx = static_cast<double>(lrow[0]);
    for (std::size_t c = 1; c < classes; ++c) mx = std::max(mx, static_cast<double>(lrow[c]));
    double z = 0.0;
    double* prow = probs->data() + b * classes;
    for (std::size_t c = 0; c < classes; ++c) {
      prow[c] = std::exp(static_cast<double>(lrow[c]) - mx);
      z += prow[c];
    }
    for (std::size_t c = 0; c < classes; ++c) prow[c] /= z;
    total += std::log(z) - (static_cast<double>(lrow[(*onehot)[b]]) - mx);
  }
  return custom_op<Real>(
      "softmax_cross_entropy", {1}, {static_cast<Real>(total / B)}, {pl},
      [pl, probs, onehot, B, classes](Node<Real>& n) {
        auto& gx = ops_detail::grad_buf(pl);
        const double g = static_cast<double>(n.grad[0]) / B;
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t c = 0; c < classes; ++c) {
            const double oh = (*onehot)[b] == c ? 1.0 : 0.0;
            gx[b * classes + c] += static_cast<Real>(g * ((*probs)[b * classes + c] - oh));
          }
      });
}

template <class Real>
void sgd_tensor(Tensor<Real>& t, std::vector<Real>& buf, double lr, double momentum) {
  auto& p = t.values_mut();
  const auto& g = t.grad();
  CPM_CHECK(g.size() == p.size(), "eval: head tensor has no gradient");
  for (std::size_t j = 0; j < p.size(); ++j) {
    buf[j] = Real(momentum) * buf[j] + g[j];
    p[j] -= Real(lr) * buf[j];
  }
  t.zero_grad();
}

// Trains the head on a fixed feature table (the frozen linear protocol).
Head<double> train_linear_head(const std::vector<double>& feats, std::size_t dim,
                               const std::vector<int>& labels, std::size_t classes,
                               const EvalOptions& opt) {
  const std::size_t n = labels.size();
  CPM_CHECK(n >= 1 && feats.size() == n * dim, "eval: feature table shape mismatch");
  auto head = make_head<double>(dim, classes);
  std::vector<double> buf_w(dim * classes, 0.0), buf_b(classes, 0.0);
  auto rng = make_rng(mix_seed(opt.seed, 0x68656164ull));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  const std::size_t B = std::min(opt.batch_size, n);
  const std::size_t per_epoch = (n + B - 1) / B;  // tail batches kept (no batchnorm here)
  const std::size_t total = opt.epochs * per_epoch;
  std::size_t step = 0;
  for (std::size_t e = 0; e < opt.epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t at = 0; at < n; at += B) {
      const std::size_t bs = std::min(B, n - at);
      std::vector<double> xv(bs * dim);
      std::vector<int> yv(bs);
      for (std::size_t b = 0; b < bs; ++b) {
        const std::size_t i = order[at + b];
        std::copy_n(feats.begin() + i * dim, dim, xv.begin() + b * dim);
        yv[b] = labels[i];
      }
      auto x = Tensor<double>::leaf({bs, dim}, std::move(xv));
      auto loss = softmax_ce(add(matmul(x, head.w), head.b), yv.data(), classes);
      loss.backward();
      const double lr = cosine_lr(opt.lr, step++, total);
      sgd_tensor(head.w, buf_w, lr, opt.momentum);
      sgd_tensor(head.b, buf_b, lr, opt.momentum);
    }
  }
  return head;
}

// Center per dimension with train-split statistics, then scale every row to
// unit L2 norm (applied to both splits). This keeps the probe invariant to
// encoder feature scale, so the protocol's fixed lr is stable on any
// checkpoint; angles, which carry the class structure, are preserved.
void prepare_features(std::vector<double>& train, std::vector<double>& test, std::size_t dim) {
  const std::size_t n = train.size() / dim;
  std::vector<double> mean(dim, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t d = 0; d < dim; ++d) mean[d] += train[i * dim + d];
  for (double& m : mean) m /= static_cast<double>(n);
  auto apply = [&](std::vector<double>& rows) {
    for (std::size_t i = 0; i * dim < rows.size(); ++i) {
      double* r = rows.data() + i * dim;
      double nrm = 0.0;
      for (std::size_t d = 0; d < dim; ++d) {
        r[d] -= mean[d];
        nrm += r[d] * r[d];
      }
      nrm = std::max(std::sqrt(nrm), 1e-12);
      for (std::size_t d = 0; d < dim; ++d) r[d] /= nrm;
    }
  };
  apply(train);
  apply(test);
}

// Argmax prediction over double logits; ties resolve to the lower class.
std::size_t predict_row(const std::vector<double>& w, const std::vector<double>& b,
                        const double* x, std::size_t dim, std::size_t classes) {
  std::size_t best = 0;
  double best_v = -std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < classes; ++c) {
    double v = b[c];
    for (std::size_t d = 0; d < dim; ++d) v += x[d] * w[d * classes + c];
    if (v > best_v) best_v = v, best = c;
  }
  return best;
}

void fill_report(EvalReport& r, const std::vector<double>& w, const std::vector<double>& b,
                 const std::vector<double>& test_feats, std::size_t dim,
                 const std::vector<int>& test_labels, std::size_t classes) {
  r.confusion.assign(classes, std::vector<std::size_t>(classes, 0));
  const std::size_t n = test_labels.size();
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t pred = predict_row(w, b, test_feats.data() + i * dim, dim, classes);
    r.confusion[static_cast<std::size_t>(test_labels[i])][pred] += 1;
  }
  std::size_t trace = 0;
  r.per_class.assign(classes, 0.0);
  for (std::size_t c = 0; c < classes; ++c) {
    trace += r.confusion[c][c];
    const std::size_t row =
        std::accumulate(r.confusion[c].begin(), r.confusion[c].end(), std::size_t(0));
    r.per_class[c] = row ? static_cast<double>(r.confusion[c][c]) / row : 0.0;
  }
  r.test_count = n;
  r.top1 = n ? static_cast<double>(trace) / n : 0.0;
}

std::string echo_options(const char* mode, const std::string& checkpoint_path,
                         const EvalOptions& opt, const std::string& precision,
                         std::size_t classes) {
  json j{{"mode", mode},
         {"checkpoint", checkpoint_path.empty() ? "(random init)" : checkpoint_path},
         {"epochs", opt.epochs},
         {"batch_size", opt.batch_size},
         {"lr", opt.lr},
         {"finetune_lr", opt.finetune_lr},
         {"momentum", opt.momentum},
         {"seed", opt.seed},
         {"precision", precision},
         {"classes", classes}};
  return j.dump();
}

std::vector<int> labels_of(const Dataset& ds, const std::vector<std::size_t>& idx) {
  std::vector<int> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) out[i] = ds.manifest.samples.at(idx[i]).label;
  return out;
}

// ---------------------------------------------------------------------------
// protocol implementations
// ---------------------------------------------------------------------------

template <class Real>
EvalReport linear_impl(const Checkpoint* ck, const TrainConfig* stored,
                       const std::string& ckpt_path, const Dataset& ds, const EvalOptions& opt) {
  const std::size_t classes = class_count(ds);
  auto net = build_net<Real>(ck, stored, opt, ds);
  const std::uint64_t hash_before = params_fingerprint(net);

  const auto train_idx = ds.split_indices("train");
  const auto test_idx = ds.split_indices("test");
  CPM_CHECK(!train_idx.empty() && !test_idx.empty(), "eval: need both train and test splits");
  std::size_t dim = 0;
  auto train_feats = encode_table(net, ds, train_idx, opt.batch_size, false, &dim);
  auto test_feats = encode_table(net, ds, test_idx, opt.batch_size, false, &dim);
  prepare_features(train_feats, test_feats, dim);

  const auto head = train_linear_head(train_feats, dim, labels_of(ds, train_idx), classes, opt);

  EvalReport r;
  fill_report(r, head.w.values(), head.b.values(), test_feats, dim, labels_of(ds, test_idx),
              classes);
  CPM_CHECK(params_fingerprint(net) == hash_before,
            "eval: linear evaluation mutated the encoder");
  r.checkpoint_hash = to_hex(hash_before);
  r.mode = "linear";
  r.config_echo =
      echo_options("linear", ckpt_path, opt, sizeof(Real) == 4 ? "f32" : "f64", classes);
  return r;
}

template <class Real>
EvalReport finetune_impl(const Checkpoint* ck, const TrainConfig* stored,
                         const std::string& ckpt_path, const Dataset& ds,
                         const EvalOptions& opt) {
  const std::size_t classes = class_count(ds);
  auto net = build_net<Real>(ck, stored, opt, ds);
  const std::uint64_t hash_at_load = params_fingerprint(net);

  const auto train_idx = ds.split_indices("train");
  const auto test_idx = ds.split_indices("test");
  CPM_CHECK(!train_idx.empty() && !test_idx.empty(), "eval: need both train and test splits");
  const auto train_labels = labels_of(ds, train_idx);

  auto head = make_head<Real>(net.config().feature_dim, classes);
  std::vector<Real> buf_w(head.w.size(), Real(0)), buf_b(head.b.size(), Real(0));
  std::vector<std::vector<Real>> net_buf;
  for (auto& [name, t] : net.named_params()) net_buf.emplace_back(t.size(), Real(0));

  // Frozen centering vector: the per-dimension mean of the initial encoder's
  // train-split features. Encoder features carry a large common component
  // (post-ReLU activations are non-negative), and unit-normalized rows all
  // collapse onto it unless it is removed first — the same reason the linear
  // probe centers before normalizing. A constant keeps every later evaluation
  // a pure function of the trained weights.
  std::size_t fdim = 0;
  std::vector<Real> mu_neg;
  {
    const auto feats0 = encode_table(net, ds, train_idx, opt.batch_size, false, &fdim);
    mu_neg.assign(fdim, Real(0));
    const std::size_t rows = feats0.size() / fdim;
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t d = 0; d < fdim; ++d) mu_neg[d] += static_cast<Real>(feats0[i * fdim + d]);
    for (auto& v : mu_neg) v = -v / static_cast<Real>(rows);
  }

  auto rng = make_rng(mix_seed(opt.seed, 0x66696e65ull));
  std::vector<std::size_t> order(train_idx.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t n = train_idx.size();
  const std::size_t B = std::min(opt.batch_size, n);
  const std::size_t per_epoch = (n + B - 1) / B;
  const std::size_t total = opt.epochs * per_epoch;
  std::size_t step = 0;
  for (std::size_t e = 0; e < opt.epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t at = 0; at < n; at += B) {
      const std::size_t bs = std::min(B, n - at);
      if (bs < 2) {  // train-mode batchnorm needs a real batch
        ++step;
        continue;
      }
      std::vector<std::size_t> batch(bs);
      std::vector<int> yv(bs);
      for (std::size_t b = 0; b < bs; ++b) {
        batch[b] = train_idx[order[at + b]];
        yv[b] = train_labels[order[at + b]];
      }
      auto x = pack_batch<Real>(ds, batch.data(), bs);
      // Same feature preparation as the linear probe (frozen center + unit
      // rows), applied on the graph so the encoder still receives gradients.
      auto shift = Tensor<Real>::leaf({1, fdim}, std::vector<Real>(mu_neg));
      auto h = l2_normalize_rows(add(net.encode(x, true), shift));
      auto loss = softmax_ce(add(matmul(h, head.w), head.b), yv.data(), classes);
      loss.backward();
      // Discriminative rates: the zero-init head trains at the probe rate
      // (its input rows are unit norm, same stability bound as the probe)
      // while the pretrained encoder adapts at the gentler fine-tune rate.
      const double enc_lr = cosine_lr(opt.finetune_lr, step, total);
      const double head_lr = cosine_lr(opt.lr, step, total);
      ++step;
      // Only the encoder is on the graph; projector/predictor params carry no
      // gradient here and are left untouched (equivalent to a zero gradient
      // with zero weight decay).
      auto named = net.named_params();
      for (std::size_t i = 0; i < named.size(); ++i) {
        auto& p = named[i].second.values_mut();
        const auto& g = named[i].second.grad();
        if (g.size() != p.size()) continue;
        auto& buf = net_buf[i];
        for (std::size_t j = 0; j < p.size(); ++j) {
          buf[j] = Real(opt.momentum) * buf[j] + g[j];
          p[j] -= Real(enc_lr) * buf[j];
        }
      }
      for (auto& [name, t] : net.named_params()) t.zero_grad();
      sgd_tensor(head.w, buf_w, head_lr, opt.momentum);
      sgd_tensor(head.b, buf_b, head_lr, opt.momentum);
    }
  }

  std::size_t dim = 0;
  auto test_feats = encode_table(net, ds, test_idx, opt.batch_size, false, &dim);
  for (std::size_t i = 0; i < test_feats.size(); i += dim) {  // match the train-side rows
    double nrm = 0.0;
    for (std::size_t d = 0; d < dim; ++d) {
      test_feats[i + d] += static_cast<double>(mu_neg[d]);
      nrm += test_feats[i + d] * test_feats[i + d];
    }
    nrm = std::max(std::sqrt(nrm), 1e-12);
    for (std::size_t d = 0; d < dim; ++d) test_feats[i + d] /= nrm;
  }
  std::vector<double> wd(head.w.values().begin(), head.w.values().end());
  std::vector<double> bd(head.b.values().begin(), head.b.values().end());
  EvalReport r;
  fill_report(r, wd, bd, test_feats, dim, labels_of(ds, test_idx), classes);
  r.checkpoint_hash = to_hex(hash_at_load);
  r.mode = "finetune";
  r.config_echo =
      echo_options("finetune", ckpt_path, opt, sizeof(Real) == 4 ? "f32" : "f64", classes);
  return r;
}

// Loads the checkpoint (when given) and dispatches on its precision.
template <template <class> class Fn>
EvalReport dispatch_eval(const std::string& ckpt_path, const Dataset& ds,
                         const EvalOptions& opt) {
  if (ckpt_path.empty()) {
    CPM_CHECK(opt.precision == "f32" || opt.precision == "f64",
              "eval: precision must be \"f32\" or \"f64\"");
    if (opt.precision == "f32") return Fn<float>::run(nullptr, nullptr, ckpt_path, ds, opt);
    return Fn<double>::run(nullptr, nullptr, ckpt_path, ds, opt);
  }
  const Checkpoint ck = Checkpoint::load(ckpt_path);
  const TrainConfig stored = parse_train_config(ck.config_json);
  if (stored.precision == "f32") return Fn<float>::run(&ck, &stored, ckpt_path, ds, opt);
  return Fn<double>::run(&ck, &stored, ckpt_path, ds, opt);
}

template <class Real>
struct LinearFn {
  static EvalReport run(const Checkpoint* ck, const TrainConfig* stored, const std::string& p,
                        const Dataset& ds, const EvalOptions& opt) {
    return linear_impl<Real>(ck, stored, p, ds, opt);
  }
};

template <class Real>
struct FinetuneFn {
  static EvalReport run(const Checkpoint* ck, const TrainConfig* stored, const std::string& p,
                        const Dataset& ds, const EvalOptions& opt) {
    return finetune_impl<Real>(ck, stored, p, ds, opt);
  }
};

}  // namespace

std::string EvalReport::to_json() const {
  json j{{"top1", top1},
         {"per_class", per_class},
         {"confusion", confusion},
         {"test_count", test_count},
         {"checkpoint_hash", checkpoint_hash},
         {"mode", mode},
         {"config", json::parse(config_echo)}};
  return j.dump(2);
}

EvalReport linear_evaluate(const std::string& checkpoint_path, const Dataset& ds,
                           const EvalOptions& opt) {
  return dispatch_eval<LinearFn>(checkpoint_path, ds, opt);
}

EvalReport linear_probe_features(const std::vector<double>& train_feats,
                                 const std::vector<int>& train_labels,
                                 const std::vector<double>& test_feats,
                                 const std::vector<int>& test_labels, std::size_t dim,
                                 std::size_t classes, const EvalOptions& opt) {
  const auto head = train_linear_head(train_feats, dim, train_labels, classes, opt);
  EvalReport r;
  fill_report(r, head.w.values(), head.b.values(), test_feats, dim, test_labels, classes);
  r.mode = "linear";
  r.config_echo = echo_options("linear", "(feature table)", opt, "f64", classes);
  return r;
}

EvalReport finetune_evaluate(const std::string& checkpoint_path, const Dataset& ds,
                             const EvalOptions& opt) {
  return dispatch_eval<FinetuneFn>(checkpoint_path, ds, opt);
}

// ---------------------------------------------------------------------------
// mining precision
// ---------------------------------------------------------------------------

double replay_mining_precision(const std::vector<double>& embeddings, std::size_t dim,
                               const std::vector<int>& labels,
                               const std::vector<std::string>& ids, std::size_t K, std::size_t N,
                               std::uint64_t seed) {
  const std::size_t n = labels.size();
  CPM_CHECK(n >= 1, "mining: empty sample set");
  CPM_CHECK(dim >= 1 && embeddings.size() == n * dim, "mining: embedding table shape mismatch");
  CPM_CHECK(ids.size() == n, "mining: id count mismatch");
  CPM_CHECK(K >= 1, "mining: K must be >= 1");
  CPM_CHECK(K <= N, "mining: K exceeds the queue capacity");

  std::unordered_map<std::string, int> label_of;
  for (std::size_t i = 0; i < n; ++i) label_of[ids[i]] = labels[i];

  ContextQueue queue(N, dim);
  auto rng = make_rng(mix_seed(seed, 0x6d696e65ull));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  while (!queue.full()) {  // fill by cycling reshuffled permutations
    std::shuffle(order.begin(), order.end(), rng);
    for (const std::size_t i : order) {
      queue.push(embeddings.data() + i * dim, ids[i]);
      if (queue.full()) break;
    }
  }

  std::shuffle(order.begin(), order.end(), rng);
  double acc = 0.0;
  std::vector<double> dots(N);
  std::vector<std::size_t> self;
  for (const std::size_t i : order) {
    const double* q = embeddings.data() + i * dim;
    const std::vector<double>& ring = queue.ring();
    const std::vector<std::string>& ring_ids = queue.ring_ids();
    self.clear();
    for (std::size_t j = 0; j < N; ++j) {
      double d = 0.0;
      for (std::size_t c = 0; c < dim; ++c) d += q[c] * ring[j * dim + c];
      dots[j] = d;
      if (ring_ids[j] == ids[i]) self.push_back(j);
    }
    const auto mined = mine_topk(dots, K, self);
    std::size_t hits = 0;
    for (const std::size_t j : mined.indices)
      if (label_of.at(ring_ids[j]) == labels[i]) ++hits;
    acc += static_cast<double>(hits) / K;
    queue.push(q, ids[i]);  // queue keeps evolving, like the training pass
  }
  return acc / n;
}

namespace {

template <class Real>
MiningReport mining_impl(const Checkpoint& ck, const TrainConfig& stored,
                         const std::string& ckpt_path, const Dataset& ds, std::size_t K,
                         std::size_t N, std::uint64_t seed) {
  auto net = build_net<Real>(&ck, &stored, EvalOptions{}, ds);
  const auto train_idx = ds.split_indices("train");
  CPM_CHECK(!train_idx.empty(), "mining: dataset has no train split");
  std::size_t dim = 0;
  auto table = encode_table(net, ds, train_idx, 128, /*with_projector=*/true, &dim);
  {  // center over the whole table, then unit rows — the training-side form
    NoGradScope ng;
    auto t = Tensor<double>::leaf({train_idx.size(), dim}, std::move(table));
    table = center_and_normalize(t, false).values();
  }

  std::vector<std::string> ids(train_idx.size());
  for (std::size_t i = 0; i < train_idx.size(); ++i)
    ids[i] = ds.manifest.samples.at(train_idx[i]).id;

  MiningReport r;
  r.precision =
      replay_mining_precision(table, dim, labels_of(ds, train_idx), ids, K, N, seed);
  r.samples = train_idx.size();
  r.k = K;
  r.queue_capacity = N;
  r.checkpoint_hash = to_hex(params_fingerprint(net));
  json j{{"checkpoint", ckpt_path}, {"K", K}, {"N", N}, {"seed", seed},
         {"precision", stored.precision}};
  r.config_echo = j.dump();
  return r;
}

}  // namespace

std::string MiningReport::to_json() const {
  json j{{"precision", precision},
         {"samples", samples},
         {"K", k},
         {"N", queue_capacity},
         {"checkpoint_hash", checkpoint_hash},
         {"config", json::parse(config_echo)}};
  return j.dump(2);
}

MiningReport mining_precision(const std::string& checkpoint_path, const Dataset& ds, std::size_t K,
                              std::size_t N, std::uint64_t seed) {
  const Checkpoint ck = Checkpoint::load(checkpoint_path);
  const TrainConfig stored = parse_train_config(ck.config_json);
  if (stored.precision == "f32") return mining_impl<float>(ck, stored, checkpoint_path, ds, K, N, seed);
  return mining_impl<double>(ck, stored, checkpoint_path, ds, K, N, seed);
}

// ---------------------------------------------------------------------------
// embedding export
// ---------------------------------------------------------------------------

namespace {

template <class T>
void write_raw(std::ofstream& f, const T& v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_raw(std::ifstream& f, const char* what) {
  T v;
  f.read(reinterpret_cast<char*>(&v), sizeof(T));
  CPM_CHECK(f.good(), std::string("EMBD: truncated ") + what);
  return v;
}

template <class Real>
void export_impl(const Checkpoint& ck, const TrainConfig& stored, const Dataset& ds,
                 const std::string& path) {
  auto net = build_net<Real>(&ck, &stored, EvalOptions{}, ds);
  std::vector<std::size_t> all(ds.manifest.samples.size());
  std::iota(all.begin(), all.end(), 0);
  std::size_t dim = 0;
  const auto table = encode_table(net, ds, all, 128, false, &dim);

  std::ofstream f(path, std::ios::binary);
  CPM_CHECK(f.is_open(), "EMBD: cannot open for writing: " + path);
  f.write("EMBD", 4);
  write_raw<std::uint16_t>(f, 1);  // format version
  write_raw<std::uint32_t>(f, static_cast<std::uint32_t>(all.size()));
  write_raw<std::uint32_t>(f, static_cast<std::uint32_t>(dim));
  for (std::size_t i = 0; i < all.size(); ++i) {
    const auto& s = ds.manifest.samples[i];
    CPM_CHECK(s.id.size() <= 0xffff, "EMBD: sample id too long");
    write_raw<std::uint16_t>(f, static_cast<std::uint16_t>(s.id.size()));
    f.write(s.id.data(), static_cast<std::streamsize>(s.id.size()));
    write_raw<std::int32_t>(f, s.label);
    for (std::size_t d = 0; d < dim; ++d)
      write_raw<float>(f, static_cast<float>(table[i * dim + d]));
  }
  CPM_CHECK(f.good(), "EMBD: write failed: " + path);
}

}  // namespace

void export_embeddings(const std::string& checkpoint_path, const Dataset& ds,
                       const std::string& path) {
  const Checkpoint ck = Checkpoint::load(checkpoint_path);
  const TrainConfig stored = parse_train_config(ck.config_json);
  if (stored.precision == "f32") return export_impl<float>(ck, stored, ds, path);
  return export_impl<double>(ck, stored, ds, path);
}

std::vector<EmbeddingRecord> load_embeddings(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  CPM_CHECK(f.is_open(), "EMBD: cannot open: " + path);
  char magic[4];
  f.read(magic, 4);
  CPM_CHECK(f.good() && std::string(magic, 4) == "EMBD", "EMBD: bad magic in " + path);
  const auto version = read_raw<std::uint16_t>(f, "version");
  CPM_CHECK(version == 1, "EMBD: unsupported version");
  const auto count = read_raw<std::uint32_t>(f, "count");
  const auto dim = read_raw<std::uint32_t>(f, "dim");
  std::vector<EmbeddingRecord> out(count);
  for (auto& rec : out) {
    const auto id_len = read_raw<std::uint16_t>(f, "id length");
    rec.sample_id.resize(id_len);
    f.read(rec.sample_id.data(), id_len);
    CPM_CHECK(f.good(), "EMBD: truncated id");
    rec.label = read_raw<std::int32_t>(f, "label");
    rec.h.resize(dim);
    f.read(reinterpret_cast<char*>(rec.h.data()), static_cast<std::streamsize>(dim * 4));
    CPM_CHECK(f.good(), "EMBD: truncated vector");
  }
  return out;
}

}  // namespace cpm
