// Siamese ST-GCN encoder with projection head g and prediction head p.
//
// Per block: features <- temporal_conv(relu(batchnorm(A_hat . features . W)))
// where W is a 1x1 channel mix, A_hat the symmetric normalized adjacency, and
// the temporal conv carries the block's stride. A global average pool over
// (T, V) yields h. Heads are Linear -> batchnorm -> relu -> Linear(+bias).
//
// The student and target branches share one parameter set; the target output
// is wrapped in stop_gradient (an EMA target copy is available behind a
// config flag instead).
#pragma once

#include <random>
#include <string>
#include <utility>
#include <vector>

#include "cpm/ops.hpp"
#include "cpm/skeleton.hpp"

namespace cpm {

struct EncoderConfig {
  std::size_t in_channels = 3;
  std::vector<std::size_t> widths = {16, 32, 64};
  std::vector<std::size_t> strides = {1, 2, 2};  // temporal stride per block
  std::size_t temporal_kernel = 9;
  std::size_t feature_dim = 64;  // dim of h; must equal widths.back()
  std::size_t projector_hidden = 64;
  std::size_t projector_out = 32;
  std::size_t predictor_hidden = 64;
  GraphAdjacency adjacency;

  void validate() const {
    CPM_CHECK(!widths.empty(), "encoder: need at least 1 block");
    CPM_CHECK(strides.size() == widths.size(), "encoder: strides/widths length mismatch");
    CPM_CHECK(temporal_kernel % 2 == 1, "encoder: temporal kernel must be odd");
    CPM_CHECK(feature_dim == widths.back(),
              "encoder: feature_dim must equal the last block width");
    CPM_CHECK(adjacency.V >= 2 && adjacency.a_hat.size() == adjacency.V * adjacency.V,
              "encoder: adjacency not built");
    for (auto s : strides) CPM_CHECK(s >= 1, "encoder: stride must be >= 1");
    CPM_CHECK(projector_hidden > 0 && projector_out > 0 && predictor_hidden > 0,
              "encoder: head widths must be positive");
  }
};

// Learnable parameter count as a closed-form function of the config
// (batchnorm running stats are buffers, not parameters).
inline std::size_t count_parameters(const EncoderConfig& cfg) {
  std::size_t n = 0;
  std::size_t cin = cfg.in_channels;
  for (std::size_t w : cfg.widths) {
    n += w * cin;                        // spatial 1x1 mix
    n += 2 * w;                          // batchnorm gamma+beta
    n += w * w * cfg.temporal_kernel;    // temporal conv
    cin = w;
  }
  const std::size_t f = cfg.feature_dim, h = cfg.projector_hidden, o = cfg.projector_out;
  n += f * h + 2 * h + h * o + o;        // projector
  const std::size_t h2 = cfg.predictor_hidden;
  n += o * h2 + 2 * h2 + h2 * o + o;     // predictor
  return n;
}

template <class Real>
struct BatchNormLayer {
  Tensor<Real> gamma, beta;
  std::vector<Real> running_mean, running_var;
};

template <class Real>
struct EncoderBlock {
  Tensor<Real> w_spatial;   // (Cout, Cin, 1)
  BatchNormLayer<Real> bn;  // over Cout
  Tensor<Real> w_temporal;  // (Cout, Cout, k)
  std::size_t stride = 1;
};

template <class Real>
struct MlpHead {
  Tensor<Real> w1;          // (in, hidden); first layer has no bias (bn follows)
  BatchNormLayer<Real> bn;  // over hidden
  Tensor<Real> w2;          // (hidden, out)
  Tensor<Real> b2;          // (out)
};

template <class Real>
struct PairForward {
  Tensor<Real> p_student;      // p(z) of x, gradient flows
  Tensor<Real> z_target;       // sg(z') of x'
  Tensor<Real> p_student_sym;  // p(z') of x'   (symmetrized only)
  Tensor<Real> z_target_sym;   // sg(z) of x    (symmetrized only)
};

template <class Real>
class ModelParams {
 public:
  ModelParams() = default;

  ModelParams(EncoderConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    auto rng = make_rng(mix_seed(seed, 0xC0DE));
    // Fan-in-scaled uniform init; draws happen in construction order, so the
    // full parameter vector is a pure function of (config, seed).
    auto uniform_leaf = [&](Shape shape, std::size_t fan_in) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
      std::uniform_real_distribution<double> u(-bound, bound);
      std::vector<Real> v(numel(shape));
      for (auto& x : v) x = static_cast<Real>(u(rng));
      return Tensor<Real>::leaf(std::move(shape), std::move(v), true);
    };
    auto bn_layer = [&](std::size_t c) {
      BatchNormLayer<Real> bn;
      bn.gamma = Tensor<Real>::leaf({c}, std::vector<Real>(c, Real(1)), true);
      bn.beta = Tensor<Real>::leaf({c}, std::vector<Real>(c, Real(0)), true);
      bn.running_mean.assign(c, Real(0));
      bn.running_var.assign(c, Real(1));
      return bn;
    };

    std::vector<Real> av(cfg_.adjacency.a_hat.size());
    for (std::size_t i = 0; i < av.size(); ++i) av[i] = static_cast<Real>(cfg_.adjacency.a_hat[i]);
    a_hat_ = Tensor<Real>::leaf({cfg_.adjacency.V, cfg_.adjacency.V}, std::move(av), false);

    std::size_t cin = cfg_.in_channels;
    for (std::size_t b = 0; b < cfg_.widths.size(); ++b) {
      const std::size_t w = cfg_.widths[b];
      EncoderBlock<Real> blk;
      blk.w_spatial = uniform_leaf({w, cin, 1}, cin);
      blk.bn = bn_layer(w);
      blk.w_temporal = uniform_leaf({w, w, cfg_.temporal_kernel}, w * cfg_.temporal_kernel);
      blk.stride = cfg_.strides[b];
      blocks_.push_back(std::move(blk));
      cin = w;
    }
    auto head = [&](std::size_t in, std::size_t hidden, std::size_t out) {
      MlpHead<Real> m;
      m.w1 = uniform_leaf({in, hidden}, in);
      m.bn = bn_layer(hidden);
      m.w2 = uniform_leaf({hidden, out}, hidden);
      m.b2 = uniform_leaf({out}, hidden);
      return m;
    };
    projector_ = head(cfg_.feature_dim, cfg_.projector_hidden, cfg_.projector_out);
    predictor_ = head(cfg_.projector_out, cfg_.predictor_hidden, cfg_.projector_out);
  }

  const EncoderConfig& config() const { return cfg_; }

  Tensor<Real> encode(const Tensor<Real>& x, bool training) {
    const Shape& s = x.shape();
    CPM_CHECK(s.size() == 4, "encode: input must be (B,C,T,V)");
    CPM_CHECK(s[1] == cfg_.in_channels, "encode: channel count mismatch");
    CPM_CHECK(s[3] == cfg_.adjacency.V, "encode: joint count mismatch with adjacency");
    Tensor<Real> h = x;
    for (auto& blk : blocks_) {
      auto mixed = temporal_conv1d(h, blk.w_spatial, 1, 0);
      const Shape ms = mixed.shape();
      // A_hat is symmetric, so right-multiplying the (B*C*T, V) rows equals
      // the A_hat . features aggregation.
      auto flat = reshape(mixed, {ms[0] * ms[1] * ms[2], ms[3]});
      auto agg = reshape(matmul(flat, a_hat_), ms);
      auto act = relu(batchnorm(agg, blk.bn.gamma, blk.bn.beta, blk.bn.running_mean,
                                blk.bn.running_var, training));
      h = temporal_conv1d(act, blk.w_temporal, blk.stride);
    }
    return reduce_mean(reduce_mean(h, 3), 2);  // global average pool -> (B, feature_dim)
  }

  Tensor<Real> project(const Tensor<Real>& h, bool training) {
    return head_forward(projector_, h, training);
  }
  Tensor<Real> predict(const Tensor<Real>& z, bool training) {
    return head_forward(predictor_, z, training);
  }

  // Student path keeps the tape; the target path is constant w.r.t. the loss.
  // With shared weights the target projection reuses the student tape and is
  // cut by stop_gradient; with an EMA target it is computed grad-free on the
  // EMA copy. Symmetrized mode fills the swapped pair as well.
  PairForward<Real> forward_views(const Tensor<Real>& x, const Tensor<Real>& xp, bool training,
                                  bool symmetrize, ModelParams* ema_target = nullptr) {
    PairForward<Real> out;
    auto z_x = project(encode(x, training), training);
    out.p_student = predict(z_x, training);
    if (ema_target) {
      {
        NoGradScope ng;
        out.z_target = stop_gradient(
            ema_target->project(ema_target->encode(xp, training), training));
        if (symmetrize)
          out.z_target_sym = stop_gradient(
              ema_target->project(ema_target->encode(x, training), training));
      }
      if (symmetrize)
        out.p_student_sym = predict(project(encode(xp, training), training), training);
    } else if (symmetrize) {
      auto z_xp = project(encode(xp, training), training);
      out.p_student_sym = predict(z_xp, training);
      out.z_target = stop_gradient(z_xp);
      out.z_target_sym = stop_gradient(z_x);
    } else {
      NoGradScope ng;
      out.z_target = stop_gradient(project(encode(xp, training), training));
    }
    return out;
  }

  // Learnable leaves in fixed traversal order (used by optimizer/checkpoint).
  std::vector<std::pair<std::string, Tensor<Real>>> named_params() {
    std::vector<std::pair<std::string, Tensor<Real>>> out;
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      const std::string p = "enc.block" + std::to_string(b) + ".";
      out.push_back({p + "spatial.w", blocks_[b].w_spatial});
      out.push_back({p + "bn.gamma", blocks_[b].bn.gamma});
      out.push_back({p + "bn.beta", blocks_[b].bn.beta});
      out.push_back({p + "temporal.w", blocks_[b].w_temporal});
    }
    auto head = [&out](const std::string& p, MlpHead<Real>& m) {
      out.push_back({p + "w1", m.w1});
      out.push_back({p + "bn.gamma", m.bn.gamma});
      out.push_back({p + "bn.beta", m.bn.beta});
      out.push_back({p + "w2", m.w2});
      out.push_back({p + "b2", m.b2});
    };
    head("proj.", projector_);
    head("pred.", predictor_);
    return out;
  }

  // Batchnorm running statistics (state, not parameters).
  std::vector<std::pair<std::string, std::vector<Real>*>> named_buffers() {
    std::vector<std::pair<std::string, std::vector<Real>*>> out;
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      const std::string p = "enc.block" + std::to_string(b) + ".bn.";
      out.push_back({p + "mean", &blocks_[b].bn.running_mean});
      out.push_back({p + "var", &blocks_[b].bn.running_var});
    }
    auto head = [&out](const std::string& p, MlpHead<Real>& m) {
      out.push_back({p + "bn.mean", &m.bn.running_mean});
      out.push_back({p + "bn.var", &m.bn.running_var});
    };
    head("proj.", projector_);
    head("pred.", predictor_);
    return out;
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    for (auto& [name, t] : named_params()) n += t.size();
    return n;
  }

 private:
  Tensor<Real> head_forward(MlpHead<Real>& m, const Tensor<Real>& in, bool training) {
    auto a = matmul(in, m.w1);
    auto b = relu(batchnorm(a, m.bn.gamma, m.bn.beta, m.bn.running_mean, m.bn.running_var,
                            training));
    return add(matmul(b, m.w2), m.b2);
  }

  EncoderConfig cfg_;
  Tensor<Real> a_hat_;
  std::vector<EncoderBlock<Real>> blocks_;
  MlpHead<Real> projector_, predictor_;
};

// target <- decay * target + (1 - decay) * student for every parameter;
// running stats are copied outright.
template <class Real>
void ema_update(ModelParams<Real>& target, ModelParams<Real>& student, double decay) {
  auto tp = target.named_params();
  auto sp = student.named_params();
  CPM_CHECK(tp.size() == sp.size(), "ema_update: parameter sets differ");
  for (std::size_t i = 0; i < tp.size(); ++i) {
    CPM_CHECK(tp[i].first == sp[i].first, "ema_update: parameter name mismatch");
    auto& tv = tp[i].second.values_mut();
    const auto& sv = sp[i].second.values();
    for (std::size_t j = 0; j < tv.size(); ++j)
      tv[j] = static_cast<Real>(decay) * tv[j] + static_cast<Real>(1 - decay) * sv[j];
  }
  auto tb = target.named_buffers();
  auto sb = student.named_buffers();
  for (std::size_t i = 0; i < tb.size(); ++i) *tb[i].second = *sb[i].second;
}

}  // namespace cpm
