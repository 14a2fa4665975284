#include "cpm/trainer.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <numbers>

#include <nlohmann/json.hpp>

namespace cpm {

using nlohmann::json;

// ---------------------------------------------------------------------------
// config JSON
// ---------------------------------------------------------------------------

namespace {

void check_keys(const json& j, const std::string& where,
                std::initializer_list<const char*> allowed) {
  CPM_CHECK(j.is_object(), "config: " + where + " must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const char* k : allowed)
      if (it.key() == k) {
        known = true;
        break;
      }
    CPM_CHECK(known, "config: unknown key '" + it.key() + "' in " + where);
  }
}

template <class T>
void read_key(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw Error("config: bad value for '" + std::string(key) + "': " + e.what());
  }
}

}  // namespace

void TrainConfig::validate() const {
  CPM_CHECK(precision == "f32" || precision == "f64",
            "config: precision must be \"f32\" or \"f64\"");
  CPM_CHECK(epochs >= 1, "config: epochs must be >= 1");
  CPM_CHECK(stage_switch_epoch >= 1 && stage_switch_epoch <= epochs,
            "config: need 0 < stage_switch_epoch <= epochs");
  CPM_CHECK(batch_size >= 2, "config: batch size must be >= 2 (batch centering)");
  CPM_CHECK(tau > 0 && tau_prime > 0, "config: temperatures must be positive");
  CPM_CHECK(queue_capacity >= 1, "config: queue capacity must be >= 1");
  CPM_CHECK(K <= queue_capacity, "config: K must not exceed the queue capacity");
  CPM_CHECK(peak_lr >= 0 && floor_lr >= 0 && floor_lr <= peak_lr,
            "config: need 0 <= floor_lr <= peak_lr");
  CPM_CHECK(warmup_epochs < epochs, "config: warmup must end before the horizon");
  CPM_CHECK(ema_decay >= 0 && ema_decay <= 1, "config: ema_decay must lie in [0, 1]");
  CPM_CHECK(augment.output_length >= 1, "config: augment.output_length must be >= 1");
  CPM_CHECK(augment.crop_pad_ratio >= 0, "config: augment.crop_pad_ratio must be >= 0");
  CPM_CHECK(augment.shear_amplitude >= 0, "config: augment.shear_amplitude must be >= 0");
}

TrainConfig parse_train_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw Error(std::string("config: ") + e.what());
  }
  check_keys(j, "config",
             {"precision", "seed", "epochs", "stage_switch_epoch", "batch_size", "peak_lr",
              "floor_lr", "warmup_epochs", "tau", "tau_prime", "K", "queue_capacity",
              "symmetrize", "ema", "ema_decay", "renormalize", "augment", "encoder"});
  TrainConfig c;
  read_key(j, "precision", c.precision);
  read_key(j, "seed", c.seed);
  read_key(j, "epochs", c.epochs);
  read_key(j, "stage_switch_epoch", c.stage_switch_epoch);
  read_key(j, "batch_size", c.batch_size);
  read_key(j, "peak_lr", c.peak_lr);
  read_key(j, "floor_lr", c.floor_lr);
  read_key(j, "warmup_epochs", c.warmup_epochs);
  read_key(j, "tau", c.tau);
  read_key(j, "tau_prime", c.tau_prime);
  read_key(j, "K", c.K);
  read_key(j, "queue_capacity", c.queue_capacity);
  read_key(j, "symmetrize", c.symmetrize);
  read_key(j, "ema", c.ema);
  read_key(j, "ema_decay", c.ema_decay);
  read_key(j, "renormalize", c.renormalize);
  if (j.contains("augment")) {
    const json& a = j.at("augment");
    check_keys(a, "config.augment", {"shear_amplitude", "crop_pad_ratio", "output_length"});
    read_key(a, "shear_amplitude", c.augment.shear_amplitude);
    read_key(a, "crop_pad_ratio", c.augment.crop_pad_ratio);
    read_key(a, "output_length", c.augment.output_length);
  }
  if (j.contains("encoder")) {
    const json& e = j.at("encoder");
    check_keys(e, "config.encoder",
               {"in_channels", "widths", "strides", "temporal_kernel", "feature_dim",
                "projector_hidden", "projector_out", "predictor_hidden"});
    read_key(e, "in_channels", c.encoder.in_channels);
    read_key(e, "widths", c.encoder.widths);
    read_key(e, "strides", c.encoder.strides);
    read_key(e, "temporal_kernel", c.encoder.temporal_kernel);
    read_key(e, "feature_dim", c.encoder.feature_dim);
    read_key(e, "projector_hidden", c.encoder.projector_hidden);
    read_key(e, "projector_out", c.encoder.projector_out);
    read_key(e, "predictor_hidden", c.encoder.predictor_hidden);
  }
  c.validate();
  return c;
}

TrainConfig load_train_config(const std::string& path) {
  std::ifstream in(path);
  CPM_CHECK(in.good(), "config: cannot open '" + path + "'");
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_train_config(text);
}

std::string train_config_to_json(const TrainConfig& c) {
  json j{{"precision", c.precision},
         {"seed", c.seed},
         {"epochs", c.epochs},
         {"stage_switch_epoch", c.stage_switch_epoch},
         {"batch_size", c.batch_size},
         {"peak_lr", c.peak_lr},
         {"floor_lr", c.floor_lr},
         {"warmup_epochs", c.warmup_epochs},
         {"tau", c.tau},
         {"tau_prime", c.tau_prime},
         {"K", c.K},
         {"queue_capacity", c.queue_capacity},
         {"symmetrize", c.symmetrize},
         {"ema", c.ema},
         {"ema_decay", c.ema_decay},
         {"renormalize", c.renormalize},
         {"augment",
          {{"shear_amplitude", c.augment.shear_amplitude},
           {"crop_pad_ratio", c.augment.crop_pad_ratio},
           {"output_length", c.augment.output_length}}},
         {"encoder",
          {{"in_channels", c.encoder.in_channels},
           {"widths", c.encoder.widths},
           {"strides", c.encoder.strides},
           {"temporal_kernel", c.encoder.temporal_kernel},
           {"feature_dim", c.encoder.feature_dim},
           {"projector_hidden", c.encoder.projector_hidden},
           {"projector_out", c.encoder.projector_out},
           {"predictor_hidden", c.encoder.predictor_hidden}}}};
  return j.dump(2);
}

// ---------------------------------------------------------------------------
// learning-rate schedule
// ---------------------------------------------------------------------------

double lr_schedule(std::size_t step, std::size_t total_steps, std::size_t warmup_steps,
                   double peak, double floor) {
  CPM_CHECK(total_steps >= 1, "lr_schedule: empty horizon");
  CPM_CHECK(warmup_steps < total_steps, "lr_schedule: warmup must end before the horizon");
  CPM_CHECK(step < total_steps, "lr_schedule: step outside the horizon");
  if (step < warmup_steps) return peak * static_cast<double>(step) / warmup_steps;
  const std::size_t span = total_steps - 1 - warmup_steps;
  if (span == 0) return floor;  // degenerate: the peak and final anchors coincide
  const double t = static_cast<double>(step - warmup_steps) / span;
  return floor + 0.5 * (peak - floor) * (1.0 + std::cos(std::numbers::pi * t));
}

// ---------------------------------------------------------------------------
// metric log
// ---------------------------------------------------------------------------

std::string metrics_to_jsonl(const StepMetrics& m) {
  json j{{"step", m.step},
         {"epoch", m.epoch},
         {"stage", m.stage},
         {"lr", m.lr},
         {"loss", m.loss},
         {"mean_top1_sim", m.mean_top1_sim},
         {"queue_fill", m.queue_fill},
         {"wall_ms", m.wall_ms}};
  return j.dump();
}

// ---------------------------------------------------------------------------
// full run
// ---------------------------------------------------------------------------

namespace {

template <class Real>
PretrainResult run_impl(const TrainConfig& cfg, const Dataset& ds, const std::string& out_dir,
                        const std::string& resume_from, std::size_t stop_after_epoch) {
  cfg.validate();
  const auto train_idx = ds.split_indices("train");
  CPM_CHECK(!train_idx.empty(), "pretrain: dataset has no train split");
  const std::size_t B = cfg.batch_size;
  const std::size_t steps_per_epoch = train_idx.size() / B;  // drop-last
  CPM_CHECK(steps_per_epoch >= 1, "pretrain: train split smaller than one batch");
  const GraphAdjacency adj = build_adjacency(ds.manifest.V, ds.manifest.edges);

  std::filesystem::create_directories(out_dir);
  const bool resumed = !resume_from.empty();
  auto state = resumed ? std::make_unique<TrainState<Real>>(
                             load_train_state<Real>(resume_from, cfg, adj))
                       : std::make_unique<TrainState<Real>>(cfg, adj);

  const std::string metrics_path = out_dir + "/metrics.jsonl";
  std::ofstream log(metrics_path, resumed ? std::ios::app : std::ios::trunc);
  CPM_CHECK(log.good(), "pretrain: cannot write " + metrics_path);
  {
    std::ofstream echo(out_dir + "/config.json");
    CPM_CHECK(echo.good(), "pretrain: cannot write the config echo");
    echo << train_config_to_json(cfg) << "\n";
  }

  const std::size_t fill_steps = (cfg.queue_capacity + B - 1) / B;
  if (!resumed) {
    for (const auto& m : queue_warmup(*state, ds, train_idx))
      log << metrics_to_jsonl(m) << "\n";
  } else {
    CPM_CHECK(state->queue.full(), "pretrain: resumed checkpoint has a partially filled queue");
  }

  const std::size_t total_steps = cfg.epochs * steps_per_epoch;
  const std::size_t warmup_steps = cfg.warmup_epochs * steps_per_epoch;
  const std::string rolling_path = out_dir + "/last.cpmp";
  double last_loss = 0.0;
  for (std::size_t e = state->epoch; e < cfg.epochs; ++e) {
    state->epoch = e;
    const int stage = e < cfg.stage_switch_epoch ? 1 : 2;
    const auto perm = trainer_detail::shuffled(train_idx, state->rng);
    for (std::size_t s = 0; s < steps_per_epoch; ++s) {
      const std::vector<std::size_t> batch(perm.begin() + s * B, perm.begin() + (s + 1) * B);
      const double lr = lr_schedule(state->step - fill_steps, total_steps, warmup_steps,
                                    cfg.peak_lr, cfg.floor_lr);
      const StepMetrics m = train_step(*state, ds, batch, stage, lr);
      last_loss = m.loss;
      log << metrics_to_jsonl(m) << "\n";
    }
    state->epoch = e + 1;
    save_train_state(*state, rolling_path);
    log.flush();
    if (state->epoch >= stop_after_epoch) break;
  }

  PretrainResult r;
  r.metrics_path = metrics_path;
  r.steps = state->step;
  r.final_loss = last_loss;
  if (state->epoch >= cfg.epochs) {
    r.checkpoint_path = out_dir + "/final.cpmp";
    save_train_state(*state, r.checkpoint_path);
  } else {
    r.checkpoint_path = rolling_path;
  }
  return r;
}

}  // namespace

PretrainResult run_pretrain(const TrainConfig& cfg, const Dataset& ds, const std::string& out_dir,
                            const std::string& resume_from, std::size_t stop_after_epoch) {
  if (cfg.precision == "f32")
    return run_impl<float>(cfg, ds, out_dir, resume_from, stop_after_epoch);
  return run_impl<double>(cfg, ds, out_dir, resume_from, stop_after_epoch);
}

}  // namespace cpm
