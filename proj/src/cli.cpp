#include "cpm/cli.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <future>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "cpm/evaluation.hpp"
#include "cpm/gradcheck.hpp"
#include "cpm/skeleton.hpp"
#include "cpm/trainer.hpp"

namespace cpm {

namespace {

using nlohmann::json;

// Raised for anything that counts as "could not even configure the run";
// run_cli maps it to exit code 2 (runtime failures exit 1).
struct ConfigStageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  CPM_CHECK(out.good(), "cannot open for writing: " + path);
  out << text << "\n";
  CPM_CHECK(out.good(), "short write: " + path);
}

std::string ensure_out_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw ConfigStageError("cannot create output directory '" + dir + "': " + ec.message());
  return dir;
}

// Full resolution pipeline for TrainConfig: defaults -> optional file ->
// --set overrides -> strict re-parse (unknown keys rejected there).
TrainConfig resolve_train_config(const std::string& config_path,
                                 const std::vector<std::string>& sets) {
  try {
    std::string text;
    if (config_path.empty()) {
      text = train_config_to_json(TrainConfig{});
    } else {
      std::ifstream in(config_path, std::ios::binary);
      CPM_CHECK(in.good(), "cannot open config: " + config_path);
      std::ostringstream ss;
      ss << in.rdbuf();
      text = ss.str();
    }
    for (const auto& s : sets) text = apply_config_override(text, s);
    return parse_train_config(text);
  } catch (const std::exception& e) {
    throw ConfigStageError(e.what());
  }
}

Dataset load_data(const std::string& manifest) {
  CPM_CHECK(!manifest.empty(), "--data is required");
  return load_dataset(manifest);
}

// ---------------------------------------------------------------------------
// per-verb option bags
// ---------------------------------------------------------------------------

struct SynthArgs {
  std::size_t classes = 10, per_class = 60, joints = 15, frames = 64;
  double sigma = 0.05;
  std::uint64_t seed = 7;
  std::size_t train_per_class = 0;  // 0 -> 3/4 of per_class
  std::string out;
};

struct PretrainArgs {
  std::string config, data, out, resume;
  std::vector<std::string> sets;
  std::size_t stop_after_epoch = kRunToEnd;
};

struct EvalArgs {
  std::string checkpoint, data, out;
  EvalOptions opt;
};

struct MineArgs {
  std::string checkpoint, data, out;
  std::size_t K = 16, queue = 4096;
  std::uint64_t seed = 7;
};

struct ExportArgs {
  std::string checkpoint, data, out;
};

struct AblateArgs {
  std::string param, data, out, config;
  std::vector<std::string> sets;
  std::vector<std::string> values;
  bool parallel = false;
  std::size_t eval_epochs = 30;
  double eval_lr = 0.3;
  std::uint64_t eval_seed = 7;
};

struct GradcheckArgs {
  std::uint64_t seed = 7;
  std::size_t points = 100;
  double tol = 1e-4;
  std::string out;
};

json eval_echo(const char* verb, const EvalArgs& a) {
  return json{{"verb", verb},          {"checkpoint", a.checkpoint},
              {"data", a.data},        {"epochs", a.opt.epochs},
              {"batch", a.opt.batch_size}, {"lr", a.opt.lr},
              {"finetune_lr", a.opt.finetune_lr}, {"momentum", a.opt.momentum},
              {"seed", a.opt.seed},    {"precision", a.opt.precision}};
}

// ---------------------------------------------------------------------------
// verb handlers (throw ConfigStageError for config problems)
// ---------------------------------------------------------------------------

int do_synth(const SynthArgs& a) {
  const std::size_t train = a.train_per_class ? a.train_per_class : (a.per_class * 3) / 4;
  if (train > a.per_class)
    throw ConfigStageError("--train-per-class exceeds --per-class");
  ensure_out_dir(a.out);
  auto ds = generate_synthetic_dataset(a.classes, a.per_class, a.joints, a.frames, a.sigma, a.seed);
  assign_splits(ds.manifest, train);
  const std::string manifest = a.out + "/manifest.json";
  save_dataset(manifest, ds);
  json echo{{"verb", "synth"},   {"classes", a.classes}, {"per_class", a.per_class},
            {"joints", a.joints}, {"frames", a.frames},  {"noise_sigma", a.sigma},
            {"seed", a.seed},     {"train_per_class", train}, {"manifest", manifest}};
  write_text(a.out + "/synth.json", echo.dump(2));
  std::printf("wrote %zu sequences (%zu train per class) -> %s\n",
              ds.sequences.size(), train, manifest.c_str());
  return 0;
}

int do_pretrain(const PretrainArgs& a) {
  const TrainConfig cfg = resolve_train_config(a.config, a.sets);
  auto ds = load_data(a.data);
  ensure_out_dir(a.out);
  auto res = run_pretrain(cfg, ds, a.out, a.resume, a.stop_after_epoch);
  std::printf("pretrain: %zu steps, final loss %.6f, checkpoint %s\n", res.steps, res.final_loss,
              res.checkpoint_path.c_str());
  return 0;
}

int do_eval(const char* verb, const EvalArgs& a, bool finetune) {
  auto ds = load_data(a.data);
  ensure_out_dir(a.out);
  const EvalReport rep = finetune ? finetune_evaluate(a.checkpoint, ds, a.opt)
                                  : linear_evaluate(a.checkpoint, ds, a.opt);
  write_text(a.out + "/report.json", rep.to_json());
  write_text(a.out + "/command.json", eval_echo(verb, a).dump(2));
  std::printf("%s top1 %.4f (%zu test samples)\n", rep.mode.c_str(), rep.top1, rep.test_count);
  return 0;
}

int do_mine(const MineArgs& a) {
  auto ds = load_data(a.data);
  ensure_out_dir(a.out);
  const MiningReport rep = mining_precision(a.checkpoint, ds, a.K, a.queue, a.seed);
  write_text(a.out + "/mining.json", rep.to_json());
  json echo{{"verb", "mine-precision"}, {"checkpoint", a.checkpoint}, {"data", a.data},
            {"K", a.K},                 {"queue", a.queue},           {"seed", a.seed}};
  write_text(a.out + "/command.json", echo.dump(2));
  std::printf("mining precision %.4f over %zu samples (K=%zu, N=%zu)\n", rep.precision,
              rep.samples, rep.k, rep.queue_capacity);
  return 0;
}

int do_export(const ExportArgs& a) {
  auto ds = load_data(a.data);
  ensure_out_dir(a.out);
  const std::string path = a.out + "/embeddings.embd";
  export_embeddings(a.checkpoint, ds, path);
  json echo{{"verb", "export-embeddings"},
            {"checkpoint", a.checkpoint},
            {"data", a.data},
            {"path", path},
            {"records", ds.sequences.size()}};
  write_text(a.out + "/command.json", echo.dump(2));
  std::printf("exported %zu embeddings -> %s\n", ds.sequences.size(), path.c_str());
  return 0;
}

int do_ablate(const AblateArgs& a) {
  static const std::vector<std::string> sweepable{"K", "tau_prime", "stage_switch_epoch"};
  if (std::find(sweepable.begin(), sweepable.end(), a.param) == sweepable.end())
    throw ConfigStageError("--param must be one of K, tau_prime, stage_switch_epoch");
  if (a.values.empty()) throw ConfigStageError("--values must name at least one value");

  // Resolve every per-value config up front so a bad value aborts before any
  // training starts.
  std::vector<TrainConfig> cfgs;
  for (const auto& v : a.values) {
    auto sets = a.sets;
    sets.push_back(a.param + "=" + v);
    cfgs.push_back(resolve_train_config(a.config, sets));
  }

  auto ds = load_data(a.data);
  ensure_out_dir(a.out);
  json echo{{"verb", "ablate"},   {"param", a.param},   {"values", a.values},
            {"data", a.data},     {"config", a.config}, {"set", a.sets},
            {"parallel", a.parallel}, {"eval_epochs", a.eval_epochs},
            {"eval_lr", a.eval_lr},   {"eval_seed", a.eval_seed}};
  write_text(a.out + "/ablate.json", echo.dump(2));

  struct Row {
    std::string value, dir, checkpoint;
    double top1 = 0.0;
  };
  std::vector<Row> rows(a.values.size());
  auto run_one = [&](std::size_t i) {
    const std::string dir = a.out + "/" + a.param + "_" + a.values[i];
    ensure_out_dir(dir);
    auto res = run_pretrain(cfgs[i], ds, dir);
    EvalOptions opt;
    opt.epochs = a.eval_epochs;
    opt.lr = a.eval_lr;
    opt.seed = a.eval_seed;
    auto rep = linear_evaluate(res.checkpoint_path, ds, opt);
    write_text(dir + "/report.json", rep.to_json());
    rows[i] = {a.values[i], dir, res.checkpoint_path, rep.top1};
  };
  if (a.parallel) {
    std::vector<std::future<void>> futs;
    for (std::size_t i = 0; i < a.values.size(); ++i)
      futs.push_back(std::async(std::launch::async, run_one, i));
    for (auto& f : futs) f.get();
  } else {
    for (std::size_t i = 0; i < a.values.size(); ++i) run_one(i);
  }

  std::ostringstream tsv;
  tsv << "param\tvalue\ttop1\tcheckpoint\n";
  json summary = json::array();
  for (const auto& r : rows) {
    tsv << a.param << "\t" << r.value << "\t" << r.top1 << "\t" << r.checkpoint << "\n";
    summary.push_back(json{{"param", a.param},
                           {"value", r.value},
                           {"top1", r.top1},
                           {"dir", r.dir},
                           {"checkpoint", r.checkpoint}});
  }
  write_text(a.out + "/summary.tsv", tsv.str());
  write_text(a.out + "/summary.json", summary.dump(2));
  std::fputs(tsv.str().c_str(), stdout);
  return 0;
}

int do_gradcheck(const GradcheckArgs& a) {
  auto rep = run_gradient_checks(a.seed, a.points, a.tol);
  std::fputs(rep.to_text().c_str(), stdout);
  if (!a.out.empty()) {
    ensure_out_dir(a.out);
    json echo{{"verb", "gradcheck"}, {"seed", a.seed}, {"points", a.points},
              {"tolerance", a.tol},  {"report", json::parse(rep.to_json())}};
    write_text(a.out + "/gradcheck.json", echo.dump(2));
  }
  return rep.passed() ? 0 : 1;
}

void add_eval_flags(CLI::App* cmd, EvalArgs& a, bool finetune) {
  cmd->add_option("--checkpoint", a.checkpoint,
                  "checkpoint path (omit for a randomly initialized encoder)");
  cmd->add_option("--data", a.data, "dataset manifest")->required();
  cmd->add_option("--out", a.out, "output directory")->required();
  cmd->add_option("--epochs", a.opt.epochs, "classifier epochs")->capture_default_str();
  cmd->add_option("--batch", a.opt.batch_size, "batch size")->capture_default_str();
  cmd->add_option("--lr", a.opt.lr, "classifier peak learning rate")->capture_default_str();
  if (finetune)
    cmd->add_option("--finetune-lr", a.opt.finetune_lr, "encoder peak learning rate")
        ->capture_default_str();
  cmd->add_option("--momentum", a.opt.momentum, "SGD momentum")->capture_default_str();
  cmd->add_option("--seed", a.opt.seed, "batch order / random-init seed")->capture_default_str();
  cmd->add_option("--precision", a.opt.precision, "f32 or f64 (random-init encoder only)")
      ->check(CLI::IsMember({"f32", "f64"}))
      ->capture_default_str();
}

}  // namespace

std::string apply_config_override(const std::string& config_json, const std::string& spec) {
  const auto eq = spec.find('=');
  CPM_CHECK(eq != std::string::npos && eq > 0, "override must look like key=value: " + spec);
  const std::string path = spec.substr(0, eq);
  const std::string value = spec.substr(eq + 1);

  json root;
  try {
    root = json::parse(config_json);
  } catch (const json::exception& e) {
    throw Error(std::string("config is not valid JSON: ") + e.what());
  }
  json* node = &root;
  std::size_t begin = 0;
  std::vector<std::string> parts;
  while (true) {
    const auto dot = path.find('.', begin);
    parts.push_back(path.substr(begin, dot == std::string::npos ? dot : dot - begin));
    if (dot == std::string::npos) break;
    begin = dot + 1;
  }
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    CPM_CHECK(node->is_object() && node->contains(parts[i]),
              "override path not in config: " + path);
    node = &(*node)[parts[i]];
  }
  const std::string& leaf = parts.back();
  CPM_CHECK(node->is_object() && node->contains(leaf), "override path not in config: " + path);
  json parsed;
  try {
    parsed = json::parse(value);
  } catch (const json::exception&) {
    parsed = value;  // unquoted strings, e.g. precision=f32
  }
  (*node)[leaf] = parsed;
  return root.dump(2);
}

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"contrastive positive mining for skeleton representations"};
  app.require_subcommand(1);

  SynthArgs sy;
  auto* synth = app.add_subcommand("synth", "generate a synthetic labelled dataset");
  synth->add_option("--classes", sy.classes, "number of classes")->capture_default_str();
  synth->add_option("--per-class", sy.per_class, "sequences per class")->capture_default_str();
  synth->add_option("--joints", sy.joints, "joints per skeleton")->capture_default_str();
  synth->add_option("--frames", sy.frames, "frames per sequence")->capture_default_str();
  synth->add_option("--sigma", sy.sigma, "coordinate noise sigma")->capture_default_str();
  synth->add_option("--seed", sy.seed, "generator seed")->capture_default_str();
  synth->add_option("--train-per-class", sy.train_per_class,
                    "train sequences per class (0 = three quarters)")
      ->capture_default_str();
  synth->add_option("--out", sy.out, "output directory")->required();

  PretrainArgs pt;
  auto* pre = app.add_subcommand("pretrain", "two-stage contrastive pretraining");
  pre->add_option("--config", pt.config, "TrainConfig JSON (defaults when omitted)");
  pre->add_option("--set", pt.sets, "dotted key=value override, repeatable")
      ->take_all()->allow_extra_args(false);
  pre->add_option("--data", pt.data, "dataset manifest")->required();
  pre->add_option("--out", pt.out, "output directory")->required();
  pre->add_option("--resume", pt.resume, "checkpoint to continue from");
  pre->add_option("--stop-after-epoch", pt.stop_after_epoch,
                  "end early once this many epochs are done");

  EvalArgs el, ef;
  auto* lin = app.add_subcommand("eval-linear", "linear probe on frozen features");
  add_eval_flags(lin, el, false);
  auto* fin = app.add_subcommand("eval-finetune",
                                 "fine-tune encoder plus classifier (from scratch when no "
                                 "checkpoint is given)");
  add_eval_flags(fin, ef, true);

  MineArgs mi;
  auto* mine = app.add_subcommand("mine-precision", "label precision of mined positives");
  mine->add_option("--checkpoint", mi.checkpoint, "checkpoint path")->required();
  mine->add_option("--data", mi.data, "dataset manifest")->required();
  mine->add_option("--out", mi.out, "output directory")->required();
  mine->add_option("--K", mi.K, "positives per sample")->capture_default_str();
  mine->add_option("--queue", mi.queue, "queue capacity")->capture_default_str();
  mine->add_option("--seed", mi.seed, "replay shuffle seed")->capture_default_str();

  ExportArgs ex;
  auto* exp = app.add_subcommand("export-embeddings", "dump eval-mode features for every sample");
  exp->add_option("--checkpoint", ex.checkpoint, "checkpoint path")->required();
  exp->add_option("--data", ex.data, "dataset manifest")->required();
  exp->add_option("--out", ex.out, "output directory")->required();

  AblateArgs ab;
  auto* abl = app.add_subcommand("ablate", "pretrain+probe sweep over one config key");
  abl->add_option("--param", ab.param, "K, tau_prime, or stage_switch_epoch")->required();
  abl->add_option("--values", ab.values, "comma-separated values")
      ->required()->delimiter(',');
  abl->add_option("--config", ab.config, "base TrainConfig JSON");
  abl->add_option("--set", ab.sets, "base override, repeatable")
      ->take_all()->allow_extra_args(false);
  abl->add_option("--data", ab.data, "dataset manifest")->required();
  abl->add_option("--out", ab.out, "output directory")->required();
  abl->add_flag("--parallel", ab.parallel, "run the sweep values concurrently");
  abl->add_option("--eval-epochs", ab.eval_epochs, "probe epochs")->capture_default_str();
  abl->add_option("--eval-lr", ab.eval_lr, "probe learning rate")->capture_default_str();
  abl->add_option("--eval-seed", ab.eval_seed, "probe seed")->capture_default_str();

  GradcheckArgs gc;
  auto* grad = app.add_subcommand("gradcheck", "finite-difference audit of all primitives");
  grad->add_option("--seed", gc.seed, "point seed")->capture_default_str();
  grad->add_option("--points", gc.points, "random points per case")->capture_default_str();
  grad->add_option("--tol", gc.tol, "max relative error accepted")->capture_default_str();
  grad->add_option("--out", gc.out, "optional directory for gradcheck.json");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);  // prints help or the error message
    return code == 0 ? 0 : 2;
  }

  try {
    if (synth->parsed()) return do_synth(sy);
    if (pre->parsed()) return do_pretrain(pt);
    if (lin->parsed()) return do_eval("eval-linear", el, false);
    if (fin->parsed()) return do_eval("eval-finetune", ef, true);
    if (mine->parsed()) return do_mine(mi);
    if (exp->parsed()) return do_export(ex);
    if (abl->parsed()) return do_ablate(ab);
    if (grad->parsed()) return do_gradcheck(gc);
  } catch (const ConfigStageError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 2;  // unreachable with require_subcommand(1)
}

int run_cli(const std::vector<std::string>& args) {
  std::vector<const char*> argv{"cpm"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run_cli(static_cast<int>(argv.size()), argv.data());
}

}  // namespace cpm
