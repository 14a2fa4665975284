// Downstream protocols over trained checkpoints: linear probing on frozen
// features, full fine-tuning (also the from-scratch supervised baseline),
// queue-replay mining precision, and embedding export. All entry points are
// read-only with respect to the checkpoint file; the linear protocol is also
// read-only with respect to the loaded encoder (hash-checked).
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cpm/model.hpp"
#include "cpm/skeleton.hpp"

namespace cpm {

struct EvalOptions {
  std::size_t epochs = 30;
  std::size_t batch_size = 128;
  double lr = 0.3;           // linear-head rate, cosine-decayed to zero over the run
  double finetune_lr = 0.01; // joint encoder+head rate for the fine-tune protocol
  double momentum = 0.9;
  std::uint64_t seed = 7;  // batch order; encoder init when no checkpoint is given
  // Used only when the checkpoint path is empty (random-init linear probe or
  // from-scratch supervised fine-tune):
  std::string precision = "f64";
  EncoderConfig encoder;  // adjacency is attached from the dataset
};

struct EvalReport {
  double top1 = 0.0;
  std::vector<double> per_class;                    // accuracy indexed by class
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted] counts
  std::size_t test_count = 0;
  std::string checkpoint_hash;  // fnv1a over encoder params+buffers, hex
  std::string mode;             // "linear" or "finetune"
  std::string config_echo;      // resolved options as a JSON object
  std::string to_json() const;
};

// Freezes the encoder (eval-mode batchnorm), trains a softmax classifier on
// the pooled pre-projector features h of the train split, and reports test
// top-1. An empty checkpoint path probes a randomly initialized encoder.
EvalReport linear_evaluate(const std::string& checkpoint_path, const Dataset& ds,
                           const EvalOptions& opt = {});

// Same protocol with the encoder unfrozen (classifier and encoder train
// jointly). An empty checkpoint path is the from-scratch supervised baseline.
EvalReport finetune_evaluate(const std::string& checkpoint_path, const Dataset& ds,
                             const EvalOptions& opt = {});

// The classifier core of linear_evaluate over an explicit feature table
// (row-major, one row per sample), exposed so fixtures can probe it without
// an encoder: one-hot class features must reach accuracy 1.0, zero epochs
// must stay at the degenerate all-one-class prediction.
EvalReport linear_probe_features(const std::vector<double>& train_feats,
                                 const std::vector<int>& train_labels,
                                 const std::vector<double>& test_feats,
                                 const std::vector<int>& test_labels, std::size_t dim,
                                 std::size_t classes, const EvalOptions& opt = {});

struct MiningReport {
  double precision = 0.0;  // mean over replayed samples of |label matches| / K
  std::size_t samples = 0;
  std::size_t k = 0;
  std::size_t queue_capacity = 0;
  std::string checkpoint_hash;
  std::string config_echo;
  std::string to_json() const;
};

// Core replay over an explicit embedding table (one row per sample): fills a
// capacity-N queue by cycling shuffled samples, then runs one shuffled pass
// mining the top K non-self entries for each sample and scoring the fraction
// whose label matches. Labels are measurement-only. Errors: K < 1 or K > N.
double replay_mining_precision(const std::vector<double>& embeddings, std::size_t dim,
                               const std::vector<int>& labels,
                               const std::vector<std::string>& ids, std::size_t K, std::size_t N,
                               std::uint64_t seed);

// Replays the queue pass of a frozen checkpoint on the train split, using
// deterministic eval-mode projector embeddings (centered and normalized over
// the whole table) as both queue content and queries.
MiningReport mining_precision(const std::string& checkpoint_path, const Dataset& ds, std::size_t K,
                              std::size_t N, std::uint64_t seed = 7);

// ---------------------------------------------------------------------------
// embedding export: "EMBD" container of (sample_id, label, h) records
// ---------------------------------------------------------------------------

struct EmbeddingRecord {
  std::string sample_id;
  int label = -1;
  std::vector<float> h;
};

// Deterministic eval-mode export of every sample in manifest order. Vectors
// are stored as 32-bit floats (lossless for f32 runs).
void export_embeddings(const std::string& checkpoint_path, const Dataset& ds,
                       const std::string& path);
std::vector<EmbeddingRecord> load_embeddings(const std::string& path);

}  // namespace cpm
