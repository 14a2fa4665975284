// Skeleton sequences, graph topology, synthetic dataset generation, and the
// interchange file formats (SKEL tensor container + JSON manifest).
#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "cpm/common.hpp"

namespace cpm {

struct SkeletonSequence {
  std::string sample_id;
  int label = -1;  // class index; -1 when unlabeled
  std::size_t C = 3, T = 0, V = 0;
  // C-major layout: c slowest, v fastest — data[(c*T + t)*V + v]
  std::vector<float> data;

  float at(std::size_t c, std::size_t t, std::size_t v) const {
    return data[(c * T + t) * V + v];
  }
  float& at(std::size_t c, std::size_t t, std::size_t v) { return data[(c * T + t) * V + v]; }
};

using EdgeList = std::vector<std::pair<std::size_t, std::size_t>>;

struct GraphAdjacency {
  std::size_t V = 0;
  EdgeList edges;
  std::vector<double> a_hat;  // V*V row-major, D^{-1/2} (A + I) D^{-1/2}
};

struct ManifestEntry {
  std::string id;
  int label = -1;
  std::string split;  // "train" or "test"
};

struct DatasetManifest {
  int version = 1;
  std::size_t V = 0;
  EdgeList edges;
  std::string data_file;  // SKEL container, relative to the manifest
  std::vector<ManifestEntry> samples;
};

struct Dataset {
  DatasetManifest manifest;
  std::vector<SkeletonSequence> sequences;  // ordered as in the manifest

  std::vector<std::size_t> split_indices(const std::string& split) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < manifest.samples.size(); ++i)
      if (manifest.samples[i].split == split) out.push_back(i);
    return out;
  }
};

// Tree topology: root + 3-joint spine + head + two 3-joint arms + two 2-joint
// legs for V = 15; other V >= 2 get a spine with single-joint limbs attached
// round-robin. Throws for V < 2.
EdgeList default_topology(std::size_t num_joints);

// Symmetrizes, adds self-loops, and normalizes: D^{-1/2} (A + I) D^{-1/2}.
GraphAdjacency build_adjacency(std::size_t num_joints, const EdgeList& edges);

// Distinct parametric motion per class: per-joint sinusoids with
// class-specific frequency, amplitude pattern, and joint phases; per-sample
// global phase; additive N(0, sigma^2) coordinate noise. Pure function of its
// arguments. Labels are assigned but splits are left empty.
Dataset generate_synthetic_dataset(std::size_t num_classes, std::size_t samples_per_class,
                                   std::size_t num_joints, std::size_t num_frames,
                                   double noise_sigma, std::uint64_t seed);

// Marks the first train_per_class samples of each class "train", rest "test".
void assign_splits(DatasetManifest& manifest, std::size_t train_per_class);

// Translates coordinates so the first-frame root joint (joint 0) is at the
// origin. Idempotent; invariant to rigid translation of the input.
void normalize_sequence(SkeletonSequence& seq);

// SKEL container: magic "SKEL" | version u16 LE | record count u32 LE |
// per record: id length u16 LE + UTF-8 bytes, C,T,V u16 LE, C*T*V f32 LE
// (c slowest, v fastest).
void save_skel(const std::string& path, const std::vector<SkeletonSequence>& seqs);
std::vector<SkeletonSequence> load_skel(const std::string& path);

// Manifest JSON: {version, topology: {V, edges: [[i,j],...]}, data,
// samples: [{id, label, split},...]}.
void save_manifest(const std::string& path, const DatasetManifest& manifest);
DatasetManifest load_manifest(const std::string& path);

// save_dataset writes <prefix>.json + <prefix>.skel; load_dataset reads the
// manifest, then the SKEL file it references, and checks referential
// integrity (ids unique, manifest and container ids match one-to-one).
void save_dataset(const std::string& manifest_path, const Dataset& ds);
Dataset load_dataset(const std::string& manifest_path);

}  // namespace cpm
