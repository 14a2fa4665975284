#include "cpm/skeleton.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include <json.hpp>

namespace cpm {

// ---------------------------------------------------------------------------
// topology / adjacency
// ---------------------------------------------------------------------------

EdgeList default_topology(std::size_t num_joints) {
  CPM_CHECK(num_joints >= 2, "topology: need at least 2 joints");
  if (num_joints == 15) {
    // 0 root; 1-3 spine; 4 head; 5-7 left arm; 8-10 right arm;
    // 11-12 left leg; 13-14 right leg. Arms hang off the top spine joint.
    return {{0, 1},  {1, 2},  {2, 3},  {3, 4},  {3, 5},   {5, 6},   {6, 7},
            {3, 8},  {8, 9},  {9, 10}, {0, 11}, {11, 12}, {0, 13},  {13, 14}};
  }
  // Generic chain-plus-limbs: a spine of ceil(V/2) joints, remaining joints
  // attached round-robin as single-joint limbs.
  const std::size_t spine = (num_joints + 1) / 2;
  EdgeList edges;
  for (std::size_t j = 1; j < spine; ++j) edges.push_back({j - 1, j});
  for (std::size_t j = spine; j < num_joints; ++j) edges.push_back({(j - spine) % spine, j});
  return edges;
}

GraphAdjacency build_adjacency(std::size_t num_joints, const EdgeList& edges) {
  CPM_CHECK(num_joints >= 2, "adjacency: need at least 2 joints");
  GraphAdjacency g;
  g.V = num_joints;
  g.edges = edges;
  std::vector<double> a(num_joints * num_joints, 0.0);
  for (const auto& [i, j] : edges) {
    CPM_CHECK(i < num_joints && j < num_joints, "adjacency: edge index out of range");
    CPM_CHECK(i != j, "adjacency: self-loop in edge list");
    a[i * num_joints + j] = 1.0;
    a[j * num_joints + i] = 1.0;  // symmetrize
  }
  for (std::size_t i = 0; i < num_joints; ++i) a[i * num_joints + i] = 1.0;  // self-loops
  std::vector<double> dinv(num_joints);
  for (std::size_t i = 0; i < num_joints; ++i) {
    double deg = 0;
    for (std::size_t j = 0; j < num_joints; ++j) deg += a[i * num_joints + j];
    dinv[i] = 1.0 / std::sqrt(deg);  // deg >= 1 because of the self-loop
  }
  g.a_hat.resize(num_joints * num_joints);
  for (std::size_t i = 0; i < num_joints; ++i)
    for (std::size_t j = 0; j < num_joints; ++j)
      g.a_hat[i * num_joints + j] = dinv[i] * a[i * num_joints + j] * dinv[j];
  return g;
}

// ---------------------------------------------------------------------------
// synthetic generator
// ---------------------------------------------------------------------------

namespace {

// Static rest pose: walk the topology from the root, placing each child one
// unit from its parent in a direction that cycles through the axes.
std::vector<double> rest_pose(std::size_t num_joints, const EdgeList& edges) {
  std::vector<double> pos(num_joints * 3, 0.0);
  std::vector<bool> placed(num_joints, false);
  placed[0] = true;
  static const double dirs[6][3] = {{0, 1, 0},  {1, 0.2, 0},  {-1, 0.2, 0},
                                    {0, -1, 0.2}, {0.3, 0, 1}, {0.3, 0, -1}};
  bool progress = true;
  std::size_t round = 0;
  while (progress) {
    progress = false;
    std::size_t k = 0;
    for (const auto& [i, j] : edges) {
      std::size_t parent = i, child = j;
      if (placed[child] && !placed[parent]) std::swap(parent, child);
      if (placed[parent] && !placed[child]) {
        const double* d = dirs[k % 6];
        for (std::size_t c = 0; c < 3; ++c) pos[child * 3 + c] = pos[parent * 3 + c] + d[c];
        placed[child] = true;
        progress = true;
      }
      ++k;
    }
    CPM_CHECK(++round <= num_joints + 1, "rest_pose: disconnected topology");
    if (std::all_of(placed.begin(), placed.end(), [](bool b) { return b; })) break;
  }
  return pos;
}

}  // namespace

Dataset generate_synthetic_dataset(std::size_t num_classes, std::size_t samples_per_class,
                                   std::size_t num_joints, std::size_t num_frames,
                                   double noise_sigma, std::uint64_t seed) {
  CPM_CHECK(num_classes >= 2, "synthetic: need at least 2 classes");
  CPM_CHECK(samples_per_class >= 2, "synthetic: need at least 2 samples per class");
  CPM_CHECK(num_joints >= 2, "synthetic: need at least 2 joints");
  CPM_CHECK(num_frames >= 1, "synthetic: need at least 1 frame");
  CPM_CHECK(noise_sigma >= 0, "synthetic: noise_sigma must be non-negative");

  Dataset ds;
  ds.manifest.V = num_joints;
  ds.manifest.edges = default_topology(num_joints);
  const auto base = rest_pose(num_joints, ds.manifest.edges);
  const double two_pi = 2.0 * 3.14159265358979323846;

  for (std::size_t cls = 0; cls < num_classes; ++cls) {
    // Class identity: frequency on a geometric ladder over [0.8, 8.0]
    // (adjacent classes separated by a constant ratio, so no temporal window
    // can map one class frequency onto the next), plus random per-joint
    // phases. Amplitudes are class-specific but drawn from one narrow range
    // and kept small against the static rest pose, so gross geometry and
    // amplitude statistics carry little class information.
    auto crng = make_rng(mix_seed(seed, 1000 + cls));
    const double ratio =
        num_classes > 1 ? std::pow(8.0 / 0.8, 1.0 / double(num_classes - 1)) : 1.0;
    const double freq = 0.8 * std::pow(ratio, double(cls));
    std::uniform_real_distribution<double> amp_d(0.05, 0.10);
    std::uniform_real_distribution<double> ph_d(0.0, two_pi);
    std::vector<double> amp(num_joints * 3), jphase(num_joints);
    for (auto& v : amp) v = amp_d(crng);
    for (auto& v : jphase) v = ph_d(crng);

    for (std::size_t s = 0; s < samples_per_class; ++s) {
      auto srng = make_rng(mix_seed(mix_seed(seed, cls), 7777 + s));
      std::uniform_real_distribution<double> phase_d(0.0, two_pi);
      std::normal_distribution<double> noise_d(0.0, 1.0);
      const double sphase = phase_d(srng);

      SkeletonSequence seq;
      char buf[48];
      std::snprintf(buf, sizeof(buf), "c%02zu_s%04zu", cls, s);
      seq.sample_id = buf;
      seq.label = static_cast<int>(cls);
      seq.C = 3;
      seq.T = num_frames;
      seq.V = num_joints;
      seq.data.resize(3 * num_frames * num_joints);
      for (std::size_t t = 0; t < num_frames; ++t) {
        const double arg0 = two_pi * freq * double(t) / double(num_frames) + sphase;
        for (std::size_t v = 0; v < num_joints; ++v) {
          const double sv = std::sin(arg0 + jphase[v]);
          for (std::size_t c = 0; c < 3; ++c) {
            double val = base[v * 3 + c] + amp[v * 3 + c] * sv;
            if (noise_sigma > 0) val += noise_sigma * noise_d(srng);
            seq.at(c, t, v) = static_cast<float>(val);
          }
        }
      }
      ds.manifest.samples.push_back({seq.sample_id, seq.label, ""});
      ds.sequences.push_back(std::move(seq));
    }
  }
  return ds;
}

void assign_splits(DatasetManifest& manifest, std::size_t train_per_class) {
  std::vector<std::size_t> seen_per_class;
  for (auto& e : manifest.samples) {
    CPM_CHECK(e.label >= 0, "assign_splits: unlabeled sample " + e.id);
    const auto cls = static_cast<std::size_t>(e.label);
    if (cls >= seen_per_class.size()) seen_per_class.resize(cls + 1, 0);
    e.split = seen_per_class[cls] < train_per_class ? "train" : "test";
    ++seen_per_class[cls];
  }
}

void normalize_sequence(SkeletonSequence& seq) {
  if (seq.T == 0 || seq.V == 0) return;
  for (std::size_t c = 0; c < seq.C; ++c) {
    const float root = seq.at(c, 0, 0);
    for (std::size_t t = 0; t < seq.T; ++t)
      for (std::size_t v = 0; v < seq.V; ++v) seq.at(c, t, v) -= root;
  }
}

// ---------------------------------------------------------------------------
// SKEL container I/O
// ---------------------------------------------------------------------------

static_assert(sizeof(float) == 4, "SKEL format requires 32-bit floats");

namespace {

template <class T>
void write_raw(std::ofstream& f, const T& v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_raw(std::ifstream& f, const char* what) {
  T v;
  f.read(reinterpret_cast<char*>(&v), sizeof(T));
  CPM_CHECK(f.good(), std::string("SKEL: record count mismatch (truncated ") + what + ")");
  return v;
}

}  // namespace

void save_skel(const std::string& path, const std::vector<SkeletonSequence>& seqs) {
  std::ofstream f(path, std::ios::binary);
  CPM_CHECK(f.is_open(), "SKEL: cannot open for writing: " + path);
  f.write("SKEL", 4);
  write_raw<std::uint16_t>(f, 1);  // format version
  write_raw<std::uint32_t>(f, static_cast<std::uint32_t>(seqs.size()));
  for (const auto& s : seqs) {
    CPM_CHECK(s.sample_id.size() <= 0xffff, "SKEL: sample_id too long");
    CPM_CHECK(s.C <= 0xffff && s.T <= 0xffff && s.V <= 0xffff, "SKEL: extent exceeds u16");
    CPM_CHECK(s.data.size() == s.C * s.T * s.V, "SKEL: data size does not match shape");
    write_raw<std::uint16_t>(f, static_cast<std::uint16_t>(s.sample_id.size()));
    f.write(s.sample_id.data(), static_cast<std::streamsize>(s.sample_id.size()));
    write_raw<std::uint16_t>(f, static_cast<std::uint16_t>(s.C));
    write_raw<std::uint16_t>(f, static_cast<std::uint16_t>(s.T));
    write_raw<std::uint16_t>(f, static_cast<std::uint16_t>(s.V));
    f.write(reinterpret_cast<const char*>(s.data.data()),
            static_cast<std::streamsize>(s.data.size() * sizeof(float)));
  }
  CPM_CHECK(f.good(), "SKEL: write failed: " + path);
}

std::vector<SkeletonSequence> load_skel(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  CPM_CHECK(f.is_open(), "SKEL: cannot open: " + path);
  char magic[4];
  f.read(magic, 4);
  CPM_CHECK(f.good() && std::memcmp(magic, "SKEL", 4) == 0, "SKEL: bad magic bytes in " + path);
  const auto version = read_raw<std::uint16_t>(f, "version");
  CPM_CHECK(version == 1, "SKEL: unsupported format version " + std::to_string(version));
  const auto count = read_raw<std::uint32_t>(f, "record count");
  std::vector<SkeletonSequence> seqs;
  seqs.reserve(count);
  for (std::uint32_t r = 0; r < count; ++r) {
    SkeletonSequence s;
    const auto idlen = read_raw<std::uint16_t>(f, "id length");
    s.sample_id.resize(idlen);
    f.read(s.sample_id.data(), idlen);
    CPM_CHECK(f.good(), "SKEL: record count mismatch (truncated id)");
    s.C = read_raw<std::uint16_t>(f, "C");
    s.T = read_raw<std::uint16_t>(f, "T");
    s.V = read_raw<std::uint16_t>(f, "V");
    CPM_CHECK(s.T >= 1 && s.V >= 2, "SKEL: invalid extents in record " + s.sample_id);
    s.data.resize(s.C * s.T * s.V);
    f.read(reinterpret_cast<char*>(s.data.data()),
           static_cast<std::streamsize>(s.data.size() * sizeof(float)));
    CPM_CHECK(f.good(), "SKEL: record count mismatch (truncated tensor)");
    for (const float v : s.data)
      CPM_CHECK(std::isfinite(v), "SKEL: non-finite value in record " + s.sample_id);
    seqs.push_back(std::move(s));
  }
  return seqs;
}

// ---------------------------------------------------------------------------
// manifest I/O and dataset round-trip
// ---------------------------------------------------------------------------

void save_manifest(const std::string& path, const DatasetManifest& manifest) {
  nlohmann::json j;
  j["version"] = manifest.version;
  j["topology"]["V"] = manifest.V;
  auto& je = j["topology"]["edges"] = nlohmann::json::array();
  for (const auto& [a, b] : manifest.edges) je.push_back({a, b});
  j["data"] = manifest.data_file;
  auto& js = j["samples"] = nlohmann::json::array();
  for (const auto& e : manifest.samples)
    js.push_back({{"id", e.id}, {"label", e.label}, {"split", e.split}});
  std::ofstream f(path);
  CPM_CHECK(f.is_open(), "manifest: cannot open for writing: " + path);
  f << j.dump(2) << "\n";
  CPM_CHECK(f.good(), "manifest: write failed: " + path);
}

DatasetManifest load_manifest(const std::string& path) {
  std::ifstream f(path);
  CPM_CHECK(f.is_open(), "manifest: cannot open: " + path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error("manifest: invalid JSON in " + path + ": " + e.what());
  }
  DatasetManifest m;
  try {
    m.version = j.at("version").get<int>();
    m.V = j.at("topology").at("V").get<std::size_t>();
    for (const auto& e : j.at("topology").at("edges"))
      m.edges.push_back({e.at(0).get<std::size_t>(), e.at(1).get<std::size_t>()});
    m.data_file = j.value("data", "");
    for (const auto& s : j.at("samples"))
      m.samples.push_back({s.at("id").get<std::string>(), s.at("label").get<int>(),
                           s.at("split").get<std::string>()});
  } catch (const nlohmann::json::exception& e) {
    throw Error("manifest: missing or malformed field in " + path + ": " + e.what());
  }
  std::set<std::string> ids;
  for (const auto& s : m.samples) {
    CPM_CHECK(ids.insert(s.id).second, "manifest: duplicate sample_id " + s.id);
    CPM_CHECK(s.split.empty() || s.split == "train" || s.split == "test",
              "manifest: bad split '" + s.split + "' for " + s.id);
  }
  return m;
}

void save_dataset(const std::string& manifest_path, const Dataset& ds) {
  namespace fs = std::filesystem;
  fs::path mp(manifest_path);
  fs::path sp = mp;
  sp.replace_extension(".skel");
  DatasetManifest m = ds.manifest;
  m.data_file = sp.filename().string();
  save_skel(sp.string(), ds.sequences);
  save_manifest(mp.string(), m);
}

Dataset load_dataset(const std::string& manifest_path) {
  namespace fs = std::filesystem;
  Dataset ds;
  ds.manifest = load_manifest(manifest_path);
  CPM_CHECK(!ds.manifest.data_file.empty(), "manifest: missing 'data' file reference");
  const fs::path sp = fs::path(manifest_path).parent_path() / ds.manifest.data_file;
  auto seqs = load_skel(sp.string());

  // Reorder records to manifest order; every manifest id must exist exactly
  // once in the container and vice versa.
  CPM_CHECK(seqs.size() == ds.manifest.samples.size(),
            "dataset: manifest lists " + std::to_string(ds.manifest.samples.size()) +
                " samples but container has " + std::to_string(seqs.size()));
  std::vector<std::size_t> order;
  for (const auto& e : ds.manifest.samples) {
    bool found = false;
    for (std::size_t i = 0; i < seqs.size(); ++i)
      if (seqs[i].sample_id == e.id) {
        order.push_back(i);
        found = true;
        break;
      }
    CPM_CHECK(found, "dataset: manifest references absent sample_id " + e.id);
  }
  ds.sequences.reserve(seqs.size());
  for (std::size_t k = 0; k < order.size(); ++k) {
    auto& s = seqs[order[k]];
    s.label = ds.manifest.samples[k].label;  // manifest is authoritative
    ds.sequences.push_back(std::move(s));
  }
  return ds;
}

}  // namespace cpm
