// CPMP checkpoint container: magic "CPMP" | version u16 | config JSON echo |
// named records. Model weights are stored in the run's native precision
// (dtype-tagged records) so resuming is bit-exact in both 32- and 64-bit
// modes; trainer state (optimizer momenta, queue, counters) rides along as
// f64/i64/utf8 records.
#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "cpm/model.hpp"

namespace cpm {

struct Record {
  enum Dtype : std::uint8_t { F32 = 0, F64 = 1, UTF8 = 2, I64 = 3 };
  std::uint8_t dtype = F32;
  std::vector<std::uint32_t> shape;
  std::vector<float> f32;
  std::vector<double> f64;
  std::string text;
  std::vector<std::int64_t> i64;

  std::size_t count() const {
    std::size_t n = 1;
    for (auto e : shape) n *= e;
    return n;
  }
};

class Checkpoint {
 public:
  std::string config_json;

  void add_f32(const std::string& name, std::vector<std::uint32_t> shape, std::vector<float> v);
  void add_f64(const std::string& name, std::vector<std::uint32_t> shape, std::vector<double> v);
  void add_i64(const std::string& name, std::vector<std::int64_t> v);
  void add_text(const std::string& name, std::string v);

  bool has(const std::string& name) const;
  const Record& get(const std::string& name) const;  // throws when missing

  const std::vector<std::pair<std::string, Record>>& records() const { return records_; }

  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);

 private:
  Record& emplace(const std::string& name);
  std::vector<std::pair<std::string, Record>> records_;
};

// ---------------------------------------------------------------------------
// model <-> checkpoint
// ---------------------------------------------------------------------------

namespace ckpt_detail {

template <class Real>
void add_real(Checkpoint& ck, const std::string& name, const Shape& shape,
              const std::vector<Real>& v) {
  std::vector<std::uint32_t> s(shape.begin(), shape.end());
  if constexpr (sizeof(Real) == 4) {
    ck.add_f32(name, std::move(s), std::vector<float>(v.begin(), v.end()));
  } else {
    ck.add_f64(name, std::move(s), std::vector<double>(v.begin(), v.end()));
  }
}

template <class Real>
std::vector<Real> get_real(const Checkpoint& ck, const std::string& name, std::size_t expect) {
  const Record& r = ck.get(name);
  CPM_CHECK(r.dtype == (sizeof(Real) == 4 ? Record::F32 : Record::F64),
            "checkpoint: record '" + name + "' precision does not match the run's precision");
  CPM_CHECK(r.count() == expect, "checkpoint: record '" + name + "' has unexpected size");
  if constexpr (sizeof(Real) == 4) return std::vector<Real>(r.f32.begin(), r.f32.end());
  else return std::vector<Real>(r.f64.begin(), r.f64.end());
}

}  // namespace ckpt_detail

// `prefix` distinguishes parameter sets sharing one container (e.g. "ema."
// for the momentum-averaged target network next to the student's records).
template <class Real>
void save_model_params(Checkpoint& ck, ModelParams<Real>& params, const std::string& prefix = "") {
  for (auto& [name, t] : params.named_params())
    ckpt_detail::add_real<Real>(ck, prefix + "param." + name, t.shape(), t.values());
  for (auto& [name, buf] : params.named_buffers())
    ckpt_detail::add_real<Real>(ck, prefix + "buffer." + name, {buf->size()}, *buf);
}

template <class Real>
void load_model_params(const Checkpoint& ck, ModelParams<Real>& params,
                       const std::string& prefix = "") {
  for (auto& [name, t] : params.named_params())
    t.values_mut() = ckpt_detail::get_real<Real>(ck, prefix + "param." + name, t.size());
  for (auto& [name, buf] : params.named_buffers())
    *buf = ckpt_detail::get_real<Real>(ck, prefix + "buffer." + name, buf->size());
}

// FNV-1a over all parameter and buffer bytes in traversal order; used to
// assert that frozen weights stayed frozen.
template <class Real>
std::uint64_t params_fingerprint(ModelParams<Real>& params) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (auto& [name, t] : params.named_params()) {
    h = fnv1a(name.data(), name.size(), h);
    h = fnv1a(t.values().data(), t.size() * sizeof(Real), h);
  }
  for (auto& [name, buf] : params.named_buffers()) {
    h = fnv1a(name.data(), name.size(), h);
    h = fnv1a(buf->data(), buf->size() * sizeof(Real), h);
  }
  return h;
}

}  // namespace cpm
