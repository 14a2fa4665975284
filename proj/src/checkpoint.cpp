#include "cpm/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace cpm {

namespace {

constexpr std::uint16_t kVersion = 1;

template <class T>
void put(std::ofstream& f, const T& v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T take(std::ifstream& f, const char* what) {
  T v;
  f.read(reinterpret_cast<char*>(&v), sizeof(T));
  CPM_CHECK(f.good(), std::string("checkpoint: truncated file (") + what + ")");
  return v;
}

}  // namespace

Record& Checkpoint::emplace(const std::string& name) {
  CPM_CHECK(!has(name), "checkpoint: duplicate record '" + name + "'");
  records_.push_back({name, Record{}});
  return records_.back().second;
}

void Checkpoint::add_f32(const std::string& name, std::vector<std::uint32_t> shape,
                         std::vector<float> v) {
  Record& r = emplace(name);
  r.dtype = Record::F32;
  r.shape = std::move(shape);
  r.f32 = std::move(v);
  CPM_CHECK(r.count() == r.f32.size(), "checkpoint: shape/data mismatch for '" + name + "'");
}

void Checkpoint::add_f64(const std::string& name, std::vector<std::uint32_t> shape,
                         std::vector<double> v) {
  Record& r = emplace(name);
  r.dtype = Record::F64;
  r.shape = std::move(shape);
  r.f64 = std::move(v);
  CPM_CHECK(r.count() == r.f64.size(), "checkpoint: shape/data mismatch for '" + name + "'");
}

void Checkpoint::add_i64(const std::string& name, std::vector<std::int64_t> v) {
  Record& r = emplace(name);
  r.dtype = Record::I64;
  r.shape = {static_cast<std::uint32_t>(v.size())};
  r.i64 = std::move(v);
}

void Checkpoint::add_text(const std::string& name, std::string v) {
  Record& r = emplace(name);
  r.dtype = Record::UTF8;
  r.shape = {static_cast<std::uint32_t>(v.size())};
  r.text = std::move(v);
}

bool Checkpoint::has(const std::string& name) const {
  for (const auto& [n, r] : records_)
    if (n == name) return true;
  return false;
}

const Record& Checkpoint::get(const std::string& name) const {
  for (const auto& [n, r] : records_)
    if (n == name) return r;
  throw Error("checkpoint: missing record '" + name + "'");
}

void Checkpoint::save(const std::string& path) const {
  std::ofstream f(path, std::ios::binary);
  CPM_CHECK(f.is_open(), "checkpoint: cannot open for writing: " + path);
  f.write("CPMP", 4);
  put<std::uint16_t>(f, kVersion);
  put<std::uint32_t>(f, static_cast<std::uint32_t>(config_json.size()));
  f.write(config_json.data(), static_cast<std::streamsize>(config_json.size()));
  put<std::uint32_t>(f, static_cast<std::uint32_t>(records_.size()));
  for (const auto& [name, r] : records_) {
    CPM_CHECK(name.size() <= 0xffff, "checkpoint: record name too long");
    put<std::uint16_t>(f, static_cast<std::uint16_t>(name.size()));
    f.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint8_t>(f, r.dtype);
    CPM_CHECK(r.shape.size() <= 0xff, "checkpoint: rank too large");
    put<std::uint8_t>(f, static_cast<std::uint8_t>(r.shape.size()));
    for (auto e : r.shape) put<std::uint32_t>(f, e);
    switch (r.dtype) {
      case Record::F32:
        f.write(reinterpret_cast<const char*>(r.f32.data()),
                static_cast<std::streamsize>(r.f32.size() * 4));
        break;
      case Record::F64:
        f.write(reinterpret_cast<const char*>(r.f64.data()),
                static_cast<std::streamsize>(r.f64.size() * 8));
        break;
      case Record::UTF8:
        f.write(r.text.data(), static_cast<std::streamsize>(r.text.size()));
        break;
      case Record::I64:
        f.write(reinterpret_cast<const char*>(r.i64.data()),
                static_cast<std::streamsize>(r.i64.size() * 8));
        break;
      default:
        throw Error("checkpoint: unknown dtype tag");
    }
  }
  CPM_CHECK(f.good(), "checkpoint: write failed: " + path);
}

Checkpoint Checkpoint::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  CPM_CHECK(f.is_open(), "checkpoint: cannot open: " + path);
  char magic[4];
  f.read(magic, 4);
  CPM_CHECK(f.good() && std::memcmp(magic, "CPMP", 4) == 0,
            "checkpoint: bad magic bytes in " + path);
  const auto version = take<std::uint16_t>(f, "version");
  CPM_CHECK(version == kVersion,
            "checkpoint: unsupported version " + std::to_string(version));
  Checkpoint ck;
  const auto cfg_len = take<std::uint32_t>(f, "config length");
  ck.config_json.resize(cfg_len);
  f.read(ck.config_json.data(), cfg_len);
  CPM_CHECK(f.good(), "checkpoint: truncated file (config)");
  const auto count = take<std::uint32_t>(f, "record count");
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = take<std::uint16_t>(f, "record name length");
    std::string name(name_len, '\0');
    f.read(name.data(), name_len);
    CPM_CHECK(f.good(), "checkpoint: truncated file (record name)");
    Record r;
    r.dtype = take<std::uint8_t>(f, "dtype");
    const auto ndim = take<std::uint8_t>(f, "rank");
    r.shape.resize(ndim);
    for (auto& e : r.shape) e = take<std::uint32_t>(f, "extent");
    const std::size_t n = r.count();
    switch (r.dtype) {
      case Record::F32:
        r.f32.resize(n);
        f.read(reinterpret_cast<char*>(r.f32.data()), static_cast<std::streamsize>(n * 4));
        break;
      case Record::F64:
        r.f64.resize(n);
        f.read(reinterpret_cast<char*>(r.f64.data()), static_cast<std::streamsize>(n * 8));
        break;
      case Record::UTF8:
        r.text.resize(n);
        f.read(r.text.data(), static_cast<std::streamsize>(n));
        break;
      case Record::I64:
        r.i64.resize(n);
        f.read(reinterpret_cast<char*>(r.i64.data()), static_cast<std::streamsize>(n * 8));
        break;
      default:
        throw Error("checkpoint: unknown dtype tag " + std::to_string(r.dtype) + " in '" +
                    name + "'");
    }
    CPM_CHECK(f.good(), "checkpoint: truncated file (payload of '" + name + "')");
    ck.records_.push_back({std::move(name), std::move(r)});
  }
  return ck;
}

}  // namespace cpm
