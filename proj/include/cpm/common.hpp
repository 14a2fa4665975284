// Shared small utilities: error type, checked asserts, hashing, seed mixing.
#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace cpm {

class Error : public std::runtime_error {
public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

#define CPM_CHECK(cond, msg)                                  \
  do {                                                        \
    if (!(cond)) throw ::cpm::Error(std::string("") + (msg)); \
  } while (0)

// FNV-1a over a byte range. Used for checkpoint/dataset fingerprints.
inline std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

std::string to_hex(std::uint64_t v);

// splitmix64 step; used to derive independent per-sample seed streams.
inline std::uint64_t mix_seed(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ull;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) { return mix_seed(a ^ mix_seed(b)); }

inline std::mt19937 make_rng(std::uint64_t seed) {
  return std::mt19937(static_cast<std::uint32_t>(mix_seed(seed) >> 16));
}

}  // namespace cpm
