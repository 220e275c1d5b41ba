#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace ipg {

// FNV-1a, 64-bit. Used for artifact hashing and seed derivation.
inline uint64_t fnv1a64(const void* data, size_t len) {
  const auto* p = static_cast<const unsigned char*>(data);
  uint64_t h = 1469598103934665603ull;
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

inline uint64_t fnv1a64(std::string_view s) { return fnv1a64(s.data(), s.size()); }

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Stage/substream seeds all derive from one root seed. The derivation is part
// of the reproducibility contract: stage_seed = splitmix64(root ^ fnv1a64(label)),
// and indexed substreams mix the index in with another splitmix round.
inline uint64_t derive_seed(uint64_t root, std::string_view label) {
  return splitmix64(root ^ fnv1a64(label));
}

inline uint64_t derive_seed(uint64_t root, std::string_view label, uint64_t index) {
  return splitmix64(derive_seed(root, label) ^ splitmix64(index));
}

// Uniform in [0,1) with 53 random mantissa bits. mt19937_64 output is pinned by
// the standard, so draws are reproducible across platforms.
inline double uniform_unit(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

// Box-Muller, one value per call. std::normal_distribution is not pinned by the
// standard, so the transform is done by hand.
inline double normal_unit(std::mt19937_64& rng) {
  double u1 = uniform_unit(rng);
  double u2 = uniform_unit(rng);
  while (u1 <= 0.0) u1 = uniform_unit(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

inline int64_t uniform_int(std::mt19937_64& rng, int64_t lo, int64_t hi_inclusive) {
  const auto span = static_cast<uint64_t>(hi_inclusive - lo + 1);
  return lo + static_cast<int64_t>(rng() % span);
}

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& content);
uint64_t hash_file(const std::string& path);
std::string hex64(uint64_t v);

}  // namespace ipg
