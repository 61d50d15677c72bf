#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace ntk {

// FNV-1a 64-bit hash. Stable across platforms and builds; part of the
// reproducibility contract for named substreams.
inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// xoshiro256** generator. Substreams are derived from (seed, key): the key is
// FNV-1a hashed, folded into the seed through splitmix64, and the resulting
// value seeds the four state words. Identical (seed, key) pairs always yield
// identical draw sequences; the stream never depends on processing order.
class Rng {
 public:
  Rng() : Rng(0, "") {}

  Rng(std::uint64_t seed, std::string_view key) {
    std::uint64_t sm = seed;
    std::uint64_t mixed = splitmix64(sm) ^ fnv1a64(key);
    for (auto& word : state_) word = splitmix64(mixed);
    if ((state_[0] | state_[1] | state_[2] | state_[3]) == 0) state_[0] = 0x9e3779b97f4a7c15ull;
  }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Standard normal via Box-Muller; one draw consumes two uniforms.
  double normal() {
    double u1 = uniform01();
    double u2 = uniform01();
    double r = std::sqrt(-2.0 * std::log1p(-u1));
    return r * std::cos(2.0 * std::numbers::pi * u2);
  }

  // Uniform integer in [0, n). n must be > 0.
  std::uint64_t below(std::uint64_t n) {
    std::uint64_t threshold = (0 - n) % n;
    for (;;) {
      std::uint64_t x = next_u64();
      if (x >= threshold) return x % n;
    }
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  std::uint64_t state_[4];
};

using RngSubstream = Rng;

inline Rng derive_substream(std::uint64_t seed, std::string_view name) { return Rng(seed, name); }

}  // namespace ntk
