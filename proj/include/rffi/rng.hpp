#pragma once

#include <cstdint>
#include <cmath>
#include <string_view>

namespace rffi {

// splitmix64 finalizer, used for seed derivation and stream splitting.
inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline uint64_t seed_mix(uint64_t a, uint64_t b) { return splitmix64(a ^ splitmix64(b)); }

inline uint64_t seed_tag(uint64_t seed, std::string_view tag) {
  uint64_t h = 0xcbf29ce484222325ull;  // FNV-1a
  for (char c : tag) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ull;
  }
  return seed_mix(seed, h);
}

// PCG32 (Melissa O'Neill's pcg32_random_r). Self-contained so every stream is
// reproducible independent of the standard library implementation.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0x853c49e6748fea9bull) {
    state_ = 0;
    inc_ = (splitmix64(seed ^ 0xda3e39cb94b95bdbull) << 1) | 1;
    next_u32();
    state_ += splitmix64(seed);
    next_u32();
  }

  uint32_t next_u32() {
    uint64_t old = state_;
    state_ = old * 6364136223846793005ull + inc_;
    uint32_t xorshifted = static_cast<uint32_t>(((old >> 18) ^ old) >> 27);
    uint32_t rot = static_cast<uint32_t>(old >> 59);
    return (xorshifted >> rot) | (xorshifted << ((32 - rot) & 31));
  }

  uint64_t next_u64() {
    uint64_t hi = next_u32();
    return (hi << 32) | next_u32();
  }

  // uniform in [0,1) with 53 random bits
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // uniform integer in [0, n)
  uint32_t uniform_int(uint32_t n) {
    return static_cast<uint32_t>((static_cast<uint64_t>(next_u32()) * n) >> 32);
  }

  // standard normal via Box-Muller; consumes two uniforms per call
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 <= 0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

 private:
  uint64_t state_;
  uint64_t inc_;
};

}  // namespace rffi
