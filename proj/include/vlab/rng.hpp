#pragma once

#include <cmath>
#include <cstdint>

#include "vlab/common.hpp"

namespace vlab {

// Counter-based deterministic RNG.
//
// Draw i of stream (seed, stream) is a pure function of (seed, stream, i):
//
//   state  = splitmix64_mix(seed ^ splitmix64_mix(stream))
//   out(i) = splitmix64_mix(state + (i+1) * 0x9E3779B97F4A7C15)
//
// where splitmix64_mix is the standard SplitMix64 finalizer
// (xor-shift / multiply by 0xBF58476D1CE4E5B9 and 0x94D049BB133111EB).
// Uniform doubles take the top 53 bits; gaussians use Box-Muller on two
// uniforms. No global or ambient state anywhere: every consumer derives a
// named stream, so adding a draw in one place never shifts another stream.
class Rng {
 public:
  explicit Rng(uint64_t seed, uint64_t stream = 0)
      : state_(mix(seed ^ mix(stream))) {}

  // Named substream, e.g. Rng(seed, Rng::stream("wq")).
  static uint64_t stream(std::string_view name) { return fnv1a64(name); }

  uint64_t next_u64() { return mix(state_ + (++counter_) * 0x9E3779B97F4A7C15ull); }

  // Uniform in [0, 1).
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n). n must be positive; uses rejection to stay
  // unbiased.
  uint64_t below(uint64_t n) {
    const uint64_t limit = n * (UINT64_MAX / n);
    uint64_t v;
    do {
      v = next_u64();
    } while (v >= limit);
    return v % n;
  }

  int below_int(int n) { return int(below(uint64_t(n))); }

  // Standard normal via Box-Muller; consumes exactly two draws.
  double gaussian() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
  }

  uint64_t counter() const { return counter_; }

 private:
  static uint64_t mix(uint64_t z) {
    z ^= z >> 30;
    z *= 0xBF58476D1CE4E5B9ull;
    z ^= z >> 27;
    z *= 0x94D049BB133111EBull;
    z ^= z >> 31;
    return z;
  }

  uint64_t state_;
  uint64_t counter_ = 0;
};

// Deterministic Fisher-Yates permutation of {0, ..., n-1}.
template <typename IndexVec>
void shuffle_indices(IndexVec& v, Rng& rng) {
  for (size_t i = v.size(); i > 1; --i) {
    size_t j = size_t(rng.below(uint64_t(i)));
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace vlab
