#pragma once

// Deterministic random numbers: splitmix64 for seeding/splitting and
// xoshiro256++ as the stream generator. No OS entropy and no standard
// library distributions (their outputs are implementation-defined), so
// sequences are reproducible across platforms for a given seed.

#include <cstdint>
#include <cmath>
#include <array>
#include <vector>

namespace voxseg {

inline uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : seed_(seed) {
    uint64_t sm = seed;
    for (auto& w : state_) w = splitmix64(sm);
  }

  uint64_t seed() const { return seed_; }

  uint64_t next_u64() {
    const uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
    const uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  /// Uniform double in [0, 1).
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, bound). bound must be >= 1.
  uint64_t uniform_int(uint64_t bound) {
    // Lemire's multiply-shift with rejection; unbiased and portable.
    uint64_t x = next_u64();
    __uint128_t m = __uint128_t(x) * bound;
    uint64_t lo = uint64_t(m);
    if (lo < bound) {
      uint64_t threshold = -bound % bound;
      while (lo < threshold) {
        x = next_u64();
        m = __uint128_t(x) * bound;
        lo = uint64_t(m);
      }
    }
    return uint64_t(m >> 64);
  }

  /// Standard normal via Box-Muller (pairwise, second value cached).
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    // Avoid log(0); 2^-53 keeps the magnitude bounded.
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  /// Fisher-Yates shuffle.
  template <class T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = size_t(uniform_int(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  /// Independent substream addressed by tag; stable regardless of how much
  /// of the parent stream has been consumed.
  Rng split(uint64_t tag) const {
    uint64_t st = seed_ ^ (0xD1B54A32D192ED03ULL * (tag + 1));
    return Rng(splitmix64(st));
  }

 private:
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  uint64_t seed_;
  std::array<uint64_t, 4> state_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace voxseg
