#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace sknas {

// Counter-based deterministic generator (splitmix64 over an incrementing
// counter). The stream is a pure function of (seed, call index), so any run
// that makes the same sequence of calls sees bitwise-identical samples.
// No global state; every consumer owns its Rng.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : seed_(seed) {}

  uint64_t next_u64() {
    uint64_t z = seed_ + 0x9E3779B97F4A7C15ULL * ++counter_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  int64_t uniform_int(int64_t n) {
    if (n <= 0) throw std::invalid_argument("Rng::uniform_int: n must be positive");
    return static_cast<int64_t>(
        (static_cast<unsigned __int128>(next_u64()) * static_cast<unsigned __int128>(n)) >> 64);
  }

  // Standard normal via Box-Muller; always consumes exactly two draws.
  double normal() {
    double u1 = 1.0 - uniform();  // (0, 1]
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * kPi * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Standard Gumbel sample -log(-log(U)), U uniform on (eps, 1-eps).
  double gumbel() {
    constexpr double eps = 1e-10;
    double u = eps + (1.0 - 2.0 * eps) * uniform();
    return -std::log(-std::log(u));
  }

  // Independent child stream; deterministic in (seed, stream_id).
  Rng derive(uint64_t stream_id) const {
    uint64_t z = seed_ ^ (0xD1B54A32D192ED03ULL * (stream_id + 1));
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return Rng(z ^ (z >> 31));
  }

  uint64_t seed() const { return seed_; }

 private:
  static constexpr double kPi = 3.14159265358979323846;
  uint64_t seed_ = 0;
  uint64_t counter_ = 0;
};

}  // namespace sknas
