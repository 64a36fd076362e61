#pragma once

#include <cmath>
#include <cstdint>

// Deterministic, platform-independent random generation. std::random
// distributions are implementation-defined, so every stochastic component in
// the library draws through this header instead. Streams are derived by
// hashing (seed, index) pairs, which makes results independent of scheduling
// and worker count.

namespace qlns {

constexpr std::uint64_t kSeedGolden = 0x9e3779b97f4a7c15ULL;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += kSeedGolden;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Stable seed derivation: hash(seed, i). Used for per-draw / per-cell seeds.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index) {
  return splitmix64(splitmix64(base) ^ (index + kSeedGolden));
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(splitmix64(seed ^ 0xd1b54a32d192ed03ULL)) {}

  std::uint64_t next_u64() {
    state_ += kSeedGolden;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller; one fresh pair per call keeps draws independent of call parity.
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Integer in [0, n).
  std::uint64_t below(std::uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

  // Knuth sampling; fine for the small means used by the shot-noise model.
  int poisson(double mean) {
    if (mean <= 0.0) return 0;
    const double limit = std::exp(-mean);
    double prod = 1.0;
    int k = -1;
    do {
      ++k;
      prod *= uniform();
    } while (prod > limit);
    return k;
  }

 private:
  std::uint64_t state_;
};

}  // namespace qlns
