#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace narrowbert {

// splitmix64 finalizer; derives independent sub-seeds from (seed, stream).
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

// Normal(0, stddev) resampled until within +-2 stddev.
inline double truncated_normal(std::mt19937_64& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, 1.0);
  for (;;) {
    const double x = dist(rng);
    if (std::abs(x) <= 2.0) return x * stddev;
  }
}

}  // namespace narrowbert
