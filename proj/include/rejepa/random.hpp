#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace rejepa {

using Rng = std::mt19937_64;

/// SplitMix64 finalizer. Used to derive independent generator seeds from
/// (seed, counter...) tuples so every random draw is a pure function of its
/// coordinates.
constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::initializer_list<std::uint64_t> parts) {
  std::uint64_t h = 0x52454a455041ULL;
  for (auto p : parts) h = splitmix64(h ^ splitmix64(p));
  return h;
}

inline Rng derive_rng(std::initializer_list<std::uint64_t> parts) {
  return Rng(derive_seed(parts));
}

// Normal draw truncated to [-2 sigma, 2 sigma] by rejection.
inline double truncated_normal(Rng& rng, double sigma) {
  std::normal_distribution<double> normal(0.0, 1.0);
  for (;;) {
    double z = normal(rng);
    if (z >= -2.0 && z <= 2.0) return z * sigma;
  }
}

}  // namespace rejepa
