#pragma once

#include <cstdint>
#include <random>

namespace displace {

using Rng = std::mt19937_64;

/// splitmix64 step; used to derive independent sub-seeds from one root seed.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline Rng make_rng(std::uint64_t seed, std::uint64_t stream = 0) {
  return Rng(mix_seed(seed, stream));
}

inline double uniform(Rng& rng, double lo, double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  return dist(rng);
}

template <class Int = int>
inline Int uniform_int(Rng& rng, Int lo, Int hi) {
  std::uniform_int_distribution<Int> dist(lo, hi);
  return dist(rng);
}

inline double gaussian(Rng& rng, double mean, double sigma) {
  std::normal_distribution<double> dist(mean, sigma);
  return dist(rng);
}

} // namespace displace
