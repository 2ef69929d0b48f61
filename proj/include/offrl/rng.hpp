#pragma once

#include <cstdint>
#include <random>

namespace offrl {

using Rng = std::mt19937_64;

// Independent streams derived from one master seed.
enum class Stream : std::uint64_t {
  environment = 1,
  agent = 2,
  shuffle = 3,
  mixture = 4,
  evaluation = 5,
  init = 6,
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t master, Stream stream) {
  return splitmix64(splitmix64(master) ^ static_cast<std::uint64_t>(stream));
}

inline Rng make_rng(std::uint64_t master, Stream stream) {
  return Rng(derive_seed(master, stream));
}

inline double uniform01(Rng& rng) {
  return std::uniform_real_distribution<double>(0.0, 1.0)(rng);
}

}  // namespace offrl
