#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace geossl {

using Rng = std::mt19937_64;

// SplitMix64 finalizer; mixes a run seed with stream tags so every
// (seed, epoch, sample, purpose) tuple gets an independent generator.
inline std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t stream_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> tags) {
  std::uint64_t h = mix64(seed);
  for (auto t : tags) h = mix64(h ^ mix64(t + 0x51ed2701ULL));
  return h;
}

inline Rng make_rng(std::uint64_t seed, std::initializer_list<std::uint64_t> tags = {}) {
  return Rng(stream_seed(seed, tags));
}

// Stream purposes.
enum class Stream : std::uint64_t {
  kInit = 1,
  kShuffle = 2,
  kPartner = 3,
  kAugment = 4,
  kImage = 5,
  kHabitat = 6,
  kKmeans = 7,
  kSplit = 8,
  kProbe = 9,
};

inline std::uint64_t tag(Stream s) { return static_cast<std::uint64_t>(s); }

inline double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline bool bernoulli(Rng& rng, double p) {
  if (p <= 0.0) return false;
  if (p >= 1.0) return true;
  return std::bernoulli_distribution(p)(rng);
}

}  // namespace geossl
