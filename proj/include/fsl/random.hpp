#pragma once

#include <cstdint>
#include <random>

namespace fsl {

using Rng = std::mt19937_64;

// splitmix64 finalizer; used to derive independent streams from (seed, tags).
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
  return mix64(mix64(mix64(seed) ^ a) ^ (b * 0xd1b54a32d192ed03ULL));
}

// Stream tags, so that e.g. episode sampling and initialization never share draws.
enum class Stream : std::uint64_t {
  init = 1,
  shuffle = 2,
  mixup = 3,
  exemplar = 4,
  episode = 5,
  adapt = 6,
  validation = 7,
  split = 8,
  synth = 9,
  probe = 10,
};

inline Rng make_rng(std::uint64_t seed, Stream stream, std::uint64_t index = 0) {
  return Rng(derive_seed(seed, static_cast<std::uint64_t>(stream), index));
}

}  // namespace fsl
