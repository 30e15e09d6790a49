#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace unidistill {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Child seed for an independent stream identified by `path` under `base`.
inline std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> path) {
  std::uint64_t s = splitmix64(base);
  for (std::uint64_t p : path) s = splitmix64(s ^ splitmix64(p + 0x632be59bd9b4e019ULL));
  return s;
}

inline Rng make_rng(std::uint64_t base, std::initializer_list<std::uint64_t> path) {
  return Rng(derive_seed(base, path));
}

// Stream tags keep the purposes of derived generators apart.
namespace stream {
inline constexpr std::uint64_t kScene = 1;
inline constexpr std::uint64_t kInit = 2;
inline constexpr std::uint64_t kBatch = 3;
inline constexpr std::uint64_t kAdapt = 4;
inline constexpr std::uint64_t kFixture = 5;
}  // namespace stream

}  // namespace unidistill
