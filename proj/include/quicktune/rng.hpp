#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace quicktune {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Independent generator for a named component. Adding draws to one stream
/// never shifts the draws seen by another.
inline Rng substream(std::uint64_t seed, std::string_view name) {
  return Rng(splitmix64(seed ^ splitmix64(fnv1a(name))));
}

inline Rng substream(std::uint64_t seed, std::string_view name,
                     std::uint64_t index) {
  return Rng(splitmix64(splitmix64(seed ^ splitmix64(fnv1a(name))) + index));
}

inline double uniform01(Rng &rng) {
  // 53 random mantissa bits; same sequence on every platform.
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline double uniform(Rng &rng, double lo, double hi) {
  return lo + (hi - lo) * uniform01(rng);
}

inline std::size_t uniform_index(Rng &rng, std::size_t n) {
  // Rejection sampling keeps the draw unbiased for any n.
  const std::uint64_t bound = n;
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
  std::uint64_t r;
  do {
    r = rng();
  } while (r >= limit);
  return static_cast<std::size_t>(r % bound);
}

inline double standard_normal(Rng &rng) {
  // Box-Muller, one output per call.
  double u1;
  do {
    u1 = uniform01(rng);
  } while (u1 <= 0.0);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

template <class Range> void shuffle(Range &r, Rng &rng) {
  for (std::size_t i = r.size(); i > 1; --i) {
    std::swap(r[i - 1], r[uniform_index(rng, i)]);
  }
}

} // namespace quicktune
