#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace promptlab {

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

// All pipeline randomness flows from one root seed; each stage gets its own
// stream keyed by a stable tag so stages can be rerun independently.
inline std::uint64_t derive_seed(std::uint64_t root, std::string_view tag) {
  return splitmix64(root ^ fnv1a(tag));
}

inline std::uint64_t derive_seed(std::uint64_t root, std::string_view tag,
                                 std::uint64_t index) {
  return splitmix64(derive_seed(root, tag) + 0x9e3779b97f4a7c15ULL * (index + 1));
}

using Rng = std::mt19937_64;

}  // namespace promptlab
