#pragma once

// Seed splitting: every random stream is derived from (root seed, stream tag, index) by SplitMix64
// mixing, so adding draws to one stream never shifts another.

#include <cstdint>
#include <random>
#include <string_view>

namespace taskilc {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t hash_tag(std::string_view tag) {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (char c : tag) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t derive_seed(std::uint64_t root, std::string_view tag, std::uint64_t index = 0) {
  return splitmix64(splitmix64(root ^ hash_tag(tag)) + index);
}

inline std::mt19937_64 make_stream(std::uint64_t root, std::string_view tag, std::uint64_t index = 0) {
  return std::mt19937_64(derive_seed(root, tag, index));
}

}  // namespace taskilc
