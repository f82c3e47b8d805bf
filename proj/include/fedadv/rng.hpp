#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace fedadv {

using Rng = std::mt19937_64;

// splitmix64 finalizer; used to derive independent child seeds.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Deterministic child seed from a parent seed and a path of stream ids.
inline std::uint64_t derive_seed(std::uint64_t parent, std::initializer_list<std::uint64_t> path) {
  std::uint64_t s = mix64(parent);
  for (std::uint64_t p : path) s = mix64(s ^ mix64(p + 0x632be59bd9b4e019ULL));
  return s;
}

// Stream tags so seeds for different purposes never collide.
enum class Stream : std::uint64_t {
  init = 1,
  partition = 2,
  shared = 3,
  shuffle = 4,
  augment = 5,
  attack = 6,
  noise = 7,
  eval = 8,
  data = 9,
};

inline std::uint64_t derive_seed(std::uint64_t parent, Stream stream,
                                 std::initializer_list<std::uint64_t> path = {}) {
  std::uint64_t s = derive_seed(parent, {static_cast<std::uint64_t>(stream)});
  for (std::uint64_t p : path) s = mix64(s ^ mix64(p + 0x632be59bd9b4e019ULL));
  return s;
}

} // namespace fedadv
