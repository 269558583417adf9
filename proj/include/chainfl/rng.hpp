#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace chainfl {

using Rng = std::mt19937_64;

namespace detail {

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace detail

// Seed for the substream owned by (master seed, module, entity). Streams never
// share state, so extra draws in one module leave every other sequence intact.
constexpr std::uint64_t stream_seed(std::uint64_t master, std::string_view module, std::uint64_t entity = 0,
                                    std::uint64_t sub = 0) {
  std::uint64_t h = detail::splitmix64(master);
  h = detail::splitmix64(h ^ detail::fnv1a(module));
  h = detail::splitmix64(h ^ entity);
  h = detail::splitmix64(h ^ (sub * 0xd1b54a32d192ed03ULL));
  return h;
}

inline Rng make_stream(std::uint64_t master, std::string_view module, std::uint64_t entity = 0,
                       std::uint64_t sub = 0) {
  return Rng(stream_seed(master, module, entity, sub));
}

}  // namespace chainfl
