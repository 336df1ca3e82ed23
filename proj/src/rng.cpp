// SPDX-License-Identifier: Apache-2.0
#include "cwamsn/rng.hpp"

namespace cwamsn {
namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream,
                          std::initializer_list<std::uint64_t> coords) {
  std::uint64_t h = splitmix64(seed);
  // FNV-1a over the stream name, folded through splitmix.
  std::uint64_t name_hash = 0xcbf29ce484222325ULL;
  for (unsigned char c : stream) {
    name_hash ^= c;
    name_hash *= 0x100000001b3ULL;
  }
  h = splitmix64(h ^ name_hash);
  for (std::uint64_t c : coords) h = splitmix64(h ^ splitmix64(c + 0x632be59bd9b4e019ULL));
  return h;
}

}  // namespace cwamsn
