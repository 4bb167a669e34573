#pragma once

#include <cstdint>
#include <random>

namespace imformer {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x)
{
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Per-item seed that depends only on (global seed, index, stream), never on scheduling order.
inline std::uint64_t derive_seed(std::uint64_t global, std::uint64_t index, std::uint64_t stream = 0)
{
  return splitmix64(splitmix64(global ^ splitmix64(stream + 0x51ed270b2d5e1f3dULL)) + index);
}

} // namespace imformer
