#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace tentgp {

using Rng = std::mt19937_64;

// SplitMix64 finalizer; derives independent stream seeds from a base seed.
constexpr std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  return mix_seed(base ^ mix_seed(stream + 0x632be59bd9b4e019ULL));
}

// Standard normal draws that do not depend on the library's
// normal_distribution implementation (Box-Muller on 53-bit uniforms).
double standard_normal(Rng& rng);
double uniform01(Rng& rng);
// Poisson draw via inversion for small means and PTRS-style transformed
// rejection for large means; deterministic given the engine state.
std::int64_t poisson_draw(Rng& rng, double mean);

std::vector<double> standard_normals(std::uint64_t seed, std::size_t n);

}  // namespace tentgp
