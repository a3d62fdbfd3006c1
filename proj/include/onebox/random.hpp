#pragma once

#include <cstdint>
#include <random>

namespace onebox {

using Rng = std::mt19937_64;

// Independent, reproducible substream `stream` of a master seed. Every
// source of randomness (simulation noise, chain k, draw m of a predictive
// pass) gets its own stream id so results do not depend on thread count.
inline Rng make_stream(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32),
                    0x6f6e65u, 0x626f78u};
  return Rng(seq);
}

// Named stream ids.
namespace streams {
inline constexpr std::uint64_t kSimulation = 1;
inline constexpr std::uint64_t kCovariates = 2;
inline constexpr std::uint64_t kChainBase = 1000;
inline constexpr std::uint64_t kSmoothBase = 1ull << 32;
inline constexpr std::uint64_t kObserveBase = 1ull << 33;
}  // namespace streams

inline double standard_normal(Rng& rng) {
  return std::normal_distribution<double>(0.0, 1.0)(rng);
}

inline double uniform01(Rng& rng) {
  return std::uniform_real_distribution<double>(0.0, 1.0)(rng);
}

// Inverse-gamma(shape, scale) draw: 1 / Gamma(shape, rate = scale).
inline double inverse_gamma(Rng& rng, double shape, double scale) {
  return scale / std::gamma_distribution<double>(shape, 1.0)(rng);
}

}  // namespace onebox
