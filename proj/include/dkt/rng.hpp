#pragma once

// Splittable counter-based random generator. Every consumer derives its own
// stream from (seed, stream, index), so tasks can be sampled out of order or
// in parallel and still reproduce bit-identically.

#include <cmath>
#include <cstdint>

namespace dkt {

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {
    // warm up so small seeds decorrelate immediately
    next_u64();
    next_u64();
  }

  // Derives an independent stream keyed by (seed, stream, index).
  static Rng keyed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
    std::uint64_t k = mix(seed + 0x9E3779B97F4A7C15ULL * (stream + 1));
    k = mix(k ^ (0xBF58476D1CE4E5B9ULL * (index + 1)));
    return Rng(k);
  }

  std::uint64_t next_u64() {
    state_ += 0x9E3779B97F4A7C15ULL;
    return mix(state_);
  }

  // Uniform on [0, 1).
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller; one draw per call, two uniforms consumed.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
  }

  double normal(double mu, double sigma) { return mu + sigma * normal(); }

  // Uniform integer in [0, n).
  std::uint64_t uniform_int(std::uint64_t n) {
    // multiply-shift; bias is negligible for n << 2^64
    unsigned __int128 wide = static_cast<unsigned __int128>(next_u64()) * n;
    return static_cast<std::uint64_t>(wide >> 64);
  }

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z ^= z >> 30;
    z *= 0xBF58476D1CE4E5B9ULL;
    z ^= z >> 27;
    z *= 0x94D049BB133111EBULL;
    z ^= z >> 31;
    return z;
  }

  std::uint64_t state_;
};

// Stream ids used across the project (kept distinct so draws never alias).
namespace rng_stream {
inline constexpr std::uint64_t kTrainTasks = 1;
inline constexpr std::uint64_t kEvalTasks = 2;
inline constexpr std::uint64_t kInit = 3;
inline constexpr std::uint64_t kClassSplit = 4;
inline constexpr std::uint64_t kCalibration = 5;
}  // namespace rng_stream

}  // namespace dkt
