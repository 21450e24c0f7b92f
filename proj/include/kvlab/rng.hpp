// Counter-based deterministic random streams.
#pragma once

#include <cmath>
#include <cstdint>

namespace kvlab {

// SplitMix64 in counter form: draw i is a pure function of (seed, i), so a
// stream can be replayed from its seed alone and never depends on platform
// libm or libstdc++ distribution internals.  Streams are cheap value types.
class RngStream {
 public:
  RngStream() = default;
  explicit RngStream(std::uint64_t seed) : seed_(seed) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }

  std::uint64_t next_u64() {
    ++counter_;
    return mix64(seed_ + counter_ * kGamma);
  }

  // Uniform draw with a 53-bit mantissa, clamped to [1e-12, 1 - 1e-12] so
  // that log(u) and log(-log(u)) stay finite downstream.
  double uniform01() {
    double u = static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    if (u < kClamp) u = kClamp;
    if (u > 1.0 - kClamp) u = 1.0 - kClamp;
    return u;
  }

  // Box-Muller, cosine branch.  Consumes exactly two uniforms per sample;
  // nothing is cached, which keeps the draw count predictable for replay.
  double gaussian(double mu, double sigma) {
    const double u1 = uniform01();
    const double u2 = uniform01();
    const double r = std::sqrt(-2.0 * std::log(u1));
    return mu + sigma * r * std::cos(2.0 * kPi * u2);
  }

  // Standard Gumbel(0, 1) via inverse CDF.
  double gumbel() { return -std::log(-std::log(uniform01())); }

  // Child stream for a given lane (e.g. layer * heads + head).  Distinct
  // lanes give decorrelated streams; deriving is deterministic and does not
  // advance the parent.
  RngStream derive(std::uint64_t lane) const {
    return RngStream(mix64(seed_ ^ mix64(lane + kGamma)));
  }

 private:
  static constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ull;
  static constexpr double kClamp = 1e-12;
  static constexpr double kPi = 3.14159265358979323846;

  static std::uint64_t mix64(std::uint64_t z) {
    z ^= z >> 30;
    z *= 0xBF58476D1CE4E5B9ull;
    z ^= z >> 27;
    z *= 0x94D049BB133111EBull;
    z ^= z >> 31;
    return z;
  }

  std::uint64_t seed_ = 0;
  std::uint64_t counter_ = 0;
};

}  // namespace kvlab
