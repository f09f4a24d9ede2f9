#pragma once

#include <cstdint>
#include <random>

namespace sphere_attn {

/// Seeded generator shared by the scene generator, parameter initializers and
/// tests. The real-valued draws below are built from raw 64-bit outputs so
/// the same seed gives the same bytes with any standard library.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  /// Uniform in [0, 1).
  double unit() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * unit(); }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) { return n == 0 ? 0 : engine_() % n; }

  std::uint64_t next() { return engine_(); }

 private:
  std::mt19937_64 engine_;
};

}  // namespace sphere_attn
