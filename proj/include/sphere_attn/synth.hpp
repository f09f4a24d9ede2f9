#pragma once

#include <cstddef>
#include <cstdint>
#include <span>

#include "sphere_attn/attention.hpp"
#include "sphere_attn/geometry.hpp"

namespace sphere_attn {

/// Spinning-LiDAR-like scene: `beam_count` rings spaced uniformly in
/// inclination over [inclination_min, inclination_max] degrees, each sampled
/// at `azimuth_steps` evenly spaced azimuths. Every surviving ray returns one
/// point at a range uniform in [r_min, r_max]. Angular density is constant,
/// so spatial density falls off with range.
struct BeamSceneConfig {
  std::size_t beam_count = 32;
  std::size_t azimuth_steps = 1024;
  double r_min = 1.0;
  double r_max = 100.0;
  double dropout_prob = 0.0;
  std::size_t feature_dim = 16;
  std::uint64_t seed = 7;
  double inclination_min = 60.0;
  double inclination_max = 100.0;

  void validate() const;
};

/// Deterministic for a given config. Features are uniform in [-1, 1].
PointCloud generate_scene(const BeamSceneConfig& cfg, Vec3 origin = {});

inline constexpr std::size_t kBruteForceTokenLimit = 4096;

/// Reference for sphereformer_forward: explicit N x N pair enumeration with a
/// same-window predicate and scalar loops, all in double. Throws SizeError
/// above kBruteForceTokenLimit tokens.
SphereFormerResult<double> brute_force_forward(const DenseMatrix<double>& features,
                                               std::span<const Vec3> positions,
                                               const SphereFormerConfig& config,
                                               const AttentionParams<double>& params,
                                               const PosTables<double>& radial_tables,
                                               const PosTables<double>& cubic_tables);

}  // namespace sphere_attn
