#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "sphere_attn/geometry.hpp"

namespace sphere_attn {

/// Radial window size: angular extents in degrees, radial extent in meters.
struct RadialWindowConfig {
  double delta_theta = 2.0;
  double delta_phi = 2.0;
  double r_max = 120.0;

  void validate() const;
};

/// Cubic window side lengths in meters. The library default of 5 m is not a
/// published value.
struct CubicWindowConfig {
  Vec3 side{5.0, 5.0, 5.0};

  void validate() const;
};

struct RadialIndex {
  std::int64_t i_theta = 0;
  std::int64_t i_phi = 0;
  bool operator==(const RadialIndex&) const = default;
};

/// Generic window key, compared lexicographically. Radial keys are
/// (i_theta, i_phi, overflow) where overflow is 1 for r > r_max; cubic keys
/// are (ix, iy, iz).
using WindowKey = std::array<std::int64_t, 3>;

/// (floor(theta / delta_theta), floor(phi / delta_phi)).
RadialIndex radial_window_index(SphericalCoord s, const RadialWindowConfig& cfg);

WindowKey radial_window_key(SphericalCoord s, const RadialWindowConfig& cfg);

/// Componentwise mathematical floor of coord / side.
WindowKey cubic_window_index(Vec3 p, const CubicWindowConfig& cfg);

/// Non-overlapping grouping of token ids in CSR form. Windows are ordered by
/// key; ids within a window ascend.
class WindowPartition {
 public:
  WindowPartition() : offsets_{0} {}
  WindowPartition(std::vector<std::uint32_t> offsets, std::vector<std::uint32_t> token_ids,
                  std::vector<WindowKey> keys);

  std::size_t window_count() const { return keys_.size(); }
  std::size_t token_count() const { return token_ids_.size(); }

  std::span<const std::uint32_t> offsets() const { return offsets_; }
  std::span<const std::uint32_t> token_ids() const { return token_ids_; }
  std::span<const WindowKey> keys() const { return keys_; }

  std::span<const std::uint32_t> window(std::size_t w) const {
    return {token_ids_.data() + offsets_[w], offsets_[w + 1] - offsets_[w]};
  }
  std::size_t window_size(std::size_t w) const { return offsets_[w + 1] - offsets_[w]; }

  /// For each token, the index of the window holding it.
  std::vector<std::uint32_t> window_of_token() const;

  /// 64-bit FNV-1a over offsets and token ids, for determinism checks.
  std::uint64_t fingerprint() const;

  bool operator==(const WindowPartition&) const = default;

 private:
  std::vector<std::uint32_t> offsets_;
  std::vector<std::uint32_t> token_ids_;
  std::vector<WindowKey> keys_;
};

/// Groups token ids by equal key.
WindowPartition bucket(std::span<const WindowKey> keys);

WindowPartition radial_partition(std::span<const Vec3> positions, Vec3 origin,
                                 const RadialWindowConfig& cfg);

WindowPartition cubic_partition(std::span<const Vec3> positions, const CubicWindowConfig& cfg);

struct OccupancyBin {
  std::size_t lo = 0;  // inclusive
  std::size_t hi = 0;  // inclusive
  std::size_t count = 0;
};

struct PartitionStats {
  std::size_t window_count = 0;
  std::size_t occupancy_min = 0;
  double occupancy_mean = 0.0;
  std::size_t occupancy_max = 0;
  /// Power-of-two occupancy bins [1,1], [2,3], [4,7], ...
  std::vector<OccupancyBin> histogram;
  /// Maximum intra-window pairwise distance per window.
  std::vector<double> reach;
  double reach_max = 0.0;
  double reach_p99 = 0.0;
  /// True when at least one window exceeded kExactReachLimit tokens and its
  /// reach is the bounding-box diagonal instead of the exact value.
  bool reach_approximate = false;
};

inline constexpr std::size_t kExactReachLimit = 2048;

PartitionStats partition_stats(const WindowPartition& partition, std::span<const Vec3> positions);

nlohmann::json to_json(const PartitionStats& stats);

}  // namespace sphere_attn
