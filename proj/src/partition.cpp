#include "sphere_attn/partition.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>
#include <string>

#include "sphere_attn/errors.hpp"

namespace sphere_attn {

void RadialWindowConfig::validate() const {
  if (!(delta_theta > 0.0 && delta_theta <= 360.0)) {
    throw ConfigError("radial window: delta_theta must be in (0, 360]");
  }
  if (!(delta_phi > 0.0 && delta_phi <= 180.0)) {
    throw ConfigError("radial window: delta_phi must be in (0, 180]");
  }
  if (!(r_max > 0.0)) throw ConfigError("radial window: r_max must be positive");
}

void CubicWindowConfig::validate() const {
  if (!(side.x > 0.0 && side.y > 0.0 && side.z > 0.0)) {
    throw ConfigError("cubic window: all sides must be positive");
  }
}

RadialIndex radial_window_index(SphericalCoord s, const RadialWindowConfig& cfg) {
  return {static_cast<std::int64_t>(std::floor(s.theta / cfg.delta_theta)),
          static_cast<std::int64_t>(std::floor(s.phi / cfg.delta_phi))};
}

WindowKey radial_window_key(SphericalCoord s, const RadialWindowConfig& cfg) {
  const RadialIndex idx = radial_window_index(s, cfg);
  return {idx.i_theta, idx.i_phi, s.r > cfg.r_max ? 1 : 0};
}

WindowKey cubic_window_index(Vec3 p, const CubicWindowConfig& cfg) {
  return {static_cast<std::int64_t>(std::floor(p.x / cfg.side.x)),
          static_cast<std::int64_t>(std::floor(p.y / cfg.side.y)),
          static_cast<std::int64_t>(std::floor(p.z / cfg.side.z))};
}

WindowPartition::WindowPartition(std::vector<std::uint32_t> offsets,
                                 std::vector<std::uint32_t> token_ids,
                                 std::vector<WindowKey> keys)
    : offsets_(std::move(offsets)), token_ids_(std::move(token_ids)), keys_(std::move(keys)) {
  if (offsets_.size() != keys_.size() + 1 || offsets_.front() != 0 ||
      offsets_.back() != token_ids_.size()) {
    throw ShapeError("WindowPartition: offsets inconsistent with keys/token ids");
  }
}

std::vector<std::uint32_t> WindowPartition::window_of_token() const {
  std::vector<std::uint32_t> owner(token_ids_.size());
  for (std::size_t w = 0; w < window_count(); ++w) {
    for (std::uint32_t t : window(w)) owner[t] = static_cast<std::uint32_t>(w);
  }
  return owner;
}

std::uint64_t WindowPartition::fingerprint() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](std::uint32_t v) {
    for (int b = 0; b < 4; ++b) {
      h ^= (v >> (8 * b)) & 0xffu;
      h *= 0x100000001b3ULL;
    }
  };
  for (std::uint32_t v : offsets_) mix(v);
  for (std::uint32_t v : token_ids_) mix(v);
  return h;
}

WindowPartition bucket(std::span<const WindowKey> keys) {
  if (keys.size() > std::numeric_limits<std::uint32_t>::max()) {
    throw SizeError("bucket: more than 2^32 - 1 tokens");
  }
  std::vector<std::pair<WindowKey, std::uint32_t>> keyed(keys.size());
  for (std::size_t i = 0; i < keys.size(); ++i) {
    keyed[i] = {keys[i], static_cast<std::uint32_t>(i)};
  }
  // Pairs compare by key, then by id, which is exactly the output order.
  std::sort(keyed.begin(), keyed.end());

  std::vector<std::uint32_t> offsets{0};
  std::vector<std::uint32_t> token_ids(keys.size());
  std::vector<WindowKey> window_keys;
  for (std::size_t i = 0; i < keyed.size(); ++i) {
    if (i == 0 || keyed[i].first != keyed[i - 1].first) {
      if (i != 0) offsets.push_back(static_cast<std::uint32_t>(i));
      window_keys.push_back(keyed[i].first);
    }
    token_ids[i] = keyed[i].second;
  }
  if (!keyed.empty()) offsets.push_back(static_cast<std::uint32_t>(keyed.size()));
  return WindowPartition(std::move(offsets), std::move(token_ids), std::move(window_keys));
}

WindowPartition radial_partition(std::span<const Vec3> positions, Vec3 origin,
                                 const RadialWindowConfig& cfg) {
  cfg.validate();
  std::vector<WindowKey> keys(positions.size());
  for (std::size_t i = 0; i < positions.size(); ++i) {
    keys[i] = radial_window_key(to_spherical(positions[i], origin), cfg);
  }
  return bucket(keys);
}

WindowPartition cubic_partition(std::span<const Vec3> positions, const CubicWindowConfig& cfg) {
  cfg.validate();
  std::vector<WindowKey> keys(positions.size());
  for (std::size_t i = 0; i < positions.size(); ++i) {
    keys[i] = cubic_window_index(positions[i], cfg);
  }
  return bucket(keys);
}

namespace {

double exact_reach(std::span<const std::uint32_t> ids, std::span<const Vec3> positions) {
  double best = 0.0;
  for (std::size_t a = 0; a < ids.size(); ++a) {
    const Vec3 pa = positions[ids[a]];
    for (std::size_t b = a + 1; b < ids.size(); ++b) {
      const Vec3 d = pa - positions[ids[b]];
      best = std::max(best, d.x * d.x + d.y * d.y + d.z * d.z);
    }
  }
  return std::sqrt(best);
}

double bounding_box_diagonal(std::span<const std::uint32_t> ids,
                             std::span<const Vec3> positions) {
  Vec3 lo = positions[ids.front()];
  Vec3 hi = lo;
  for (std::uint32_t id : ids) {
    const Vec3 p = positions[id];
    lo = {std::min(lo.x, p.x), std::min(lo.y, p.y), std::min(lo.z, p.z)};
    hi = {std::max(hi.x, p.x), std::max(hi.y, p.y), std::max(hi.z, p.z)};
  }
  return distance(lo, hi);
}

}  // namespace

PartitionStats partition_stats(const WindowPartition& partition, std::span<const Vec3> positions) {
  if (positions.size() != partition.token_count()) {
    throw ShapeError("partition_stats: " + std::to_string(positions.size()) +
                     " positions for a partition of " +
                     std::to_string(partition.token_count()) + " tokens");
  }
  PartitionStats stats;
  stats.window_count = partition.window_count();
  if (stats.window_count == 0) return stats;

  stats.occupancy_min = std::numeric_limits<std::size_t>::max();
  stats.reach.resize(stats.window_count);
  for (std::size_t w = 0; w < stats.window_count; ++w) {
    const auto ids = partition.window(w);
    const std::size_t n = ids.size();
    stats.occupancy_min = std::min(stats.occupancy_min, n);
    stats.occupancy_max = std::max(stats.occupancy_max, n);

    const auto bin = static_cast<std::size_t>(std::bit_width(n) - 1);
    if (stats.histogram.size() <= bin) {
      for (std::size_t b = stats.histogram.size(); b <= bin; ++b) {
        stats.histogram.push_back({std::size_t{1} << b, (std::size_t{2} << b) - 1, 0});
      }
    }
    ++stats.histogram[bin].count;

    if (n <= kExactReachLimit) {
      stats.reach[w] = exact_reach(ids, positions);
    } else {
      stats.reach[w] = bounding_box_diagonal(ids, positions);
      stats.reach_approximate = true;
    }
  }
  stats.occupancy_mean =
      static_cast<double>(partition.token_count()) / static_cast<double>(stats.window_count);

  std::vector<double> sorted = stats.reach;
  std::sort(sorted.begin(), sorted.end());
  stats.reach_max = sorted.back();
  // Nearest-rank percentile.
  const auto rank = static_cast<std::size_t>(std::ceil(0.99 * static_cast<double>(sorted.size())));
  stats.reach_p99 = sorted[std::max<std::size_t>(rank, 1) - 1];
  return stats;
}

nlohmann::json to_json(const PartitionStats& stats) {
  nlohmann::json histogram = nlohmann::json::array();
  for (const OccupancyBin& bin : stats.histogram) {
    histogram.push_back({{"lo", bin.lo}, {"hi", bin.hi}, {"count", bin.count}});
  }
  return {
      {"window_count", stats.window_count},
      {"occupancy",
       {{"min", stats.occupancy_min}, {"mean", stats.occupancy_mean}, {"max", stats.occupancy_max}}},
      {"histogram", histogram},
      {"reach",
       {{"max", stats.reach_max},
        {"p99", stats.reach_p99},
        {"approximate_flag", stats.reach_approximate}}},
  };
}

}  // namespace sphere_attn
