#include "sphere_attn/geometry.hpp"

#include <algorithm>
#include <array>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <string>

#include "sphere_attn/errors.hpp"

namespace sphere_attn {

namespace {

constexpr double kRadToDeg = 180.0 / std::numbers::pi;
constexpr double kDegToRad = std::numbers::pi / 180.0;

}  // namespace

void SceneRange::validate() const {
  if (!(min.x < max.x && min.y < max.y && min.z < max.z)) {
    throw ConfigError("SceneRange: min must be < max componentwise");
  }
}

void PointCloud::push_back(Vec3 position, std::span<const double> feature) {
  if (feature.size() != feature_dim) {
    throw ShapeError("PointCloud::push_back: feature length " + std::to_string(feature.size()) +
                     " != " + std::to_string(feature_dim));
  }
  positions.push_back(position);
  features.insert(features.end(), feature.begin(), feature.end());
}

void PointCloud::validate() const {
  if (features.size() != positions.size() * feature_dim) {
    throw ShapeError("PointCloud: feature block does not match point count");
  }
  for (const Vec3& p : positions) {
    if (!p.finite()) throw NumericError("PointCloud: non-finite coordinate");
  }
}

SphericalCoord to_spherical(Vec3 p, Vec3 origin) {
  const Vec3 d = p - origin;
  const double r = d.norm();
  if (r == 0.0) return {0.0, 0.0, 0.0};
  double theta = std::atan2(d.y, d.x) * kRadToDeg;
  if (theta < 0.0) theta += 360.0;
  // -tiny + 360 rounds to 360.
  if (theta >= 360.0) theta = 0.0;
  const double phi = std::acos(std::clamp(d.z / r, -1.0, 1.0)) * kRadToDeg;
  return {r, theta, phi};
}

Vec3 from_spherical(SphericalCoord s, Vec3 origin) {
  const double t = s.theta * kDegToRad;
  const double f = s.phi * kDegToRad;
  const double planar = s.r * std::sin(f);
  return origin + Vec3{planar * std::cos(t), planar * std::sin(t), s.r * std::cos(f)};
}

PointCloud clip_range(const PointCloud& cloud, const SceneRange& range) {
  PointCloud out(cloud.feature_dim);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    if (range.contains(cloud.positions[i])) out.push_back(cloud.positions[i], cloud.feature(i));
  }
  return out;
}

PointCloud voxelize(const PointCloud& cloud, double voxel_size, const SceneRange& range) {
  if (!(voxel_size > 0.0)) throw ConfigError("voxelize: voxel_size must be positive");
  PointCloud out(cloud.feature_dim);
  if (cloud.empty()) return out;

  using VoxelKey = std::array<std::int64_t, 3>;
  auto cell = [&](double v, double lo) {
    return static_cast<std::int64_t>(std::floor((v - lo) / voxel_size));
  };
  std::vector<std::pair<VoxelKey, std::uint32_t>> keyed(cloud.size());
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const Vec3 p = cloud.positions[i];
    keyed[i] = {{cell(p.z, range.min.z), cell(p.y, range.min.y), cell(p.x, range.min.x)},
                static_cast<std::uint32_t>(i)};
  }
  std::sort(keyed.begin(), keyed.end());

  const std::size_t c = cloud.feature_dim;
  std::vector<double> feature_sum(c);
  for (std::size_t begin = 0; begin < keyed.size();) {
    std::size_t end = begin;
    Vec3 pos_sum;
    std::fill(feature_sum.begin(), feature_sum.end(), 0.0);
    while (end < keyed.size() && keyed[end].first == keyed[begin].first) {
      const std::uint32_t id = keyed[end].second;
      pos_sum = pos_sum + cloud.positions[id];
      auto f = cloud.feature(id);
      for (std::size_t k = 0; k < c; ++k) feature_sum[k] += f[k];
      ++end;
    }
    const double count = static_cast<double>(end - begin);
    for (double& v : feature_sum) v /= count;
    out.push_back({pos_sum.x / count, pos_sum.y / count, pos_sum.z / count}, feature_sum);
    begin = end;
  }
  return out;
}

}  // namespace sphere_attn
