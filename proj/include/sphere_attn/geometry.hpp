#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

namespace sphere_attn {

struct Vec3 {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;

  friend Vec3 operator+(Vec3 a, Vec3 b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
  friend Vec3 operator-(Vec3 a, Vec3 b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
  friend Vec3 operator*(double s, Vec3 a) { return {s * a.x, s * a.y, s * a.z}; }
  bool operator==(const Vec3&) const = default;

  double norm() const { return std::sqrt(x * x + y * y + z * z); }
  bool finite() const { return std::isfinite(x) && std::isfinite(y) && std::isfinite(z); }
};

inline double distance(Vec3 a, Vec3 b) { return (a - b).norm(); }

/// Spherical position relative to the sensor. Angles are in degrees:
/// theta is the azimuth in [0, 360), phi the inclination from +z in [0, 180].
struct SphericalCoord {
  double r = 0.0;
  double theta = 0.0;
  double phi = 0.0;
};

/// Axis-aligned half-open box [min, max).
struct SceneRange {
  Vec3 min;
  Vec3 max;

  bool contains(Vec3 p) const {
    return p.x >= min.x && p.x < max.x && p.y >= min.y && p.y < max.y && p.z >= min.z &&
           p.z < max.z;
  }
  /// Throws ConfigError unless min < max componentwise.
  void validate() const;
};

/// Point cloud stored as parallel arrays: one position per point and a
/// row-major N x feature_dim feature block.
struct PointCloud {
  std::vector<Vec3> positions;
  std::size_t feature_dim = 0;
  std::vector<double> features;

  PointCloud() = default;
  explicit PointCloud(std::size_t feature_dim_) : feature_dim(feature_dim_) {}

  std::size_t size() const { return positions.size(); }
  bool empty() const { return positions.empty(); }

  std::span<const double> feature(std::size_t i) const {
    return {features.data() + i * feature_dim, feature_dim};
  }
  std::span<double> feature(std::size_t i) {
    return {features.data() + i * feature_dim, feature_dim};
  }

  /// Appends a point; throws ShapeError if the feature length differs from
  /// feature_dim.
  void push_back(Vec3 position, std::span<const double> feature);

  /// Throws ShapeError / NumericError when the arrays disagree or a
  /// coordinate is non-finite.
  void validate() const;
};

/// Cartesian -> spherical with `origin` as the sensor. r == 0 maps to
/// theta = phi = 0.
SphericalCoord to_spherical(Vec3 p, Vec3 origin = {});

Vec3 from_spherical(SphericalCoord s, Vec3 origin = {});

/// Points with range.min <= p < range.max, in input order.
PointCloud clip_range(const PointCloud& cloud, const SceneRange& range);

/// Averages position and feature of the points sharing a voxel. Output is
/// ordered by voxel index (z, then y, then x), voxel indices counted from
/// range.min.
PointCloud voxelize(const PointCloud& cloud, double voxel_size, const SceneRange& range);

}  // namespace sphere_attn
