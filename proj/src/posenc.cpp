#include "sphere_attn/posenc.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace sphere_attn {

namespace {

/// max(0, ceil(log2(x))) for x > 0, computed exactly from the binary
/// exponent so that powers of two land on their own bin boundary.
std::int64_t ceil_log2_nonneg(double x) {
  if (!(x > 1.0)) return 0;
  if (!std::isfinite(x)) return std::numeric_limits<std::int32_t>::max();
  int exponent = 0;
  const double mantissa = std::frexp(x, &exponent);  // x = mantissa * 2^exponent
  return mantissa == 0.5 ? exponent - 1 : exponent;
}

int clamp_index(std::int64_t idx, int table_length) {
  return static_cast<int>(std::clamp<std::int64_t>(idx, 0, table_length - 1));
}

}  // namespace

PosEncConfig PosEncConfig::for_windows(const RadialWindowConfig& radial,
                                       const CubicWindowConfig& cubic, int table_length) {
  PosEncConfig cfg;
  cfg.table_length = table_length;
  const double half = static_cast<double>(table_length / 2);
  cfg.a = radial.r_max / std::ldexp(1.0, table_length / 2 - 1);
  cfg.interval_theta = radial.delta_theta / half;
  cfg.interval_phi = radial.delta_phi / half;
  cfg.interval_xyz = {cubic.side.x / half, cubic.side.y / half, cubic.side.z / half};
  return cfg;
}

void PosEncConfig::validate() const {
  if (table_length < 4 || table_length % 2 != 0) {
    throw ConfigError("position encoding: table length L must be even and >= 4, got " +
                      std::to_string(table_length));
  }
  if (table_length > std::numeric_limits<std::uint16_t>::max()) {
    throw ConfigError("position encoding: table length too large");
  }
  if (!(a > 0.0)) throw ConfigError("position encoding: a must be positive");
  if (!(interval_theta > 0.0 && interval_phi > 0.0)) {
    throw ConfigError("position encoding: angular intervals must be positive");
  }
  if (!(interval_xyz.x > 0.0 && interval_xyz.y > 0.0 && interval_xyz.z > 0.0)) {
    throw ConfigError("position encoding: cubic intervals must be positive");
  }
}

int exp_split_index(double r_ij, double a, int table_length) {
  std::int64_t idx = 0;
  if (r_ij < 0.0) {
    idx = -ceil_log2_nonneg(-r_ij / a) - 1;
  } else if (r_ij > 0.0) {
    idx = ceil_log2_nonneg(r_ij / a);
  }
  return clamp_index(idx + table_length / 2, table_length);
}

int uniform_split_index(double value, double interval, int table_length) {
  const double bin = std::floor(value / interval);
  // Saturate before the integer conversion so huge ratios cannot overflow.
  const double limit = static_cast<double>(table_length);
  const auto idx = static_cast<std::int64_t>(std::clamp(bin, -limit, limit));
  return clamp_index(idx + table_length / 2, table_length);
}

double wrap_azimuth_delta(double degrees) {
  double wrapped = std::fmod(degrees, 360.0);
  if (wrapped <= -180.0) wrapped += 360.0;
  if (wrapped > 180.0) wrapped -= 360.0;
  return wrapped;
}

RelativeCoord relative_spherical(SphericalCoord query, SphericalCoord key) {
  return {query.r - key.r, wrap_azimuth_delta(query.theta - key.theta), query.phi - key.phi};
}

PairIndex radial_pair_index(const RelativeCoord& rel, const PosEncConfig& cfg) {
  const int L = cfg.table_length;
  return {static_cast<std::uint16_t>(exp_split_index(rel.r, cfg.a, L)),
          static_cast<std::uint16_t>(uniform_split_index(rel.theta, cfg.interval_theta, L)),
          static_cast<std::uint16_t>(uniform_split_index(rel.phi, cfg.interval_phi, L))};
}

PairIndex cubic_pair_index(Vec3 query, Vec3 key, const PosEncConfig& cfg) {
  const int L = cfg.table_length;
  const Vec3 rel = query - key;
  return {static_cast<std::uint16_t>(uniform_split_index(rel.x, cfg.interval_xyz.x, L)),
          static_cast<std::uint16_t>(uniform_split_index(rel.y, cfg.interval_xyz.y, L)),
          static_cast<std::uint16_t>(uniform_split_index(rel.z, cfg.interval_xyz.z, L))};
}

}  // namespace sphere_attn
