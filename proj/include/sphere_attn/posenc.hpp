#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sphere_attn/errors.hpp"
#include "sphere_attn/geometry.hpp"
#include "sphere_attn/numerics.hpp"
#include "sphere_attn/partition.hpp"
#include "sphere_attn/random.hpp"

namespace sphere_attn {

/// Discretization of relative positions into table indices.
///
/// The radial branch splits the relative radius exponentially (bin width
/// doubling from `a` outward) and the relative angles uniformly. The cubic
/// branch splits relative x, y, z uniformly. Every index is offset by L/2 and
/// clamped to [0, L - 1].
struct PosEncConfig {
  double a = 120.0 / 128.0;  // meters; first exponential bin is (0, a]
  int table_length = 16;     // L
  double interval_theta = 0.25;  // degrees
  double interval_phi = 0.25;    // degrees
  Vec3 interval_xyz{0.625, 0.625, 0.625};  // meters, cubic branch

  /// Defaults that make each table span one window: the last exponential
  /// bin ends at r_max, and the uniform intervals are window size / (L/2).
  static PosEncConfig for_windows(const RadialWindowConfig& radial,
                                  const CubicWindowConfig& cubic, int table_length = 16);

  void validate() const;
};

/// Table indices of one (query, key) pair.
struct PairIndex {
  std::uint16_t first = 0;   // r (radial) or x (cubic)
  std::uint16_t second = 0;  // theta or y
  std::uint16_t third = 0;   // phi or z
  bool operator==(const PairIndex&) const = default;
};

/// Relative spherical coordinates of a (query, key) pair.
struct RelativeCoord {
  double r = 0.0;
  double theta = 0.0;
  double phi = 0.0;
};

int exp_split_index(double r_ij, double a, int table_length);

inline int exp_split_index(double r_ij, const PosEncConfig& cfg) {
  return exp_split_index(r_ij, cfg.a, cfg.table_length);
}

int uniform_split_index(double value, double interval, int table_length);

/// Wraps an azimuth difference in degrees to (-180, 180].
double wrap_azimuth_delta(double degrees);

/// query - key, with the azimuth difference wrapped.
RelativeCoord relative_spherical(SphericalCoord query, SphericalCoord key);

PairIndex radial_pair_index(const RelativeCoord& rel, const PosEncConfig& cfg);

PairIndex cubic_pair_index(Vec3 query, Vec3 key, const PosEncConfig& cfg);

/// Three learnable embedding tables, each L x h x d, stored row-major.
/// For the radial branch the tables are (t_r, t_theta, t_phi); the cubic
/// branch reuses the same layout for (t_x, t_y, t_z).
template <typename T>
class PosTables {
 public:
  PosTables() = default;
  PosTables(int table_length, int heads, int head_dim)
      : table_length_(table_length), heads_(heads), head_dim_(head_dim) {
    if (table_length <= 0 || heads <= 0 || head_dim <= 0) {
      throw ConfigError("PosTables: dimensions must be positive");
    }
    for (auto& t : tables_) t.assign(entry_count(), T{0});
  }

  /// Uniform in [-0.02, 0.02].
  static PosTables random(int table_length, int heads, int head_dim, std::uint64_t seed) {
    PosTables t(table_length, heads, head_dim);
    Rng rng(seed);
    for (auto& table : t.tables_) {
      for (T& v : table) v = static_cast<T>(rng.uniform(-0.02, 0.02));
    }
    return t;
  }

  int table_length() const { return table_length_; }
  int heads() const { return heads_; }
  int head_dim() const { return head_dim_; }
  std::size_t entry_count() const {
    return static_cast<std::size_t>(table_length_) * static_cast<std::size_t>(heads_) *
           static_cast<std::size_t>(head_dim_);
  }

  std::span<T> table(int axis) { return tables_[static_cast<std::size_t>(axis)]; }
  std::span<const T> table(int axis) const { return tables_[static_cast<std::size_t>(axis)]; }

  /// The d-vector of table `axis` at (index, head).
  std::span<const T> entry(int axis, int index, int head) const {
    return {tables_[static_cast<std::size_t>(axis)].data() + offset(index, head),
            static_cast<std::size_t>(head_dim_)};
  }
  std::span<T> entry(int axis, int index, int head) {
    return {tables_[static_cast<std::size_t>(axis)].data() + offset(index, head),
            static_cast<std::size_t>(head_dim_)};
  }

  template <typename U>
  PosTables<U> cast() const {
    PosTables<U> out(table_length_, heads_, head_dim_);
    for (int axis = 0; axis < 3; ++axis) {
      auto src = table(axis);
      auto dst = out.table(axis);
      for (std::size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<U>(src[i]);
    }
    return out;
  }

  bool operator==(const PosTables&) const = default;

 private:
  std::size_t offset(int index, int head) const {
    return (static_cast<std::size_t>(index) * static_cast<std::size_t>(heads_) +
            static_cast<std::size_t>(head)) *
           static_cast<std::size_t>(head_dim_);
  }

  int table_length_ = 0;
  int heads_ = 0;
  int head_dim_ = 0;
  std::array<std::vector<T>, 3> tables_;
};

/// p = t_0[idx_0] + t_1[idx_1] + t_2[idx_2], returned as h x d row-major.
/// Throws IndexError for an index outside [0, L).
template <typename T>
std::vector<T> lookup_pair_encoding(const PosTables<T>& tables, int idx_first, int idx_second,
                                    int idx_third) {
  const int idx[3] = {idx_first, idx_second, idx_third};
  for (int axis = 0; axis < 3; ++axis) {
    if (idx[axis] < 0 || idx[axis] >= tables.table_length()) {
      throw IndexError("lookup_pair_encoding: index " + std::to_string(idx[axis]) +
                       " outside [0, " + std::to_string(tables.table_length()) + ")");
    }
  }
  const auto h = static_cast<std::size_t>(tables.heads());
  const auto d = static_cast<std::size_t>(tables.head_dim());
  std::vector<T> p(h * d, T{0});
  for (std::size_t head = 0; head < h; ++head) {
    for (int axis = 0; axis < 3; ++axis) {
      auto e = tables.entry(axis, idx[axis], static_cast<int>(head));
      for (std::size_t m = 0; m < d; ++m) p[head * d + m] += e[m];
    }
  }
  return p;
}

/// bias(k, i, j) = q[i, head k] . p_ij[k] + key[j, head k] . p_ij[k].
///
/// `query` and `key` are n x (h*d) with head k in columns [k*d, (k+1)*d);
/// `pair_encodings` is n x n x h x d row-major. Returns h x n x n.
template <typename T>
Tensor3<T> position_bias(const DenseMatrix<T>& query, const DenseMatrix<T>& key,
                         std::span<const T> pair_encodings, std::size_t heads) {
  const std::size_t n = query.rows();
  if (heads == 0 || query.cols() % heads != 0) {
    throw ShapeError("position_bias: channel count not divisible by head count");
  }
  const std::size_t d = query.cols() / heads;
  if (key.rows() != n || key.cols() != query.cols() ||
      pair_encodings.size() != n * n * heads * d) {
    throw ShapeError("position_bias: inconsistent shapes");
  }
  Tensor3<T> bias(heads, n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const T* p = pair_encodings.data() + (i * n + j) * heads * d;
      for (std::size_t k = 0; k < heads; ++k) {
        T acc{0};
        for (std::size_t m = 0; m < d; ++m) {
          acc += (query(i, k * d + m) + key(j, k * d + m)) * p[k * d + m];
        }
        bias(k, i, j) = acc;
      }
    }
  }
  return bias;
}

}  // namespace sphere_attn
