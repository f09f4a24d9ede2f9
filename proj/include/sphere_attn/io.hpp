#pragma once

#include <filesystem>
#include <iosfwd>

#include "sphere_attn/attention.hpp"
#include "sphere_attn/geometry.hpp"
#include "sphere_attn/posenc.hpp"

namespace sphere_attn {

// SPC1 point cloud, little-endian:
//   "SPC1" | u32 N | u32 c_in | N records of (x, y, z, f_0 .. f_{c_in-1}) as f32
//
// SPW1 weights, little-endian:
//   "SPW1" | u32 h | u32 d | u32 L | W_q | W_k | W_v | W_proj (c x c row-major f32)
//   | radial t_r, t_theta, t_phi | cubic t_x, t_y, t_z (L x h x d row-major f32)

void write_spc1(std::ostream& out, const PointCloud& cloud);
void write_spc1(const std::filesystem::path& path, const PointCloud& cloud);

/// Throws FormatError on bad magic or truncation.
PointCloud read_spc1(std::istream& in);
PointCloud read_spc1(const std::filesystem::path& path);

struct LayerWeights {
  AttentionParams<float> params;
  PosTables<float> radial_tables;
  PosTables<float> cubic_tables;

  int table_length() const { return radial_tables.table_length(); }
};

void write_spw1(std::ostream& out, const LayerWeights& weights);
void write_spw1(const std::filesystem::path& path, const LayerWeights& weights);

LayerWeights read_spw1(std::istream& in);
LayerWeights read_spw1(const std::filesystem::path& path);

}  // namespace sphere_attn
