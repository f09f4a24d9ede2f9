#include "sphere_attn/io.hpp"

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>

namespace sphere_attn {

namespace {

constexpr std::array<char, 4> kCloudMagic{'S', 'P', 'C', '1'};
constexpr std::array<char, 4> kWeightsMagic{'S', 'P', 'W', '1'};
// Sanity cap on header dimensions; larger values mean a corrupt file.
constexpr std::uint32_t kMaxDim = 1u << 16;

void put_u32(std::ostream& out, std::uint32_t v) {
  const char bytes[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                         static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  out.write(bytes, 4);
}

void put_f32(std::ostream& out, double v) {
  put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
}

std::uint32_t get_u32(std::istream& in, const char* what) {
  unsigned char bytes[4];
  if (!in.read(reinterpret_cast<char*>(bytes), 4)) {
    throw FormatError(std::string("truncated file while reading ") + what);
  }
  return static_cast<std::uint32_t>(bytes[0]) | (static_cast<std::uint32_t>(bytes[1]) << 8) |
         (static_cast<std::uint32_t>(bytes[2]) << 16) |
         (static_cast<std::uint32_t>(bytes[3]) << 24);
}

float get_f32(std::istream& in, const char* what) {
  return std::bit_cast<float>(get_u32(in, what));
}

void expect_magic(std::istream& in, const std::array<char, 4>& magic) {
  std::array<char, 4> got{};
  if (!in.read(got.data(), 4) || got != magic) {
    throw FormatError("bad magic: expected \"" + std::string(magic.data(), 4) + "\"");
  }
}

void check_stream(const std::ostream& out, const std::filesystem::path& path) {
  if (!out) throw FormatError("write failed: " + path.string());
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return in;
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot create " + path.string());
  return out;
}

void write_tables(std::ostream& out, const PosTables<float>& tables) {
  for (int axis = 0; axis < 3; ++axis) {
    for (float v : tables.table(axis)) put_f32(out, v);
  }
}

PosTables<float> read_tables(std::istream& in, int L, int h, int d) {
  PosTables<float> tables(L, h, d);
  for (int axis = 0; axis < 3; ++axis) {
    for (float& v : tables.table(axis)) v = get_f32(in, "position table");
  }
  return tables;
}

}  // namespace

void write_spc1(std::ostream& out, const PointCloud& cloud) {
  cloud.validate();
  out.write(kCloudMagic.data(), 4);
  put_u32(out, static_cast<std::uint32_t>(cloud.size()));
  put_u32(out, static_cast<std::uint32_t>(cloud.feature_dim));
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const Vec3 p = cloud.positions[i];
    put_f32(out, p.x);
    put_f32(out, p.y);
    put_f32(out, p.z);
    for (double f : cloud.feature(i)) put_f32(out, f);
  }
}

void write_spc1(const std::filesystem::path& path, const PointCloud& cloud) {
  std::ofstream out = open_out(path);
  write_spc1(out, cloud);
  out.flush();
  check_stream(out, path);
}

PointCloud read_spc1(std::istream& in) {
  expect_magic(in, kCloudMagic);
  const std::uint32_t n = get_u32(in, "point count");
  const std::uint32_t c = get_u32(in, "feature length");
  if (c > kMaxDim) throw FormatError("implausible feature length " + std::to_string(c));
  PointCloud cloud(c);
  std::vector<double> feature(c);
  for (std::uint32_t i = 0; i < n; ++i) {
    Vec3 p;
    p.x = get_f32(in, "point record");
    p.y = get_f32(in, "point record");
    p.z = get_f32(in, "point record");
    for (double& f : feature) f = get_f32(in, "point record");
    if (!p.finite()) throw FormatError("non-finite coordinate in point " + std::to_string(i));
    cloud.push_back(p, feature);
  }
  return cloud;
}

PointCloud read_spc1(const std::filesystem::path& path) {
  std::ifstream in = open_in(path);
  return read_spc1(in);
}

void write_spw1(std::ostream& out, const LayerWeights& weights) {
  weights.params.validate(false);
  const int h = weights.params.heads;
  const int d = weights.params.head_dim;
  const int L = weights.radial_tables.table_length();
  for (const PosTables<float>* t : {&weights.radial_tables, &weights.cubic_tables}) {
    if (t->heads() != h || t->head_dim() != d || t->table_length() != L) {
      throw ShapeError("write_spw1: tables must all be L x h x d");
    }
  }
  out.write(kWeightsMagic.data(), 4);
  put_u32(out, static_cast<std::uint32_t>(h));
  put_u32(out, static_cast<std::uint32_t>(d));
  put_u32(out, static_cast<std::uint32_t>(L));
  for (const DenseMatrix<float>* w : {&weights.params.w_q, &weights.params.w_k,
                                      &weights.params.w_v, &weights.params.w_proj}) {
    for (float v : w->data()) put_f32(out, v);
  }
  write_tables(out, weights.radial_tables);
  write_tables(out, weights.cubic_tables);
}

void write_spw1(const std::filesystem::path& path, const LayerWeights& weights) {
  std::ofstream out = open_out(path);
  write_spw1(out, weights);
  out.flush();
  check_stream(out, path);
}

LayerWeights read_spw1(std::istream& in) {
  expect_magic(in, kWeightsMagic);
  const std::uint32_t h = get_u32(in, "head count");
  const std::uint32_t d = get_u32(in, "head dim");
  const std::uint32_t L = get_u32(in, "table length");
  if (h == 0 || d == 0 || L == 0 || h > kMaxDim || d > kMaxDim || L > kMaxDim ||
      h * d > kMaxDim) {
    throw FormatError("implausible weight dimensions h=" + std::to_string(h) +
                      " d=" + std::to_string(d) + " L=" + std::to_string(L));
  }
  LayerWeights weights;
  weights.params = AttentionParams<float>(static_cast<int>(h), static_cast<int>(d));
  for (DenseMatrix<float>* w : {&weights.params.w_q, &weights.params.w_k, &weights.params.w_v,
                                &weights.params.w_proj}) {
    for (float& v : w->data()) v = get_f32(in, "weight matrix");
  }
  weights.radial_tables = read_tables(in, static_cast<int>(L), static_cast<int>(h),
                                      static_cast<int>(d));
  weights.cubic_tables = read_tables(in, static_cast<int>(L), static_cast<int>(h),
                                     static_cast<int>(d));
  return weights;
}

LayerWeights read_spw1(const std::filesystem::path& path) {
  std::ifstream in = open_in(path);
  return read_spw1(in);
}

}  // namespace sphere_attn
