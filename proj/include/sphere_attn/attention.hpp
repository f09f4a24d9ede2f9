#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "sphere_attn/geometry.hpp"
#include "sphere_attn/numerics.hpp"
#include "sphere_attn/partition.hpp"
#include "sphere_attn/posenc.hpp"

namespace sphere_attn {

/// Shared projection weights for all heads. Channels c = heads * head_dim;
/// head k owns columns [k*d, (k+1)*d) of the projected features.
template <typename T>
struct AttentionParams {
  int heads = 0;
  int head_dim = 0;
  DenseMatrix<T> w_q;
  DenseMatrix<T> w_k;
  DenseMatrix<T> w_v;
  DenseMatrix<T> w_proj;

  AttentionParams() = default;
  AttentionParams(int heads_, int head_dim_);  // zero weights

  /// Weights uniform in [-1/sqrt(c), 1/sqrt(c)].
  static AttentionParams random(int heads, int head_dim, std::uint64_t seed);

  int channels() const { return heads * head_dim; }

  /// Throws ConfigError / ShapeError / NumericError. `head_split` requires
  /// an even head count.
  void validate(bool head_split) const;

  template <typename U>
  AttentionParams<U> cast() const {
    AttentionParams<U> out;
    out.heads = heads;
    out.head_dim = head_dim;
    out.w_q = w_q.template cast<U>();
    out.w_k = w_k.template cast<U>();
    out.w_v = w_v.template cast<U>();
    out.w_proj = w_proj.template cast<U>();
    return out;
  }
};

struct AttentionOptions {
  /// Multiply the logits (including the position bias) by 1/sqrt(d). Off by
  /// default.
  bool scale_logits = false;
};

/// Everything the two-branch layer needs besides weights and tables.
struct SphereFormerConfig {
  RadialWindowConfig radial;
  CubicWindowConfig cubic;
  PosEncConfig posenc = PosEncConfig::for_windows(RadialWindowConfig{}, CubicWindowConfig{});
  Vec3 origin;
  AttentionOptions options;

  void validate() const;
};

/// q, k, v as h x n x d.
template <typename T>
struct QkvHeads {
  Tensor3<T> q;
  Tensor3<T> k;
  Tensor3<T> v;
};

template <typename T>
QkvHeads<T> project_qkv(const DenseMatrix<T>& features, const AttentionParams<T>& params);

/// One attention window processed by one branch.
template <typename T>
struct WindowBlock {
  std::vector<std::uint32_t> tokens;  // rows of the layer input, in processing order
  std::vector<PairIndex> pairs;       // n x n table indices
  std::vector<T> probs;               // (branch heads) x n x n softmax rows
};

template <typename T>
struct BranchTrace {
  int head_begin = 0;
  int head_end = 0;
  PosTables<T> tables;
  std::vector<WindowBlock<T>> windows;
};

/// Cached forward state consumed by the backward pass.
template <typename T>
struct ForwardTrace {
  AttentionParams<T> params;
  T logit_scale{1};
  DenseMatrix<T> features;
  DenseMatrix<T> query;
  DenseMatrix<T> key;
  DenseMatrix<T> value;
  DenseMatrix<T> pre_projection;
  std::vector<BranchTrace<T>> branches;
};

template <typename T>
struct WindowResult {
  DenseMatrix<T> output;
  ForwardTrace<T> trace;
};

template <typename T>
struct WindowGradients {
  DenseMatrix<T> features;
  DenseMatrix<T> w_q;
  DenseMatrix<T> w_k;
  DenseMatrix<T> w_v;
  DenseMatrix<T> w_proj;
  PosTables<T> tables;
};

/// All heads attend over one window. `rel_coords` is n x n row-major with
/// entry (i, j) = position of token i relative to token j; r is split
/// exponentially and the angles uniformly.
template <typename T>
WindowResult<T> window_attention_forward(const DenseMatrix<T>& features,
                                         const AttentionParams<T>& params,
                                         const PosTables<T>& tables,
                                         std::span<const RelativeCoord> rel_coords,
                                         const PosEncConfig& posenc,
                                         const AttentionOptions& options = {});

template <typename T>
WindowGradients<T> window_attention_backward(const ForwardTrace<T>& trace,
                                             const DenseMatrix<T>& grad_output);

template <typename T>
struct SphereFormerResult {
  DenseMatrix<T> pre_projection;  // concatenated head outputs
  DenseMatrix<T> output;          // pre_projection * w_proj
};

template <typename T>
struct SphereFormerGradients {
  DenseMatrix<T> features;
  DenseMatrix<T> w_q;
  DenseMatrix<T> w_k;
  DenseMatrix<T> w_v;
  DenseMatrix<T> w_proj;
  PosTables<T> radial_tables;
  PosTables<T> cubic_tables;
};

/// Head-split layer: heads [0, h/2) attend within radial windows, heads
/// [h/2, h) within cubic windows, then one joint output projection. Output
/// row i belongs to input token i.
template <typename T>
SphereFormerResult<T> sphereformer_forward(const DenseMatrix<T>& features,
                                           std::span<const Vec3> positions,
                                           const SphereFormerConfig& config,
                                           const AttentionParams<T>& params,
                                           const PosTables<T>& radial_tables,
                                           const PosTables<T>& cubic_tables);

/// As sphereformer_forward, also filling `trace` for the backward pass.
template <typename T>
SphereFormerResult<T> sphereformer_forward(const DenseMatrix<T>& features,
                                           std::span<const Vec3> positions,
                                           const SphereFormerConfig& config,
                                           const AttentionParams<T>& params,
                                           const PosTables<T>& radial_tables,
                                           const PosTables<T>& cubic_tables,
                                           ForwardTrace<T>& trace);

template <typename T>
SphereFormerGradients<T> sphereformer_backward(const ForwardTrace<T>& trace,
                                               const DenseMatrix<T>& grad_output);

}  // namespace sphere_attn
