#include "sphere_attn/attention.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "parallel.hpp"
#include "sphere_attn/random.hpp"

namespace sphere_attn {

template <typename T>
AttentionParams<T>::AttentionParams(int heads_, int head_dim_)
    : heads(heads_), head_dim(head_dim_) {
  if (heads <= 0 || head_dim <= 0) throw ConfigError("AttentionParams: h and d must be positive");
  const auto c = static_cast<std::size_t>(channels());
  w_q = DenseMatrix<T>(c, c);
  w_k = DenseMatrix<T>(c, c);
  w_v = DenseMatrix<T>(c, c);
  w_proj = DenseMatrix<T>(c, c);
}

template <typename T>
AttentionParams<T> AttentionParams<T>::random(int heads, int head_dim, std::uint64_t seed) {
  AttentionParams p(heads, head_dim);
  Rng rng(seed);
  const double bound = 1.0 / std::sqrt(static_cast<double>(p.channels()));
  for (DenseMatrix<T>* w : {&p.w_q, &p.w_k, &p.w_v, &p.w_proj}) {
    for (T& v : w->data()) v = static_cast<T>(rng.uniform(-bound, bound));
  }
  return p;
}

template <typename T>
void AttentionParams<T>::validate(bool head_split) const {
  if (heads <= 0 || head_dim <= 0) throw ConfigError("attention: h and d must be positive");
  if (head_split && heads % 2 != 0) {
    throw ConfigError("attention: head split needs an even head count, got h=" +
                      std::to_string(heads));
  }
  const auto c = static_cast<std::size_t>(channels());
  for (const DenseMatrix<T>* w : {&w_q, &w_k, &w_v, &w_proj}) {
    if (w->rows() != c || w->cols() != c) {
      throw ShapeError("attention: weights must be " + std::to_string(c) + "x" +
                       std::to_string(c) + " for c = h*d");
    }
    if (!all_finite(*w)) throw NumericError("attention: non-finite weight");
  }
}

void SphereFormerConfig::validate() const {
  radial.validate();
  cubic.validate();
  posenc.validate();
}

template <typename T>
QkvHeads<T> project_qkv(const DenseMatrix<T>& features, const AttentionParams<T>& params) {
  params.validate(false);
  if (features.cols() != static_cast<std::size_t>(params.channels())) {
    throw ShapeError("project_qkv: feature width " + std::to_string(features.cols()) +
                     " != c = " + std::to_string(params.channels()));
  }
  const auto h = static_cast<std::size_t>(params.heads);
  const auto d = static_cast<std::size_t>(params.head_dim);
  const std::size_t n = features.rows();
  auto reshape = [&](const DenseMatrix<T>& flat) {
    Tensor3<T> out(h, n, d);
    for (std::size_t k = 0; k < h; ++k) {
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t m = 0; m < d; ++m) out(k, i, m) = flat(i, k * d + m);
      }
    }
    return out;
  };
  return {reshape(matmul(features, params.w_q)), reshape(matmul(features, params.w_k)),
          reshape(matmul(features, params.w_v))};
}

namespace {

template <typename T>
struct Projected {
  const DenseMatrix<T>& query;
  const DenseMatrix<T>& key;
  const DenseMatrix<T>& value;
};

/// Softmax attention of heads [head_begin, head_end) over one window.
/// Writes the head columns of `pre_projection` for the window's rows and,
/// when `probs` is non-null, the probability rows.
template <typename T>
void attend_window(const Projected<T>& qkv, std::span<const std::uint32_t> tokens,
                   std::span<const PairIndex> pairs, const PosTables<T>& tables, int head_begin,
                   int head_end, T logit_scale, DenseMatrix<T>& pre_projection, T* probs) {
  const std::size_t n = tokens.size();
  const auto d = static_cast<std::size_t>(tables.head_dim());
  std::vector<T> row(n);
  for (int head = head_begin; head < head_end; ++head) {
    const std::size_t col = static_cast<std::size_t>(head) * d;
    for (std::size_t i = 0; i < n; ++i) {
      const T* q = qkv.query.row(tokens[i]).data() + col;
      for (std::size_t j = 0; j < n; ++j) {
        const T* k = qkv.key.row(tokens[j]).data() + col;
        const PairIndex& idx = pairs[i * n + j];
        const T* p0 = tables.entry(0, idx.first, head).data();
        const T* p1 = tables.entry(1, idx.second, head).data();
        const T* p2 = tables.entry(2, idx.third, head).data();
        T acc{0};
        for (std::size_t m = 0; m < d; ++m) {
          const T p = p0[m] + p1[m] + p2[m];
          acc += q[m] * k[m] + (q[m] + k[m]) * p;
        }
        row[j] = logit_scale * acc;
      }
      softmax_inplace(std::span<T>(row));
      if (probs != nullptr) {
        std::copy(row.begin(), row.end(),
                  probs + (static_cast<std::size_t>(head - head_begin) * n + i) * n);
      }
      T* z = pre_projection.row(tokens[i]).data() + col;
      for (std::size_t m = 0; m < d; ++m) z[m] = T{0};
      for (std::size_t j = 0; j < n; ++j) {
        const T* v = qkv.value.row(tokens[j]).data() + col;
        const T a = row[j];
        for (std::size_t m = 0; m < d; ++m) z[m] += a * v[m];
      }
    }
  }
}

/// Backward of attend_window for one cached window. Accumulates into the
/// q/k/v gradients and the table gradients.
template <typename T>
void attend_window_backward(const Projected<T>& qkv, const WindowBlock<T>& block,
                            const PosTables<T>& tables, int head_begin, int head_end,
                            T logit_scale, const DenseMatrix<T>& grad_pre,
                            DenseMatrix<T>& grad_query, DenseMatrix<T>& grad_key,
                            DenseMatrix<T>& grad_value, PosTables<T>& grad_tables) {
  const std::size_t n = block.tokens.size();
  const auto d = static_cast<std::size_t>(tables.head_dim());
  std::vector<T> grad_prob(n);
  std::vector<T> p(d);
  for (int head = head_begin; head < head_end; ++head) {
    const std::size_t col = static_cast<std::size_t>(head) * d;
    for (std::size_t i = 0; i < n; ++i) {
      const std::uint32_t ti = block.tokens[i];
      const T* prob = block.probs.data() + (static_cast<std::size_t>(head - head_begin) * n + i) * n;
      const T* dz = grad_pre.row(ti).data() + col;
      const T* q = qkv.query.row(ti).data() + col;
      T* dq = grad_query.row(ti).data() + col;

      T weighted{0};
      for (std::size_t j = 0; j < n; ++j) {
        const T* v = qkv.value.row(block.tokens[j]).data() + col;
        T acc{0};
        for (std::size_t m = 0; m < d; ++m) acc += dz[m] * v[m];
        grad_prob[j] = acc;
        weighted += prob[j] * acc;
      }
      for (std::size_t j = 0; j < n; ++j) {
        const std::uint32_t tj = block.tokens[j];
        const T a = prob[j];
        T* dv = grad_value.row(tj).data() + col;
        for (std::size_t m = 0; m < d; ++m) dv[m] += a * dz[m];

        const T g = logit_scale * a * (grad_prob[j] - weighted);
        if (g == T{0}) continue;
        const PairIndex& idx = block.pairs[i * n + j];
        const T* p0 = tables.entry(0, idx.first, head).data();
        const T* p1 = tables.entry(1, idx.second, head).data();
        const T* p2 = tables.entry(2, idx.third, head).data();
        for (std::size_t m = 0; m < d; ++m) p[m] = p0[m] + p1[m] + p2[m];

        const T* k = qkv.key.row(tj).data() + col;
        T* dk = grad_key.row(tj).data() + col;
        T* g0 = grad_tables.entry(0, idx.first, head).data();
        T* g1 = grad_tables.entry(1, idx.second, head).data();
        T* g2 = grad_tables.entry(2, idx.third, head).data();
        for (std::size_t m = 0; m < d; ++m) {
          dq[m] += g * (k[m] + p[m]);
          dk[m] += g * (q[m] + p[m]);
          const T dp = g * (q[m] + k[m]);
          g0[m] += dp;
          g1[m] += dp;
          g2[m] += dp;
        }
      }
    }
  }
}

template <typename T>
void check_tables(const PosTables<T>& tables, const AttentionParams<T>& params,
                  int table_length, const char* what) {
  if (tables.heads() != params.heads || tables.head_dim() != params.head_dim ||
      tables.table_length() != table_length) {
    throw ShapeError(std::string(what) + ": tables must be L x h x d = " +
                     std::to_string(table_length) + " x " + std::to_string(params.heads) + " x " +
                     std::to_string(params.head_dim));
  }
  for (int axis = 0; axis < 3; ++axis) {
    if (!all_finite(tables.table(axis))) {
      throw NumericError(std::string(what) + ": non-finite table entry");
    }
  }
}

template <typename T>
T logit_scale_for(const AttentionOptions& options, int head_dim) {
  return options.scale_logits ? static_cast<T>(1.0 / std::sqrt(static_cast<double>(head_dim)))
                              : T{1};
}

/// Orders a window's tokens by position, then feature values. The order of
/// floating-point reductions then depends only on the window's contents, so
/// permuting the input permutes the output bit-exactly.
template <typename T>
void canonical_order(std::vector<std::uint32_t>& tokens, std::span<const Vec3> positions,
                     const DenseMatrix<T>& features) {
  std::sort(tokens.begin(), tokens.end(), [&](std::uint32_t a, std::uint32_t b) {
    const Vec3 pa = positions[a];
    const Vec3 pb = positions[b];
    if (pa.x != pb.x) return pa.x < pb.x;
    if (pa.y != pb.y) return pa.y < pb.y;
    if (pa.z != pb.z) return pa.z < pb.z;
    const auto fa = features.row(a);
    const auto fb = features.row(b);
    const auto diff = std::mismatch(fa.begin(), fa.end(), fb.begin());
    if (diff.first != fa.end()) return *diff.first < *diff.second;
    return a < b;
  });
}

template <typename T>
struct LayerGradients {
  DenseMatrix<T> features;
  DenseMatrix<T> w_q;
  DenseMatrix<T> w_k;
  DenseMatrix<T> w_v;
  DenseMatrix<T> w_proj;
  std::vector<PosTables<T>> tables;
};

template <typename T>
LayerGradients<T> layer_backward(const ForwardTrace<T>& trace, const DenseMatrix<T>& grad_output) {
  const DenseMatrix<T>& pre = trace.pre_projection;
  if (grad_output.rows() != pre.rows() || grad_output.cols() != pre.cols()) {
    throw ShapeError("backward: gradient is " + std::to_string(grad_output.rows()) + "x" +
                     std::to_string(grad_output.cols()) + ", forward output was " +
                     std::to_string(pre.rows()) + "x" + std::to_string(pre.cols()));
  }
  const AttentionParams<T>& params = trace.params;
  LayerGradients<T> grads;
  grads.w_proj = matmul_at_b(pre, grad_output);
  const DenseMatrix<T> grad_pre = matmul_a_bt(grad_output, params.w_proj);

  DenseMatrix<T> grad_query(pre.rows(), pre.cols());
  DenseMatrix<T> grad_key(pre.rows(), pre.cols());
  DenseMatrix<T> grad_value(pre.rows(), pre.cols());
  const Projected<T> qkv{trace.query, trace.key, trace.value};
  for (const BranchTrace<T>& branch : trace.branches) {
    PosTables<T> grad_tables(branch.tables.table_length(), branch.tables.heads(),
                             branch.tables.head_dim());
    for (const WindowBlock<T>& block : branch.windows) {
      attend_window_backward(qkv, block, branch.tables, branch.head_begin, branch.head_end,
                             trace.logit_scale, grad_pre, grad_query, grad_key, grad_value,
                             grad_tables);
    }
    grads.tables.push_back(std::move(grad_tables));
  }

  grads.w_q = matmul_at_b(trace.features, grad_query);
  grads.w_k = matmul_at_b(trace.features, grad_key);
  grads.w_v = matmul_at_b(trace.features, grad_value);
  grads.features = matmul_a_bt(grad_query, params.w_q);
  const DenseMatrix<T> from_key = matmul_a_bt(grad_key, params.w_k);
  const DenseMatrix<T> from_value = matmul_a_bt(grad_value, params.w_v);
  for (std::size_t i = 0; i < grads.features.size(); ++i) {
    grads.features.data()[i] += from_key.data()[i] + from_value.data()[i];
  }
  return grads;
}

}  // namespace

template <typename T>
WindowResult<T> window_attention_forward(const DenseMatrix<T>& features,
                                         const AttentionParams<T>& params,
                                         const PosTables<T>& tables,
                                         std::span<const RelativeCoord> rel_coords,
                                         const PosEncConfig& posenc,
                                         const AttentionOptions& options) {
  params.validate(false);
  posenc.validate();
  check_tables(tables, params, posenc.table_length, "window_attention_forward");
  const std::size_t n = features.rows();
  if (n == 0) throw ShapeError("window_attention_forward: empty window");
  if (features.cols() != static_cast<std::size_t>(params.channels())) {
    throw ShapeError("window_attention_forward: feature width != c");
  }
  if (rel_coords.size() != n * n) {
    throw ShapeError("window_attention_forward: rel_coords must be n x n");
  }
  if (!all_finite(features)) throw NumericError("window_attention_forward: non-finite feature");

  WindowResult<T> result;
  ForwardTrace<T>& trace = result.trace;
  trace.params = params;
  trace.logit_scale = logit_scale_for<T>(options, params.head_dim);
  trace.features = features;
  trace.query = matmul(features, params.w_q);
  trace.key = matmul(features, params.w_k);
  trace.value = matmul(features, params.w_v);
  trace.pre_projection = DenseMatrix<T>(n, features.cols());

  BranchTrace<T> branch;
  branch.head_begin = 0;
  branch.head_end = params.heads;
  branch.tables = tables;
  WindowBlock<T> block;
  block.tokens.resize(n);
  std::iota(block.tokens.begin(), block.tokens.end(), 0u);
  block.pairs.resize(n * n);
  for (std::size_t ij = 0; ij < n * n; ++ij) {
    const RelativeCoord& rel = rel_coords[ij];
    if (!std::isfinite(rel.r) || !std::isfinite(rel.theta) || !std::isfinite(rel.phi)) {
      throw NumericError("window_attention_forward: non-finite relative coordinate");
    }
    block.pairs[ij] = radial_pair_index(rel, posenc);
  }
  block.probs.resize(static_cast<std::size_t>(params.heads) * n * n);
  attend_window(Projected<T>{trace.query, trace.key, trace.value}, block.tokens, block.pairs,
                tables, 0, params.heads, trace.logit_scale, trace.pre_projection,
                block.probs.data());
  branch.windows.push_back(std::move(block));
  trace.branches.push_back(std::move(branch));

  result.output = matmul(trace.pre_projection, params.w_proj);
  return result;
}

template <typename T>
WindowGradients<T> window_attention_backward(const ForwardTrace<T>& trace,
                                             const DenseMatrix<T>& grad_output) {
  if (trace.branches.size() != 1) {
    throw ShapeError("window_attention_backward: trace is not from window_attention_forward");
  }
  LayerGradients<T> g = layer_backward(trace, grad_output);
  return {std::move(g.features), std::move(g.w_q),    std::move(g.w_k),
          std::move(g.w_v),      std::move(g.w_proj), std::move(g.tables.front())};
}

namespace {

template <typename T>
SphereFormerResult<T> sphereformer_impl(const DenseMatrix<T>& features,
                                        std::span<const Vec3> positions,
                                        const SphereFormerConfig& config,
                                        const AttentionParams<T>& params,
                                        const PosTables<T>& radial_tables,
                                        const PosTables<T>& cubic_tables,
                                        ForwardTrace<T>* trace) {
  // Configuration first, data second.
  config.validate();
  params.validate(true);
  check_tables(radial_tables, params, config.posenc.table_length, "radial tables");
  check_tables(cubic_tables, params, config.posenc.table_length, "cubic tables");
  const std::size_t n = features.rows();
  if (features.cols() != static_cast<std::size_t>(params.channels())) {
    throw ShapeError("sphereformer_forward: feature width " + std::to_string(features.cols()) +
                     " != c = " + std::to_string(params.channels()));
  }
  if (positions.size() != n) {
    throw ShapeError("sphereformer_forward: " + std::to_string(positions.size()) +
                     " positions for " + std::to_string(n) + " tokens");
  }
  for (const Vec3& p : positions) {
    if (!p.finite()) throw NumericError("sphereformer_forward: non-finite position");
  }
  if (!all_finite(features)) throw NumericError("sphereformer_forward: non-finite feature");

  const T logit_scale = logit_scale_for<T>(config.options, params.head_dim);
  DenseMatrix<T> query = matmul(features, params.w_q);
  DenseMatrix<T> key = matmul(features, params.w_k);
  DenseMatrix<T> value = matmul(features, params.w_v);
  DenseMatrix<T> pre(n, features.cols());
  const Projected<T> qkv{query, key, value};
  const int half = params.heads / 2;

  std::vector<SphericalCoord> spherical(n);
  for (std::size_t i = 0; i < n; ++i) spherical[i] = to_spherical(positions[i], config.origin);

  const WindowPartition radial = radial_partition(positions, config.origin, config.radial);
  const WindowPartition cubic = cubic_partition(positions, config.cubic);

  auto run_branch = [&](const WindowPartition& partition, bool is_radial,
                        const PosTables<T>& tables, int head_begin, int head_end) {
    BranchTrace<T> branch;
    branch.head_begin = head_begin;
    branch.head_end = head_end;
    if (trace != nullptr) {
      branch.tables = tables;
      branch.windows.resize(partition.window_count());
    }
    detail::parallel_for(partition.window_count(), [&](std::size_t w) {
      WindowBlock<T> local;
      WindowBlock<T>& block = trace != nullptr ? branch.windows[w] : local;
      const auto ids = partition.window(w);
      block.tokens.assign(ids.begin(), ids.end());
      canonical_order(block.tokens, positions, features);
      const std::size_t m = block.tokens.size();
      block.pairs.resize(m * m);
      for (std::size_t i = 0; i < m; ++i) {
        const std::uint32_t ti = block.tokens[i];
        for (std::size_t j = 0; j < m; ++j) {
          const std::uint32_t tj = block.tokens[j];
          block.pairs[i * m + j] =
              is_radial
                  ? radial_pair_index(relative_spherical(spherical[ti], spherical[tj]),
                                      config.posenc)
                  : cubic_pair_index(positions[ti], positions[tj], config.posenc);
        }
      }
      T* probs = nullptr;
      if (trace != nullptr) {
        block.probs.resize(static_cast<std::size_t>(head_end - head_begin) * m * m);
        probs = block.probs.data();
      }
      attend_window(qkv, block.tokens, block.pairs, tables, head_begin, head_end, logit_scale,
                    pre, probs);
    });
    if (trace != nullptr) trace->branches.push_back(std::move(branch));
  };

  if (trace != nullptr) trace->branches.clear();
  run_branch(radial, true, radial_tables, 0, half);
  run_branch(cubic, false, cubic_tables, half, params.heads);

  SphereFormerResult<T> result;
  result.output = matmul(pre, params.w_proj);
  if (trace != nullptr) {
    trace->params = params;
    trace->logit_scale = logit_scale;
    trace->features = features;
    trace->query = std::move(query);
    trace->key = std::move(key);
    trace->value = std::move(value);
    trace->pre_projection = pre;
  }
  result.pre_projection = std::move(pre);
  return result;
}

}  // namespace

template <typename T>
SphereFormerResult<T> sphereformer_forward(const DenseMatrix<T>& features,
                                           std::span<const Vec3> positions,
                                           const SphereFormerConfig& config,
                                           const AttentionParams<T>& params,
                                           const PosTables<T>& radial_tables,
                                           const PosTables<T>& cubic_tables) {
  return sphereformer_impl(features, positions, config, params, radial_tables, cubic_tables,
                           static_cast<ForwardTrace<T>*>(nullptr));
}

template <typename T>
SphereFormerResult<T> sphereformer_forward(const DenseMatrix<T>& features,
                                           std::span<const Vec3> positions,
                                           const SphereFormerConfig& config,
                                           const AttentionParams<T>& params,
                                           const PosTables<T>& radial_tables,
                                           const PosTables<T>& cubic_tables,
                                           ForwardTrace<T>& trace) {
  return sphereformer_impl(features, positions, config, params, radial_tables, cubic_tables,
                           &trace);
}

template <typename T>
SphereFormerGradients<T> sphereformer_backward(const ForwardTrace<T>& trace,
                                               const DenseMatrix<T>& grad_output) {
  if (trace.branches.size() != 2) {
    throw ShapeError("sphereformer_backward: trace is not from sphereformer_forward");
  }
  LayerGradients<T> g = layer_backward(trace, grad_output);
  return {std::move(g.features), std::move(g.w_q),       std::move(g.w_k),
          std::move(g.w_v),      std::move(g.w_proj),    std::move(g.tables[0]),
          std::move(g.tables[1])};
}

#define SPHERE_ATTN_INSTANTIATE(T)                                                             \
  template struct AttentionParams<T>;                                                          \
  template QkvHeads<T> project_qkv(const DenseMatrix<T>&, const AttentionParams<T>&);          \
  template WindowResult<T> window_attention_forward(                                           \
      const DenseMatrix<T>&, const AttentionParams<T>&, const PosTables<T>&,                   \
      std::span<const RelativeCoord>, const PosEncConfig&, const AttentionOptions&);           \
  template WindowGradients<T> window_attention_backward(const ForwardTrace<T>&,                \
                                                        const DenseMatrix<T>&);                \
  template SphereFormerResult<T> sphereformer_forward(                                         \
      const DenseMatrix<T>&, std::span<const Vec3>, const SphereFormerConfig&,                 \
      const AttentionParams<T>&, const PosTables<T>&, const PosTables<T>&);                    \
  template SphereFormerResult<T> sphereformer_forward(                                         \
      const DenseMatrix<T>&, std::span<const Vec3>, const SphereFormerConfig&,                 \
      const AttentionParams<T>&, const PosTables<T>&, const PosTables<T>&, ForwardTrace<T>&);  \
  template SphereFormerGradients<T> sphereformer_backward(const ForwardTrace<T>&,              \
                                                          const DenseMatrix<T>&);

SPHERE_ATTN_INSTANTIATE(float)
SPHERE_ATTN_INSTANTIATE(double)

#undef SPHERE_ATTN_INSTANTIATE

}  // namespace sphere_attn
