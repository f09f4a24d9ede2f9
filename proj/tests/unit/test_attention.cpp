#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <numeric>

#include "sphere_attn/attention.hpp"
#include "sphere_attn/random.hpp"
#include "sphere_attn/synth.hpp"

using namespace sphere_attn;

namespace {

DenseMatrix<double> random_matrix(Rng& rng, std::size_t r, std::size_t c) {
  DenseMatrix<double> m(r, c);
  for (double& v : m.data()) v = rng.uniform(-1.0, 1.0);
  return m;
}

PosTables<double> random_tables(Rng& rng, int L, int h, int d, double bound = 0.5) {
  PosTables<double> t(L, h, d);
  for (int axis = 0; axis < 3; ++axis)
    for (double& v : t.table(axis)) v = rng.uniform(-bound, bound);
  return t;
}

std::vector<RelativeCoord> relative_coords(const std::vector<SphericalCoord>& s) {
  std::vector<RelativeCoord> rel;
  for (const auto& a : s)
    for (const auto& b : s) rel.push_back(relative_spherical(a, b));
  return rel;
}

// Fully unrolled single-window reference in scalar loops.
DenseMatrix<double> window_reference(const DenseMatrix<double>& f, const AttentionParams<double>& p,
                                     const PosTables<double>& t,
                                     const std::vector<RelativeCoord>& rel,
                                     const PosEncConfig& pe) {
  const std::size_t n = f.rows(), h = static_cast<std::size_t>(p.heads),
                    d = static_cast<std::size_t>(p.head_dim), c = h * d;
  auto project = [&](const DenseMatrix<double>& w) {
    std::vector<double> out(n * c, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t col = 0; col < c; ++col)
        for (std::size_t a = 0; a < c; ++a) out[i * c + col] += f(i, a) * w(a, col);
    return out;
  };
  const auto q = project(p.w_q), k = project(p.w_k), v = project(p.w_v);
  std::vector<double> zhat(n * c, 0.0);
  for (std::size_t head = 0; head < h; ++head)
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> logit(n);
      for (std::size_t j = 0; j < n; ++j) {
        const auto& r = rel[i * n + j];
        const int idx[3] = {exp_split_index(r.r, pe.a, pe.table_length),
                            uniform_split_index(r.theta, pe.interval_theta, pe.table_length),
                            uniform_split_index(r.phi, pe.interval_phi, pe.table_length)};
        double acc = 0.0;
        for (std::size_t m = 0; m < d; ++m) {
          double pm = 0.0;
          for (int ax = 0; ax < 3; ++ax)
            pm += t.table(ax)[(static_cast<std::size_t>(idx[ax]) * h + head) * d + m];
          acc += q[i * c + head * d + m] * k[j * c + head * d + m] +
                 q[i * c + head * d + m] * pm + k[j * c + head * d + m] * pm;
        }
        logit[j] = acc;
      }
      const double mx = *std::max_element(logit.begin(), logit.end());
      double total = 0.0;
      for (double& l : logit) total += (l = std::exp(l - mx));
      for (std::size_t j = 0; j < n; ++j)
        for (std::size_t m = 0; m < d; ++m)
          zhat[i * c + head * d + m] += logit[j] / total * v[j * c + head * d + m];
    }
  DenseMatrix<double> z(n, c);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t col = 0; col < c; ++col)
      for (std::size_t a = 0; a < c; ++a) z(i, col) += zhat[i * c + a] * p.w_proj(a, col);
  return z;
}

struct Scene {
  DenseMatrix<double> features;
  std::vector<Vec3> positions;
  SphereFormerConfig config;
  AttentionParams<double> params;
  PosTables<double> radial;
  PosTables<double> cubic;
};

Scene small_scene(std::uint64_t seed, std::size_t beams = 4, std::size_t steps = 50) {
  BeamSceneConfig sc;
  sc.beam_count = beams;
  sc.azimuth_steps = steps;
  sc.r_min = 1.0;
  sc.r_max = 40.0;
  sc.feature_dim = 8;
  sc.seed = seed;
  const auto cloud = generate_scene(sc);
  Scene s;
  s.positions = cloud.positions;
  s.features = DenseMatrix<double>(cloud.size(), 8, cloud.features);
  s.config.radial = {20.0, 10.0, 120.0};
  s.config.cubic.side = {8.0, 8.0, 8.0};
  s.config.posenc = PosEncConfig::for_windows(s.config.radial, s.config.cubic, 16);
  s.params = AttentionParams<double>::random(2, 4, seed + 1);
  Rng rng(seed + 2);
  s.radial = random_tables(rng, 16, 2, 4);
  s.cubic = random_tables(rng, 16, 2, 4);
  return s;
}

SphereFormerResult<double> run(const Scene& s) {
  return sphereformer_forward(s.features, s.positions, s.config, s.params, s.radial, s.cubic);
}

}  // namespace

TEST_CASE("project_qkv: identity, zero and loop reference") {
  Rng rng(51);
  AttentionParams<double> p(2, 4);
  p.w_q = DenseMatrix<double>::identity(8);
  const auto f = random_matrix(rng, 4, 8);
  auto heads = project_qkv(f, p);
  for (std::size_t k = 0; k < 2; ++k)
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t m = 0; m < 4; ++m) CHECK(heads.q(k, i, m) == f(i, k * 4 + m));

  p = AttentionParams<double>::random(2, 4, 52);
  heads = project_qkv(DenseMatrix<double>(3, 8), p);
  for (const auto* t : {&heads.q, &heads.k, &heads.v})
    for (double v : t->data()) CHECK(v == 0.0);

  heads = project_qkv(f, p);
  for (std::size_t k = 0; k < 2; ++k)
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t m = 0; m < 4; ++m) {
        double q = 0.0, v = 0.0;
        for (std::size_t a = 0; a < 8; ++a) {
          q += f(i, a) * p.w_q(a, k * 4 + m);
          v += f(i, a) * p.w_v(a, k * 4 + m);
        }
        CHECK(std::abs(heads.q(k, i, m) - q) < 1e-12);
        CHECK(std::abs(heads.v(k, i, m) - v) < 1e-12);
      }
  CHECK_THROWS_AS(project_qkv(DenseMatrix<double>(3, 7), p), ShapeError);
}

TEST_CASE("window_attention_forward: single token reduces to f * W_v * W_proj") {
  Rng rng(53);
  const auto p = AttentionParams<double>::random(2, 4, 54);
  const auto t = random_tables(rng, 16, 2, 4);
  const auto f = random_matrix(rng, 1, 8);
  const std::vector<RelativeCoord> rel{{0, 0, 0}};
  const PosEncConfig pe;
  const auto res = window_attention_forward(f, p, t, rel, pe);
  const auto expected = matmul(matmul(f, p.w_v), p.w_proj);
  CHECK(max_abs_difference(res.output, expected) < 1e-12);
}

TEST_CASE("window_attention_forward: identical tokens with zero tables attend uniformly") {
  Rng rng(55);
  const auto p = AttentionParams<double>::random(2, 4, 56);
  const PosTables<double> zero(16, 2, 4);
  DenseMatrix<double> f(5, 8);
  const auto row = random_matrix(rng, 1, 8);
  for (std::size_t i = 0; i < 5; ++i) std::copy(row.data().begin(), row.data().end(), f.row(i).begin());
  std::vector<SphericalCoord> s;
  for (int i = 0; i < 5; ++i) s.push_back({1.0 + i, 10.0 + 0.3 * i, 90.0 - 0.2 * i});
  const auto res = window_attention_forward(f, p, zero, relative_coords(s), PosEncConfig{});
  for (double prob : res.trace.branches[0].windows[0].probs) CHECK(prob == doctest::Approx(0.2));
  for (std::size_t i = 1; i < 5; ++i)
    for (std::size_t c = 0; c < 8; ++c) CHECK(res.output(i, c) == doctest::Approx(res.output(0, c)));
}

TEST_CASE("window_attention_forward: matches the scalar reference") {
  Rng rng(57);
  for (int trial = 0; trial < 10; ++trial) {
    const auto p = AttentionParams<double>::random(2, 4, 100 + trial);
    const auto t = random_tables(rng, 16, 2, 4);
    const auto f = random_matrix(rng, 5, 8);
    std::vector<SphericalCoord> s;
    for (int i = 0; i < 5; ++i) s.push_back({rng.uniform(1, 60), rng.uniform(0, 360), rng.uniform(80, 82)});
    PosEncConfig pe;
    pe.a = 0.5;
    pe.interval_theta = 0.2;
    pe.interval_phi = 0.2;
    const auto rel = relative_coords(s);
    const auto res = window_attention_forward(f, p, t, rel, pe);
    CHECK(max_abs_difference(res.output, window_reference(f, p, t, rel, pe)) < 1e-10);
    for (std::size_t r = 0; r < 2 * 5; ++r) {
      const auto& probs = res.trace.branches[0].windows[0].probs;
      CHECK(std::abs(std::accumulate(probs.begin() + static_cast<long>(r * 5),
                                     probs.begin() + static_cast<long>(r * 5 + 5), 0.0) -
                     1.0) < 1e-6);
    }
  }
}

TEST_CASE("window_attention_forward: shape and value errors") {
  const auto p = AttentionParams<double>::random(2, 4, 58);
  const PosTables<double> t(16, 2, 4);
  const std::vector<RelativeCoord> rel(4);
  CHECK_THROWS_AS(window_attention_forward(DenseMatrix<double>(2, 7), p, t, rel, PosEncConfig{}),
                  ShapeError);
  CHECK_THROWS_AS(window_attention_forward(DenseMatrix<double>(3, 8), p, t, rel, PosEncConfig{}),
                  ShapeError);
  DenseMatrix<double> bad(2, 8);
  bad(0, 0) = NAN;
  CHECK_THROWS_AS(window_attention_forward(bad, p, t, rel, PosEncConfig{}), NumericError);
  CHECK_THROWS_AS(window_attention_forward(DenseMatrix<double>(2, 8), p, PosTables<double>(8, 2, 4),
                                           rel, PosEncConfig{}),
                  ShapeError);
}

TEST_CASE("window_attention_backward: zero upstream gradient and single token") {
  Rng rng(59);
  const auto p = AttentionParams<double>::random(2, 4, 60);
  const auto t = random_tables(rng, 16, 2, 4);
  const auto f = random_matrix(rng, 3, 8);
  std::vector<SphericalCoord> s{{1, 1, 90}, {2, 1.1, 90.1}, {5, 0.9, 89.7}};
  const auto res = window_attention_forward(f, p, t, relative_coords(s), PosEncConfig{});
  const auto g = window_attention_backward(res.trace, DenseMatrix<double>(3, 8));
  for (const auto* m : {&g.features, &g.w_q, &g.w_k, &g.w_v, &g.w_proj})
    for (double v : m->data()) CHECK(v == 0.0);
  for (int ax = 0; ax < 3; ++ax)
    for (double v : g.tables.table(ax)) CHECK(v == 0.0);

  const auto f1 = random_matrix(rng, 1, 8);
  const auto r1 = window_attention_forward(f1, p, t, std::vector<RelativeCoord>{{0, 0, 0}}, PosEncConfig{});
  const auto g1 = window_attention_backward(r1.trace, random_matrix(rng, 1, 8));
  for (const auto* m : {&g1.w_q, &g1.w_k})
    for (double v : m->data()) CHECK(v == 0.0);
  for (int ax = 0; ax < 3; ++ax)
    for (double v : g1.tables.table(ax)) CHECK(v == 0.0);
  double value_path = 0.0;
  for (double v : g1.w_v.data()) value_path += std::abs(v);
  CHECK(value_path > 0.0);

  CHECK_THROWS_AS(window_attention_backward(res.trace, DenseMatrix<double>(2, 8)), ShapeError);
}

TEST_CASE("window_attention_backward: matches central differences for loss = sum(z)") {
  Rng rng(61);
  for (bool scaled : {false, true}) {
    auto p = AttentionParams<double>::random(2, 4, 62);
    auto t = random_tables(rng, 16, 2, 4);
    auto f = random_matrix(rng, 4, 8);
    std::vector<SphericalCoord> s;
    for (int i = 0; i < 4; ++i) s.push_back({rng.uniform(1, 20), rng.uniform(0, 2), rng.uniform(89, 91)});
    const auto rel = relative_coords(s);
    PosEncConfig pe;
    pe.a = 0.5;
    AttentionOptions opts;
    opts.scale_logits = scaled;

    auto loss = [&] {
      const auto out = window_attention_forward(f, p, t, rel, pe, opts).output;
      return std::accumulate(out.data().begin(), out.data().end(), 0.0);
    };
    const auto res = window_attention_forward(f, p, t, rel, pe, opts);
    const auto g = window_attention_backward(res.trace, DenseMatrix<double>(4, 8, 1.0));

    auto check_block = [&](std::span<double> block, std::span<const double> analytic) {
      const std::vector<double> x(block.begin(), block.end());
      const auto numeric = finite_difference_gradient(
          [&](std::span<const double> v) {
            std::copy(v.begin(), v.end(), block.begin());
            return loss();
          },
          x, 1e-5);
      std::copy(x.begin(), x.end(), block.begin());
      for (std::size_t i = 0; i < x.size(); ++i) {
        const double denom = std::max({std::abs(analytic[i]), std::abs(numeric[i]), 1e-3});
        CHECK(std::abs(analytic[i] - numeric[i]) / denom < 1e-4);
      }
    };
    check_block(f.data(), g.features.data());
    check_block(p.w_q.data(), g.w_q.data());
    check_block(p.w_k.data(), g.w_k.data());
    check_block(p.w_v.data(), g.w_v.data());
    check_block(p.w_proj.data(), g.w_proj.data());
    for (int ax = 0; ax < 3; ++ax) check_block(t.table(ax), g.tables.table(ax));
  }
}

TEST_CASE("sphereformer_forward: isolated tokens reduce to f * W_v * W_proj") {
  Rng rng(63);
  std::vector<Vec3> pts{from_spherical({10, 5, 90}), from_spherical({10, 95, 90}),
                        from_spherical({10, 185, 90})};
  const auto f = random_matrix(rng, 3, 8);
  SphereFormerConfig cfg;
  const auto p = AttentionParams<double>::random(2, 4, 64);
  const auto t = random_tables(rng, 16, 2, 4);
  const auto res = sphereformer_forward(f, pts, cfg, p, t, t);
  CHECK(max_abs_difference(res.output, matmul(matmul(f, p.w_v), p.w_proj)) < 1e-12);
  CHECK(max_abs_difference(res.pre_projection, matmul(f, p.w_v)) < 1e-12);
}

TEST_CASE("sphereformer_forward: config errors come before data errors") {
  const auto p = AttentionParams<double>::random(3, 2, 65);
  const PosTables<double> t(16, 3, 2);
  DenseMatrix<double> f(2, 6);
  f(0, 0) = NAN;
  const std::vector<Vec3> pts{{1, 0, 0}, {2, 0, 0}};
  CHECK_THROWS_AS(sphereformer_forward(f, pts, SphereFormerConfig{}, p, t, t), ConfigError);

  const auto p2 = AttentionParams<double>::random(2, 4, 66);
  const PosTables<double> t2(16, 2, 4);
  CHECK_THROWS_AS(sphereformer_forward(DenseMatrix<double>(2, 8), std::vector<Vec3>{{1, 0, 0}},
                                       SphereFormerConfig{}, p2, t2, t2),
                  ShapeError);
}

TEST_CASE("sphereformer_forward: matches the brute-force oracle, f64 and f32") {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    auto s = small_scene(seed);
    REQUIRE(s.positions.size() == 200);
    s.config.options.scale_logits = seed == 2;
    const auto fast = run(s);
    const auto oracle = brute_force_forward(s.features, s.positions, s.config, s.params, s.radial, s.cubic);
    CHECK(max_abs_difference(fast.output, oracle.output) < 1e-9);
    CHECK(max_abs_difference(fast.pre_projection, oracle.pre_projection) < 1e-9);

    const auto f32 = sphereformer_forward(s.features.cast<float>(), s.positions, s.config,
                                          s.params.cast<float>(), s.radial.cast<float>(),
                                          s.cubic.cast<float>());
    // Compare against the oracle run on the same f32-rounded inputs.
    const auto rounded = brute_force_forward(
        s.features.cast<float>().cast<double>(), s.positions, s.config,
        s.params.cast<float>().cast<double>(), s.radial.cast<float>().cast<double>(),
        s.cubic.cast<float>().cast<double>());
    CHECK(max_abs_difference(f32.output.cast<double>(), rounded.output) < 1e-5);
  }
}

TEST_CASE("sphereformer_forward: probability rows sum to one in both branches") {
  auto s = small_scene(4);
  ForwardTrace<double> trace;
  sphereformer_forward(s.features, s.positions, s.config, s.params, s.radial, s.cubic, trace);
  REQUIRE(trace.branches.size() == 2);
  std::size_t rows = 0;
  for (const auto& branch : trace.branches)
    for (const auto& w : branch.windows) {
      const std::size_t n = w.tokens.size();
      for (std::size_t r = 0; r < w.probs.size() / n; ++r) {
        double sum = 0.0;
        for (std::size_t j = 0; j < n; ++j) sum += w.probs[r * n + j];
        CHECK(std::abs(sum - 1.0) < 1e-6);
        ++rows;
      }
    }
  CHECK(rows == 2 * s.positions.size());  // one head per branch, every token once per branch
}

TEST_CASE("sphereformer_forward: permuting tokens permutes outputs bit-exactly") {
  auto s = small_scene(5);
  const auto base = run(s);
  Rng rng(67);
  std::vector<std::size_t> perm(s.positions.size());
  std::iota(perm.begin(), perm.end(), 0);
  for (std::size_t i = perm.size() - 1; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
  Scene t = s;
  for (std::size_t i = 0; i < perm.size(); ++i) {
    t.positions[i] = s.positions[perm[i]];
    std::copy(s.features.row(perm[i]).begin(), s.features.row(perm[i]).end(), t.features.row(i).begin());
  }
  const auto permuted = run(t);
  for (std::size_t i = 0; i < perm.size(); ++i) {
    const auto a = permuted.output.row(i);
    const auto b = base.output.row(perm[i]);
    CHECK(std::equal(a.begin(), a.end(), b.begin()));
  }
}

TEST_CASE("sphereformer_forward: head-split locality") {
  auto s = small_scene(6);
  const auto base = run(s);
  const auto radial = radial_partition(s.positions, s.config.origin, s.config.radial);
  const auto cubic = cubic_partition(s.positions, s.config.cubic);
  const auto r_owner = radial.window_of_token();
  const auto c_owner = cubic.window_of_token();
  const std::size_t half = 4;  // h/2 * d

  // A token sharing a cubic window but not a radial one with token t.
  bool found = false;
  for (std::size_t t = 0; t < s.positions.size() && !found; ++t) {
    for (std::size_t u = 0; u < s.positions.size() && !found; ++u) {
      if (u == t || c_owner[u] != c_owner[t] || r_owner[u] == r_owner[t]) continue;
      found = true;
      Scene mod = s;
      for (double& v : mod.features.row(u)) v += 0.5;
      const auto out = run(mod);
      const auto a = out.pre_projection.row(t);
      const auto b = base.pre_projection.row(t);
      CHECK(std::equal(a.begin(), a.begin() + half, b.begin()));
      CHECK_FALSE(std::equal(a.begin() + half, a.end(), b.begin() + half));
    }
  }
  CHECK(found);

  // Everything outside t's radial window altered: first half bit-identical.
  const std::size_t t = 17;
  Scene mod = s;
  for (std::size_t u = 0; u < s.positions.size(); ++u) {
    if (r_owner[u] == r_owner[t]) continue;
    for (double& v : mod.features.row(u)) v = -v * 3.0 + 0.1;
  }
  auto out = run(mod);
  CHECK(std::equal(out.pre_projection.row(t).begin(), out.pre_projection.row(t).begin() + half,
                   base.pre_projection.row(t).begin()));

  mod = s;
  for (std::size_t u = 0; u < s.positions.size(); ++u) {
    if (c_owner[u] == c_owner[t]) continue;
    for (double& v : mod.features.row(u)) v = -v * 3.0 + 0.1;
  }
  out = run(mod);
  CHECK(std::equal(out.pre_projection.row(t).begin() + half, out.pre_projection.row(t).end(),
                   base.pre_projection.row(t).begin() + half));
}

TEST_CASE("attention probabilities ignore a per-row constant bias shift") {
  // With identical features every key is the same, so adding delta to every
  // entry of one table shifts row i of the bias by (q_i + k) . delta, a
  // constant across the row.
  Rng rng(68);
  const auto p = AttentionParams<double>::random(2, 4, 69);
  auto t = random_tables(rng, 16, 2, 4);
  DenseMatrix<double> f(6, 8);
  const auto row = random_matrix(rng, 1, 8);
  for (std::size_t i = 0; i < 6; ++i) std::copy(row.data().begin(), row.data().end(), f.row(i).begin());
  std::vector<SphericalCoord> s;
  for (int i = 0; i < 6; ++i) s.push_back({rng.uniform(1, 30), rng.uniform(0, 2), rng.uniform(89, 91)});
  const auto rel = relative_coords(s);
  PosEncConfig pe;
  pe.a = 0.5;
  pe.interval_theta = pe.interval_phi = 0.3;
  const auto before = window_attention_forward(f, p, t, rel, pe).trace.branches[0].windows[0].probs;
  for (int head = 0; head < 2; ++head) {
    const double delta = rng.uniform(-2, 2);
    for (int idx = 0; idx < 16; ++idx)
      for (double& v : t.entry(0, idx, head)) v += delta;
  }
  const auto after = window_attention_forward(f, p, t, rel, pe).trace.branches[0].windows[0].probs;
  double worst = 0.0;
  bool nonuniform = false;
  for (std::size_t i = 0; i < before.size(); ++i) {
    worst = std::max(worst, std::abs(before[i] - after[i]));
    nonuniform = nonuniform || std::abs(before[i] - 1.0 / 6.0) > 1e-3;
  }
  CHECK(worst < 1e-7);
  CHECK(nonuniform);
}

TEST_CASE("sphereformer_forward: worker count does not change the result") {
  auto s = small_scene(8, 8, 100);
  ::setenv("SPHERE_ATTN_THREADS", "1", 1);
  const auto one = run(s);
  ::setenv("SPHERE_ATTN_THREADS", "4", 1);
  const auto many = run(s);
  ::unsetenv("SPHERE_ATTN_THREADS");
  CHECK(one.output == many.output);
}
