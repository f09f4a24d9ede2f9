#include <doctest.h>

#include <cmath>

#include "sphere_attn/posenc.hpp"
#include "sphere_attn/random.hpp"

using namespace sphere_attn;

namespace {

// The three-case formula written out with std::log2 / std::ceil.
int exp_index_reference(double r, double a, int L) {
  int idx = 0;
  if (r < 0) {
    idx = -std::max(0, static_cast<int>(std::ceil(std::log2(-r / a)))) - 1;
  } else if (r > 0) {
    idx = std::max(0, static_cast<int>(std::ceil(std::log2(r / a))));
  }
  return std::clamp(idx + L / 2, 0, L - 1);
}

// Smallest positive r whose index is >= target, by bisection on the
// function itself.
double lower_boundary(int target, double a, int L) {
  double lo = 0.0, hi = a * std::ldexp(1.0, L);
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    (exp_split_index(mid, a, L) >= target ? hi : lo) = mid;
  }
  return hi;
}

}  // namespace

TEST_CASE("exp_split_index: forced values") {
  const double a = 1.5;
  CHECK(exp_split_index(0.0, a, 16) == 8);
  CHECK(exp_split_index(2 * a, a, 16) == 9);
  CHECK(exp_split_index(-a, a, 16) == 7);
  CHECK(exp_split_index(a, a, 16) == 8);
  CHECK(exp_split_index(0.5 * a, a, 16) == 8);
  CHECK(exp_split_index(-0.5 * a, a, 16) == 7);
  for (int k = 1; k <= 16 / 2 - 2; ++k) {
    const double edge = a * std::ldexp(1.0, k);
    CHECK(exp_split_index(edge, a, 16) == 8 + k);
    CHECK(exp_split_index(std::nextafter(edge, INFINITY), a, 16) == 8 + k + 1);
    CHECK(exp_split_index(-edge, a, 16) == 8 - k - 1);
    CHECK(exp_split_index(std::nextafter(-edge, -INFINITY), a, 16) == 8 - k - 2);
  }
}

TEST_CASE("exp_split_index: agrees with the log2 formula off the bin edges") {
  Rng rng(41);
  for (int i = 0; i < 100000; ++i) {
    const double a = rng.uniform(0.1, 3.0);
    const int L = 4 + 2 * static_cast<int>(rng.below(10));
    const double r = std::ldexp(rng.uniform(-1.0, 1.0), static_cast<int>(rng.below(20)) - 6);
    CHECK(exp_split_index(r, a, L) == exp_index_reference(r, a, L));
  }
}

TEST_CASE("exp_split_index: monotone, total and antisymmetric") {
  Rng rng(42);
  const double a = 0.9375;
  const int L = 16;
  std::vector<double> rs(200000);
  for (double& r : rs) r = rng.uniform(-1.0, 1.0) * std::pow(10.0, rng.uniform(-6.0, 6.0));
  std::sort(rs.begin(), rs.end());
  int prev = -1;
  for (double r : rs) {
    const int idx = exp_split_index(r, a, L);
    REQUIRE(idx >= 0);
    REQUIRE(idx < L);
    REQUIRE(idx >= prev);
    prev = idx;
  }
  CHECK(exp_split_index(1e300, a, L) == L - 1);
  CHECK(exp_split_index(-1e300, a, L) == 0);
  CHECK(exp_split_index(5e-324, a, L) == L / 2);

  // Positive bins are L/2 + k and negative ones L/2 - k - 1, so mirrored radii
  // sum to L - 1 anywhere inside the table span.
  for (int i = 0; i < 10000; ++i) {
    const double r = a * std::ldexp(1.0, -10) +
                     rng.unit() * (a * std::ldexp(1.0, L / 2 - 1) - a * std::ldexp(1.0, -10));
    CHECK(exp_split_index(r, a, L) + exp_split_index(-r, a, L) == L - 1);
  }
}

TEST_CASE("exp_split_index: bin width doubles with the index") {
  const double a = 0.75;
  const int L = 16;
  for (int k = 1; k <= L / 2 - 3; ++k) {
    const double lo_k = lower_boundary(L / 2 + k, a, L);
    const double hi_k = lower_boundary(L / 2 + k + 1, a, L);
    const double hi_k1 = lower_boundary(L / 2 + k + 2, a, L);
    CHECK((hi_k1 - hi_k) / (hi_k - lo_k) == doctest::Approx(2.0).epsilon(1e-9));
  }
}

TEST_CASE("uniform_split_index: floor plus offset, clamped") {
  CHECK(uniform_split_index(0.0, 0.5, 16) == 8);
  CHECK(uniform_split_index(0.0, 3.0, 16) == 8);
  CHECK(uniform_split_index(-0.1, 0.5, 16) == 7);
  CHECK(uniform_split_index(0.6, 0.5, 16) == 9);
  CHECK(uniform_split_index(1e9, 0.5, 16) == 15);
  CHECK(uniform_split_index(-1e9, 0.5, 16) == 0);
  CHECK(uniform_split_index(1e308, 1e-300, 16) == 15);
}

TEST_CASE("wrap_azimuth_delta: seam handling") {
  CHECK(wrap_azimuth_delta(359.0) == doctest::Approx(-1.0));
  CHECK(wrap_azimuth_delta(-359.0) == doctest::Approx(1.0));
  CHECK(wrap_azimuth_delta(180.0) == doctest::Approx(180.0));
  CHECK(wrap_azimuth_delta(-180.0) == doctest::Approx(180.0));
  CHECK(wrap_azimuth_delta(10.0) == doctest::Approx(10.0));
  const auto rel = relative_spherical({5, 0.5, 90}, {2, 359.5, 91});
  CHECK(rel.r == doctest::Approx(3.0));
  CHECK(rel.theta == doctest::Approx(1.0));
  CHECK(rel.phi == doctest::Approx(-1.0));
}

TEST_CASE("PosEncConfig::for_windows spans one window") {
  const auto cfg = PosEncConfig::for_windows(RadialWindowConfig{2.0, 2.0, 120.0},
                                             CubicWindowConfig{{5, 5, 5}}, 16);
  CHECK(cfg.a == doctest::Approx(120.0 / 128.0));
  CHECK(cfg.interval_theta == doctest::Approx(0.25));
  CHECK(cfg.interval_xyz.x == doctest::Approx(0.625));
  CHECK(exp_split_index(120.0, cfg) == 15);
  CHECK(exp_split_index(-120.0, cfg) == 0);
  CHECK(exp_split_index(std::nextafter(120.0, 200.0), cfg) == 15);
  CHECK_NOTHROW(cfg.validate());

  PosEncConfig odd = cfg;
  odd.table_length = 15;
  CHECK_THROWS_AS(odd.validate(), ConfigError);
  odd.table_length = 2;
  CHECK_THROWS_AS(odd.validate(), ConfigError);
}

TEST_CASE("lookup_pair_encoding: sums three table rows") {
  PosTables<double> zero(8, 2, 3);
  for (double v : lookup_pair_encoding(zero, 1, 2, 3)) CHECK(v == 0.0);

  PosTables<double> one_hot(8, 2, 3);
  one_hot.entry(0, 5, 0)[0] = 5.0;
  const auto p = lookup_pair_encoding(one_hot, 5, 0, 0);
  CHECK(p[0] == 5.0);
  CHECK(p[1] == 0.0);
  CHECK(lookup_pair_encoding(one_hot, 4, 0, 0)[0] == 0.0);

  const auto tables = PosTables<double>::random(8, 2, 3, 43);
  const auto q = lookup_pair_encoding(tables, 1, 6, 7);
  for (int head = 0; head < 2; ++head) {
    for (int m = 0; m < 3; ++m) {
      const double expected = tables.table(0)[(1 * 2 + head) * 3 + m] +
                              tables.table(1)[(6 * 2 + head) * 3 + m] +
                              tables.table(2)[(7 * 2 + head) * 3 + m];
      CHECK(q[static_cast<std::size_t>(head * 3 + m)] == expected);
    }
  }
  CHECK_THROWS_AS(lookup_pair_encoding(tables, 8, 0, 0), IndexError);
  CHECK_THROWS_AS(lookup_pair_encoding(tables, 0, -1, 0), IndexError);
}

TEST_CASE("PosTables::random: bounded and seed-deterministic") {
  const auto a = PosTables<float>::random(16, 4, 8, 1);
  const auto b = PosTables<float>::random(16, 4, 8, 1);
  CHECK(a == b);
  for (int axis = 0; axis < 3; ++axis)
    for (float v : a.table(axis)) CHECK(std::abs(v) <= 0.02f);
}

TEST_CASE("position_bias: trivial cases and loop oracle") {
  Rng rng(44);
  const std::size_t n = 3, h = 2, d = 2, c = h * d;
  DenseMatrix<double> q(n, c), k(n, c);
  for (double& v : q.data()) v = rng.uniform(-1, 1);
  for (double& v : k.data()) v = rng.uniform(-1, 1);

  std::vector<double> zero(n * n * h * d, 0.0);
  const auto zb = position_bias(q, k, std::span<const double>(zero), h);
  for (double v : zb.data()) CHECK(v == 0.0);

  std::vector<double> p(n * n * h * d);
  for (double& v : p) v = rng.uniform(-1, 1);
  const auto bias = position_bias(q, k, std::span<const double>(p), h);
  for (std::size_t head = 0; head < h; ++head)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        double qp = 0.0, kp = 0.0;
        for (std::size_t m = 0; m < d; ++m) {
          const double pm = p[((i * n + j) * h + head) * d + m];
          qp += q(i, head * d + m) * pm;
          kp += k(j, head * d + m) * pm;
        }
        CHECK(std::abs(bias(head, i, j) - (qp + kp)) < 1e-6);
      }

  // Single token.
  DenseMatrix<double> q1(1, c), k1(1, c);
  for (double& v : q1.data()) v = rng.uniform(-1, 1);
  for (double& v : k1.data()) v = rng.uniform(-1, 1);
  std::vector<double> p1(h * d);
  for (double& v : p1) v = rng.uniform(-1, 1);
  const auto b1 = position_bias(q1, k1, std::span<const double>(p1), h);
  for (std::size_t head = 0; head < h; ++head) {
    double expected = 0.0;
    for (std::size_t m = 0; m < d; ++m) expected += (q1(0, head * d + m) + k1(0, head * d + m)) * p1[head * d + m];
    CHECK(b1(head, 0, 0) == doctest::Approx(expected));
  }

  CHECK_THROWS_AS(position_bias(q, k, std::span<const double>(p1), h), ShapeError);
}
