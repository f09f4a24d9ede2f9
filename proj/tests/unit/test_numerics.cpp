#include <doctest.h>

#include <cmath>
#include <numeric>

#include "sphere_attn/numerics.hpp"
#include "sphere_attn/random.hpp"

using namespace sphere_attn;

namespace {

DenseMatrix<double> random_matrix(Rng& rng, std::size_t r, std::size_t c, double lo = -1.0,
                                  double hi = 1.0) {
  DenseMatrix<double> m(r, c);
  for (double& v : m.data()) v = rng.uniform(lo, hi);
  return m;
}

// Textbook i-j-k product, kept apart from the library's loop order.
DenseMatrix<double> triple_loop(const DenseMatrix<double>& a, const DenseMatrix<double>& b) {
  DenseMatrix<double> out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) acc += a(i, k) * b(k, j);
      out(i, j) = acc;
    }
  return out;
}

DenseMatrix<double> transpose(const DenseMatrix<double>& m) {
  DenseMatrix<double> t(m.cols(), m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) t(j, i) = m(i, j);
  return t;
}

}  // namespace

TEST_CASE("matmul: identity and hand-checked product") {
  const auto m = DenseMatrix<double>::from_rows({{1, 2, 3}, {4, 5, 6}, {7, 8, 9}});
  CHECK(matmul(DenseMatrix<double>::identity(3), m) == m);

  const auto a = DenseMatrix<double>::from_rows({{1, 2}, {3, 4}});
  const auto b = DenseMatrix<double>::from_rows({{0}, {1}});
  CHECK(matmul(a, b) == DenseMatrix<double>::from_rows({{2}, {4}}));
}

TEST_CASE("matmul: matches triple loop on random 5x7 * 7x3") {
  Rng rng(11);
  const auto a = random_matrix(rng, 5, 7);
  const auto b = random_matrix(rng, 7, 3);
  const auto got = matmul(a, b);
  CHECK(got.rows() == 5);
  CHECK(got.cols() == 3);
  CHECK(max_abs_difference(got, triple_loop(a, b)) < 1e-12);
}

TEST_CASE("matmul: transposed variants agree with explicit transposes") {
  Rng rng(12);
  const auto a = random_matrix(rng, 6, 4);
  const auto b = random_matrix(rng, 6, 5);
  const auto c = random_matrix(rng, 3, 4);
  CHECK(max_abs_difference(matmul_at_b(a, b), triple_loop(transpose(a), b)) < 1e-12);
  CHECK(max_abs_difference(matmul_a_bt(a, c), triple_loop(a, transpose(c))) < 1e-12);
}

TEST_CASE("matmul: dimension mismatch is a shape error") {
  CHECK_THROWS_AS(matmul(DenseMatrix<double>(2, 3), DenseMatrix<double>(2, 3)), ShapeError);
  CHECK_THROWS_AS(DenseMatrix<double>(2, 2, std::vector<double>(3)), ShapeError);
}

TEST_CASE("matmul: associativity on random small matrices") {
  Rng rng(13);
  for (int trial = 0; trial < 50; ++trial) {
    const auto n = 1 + rng.below(6), k = 1 + rng.below(6), m = 1 + rng.below(6),
               p = 1 + rng.below(6);
    const auto a = random_matrix(rng, n, k);
    const auto b = random_matrix(rng, k, m);
    const auto c = random_matrix(rng, m, p);
    CHECK(max_abs_difference(matmul(matmul(a, b), c), matmul(a, matmul(b, c))) < 1e-10);
  }
}

TEST_CASE("row_softmax: trivial rows") {
  const auto single = row_softmax(DenseMatrix<double>::from_rows({{42.0}}));
  CHECK(single(0, 0) == doctest::Approx(1.0));

  const auto uniform = row_softmax(DenseMatrix<double>::from_rows({{3, 3, 3, 3}}));
  for (double v : uniform.data()) CHECK(v == doctest::Approx(0.25));

  const auto big = row_softmax(DenseMatrix<double>::from_rows({{1000.0, 1001.0}}));
  const double e = std::exp(1.0);
  CHECK(big(0, 0) == doctest::Approx(1.0 / (1.0 + e)).epsilon(1e-12));
  CHECK(big(0, 1) == doctest::Approx(e / (1.0 + e)).epsilon(1e-12));
  CHECK(big(0, 0) == doctest::Approx(0.2689).epsilon(1e-4));
}

TEST_CASE("row_softmax: rows sum to one and are shift invariant, including extreme logits") {
  Rng rng(14);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t rows = 1 + rng.below(4), cols = 1 + rng.below(9);
    const double spread = trial % 2 == 0 ? 10.0 : 1e4;
    auto m = random_matrix(rng, rows, cols, -spread, spread);
    const auto s = row_softmax(m);
    CHECK(all_finite(s));
    for (std::size_t i = 0; i < rows; ++i) {
      double sum = 0.0;
      for (double v : s.row(i)) {
        CHECK(v >= 0.0);
        sum += v;
      }
      CHECK(std::abs(sum - 1.0) < 1e-6);
    }
    auto shifted = m;
    for (std::size_t i = 0; i < rows; ++i) {
      const double c = rng.uniform(-50.0, 50.0);
      for (double& v : shifted.row(i)) v += c;
    }
    CHECK(max_abs_difference(row_softmax(shifted), s) < 1e-7);
  }
}

TEST_CASE("row_softmax: float path") {
  const auto s = row_softmax(DenseMatrix<float>::from_rows({{-1e4f, 0.0f, 1e4f}}));
  CHECK(all_finite(s));
  CHECK(s(0, 2) == doctest::Approx(1.0f));
}

TEST_CASE("finite_difference_gradient: analytic cases") {
  const std::vector<double> x{3.0};
  auto square = [](std::span<const double> v) { return v[0] * v[0]; };
  CHECK(std::abs(finite_difference_gradient(square, x, 1e-5)[0] - 6.0) < 1e-8);

  const std::vector<double> y{1.0, -2.0, 0.5};
  auto constant = [](std::span<const double>) { return 4.0; };
  for (double g : finite_difference_gradient(constant, y, 1e-5)) CHECK(g == 0.0);

  // Softmax rows sum to one identically, so the sum has zero gradient.
  auto softmax_sum = [](std::span<const double> v) {
    DenseMatrix<double> m(1, v.size(), std::vector<double>(v.begin(), v.end()));
    const auto s = row_softmax(m);
    return std::accumulate(s.data().begin(), s.data().end(), 0.0);
  };
  for (double g : finite_difference_gradient(softmax_sum, y, 1e-5)) CHECK(std::abs(g) < 1e-10);
}

TEST_CASE("finite_difference_gradient: error paths") {
  const std::vector<double> x{1.0};
  auto blowup = [](std::span<const double> v) { return v[0] > 1.0 ? INFINITY : 0.0; };
  CHECK_THROWS_AS(finite_difference_gradient(blowup, x, 1e-3), NumericError);
  CHECK_THROWS_AS(finite_difference_gradient([](std::span<const double>) { return 0.0; }, x, 0.0),
                  ConfigError);
}
