#include <doctest.h>

#include <cmath>

#include "sphere_attn/gradcheck.hpp"

using namespace sphere_attn;

TEST_CASE("gradient_relative_error: definition") {
  const std::vector<double> zero(4, 0.0);
  CHECK(gradient_relative_error(zero, zero) == 0.0);
  const std::vector<double> a{1.0, -2.0, 0.0}, b{1.0, -2.0, 0.0};
  CHECK(gradient_relative_error(a, b) == 0.0);
  const std::vector<double> c{1.0, -2.2, 0.0};
  CHECK(gradient_relative_error(a, c) == doctest::Approx(0.2 / 2.2));
  CHECK(gradient_relative_error(zero, std::vector<double>{0, 0, 0, 1e-3}) == doctest::Approx(1.0));
  CHECK_THROWS_AS(gradient_relative_error(a, zero), ShapeError);
}

TEST_CASE("run_gradient_check: analytic gradients agree with central differences") {
  for (std::uint64_t seed = 1; seed <= 6; ++seed) {
    GradcheckDims dims;
    dims.heads = seed % 3 == 0 ? 4 : 2;
    dims.head_dim = dims.heads == 4 ? 2 : 4;
    dims.tokens = 4 + static_cast<int>(seed % 4);
    const auto report = run_gradient_check(seed, dims);
    CHECK(report.passed);
    REQUIRE(report.errors.size() == gradient_parameter_names().size());
    for (std::size_t i = 0; i < report.errors.size(); ++i) {
      CHECK(report.errors[i].first == gradient_parameter_names()[i]);
      CHECK(report.errors[i].second < 1e-4);
    }
  }
}

TEST_CASE("run_gradient_check: instance actually exercises both branches") {
  const auto inst = make_gradcheck_instance(3, GradcheckDims{});
  const auto radial = radial_partition(inst.positions, inst.config.origin, inst.config.radial);
  const auto cubic = cubic_partition(inst.positions, inst.config.cubic);
  std::size_t largest_r = 0, largest_c = 0;
  for (std::size_t w = 0; w < radial.window_count(); ++w) largest_r = std::max(largest_r, radial.window_size(w));
  for (std::size_t w = 0; w < cubic.window_count(); ++w) largest_c = std::max(largest_c, cubic.window_size(w));
  CHECK(largest_r >= 2);
  CHECK(largest_c >= 2);
}

TEST_CASE("run_gradient_check: a perturbed analytic gradient is reported") {
  for (const auto& name : gradient_parameter_names()) {
    GradcheckOptions opts;
    opts.inject_fault = name;
    const auto report = run_gradient_check(11, GradcheckDims{}, opts);
    CHECK_FALSE(report.passed);
    CHECK(report.worst_parameter == name);
    CHECK(report.worst_error > opts.tolerance);
  }
  GradcheckOptions bad;
  bad.inject_fault = "nope";
  CHECK_THROWS_AS(run_gradient_check(1, GradcheckDims{}, bad), ConfigError);
}

TEST_CASE("run_gradient_check: configuration errors") {
  GradcheckDims odd;
  odd.heads = 3;
  CHECK_THROWS_AS(run_gradient_check(1, odd), ConfigError);
  GradcheckDims short_table;
  short_table.table_length = 2;
  CHECK_THROWS_AS(run_gradient_check(1, short_table), ConfigError);
  GradcheckOptions eps;
  eps.eps = 0.0;
  CHECK_THROWS_AS(run_gradient_check(1, GradcheckDims{}, eps), ConfigError);
}

TEST_CASE("GradcheckReport::to_json") {
  const auto report = run_gradient_check(2, GradcheckDims{});
  const auto j = report.to_json();
  for (const char* key : {"max_relative_error", "tolerance", "passed", "worst_parameter", "worst_error"})
    CHECK(j.contains(key));
  CHECK(j["passed"].get<bool>() == report.passed);
  CHECK(j["max_relative_error"].size() == gradient_parameter_names().size());
}
