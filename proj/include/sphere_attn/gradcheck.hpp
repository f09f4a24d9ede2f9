#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "sphere_attn/attention.hpp"

namespace sphere_attn {

struct GradcheckDims {
  int tokens = 6;
  int heads = 2;
  int head_dim = 4;
  int table_length = 8;

  /// Throws ConfigError before any computation.
  void validate() const;
};

struct GradcheckOptions {
  double eps = 1e-5;
  double tolerance = 1e-4;
  /// Negative control: perturb the analytic gradient of this parameter
  /// (one of gradient_parameter_names()) before comparing.
  std::string inject_fault;
};

/// A seeded random problem for the head-split layer, small enough for
/// central differences over every parameter.
struct GradcheckInstance {
  DenseMatrix<double> features;
  std::vector<Vec3> positions;
  SphereFormerConfig config;
  AttentionParams<double> params;
  PosTables<double> radial_tables;
  PosTables<double> cubic_tables;
  DenseMatrix<double> loss_weights;  // loss = sum(loss_weights .* output)
};

GradcheckInstance make_gradcheck_instance(std::uint64_t seed, const GradcheckDims& dims);

struct GradcheckReport {
  /// (parameter name, max relative error), in gradient_parameter_names() order.
  std::vector<std::pair<std::string, double>> errors;
  double tolerance = 0.0;
  bool passed = false;
  std::string worst_parameter;
  double worst_error = 0.0;

  nlohmann::json to_json() const;
};

/// features, w_q, w_k, w_v, w_proj, radial.t_r, radial.t_theta, radial.t_phi,
/// cubic.t_x, cubic.t_y, cubic.t_z.
const std::vector<std::string>& gradient_parameter_names();

/// max_i |analytic_i - numeric_i| / max(|analytic|_inf, |numeric|_inf).
/// Zero when both vectors vanish.
double gradient_relative_error(std::span<const double> analytic, std::span<const double> numeric);

GradcheckReport run_gradient_check(const GradcheckInstance& instance,
                                   const GradcheckOptions& options = {});

GradcheckReport run_gradient_check(std::uint64_t seed, const GradcheckDims& dims,
                                   const GradcheckOptions& options = {});

}  // namespace sphere_attn
