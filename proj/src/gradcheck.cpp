#include "sphere_attn/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "sphere_attn/random.hpp"

namespace sphere_attn {

void GradcheckDims::validate() const {
  if (tokens < 1) throw ConfigError("gradcheck: need at least one token");
  if (heads < 2 || heads % 2 != 0) {
    throw ConfigError("gradcheck: head split needs an even head count >= 2, got h=" +
                      std::to_string(heads));
  }
  if (head_dim < 1) throw ConfigError("gradcheck: head_dim must be positive");
  if (table_length < 4 || table_length % 2 != 0) {
    throw ConfigError("gradcheck: table length L must be even and >= 4");
  }
}

const std::vector<std::string>& gradient_parameter_names() {
  static const std::vector<std::string> names = {
      "features",       "w_q",         "w_k",       "w_v",       "w_proj",   "radial.t_r",
      "radial.t_theta", "radial.t_phi", "cubic.t_x", "cubic.t_y", "cubic.t_z"};
  return names;
}

GradcheckInstance make_gradcheck_instance(std::uint64_t seed, const GradcheckDims& dims) {
  dims.validate();
  Rng rng(seed ^ 0x5eedULL);
  GradcheckInstance inst;
  const auto n = static_cast<std::size_t>(dims.tokens);
  const auto c = static_cast<std::size_t>(dims.heads * dims.head_dim);

  // Tokens in one sector so that several share radial and cubic windows; a
  // few lie beyond r_max and land in overflow windows.
  for (std::size_t i = 0; i < n; ++i) {
    const SphericalCoord s{rng.uniform(2.0, 14.0), rng.uniform(25.0, 45.0),
                           rng.uniform(80.0, 100.0)};
    inst.positions.push_back(from_spherical(s));
  }
  inst.config.radial = {20.0, 20.0, 10.0};
  inst.config.cubic.side = {6.0, 6.0, 6.0};
  inst.config.posenc.table_length = dims.table_length;
  inst.config.posenc.a = 0.5;
  inst.config.posenc.interval_theta = 2.5;
  inst.config.posenc.interval_phi = 2.5;
  inst.config.posenc.interval_xyz = {1.5, 1.5, 1.5};
  inst.config.options.scale_logits = (seed % 2) == 1;

  inst.features = DenseMatrix<double>(n, c);
  for (double& v : inst.features.data()) v = rng.uniform(-1.0, 1.0);
  inst.params = AttentionParams<double>::random(dims.heads, dims.head_dim, rng.next());
  // Larger than the training initialization so the bias path carries weight.
  auto make_tables = [&] {
    PosTables<double> t(dims.table_length, dims.heads, dims.head_dim);
    for (int axis = 0; axis < 3; ++axis) {
      for (double& v : t.table(axis)) v = rng.uniform(-0.5, 0.5);
    }
    return t;
  };
  inst.radial_tables = make_tables();
  inst.cubic_tables = make_tables();
  inst.loss_weights = DenseMatrix<double>(n, c);
  for (double& v : inst.loss_weights.data()) v = rng.uniform(-1.0, 1.0);
  return inst;
}

double gradient_relative_error(std::span<const double> analytic, std::span<const double> numeric) {
  if (analytic.size() != numeric.size()) {
    throw ShapeError("gradient_relative_error: length mismatch");
  }
  double scale = 0.0;
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    scale = std::max({scale, std::abs(analytic[i]), std::abs(numeric[i])});
    worst = std::max(worst, std::abs(analytic[i] - numeric[i]));
  }
  return scale == 0.0 ? 0.0 : worst / scale;
}

nlohmann::json GradcheckReport::to_json() const {
  nlohmann::json per_param = nlohmann::json::object();
  for (const auto& [name, err] : errors) per_param[name] = err;
  return {{"max_relative_error", per_param},
          {"tolerance", tolerance},
          {"passed", passed},
          {"worst_parameter", worst_parameter},
          {"worst_error", worst_error}};
}

namespace {

std::span<double> parameter_block(GradcheckInstance& inst, std::size_t which) {
  switch (which) {
    case 0: return inst.features.data();
    case 1: return inst.params.w_q.data();
    case 2: return inst.params.w_k.data();
    case 3: return inst.params.w_v.data();
    case 4: return inst.params.w_proj.data();
    case 5: case 6: case 7: return inst.radial_tables.table(static_cast<int>(which - 5));
    default: return inst.cubic_tables.table(static_cast<int>(which - 8));
  }
}

std::span<const double> gradient_block(const SphereFormerGradients<double>& g, std::size_t which) {
  switch (which) {
    case 0: return g.features.data();
    case 1: return g.w_q.data();
    case 2: return g.w_k.data();
    case 3: return g.w_v.data();
    case 4: return g.w_proj.data();
    case 5: case 6: case 7: return g.radial_tables.table(static_cast<int>(which - 5));
    default: return g.cubic_tables.table(static_cast<int>(which - 8));
  }
}

double weighted_loss(const GradcheckInstance& inst) {
  const auto out = sphereformer_forward(inst.features, inst.positions, inst.config, inst.params,
                                        inst.radial_tables, inst.cubic_tables);
  double loss = 0.0;
  for (std::size_t i = 0; i < out.output.size(); ++i) {
    loss += inst.loss_weights.data()[i] * out.output.data()[i];
  }
  return loss;
}

}  // namespace

GradcheckReport run_gradient_check(const GradcheckInstance& instance,
                                   const GradcheckOptions& options) {
  const auto& names = gradient_parameter_names();
  if (!options.inject_fault.empty() &&
      std::find(names.begin(), names.end(), options.inject_fault) == names.end()) {
    throw ConfigError("gradcheck: unknown parameter '" + options.inject_fault + "'");
  }

  ForwardTrace<double> trace;
  sphereformer_forward(instance.features, instance.positions, instance.config, instance.params,
                       instance.radial_tables, instance.cubic_tables, trace);
  const SphereFormerGradients<double> grads = sphereformer_backward(trace, instance.loss_weights);

  GradcheckReport report;
  report.tolerance = options.tolerance;
  GradcheckInstance probe = instance;
  for (std::size_t which = 0; which < names.size(); ++which) {
    std::span<double> block = parameter_block(probe, which);
    const std::vector<double> x(block.begin(), block.end());
    auto loss = [&](std::span<const double> values) {
      std::copy(values.begin(), values.end(), block.begin());
      return weighted_loss(probe);
    };
    const std::vector<double> numeric = finite_difference_gradient(loss, x, options.eps);
    std::copy(x.begin(), x.end(), block.begin());

    const std::span<const double> analytic_view = gradient_block(grads, which);
    std::vector<double> analytic(analytic_view.begin(), analytic_view.end());
    if (names[which] == options.inject_fault && !analytic.empty()) {
      auto largest = std::max_element(analytic.begin(), analytic.end(),
                                      [](double a, double b) { return std::abs(a) < std::abs(b); });
      *largest = *largest * 1.1 + 1e-3;
    }
    const double err = gradient_relative_error(analytic, numeric);
    report.errors.emplace_back(names[which], err);
    if (report.worst_parameter.empty() || err > report.worst_error) {
      report.worst_parameter = names[which];
      report.worst_error = err;
    }
  }
  report.passed = report.worst_error < options.tolerance;
  return report;
}

GradcheckReport run_gradient_check(std::uint64_t seed, const GradcheckDims& dims,
                                   const GradcheckOptions& options) {
  return run_gradient_check(make_gradcheck_instance(seed, dims), options);
}

}  // namespace sphere_attn
