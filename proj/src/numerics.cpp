#include "sphere_attn/numerics.hpp"

#include <string>

namespace sphere_attn {

std::vector<double> finite_difference_gradient(const ScalarFunction& f,
                                               std::span<const double> x, double eps) {
  if (!(eps > 0.0)) throw ConfigError("finite_difference_gradient: eps must be positive");
  std::vector<double> probe(x.begin(), x.end());
  std::vector<double> grad(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = probe[i];
    probe[i] = saved + eps;
    const double up = f(probe);
    probe[i] = saved - eps;
    const double down = f(probe);
    probe[i] = saved;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NumericError("finite_difference_gradient: non-finite evaluation at coordinate " +
                         std::to_string(i));
    }
    grad[i] = (up - down) / (2.0 * eps);
  }
  return grad;
}

}  // namespace sphere_attn
