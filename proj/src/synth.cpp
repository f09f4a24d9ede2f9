#include "sphere_attn/synth.hpp"

#include <cmath>
#include <string>
#include <vector>

#include "sphere_attn/random.hpp"

namespace sphere_attn {

void BeamSceneConfig::validate() const {
  if (!(r_min >= 0.0 && r_min < r_max)) throw ConfigError("scene: need 0 <= r_min < r_max");
  if (!(dropout_prob >= 0.0 && dropout_prob < 1.0)) {
    throw ConfigError("scene: dropout_prob must be in [0, 1)");
  }
  if (!(inclination_min >= 0.0 && inclination_min <= inclination_max &&
        inclination_max <= 180.0)) {
    throw ConfigError("scene: inclination span must lie in [0, 180]");
  }
}

PointCloud generate_scene(const BeamSceneConfig& cfg, Vec3 origin) {
  cfg.validate();
  Rng rng(cfg.seed);
  PointCloud cloud(cfg.feature_dim);
  cloud.positions.reserve(cfg.beam_count * cfg.azimuth_steps);
  cloud.features.reserve(cfg.beam_count * cfg.azimuth_steps * cfg.feature_dim);
  std::vector<double> feature(cfg.feature_dim);
  const double span = cfg.inclination_max - cfg.inclination_min;
  for (std::size_t beam = 0; beam < cfg.beam_count; ++beam) {
    const double phi = cfg.inclination_min +
                       span * (static_cast<double>(beam) + 0.5) / static_cast<double>(cfg.beam_count);
    for (std::size_t step = 0; step < cfg.azimuth_steps; ++step) {
      // Half-step offset keeps rays off 2-degree window seams.
      const double theta =
          360.0 * (static_cast<double>(step) + 0.5) / static_cast<double>(cfg.azimuth_steps);
      const bool dropped = rng.unit() < cfg.dropout_prob;
      const double r = rng.uniform(cfg.r_min, cfg.r_max);
      for (double& f : feature) f = rng.uniform(-1.0, 1.0);
      if (dropped) continue;
      cloud.push_back(from_spherical({r, theta, phi}, origin), feature);
    }
  }
  return cloud;
}

SphereFormerResult<double> brute_force_forward(const DenseMatrix<double>& features,
                                               std::span<const Vec3> positions,
                                               const SphereFormerConfig& config,
                                               const AttentionParams<double>& params,
                                               const PosTables<double>& radial_tables,
                                               const PosTables<double>& cubic_tables) {
  const std::size_t n = features.rows();
  if (n > kBruteForceTokenLimit) {
    throw SizeError("brute_force_forward: " + std::to_string(n) + " tokens exceeds the guard of " +
                    std::to_string(kBruteForceTokenLimit));
  }
  config.validate();
  params.validate(true);
  const auto h = static_cast<std::size_t>(params.heads);
  const auto d = static_cast<std::size_t>(params.head_dim);
  const std::size_t c = h * d;
  if (features.cols() != c || positions.size() != n) {
    throw ShapeError("brute_force_forward: inconsistent token / feature / position counts");
  }
  const PosEncConfig& pe = config.posenc;
  const int L = pe.table_length;
  for (const auto* t : {&radial_tables, &cubic_tables}) {
    if (t->table_length() != L || t->heads() != params.heads || t->head_dim() != params.head_dim) {
      throw ShapeError("brute_force_forward: tables must be L x h x d");
    }
  }
  const double scale = config.options.scale_logits ? 1.0 / std::sqrt(static_cast<double>(d)) : 1.0;

  std::vector<double> q(n * c, 0.0), k(n * c, 0.0), v(n * c, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t col = 0; col < c; ++col) {
      for (std::size_t a = 0; a < c; ++a) {
        q[i * c + col] += features(i, a) * params.w_q(a, col);
        k[i * c + col] += features(i, a) * params.w_k(a, col);
        v[i * c + col] += features(i, a) * params.w_v(a, col);
      }
    }
  }

  std::vector<SphericalCoord> sph(n);
  std::vector<WindowKey> radial_key(n), cubic_key(n);
  for (std::size_t i = 0; i < n; ++i) {
    sph[i] = to_spherical(positions[i], config.origin);
    radial_key[i] = radial_window_key(sph[i], config.radial);
    cubic_key[i] = cubic_window_index(positions[i], config.cubic);
  }

  DenseMatrix<double> pre(n, c);
  std::vector<double> logits(n);
  for (std::size_t head = 0; head < h; ++head) {
    const bool radial = head < h / 2;
    const PosTables<double>& tables = radial ? radial_tables : cubic_tables;
    for (std::size_t i = 0; i < n; ++i) {
      double peak = -INFINITY;
      for (std::size_t j = 0; j < n; ++j) {
        const bool member = radial ? radial_key[i] == radial_key[j] : cubic_key[i] == cubic_key[j];
        if (!member) continue;
        int idx[3];
        if (radial) {
          idx[0] = exp_split_index(sph[i].r - sph[j].r, pe.a, L);
          idx[1] = uniform_split_index(wrap_azimuth_delta(sph[i].theta - sph[j].theta),
                                       pe.interval_theta, L);
          idx[2] = uniform_split_index(sph[i].phi - sph[j].phi, pe.interval_phi, L);
        } else {
          idx[0] = uniform_split_index(positions[i].x - positions[j].x, pe.interval_xyz.x, L);
          idx[1] = uniform_split_index(positions[i].y - positions[j].y, pe.interval_xyz.y, L);
          idx[2] = uniform_split_index(positions[i].z - positions[j].z, pe.interval_xyz.z, L);
        }
        double qk = 0.0, qp = 0.0, kp = 0.0;
        for (std::size_t m = 0; m < d; ++m) {
          double p = 0.0;
          for (int axis = 0; axis < 3; ++axis) {
            p += tables.table(axis)[(static_cast<std::size_t>(idx[axis]) * h + head) * d + m];
          }
          const double qi = q[i * c + head * d + m];
          const double kj = k[j * c + head * d + m];
          qk += qi * kj;
          qp += qi * p;
          kp += kj * p;
        }
        logits[j] = scale * (qk + qp + kp);
        peak = std::max(peak, logits[j]);
      }
      double total = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const bool member = radial ? radial_key[i] == radial_key[j] : cubic_key[i] == cubic_key[j];
        logits[j] = member ? std::exp(logits[j] - peak) : 0.0;
        total += logits[j];
      }
      for (std::size_t m = 0; m < d; ++m) {
        double acc = 0.0;
        for (std::size_t j = 0; j < n; ++j) acc += logits[j] / total * v[j * c + head * d + m];
        pre(i, head * d + m) = acc;
      }
    }
  }

  SphereFormerResult<double> result;
  result.output = DenseMatrix<double>(n, c);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t col = 0; col < c; ++col) {
      double acc = 0.0;
      for (std::size_t a = 0; a < c; ++a) acc += pre(i, a) * params.w_proj(a, col);
      result.output(i, col) = acc;
    }
  }
  result.pre_projection = std::move(pre);
  return result;
}

}  // namespace sphere_attn
