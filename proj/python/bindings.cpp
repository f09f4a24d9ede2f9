#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <algorithm>
#include <string>
#include <vector>

#include "sphere_attn/attention.hpp"
#include "sphere_attn/errors.hpp"
#include "sphere_attn/gradcheck.hpp"
#include "sphere_attn/partition.hpp"
#include "sphere_attn/posenc.hpp"
#include "sphere_attn/synth.hpp"

namespace py = pybind11;
using namespace sphere_attn;

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

namespace {

DenseMatrix<double> to_matrix(const Array& a, const char* name) {
  if (a.ndim() != 2) throw ShapeError(std::string(name) + ": expected a 2-D array");
  const auto r = static_cast<std::size_t>(a.shape(0)), c = static_cast<std::size_t>(a.shape(1));
  return DenseMatrix<double>(r, c, std::vector<double>(a.data(), a.data() + r * c));
}

std::vector<Vec3> to_points(const Array& a) {
  if (a.ndim() != 2 || a.shape(1) != 3) throw ShapeError("points: expected shape (N, 3)");
  std::vector<Vec3> pts(static_cast<std::size_t>(a.shape(0)));
  auto v = a.unchecked<2>();
  for (py::ssize_t i = 0; i < a.shape(0); ++i) pts[static_cast<std::size_t>(i)] = {v(i, 0), v(i, 1), v(i, 2)};
  return pts;
}

Vec3 to_vec3(const std::vector<double>& v, const char* name) {
  if (v.size() != 3) throw ShapeError(std::string(name) + ": expected 3 values");
  return {v[0], v[1], v[2]};
}

Array from_matrix(const DenseMatrix<double>& m) {
  Array out({static_cast<py::ssize_t>(m.rows()), static_cast<py::ssize_t>(m.cols())});
  std::copy(m.data().begin(), m.data().end(), out.mutable_data());
  return out;
}

// (3, L, h, d) array <-> three L x h x d tables.
PosTables<double> to_tables(const Array& a) {
  if (a.ndim() != 4 || a.shape(0) != 3) throw ShapeError("tables: expected shape (3, L, h, d)");
  PosTables<double> t(static_cast<int>(a.shape(1)), static_cast<int>(a.shape(2)), static_cast<int>(a.shape(3)));
  const std::size_t per = t.entry_count();
  for (int axis = 0; axis < 3; ++axis) {
    std::copy(a.data() + axis * per, a.data() + (axis + 1) * per, t.table(axis).begin());
  }
  return t;
}

py::dict partition_dict(const WindowPartition& p) {
  py::array_t<std::uint32_t> offsets(static_cast<py::ssize_t>(p.offsets().size()));
  std::copy(p.offsets().begin(), p.offsets().end(), offsets.mutable_data());
  py::array_t<std::uint32_t> ids(static_cast<py::ssize_t>(p.token_ids().size()));
  std::copy(p.token_ids().begin(), p.token_ids().end(), ids.mutable_data());
  py::array_t<std::int64_t> keys({static_cast<py::ssize_t>(p.window_count()), py::ssize_t{3}});
  auto k = keys.mutable_unchecked<2>();
  for (std::size_t w = 0; w < p.window_count(); ++w)
    for (int j = 0; j < 3; ++j) k(static_cast<py::ssize_t>(w), j) = p.keys()[w][static_cast<std::size_t>(j)];
  py::dict d;
  d["offsets"] = offsets;
  d["token_ids"] = ids;
  d["keys"] = keys;
  d["fingerprint"] = p.fingerprint();
  return d;
}

WindowPartition make_partition(const std::vector<Vec3>& pts, const std::string& mode, double delta_theta,
                               double delta_phi, double r_max, const std::vector<double>& side,
                               const std::vector<double>& origin) {
  if (mode == "radial") return radial_partition(pts, to_vec3(origin, "origin"), {delta_theta, delta_phi, r_max});
  if (mode == "cubic") return cubic_partition(pts, CubicWindowConfig{to_vec3(side, "side")});
  throw ConfigError("mode must be 'radial' or 'cubic'");
}

struct LayerArgs {
  SphereFormerConfig config;
  AttentionParams<double> params;
  PosTables<double> radial;
  PosTables<double> cubic;
};

LayerArgs layer_args(const Array& w_q, const Array& w_k, const Array& w_v, const Array& w_proj,
                     const Array& radial_tables, const Array& cubic_tables, int heads, double delta_theta,
                     double delta_phi, double r_max, const std::vector<double>& side,
                     const std::vector<double>& origin, bool scale_logits) {
  LayerArgs a;
  a.radial = to_tables(radial_tables);
  a.cubic = to_tables(cubic_tables);
  a.params.heads = heads;
  a.params.head_dim = a.radial.head_dim();
  a.params.w_q = to_matrix(w_q, "w_q");
  a.params.w_k = to_matrix(w_k, "w_k");
  a.params.w_v = to_matrix(w_v, "w_v");
  a.params.w_proj = to_matrix(w_proj, "w_proj");
  a.config.radial = {delta_theta, delta_phi, r_max};
  a.config.cubic.side = to_vec3(side, "side");
  a.config.posenc = PosEncConfig::for_windows(a.config.radial, a.config.cubic, a.radial.table_length());
  a.config.origin = to_vec3(origin, "origin");
  a.config.options.scale_logits = scale_logits;
  return a;
}

#define LAYER_ARGS                                                                               \
  py::arg("features"), py::arg("points"), py::arg("w_q"), py::arg("w_k"), py::arg("w_v"),        \
      py::arg("w_proj"), py::arg("radial_tables"), py::arg("cubic_tables"), py::arg("heads"),    \
      py::arg("delta_theta") = 2.0, py::arg("delta_phi") = 2.0, py::arg("r_max") = 120.0,        \
      py::arg("side") = std::vector<double>{5, 5, 5}, py::arg("origin") = std::vector<double>{0, 0, 0}, \
      py::arg("scale_logits") = false

template <bool Oracle>
py::tuple layer_forward(const Array& features, const Array& points, const Array& w_q, const Array& w_k,
                        const Array& w_v, const Array& w_proj, const Array& radial_tables,
                        const Array& cubic_tables, int heads, double delta_theta, double delta_phi,
                        double r_max, const std::vector<double>& side, const std::vector<double>& origin,
                        bool scale_logits) {
  const auto a = layer_args(w_q, w_k, w_v, w_proj, radial_tables, cubic_tables, heads, delta_theta,
                            delta_phi, r_max, side, origin, scale_logits);
  const auto f = to_matrix(features, "features");
  const auto pts = to_points(points);
  SphereFormerResult<double> r;
  {
    py::gil_scoped_release release;
    r = Oracle ? brute_force_forward(f, pts, a.config, a.params, a.radial, a.cubic)
               : sphereformer_forward(f, pts, a.config, a.params, a.radial, a.cubic);
  }
  return py::make_tuple(from_matrix(r.output), from_matrix(r.pre_projection));
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Radial-window point cloud attention (f64 bindings)";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<IndexError>(m, "TableIndexError", PyExc_IndexError);
  py::register_exception<SizeError>(m, "SizeError", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

  m.def(
      "to_spherical",
      [](const Array& points, const std::vector<double>& origin) {
        const auto pts = to_points(points);
        const Vec3 o = to_vec3(origin, "origin");
        Array out({static_cast<py::ssize_t>(pts.size()), py::ssize_t{3}});
        auto v = out.mutable_unchecked<2>();
        for (std::size_t i = 0; i < pts.size(); ++i) {
          const auto s = to_spherical(pts[i], o);
          v(static_cast<py::ssize_t>(i), 0) = s.r;
          v(static_cast<py::ssize_t>(i), 1) = s.theta;
          v(static_cast<py::ssize_t>(i), 2) = s.phi;
        }
        return out;
      },
      py::arg("points"), py::arg("origin") = std::vector<double>{0, 0, 0},
      "(N, 3) xyz -> (N, 3) (r, theta, phi), angles in degrees.");

  m.def(
      "partition",
      [](const Array& points, const std::string& mode, double delta_theta, double delta_phi, double r_max,
         const std::vector<double>& side, const std::vector<double>& origin) {
        return partition_dict(make_partition(to_points(points), mode, delta_theta, delta_phi, r_max, side, origin));
      },
      py::arg("points"), py::arg("mode") = "radial", py::arg("delta_theta") = 2.0, py::arg("delta_phi") = 2.0,
      py::arg("r_max") = 120.0, py::arg("side") = std::vector<double>{5, 5, 5},
      py::arg("origin") = std::vector<double>{0, 0, 0});

  m.def(
      "partition_stats_json",
      [](const Array& points, const std::string& mode, double delta_theta, double delta_phi, double r_max,
         const std::vector<double>& side, const std::vector<double>& origin) {
        const auto pts = to_points(points);
        const auto p = make_partition(pts, mode, delta_theta, delta_phi, r_max, side, origin);
        return to_json(partition_stats(p, pts)).dump();
      },
      py::arg("points"), py::arg("mode") = "radial", py::arg("delta_theta") = 2.0, py::arg("delta_phi") = 2.0,
      py::arg("r_max") = 120.0, py::arg("side") = std::vector<double>{5, 5, 5},
      py::arg("origin") = std::vector<double>{0, 0, 0});

  m.def("exp_split_index", py::vectorize([](double r, double a, int L) { return exp_split_index(r, a, L); }),
        py::arg("r"), py::arg("a"), py::arg("table_length"));
  m.def("uniform_split_index",
        py::vectorize([](double v, double interval, int L) { return uniform_split_index(v, interval, L); }),
        py::arg("value"), py::arg("interval"), py::arg("table_length"));

  m.def(
      "generate_scene",
      [](std::size_t beam_count, std::size_t azimuth_steps, double r_min, double r_max, double dropout_prob,
         std::size_t feature_dim, std::uint64_t seed) {
        BeamSceneConfig cfg;
        cfg.beam_count = beam_count;
        cfg.azimuth_steps = azimuth_steps;
        cfg.r_min = r_min;
        cfg.r_max = r_max;
        cfg.dropout_prob = dropout_prob;
        cfg.feature_dim = feature_dim;
        cfg.seed = seed;
        const PointCloud c = generate_scene(cfg);
        Array pts({static_cast<py::ssize_t>(c.size()), py::ssize_t{3}});
        auto v = pts.mutable_unchecked<2>();
        for (std::size_t i = 0; i < c.size(); ++i) {
          v(static_cast<py::ssize_t>(i), 0) = c.positions[i].x;
          v(static_cast<py::ssize_t>(i), 1) = c.positions[i].y;
          v(static_cast<py::ssize_t>(i), 2) = c.positions[i].z;
        }
        return py::make_tuple(pts, from_matrix(DenseMatrix<double>(c.size(), feature_dim, c.features)));
      },
      py::arg("beam_count") = 32, py::arg("azimuth_steps") = 1024, py::arg("r_min") = 1.0,
      py::arg("r_max") = 100.0, py::arg("dropout_prob") = 0.0, py::arg("feature_dim") = 16,
      py::arg("seed") = 7, "Returns (points (N, 3), features (N, feature_dim)).");

  m.def("sphereformer_forward", &layer_forward<false>, LAYER_ARGS,
        "Head-split window attention. Tables are (3, L, h, d). Returns (output, pre_projection).");
  m.def("brute_force_forward", &layer_forward<true>, LAYER_ARGS,
        "Scalar N x N reference for sphereformer_forward (N <= 4096).");

  m.def(
      "gradient_check_json",
      [](std::uint64_t seed, int tokens, int heads, int head_dim, int table_length) {
        GradcheckDims dims{tokens, heads, head_dim, table_length};
        dims.validate();
        GradcheckReport report;
        {
          py::gil_scoped_release release;
          report = run_gradient_check(seed, dims);
        }
        return report.to_json().dump();
      },
      py::arg("seed") = 0, py::arg("tokens") = 6, py::arg("heads") = 2, py::arg("head_dim") = 4,
      py::arg("table_length") = 8);
}
