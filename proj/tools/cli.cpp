#include "cli.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <ostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "sphere_attn/attention.hpp"
#include "sphere_attn/errors.hpp"
#include "sphere_attn/geometry.hpp"
#include "sphere_attn/gradcheck.hpp"
#include "sphere_attn/io.hpp"
#include "sphere_attn/partition.hpp"
#include "sphere_attn/synth.hpp"

namespace sphere_attn::cli {

namespace {

using nlohmann::json;

struct RunConfig {
  std::uint64_t seed = 7;
  RadialWindowConfig radial;  // 120 m, 2 deg, 2 deg
  CubicWindowConfig cubic;    // 5 m
  double voxel = 0.1;
  SceneRange range{{-75.2, -75.2, -4.0}, {75.2, 75.2, 4.0}};
  bool preprocess = false;
  int heads = 2;
  int head_dim = 8;
  int table_length = 16;
  bool scale_logits = false;
  Vec3 origin;
  int tokens = 6;  // gradcheck
  BeamSceneConfig scene;

  int channels() const { return heads * head_dim; }

  SphereFormerConfig layer() const {
    SphereFormerConfig c;
    c.radial = radial;
    c.cubic = cubic;
    c.posenc = PosEncConfig::for_windows(radial, cubic, table_length);
    c.origin = origin;
    c.options.scale_logits = scale_logits;
    return c;
  }

  void validate() const {
    if (heads < 2 || heads % 2 != 0) {
      throw ConfigError("heads must be even and >= 2 (half radial, half cubic), got " +
                        std::to_string(heads));
    }
    if (head_dim < 1) throw ConfigError("head_dim must be >= 1");
    if (!(voxel > 0.0)) throw ConfigError("voxel must be positive");
    if (tokens < 1) throw ConfigError("tokens must be >= 1");
    range.validate();
    scene.validate();
    layer().validate();
  }
};

Vec3 vec3_from(const json& j, const char* key) {
  if (!j.is_array() || j.size() != 3) throw ConfigError(std::string(key) + ": expected [x, y, z]");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

void apply_scene_json(const json& j, BeamSceneConfig& s) {
  if (!j.is_object()) throw ConfigError("scene: expected an object");
  for (const auto& [key, v] : j.items()) {
    if (key == "beam_count") s.beam_count = v.get<std::size_t>();
    else if (key == "azimuth_steps") s.azimuth_steps = v.get<std::size_t>();
    else if (key == "r_min") s.r_min = v.get<double>();
    else if (key == "r_max") s.r_max = v.get<double>();
    else if (key == "dropout_prob") s.dropout_prob = v.get<double>();
    else if (key == "feature_dim") s.feature_dim = v.get<std::size_t>();
    else if (key == "inclination_min") s.inclination_min = v.get<double>();
    else if (key == "inclination_max") s.inclination_max = v.get<double>();
    else throw ConfigError("config: unknown key scene." + key);
  }
}

void apply_config_file(const std::string& path, RunConfig& cfg) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config " + path + ": " + e.what());
  }
  if (!j.is_object()) throw ConfigError("config " + path + ": expected a JSON object");
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "seed") cfg.seed = v.get<std::uint64_t>();
      else if (key == "window_r") cfg.radial.r_max = v.get<double>();
      else if (key == "window_theta") cfg.radial.delta_theta = v.get<double>();
      else if (key == "window_phi") cfg.radial.delta_phi = v.get<double>();
      else if (key == "cubic_side") {
        cfg.cubic.side = v.is_array() ? vec3_from(v, "cubic_side")
                                      : Vec3{v.get<double>(), v.get<double>(), v.get<double>()};
      } else if (key == "voxel") cfg.voxel = v.get<double>();
      else if (key == "range") {
        if (!v.is_object() || !v.contains("min") || !v.contains("max") || v.size() != 2) {
          throw ConfigError("range: expected {\"min\": [..], \"max\": [..]}");
        }
        cfg.range = {vec3_from(v["min"], "range.min"), vec3_from(v["max"], "range.max")};
      } else if (key == "preprocess") cfg.preprocess = v.get<bool>();
      else if (key == "heads") cfg.heads = v.get<int>();
      else if (key == "head_dim") cfg.head_dim = v.get<int>();
      else if (key == "table_length") cfg.table_length = v.get<int>();
      else if (key == "scale_logits") cfg.scale_logits = v.get<bool>();
      else if (key == "origin") cfg.origin = vec3_from(v, "origin");
      else if (key == "tokens") cfg.tokens = v.get<int>();
      else if (key == "scene") apply_scene_json(v, cfg.scene);
      else throw ConfigError("config: unknown key " + key);
    }
  } catch (const json::exception& e) {
    throw ConfigError("config " + path + ": " + e.what());
  }
}

/// Flag storage; only options actually given on the command line are
/// applied on top of the config file.
struct Flags {
  std::string config;
  std::uint64_t seed = 0;
  double window_r = 0, window_theta = 0, window_phi = 0, cubic_side = 0, voxel = 0;
  int heads = 0, head_dim = 0, table_length = 0, tokens = 0;
  bool preprocess = false, scale_logits = false;
  std::size_t beams = 0, azimuth_steps = 0, feature_dim = 0;
  double dropout = 0, r_min = 0, r_max = 0;
  std::string mode = "radial";
  std::string out;
  std::string input;
  std::string weights;
  int repeat = 3;
  std::size_t synthetic = 0;
  bool zero = false;
  std::string inject_fault;
};

void add_window_flags(CLI::App* app, Flags& f) {
  app->add_option("--window-r", f.window_r, "Radial window r_max in meters");
  app->add_option("--window-theta", f.window_theta, "Radial window azimuth size in degrees");
  app->add_option("--window-phi", f.window_phi, "Radial window inclination size in degrees");
  app->add_option("--cubic-side", f.cubic_side, "Cubic window side in meters");
  app->add_option("--voxel", f.voxel, "Voxel size in meters (with --preprocess)");
  app->add_flag("--preprocess", f.preprocess, "Clip to the scene range and voxelize first");
}

void add_model_flags(CLI::App* app, Flags& f) {
  app->add_option("--heads", f.heads, "Attention heads (even)");
  app->add_option("--head-dim", f.head_dim, "Channels per head");
  app->add_option("--table-length", f.table_length, "Position table length L (even)");
  app->add_flag("--scale-logits", f.scale_logits, "Scale logits by 1/sqrt(head_dim)");
}

void add_scene_flags(CLI::App* app, Flags& f) {
  app->add_option("--beams", f.beams, "Synthetic scene beam count");
  app->add_option("--azimuth-steps", f.azimuth_steps, "Synthetic scene azimuth steps per beam");
  app->add_option("--feature-dim", f.feature_dim, "Synthetic feature length");
  app->add_option("--dropout", f.dropout, "Synthetic ray dropout probability");
  app->add_option("--r-min", f.r_min, "Synthetic minimum range");
  app->add_option("--r-max", f.r_max, "Synthetic maximum range");
}

void add_base_flags(CLI::App* app, Flags& f) {
  app->add_option("--seed", f.seed, "Random seed");
  app->add_option("--config", f.config, "JSON config file")->check(CLI::ExistingFile);
}

RunConfig resolve(const CLI::App& sub, const Flags& f) {
  RunConfig cfg;
  if (sub.count("--config") > 0) apply_config_file(f.config, cfg);
  auto given = [&](const char* name) {
    try {
      return sub.count(name) > 0;
    } catch (const CLI::OptionNotFound&) {
      return false;
    }
  };
  if (given("--seed")) cfg.seed = f.seed;
  if (given("--window-r")) cfg.radial.r_max = f.window_r;
  if (given("--window-theta")) cfg.radial.delta_theta = f.window_theta;
  if (given("--window-phi")) cfg.radial.delta_phi = f.window_phi;
  if (given("--cubic-side")) cfg.cubic.side = {f.cubic_side, f.cubic_side, f.cubic_side};
  if (given("--voxel")) cfg.voxel = f.voxel;
  if (given("--preprocess")) cfg.preprocess = f.preprocess;
  if (given("--heads")) cfg.heads = f.heads;
  if (given("--head-dim")) cfg.head_dim = f.head_dim;
  if (given("--table-length")) cfg.table_length = f.table_length;
  if (given("--scale-logits")) cfg.scale_logits = f.scale_logits;
  if (given("--tokens")) cfg.tokens = f.tokens;
  if (given("--beams")) cfg.scene.beam_count = f.beams;
  if (given("--azimuth-steps")) cfg.scene.azimuth_steps = f.azimuth_steps;
  if (given("--feature-dim")) cfg.scene.feature_dim = f.feature_dim;
  if (given("--dropout")) cfg.scene.dropout_prob = f.dropout;
  if (given("--r-min")) cfg.scene.r_min = f.r_min;
  if (given("--r-max")) cfg.scene.r_max = f.r_max;
  cfg.scene.seed = cfg.seed;
  cfg.validate();
  return cfg;
}

PointCloud load_tokens(const std::string& path, const RunConfig& cfg) {
  PointCloud cloud = read_spc1(std::filesystem::path(path));
  if (cfg.preprocess) cloud = voxelize(clip_range(cloud, cfg.range), cfg.voxel, cfg.range);
  return cloud;
}

std::string hex64(std::uint64_t v) {
  char buf[19];
  std::snprintf(buf, sizeof buf, "0x%016llx", static_cast<unsigned long long>(v));
  return buf;
}

void print(std::ostream& out, const json& j) { out << j.dump(2) << '\n'; }

int cmd_gen(const RunConfig& cfg, const Flags& f, std::ostream& out) {
  const PointCloud cloud = generate_scene(cfg.scene, cfg.origin);
  write_spc1(std::filesystem::path(f.out), cloud);
  print(out, {{"command", "gen"},
              {"points", cloud.size()},
              {"feature_dim", cloud.feature_dim},
              {"seed", cfg.seed},
              {"out", f.out}});
  return kExitOk;
}

int cmd_partition_stats(const RunConfig& cfg, const Flags& f, std::ostream& out) {
  const PointCloud cloud = load_tokens(f.input, cfg);
  const WindowPartition p = f.mode == "radial" ? radial_partition(cloud.positions, cfg.origin, cfg.radial)
                                               : cubic_partition(cloud.positions, cfg.cubic);
  json j = to_json(partition_stats(p, cloud.positions));
  j["command"] = "partition-stats";
  j["mode"] = f.mode;
  j["tokens"] = cloud.size();
  j["fingerprint"] = hex64(p.fingerprint());
  print(out, j);
  return kExitOk;
}

int cmd_forward(RunConfig cfg, const CLI::App& sub, const Flags& f, std::ostream& out) {
  const LayerWeights w = read_spw1(std::filesystem::path(f.weights));
  auto conflict = [&](const char* flag, int file_value, int cfg_value) {
    if (sub.count(flag) > 0 && file_value != cfg_value) {
      throw ConfigError(std::string(flag) + " = " + std::to_string(cfg_value) +
                        " disagrees with the weights file (" + std::to_string(file_value) + ")");
    }
  };
  conflict("--heads", w.params.heads, cfg.heads);
  conflict("--head-dim", w.params.head_dim, cfg.head_dim);
  conflict("--table-length", w.table_length(), cfg.table_length);
  cfg.heads = w.params.heads;
  cfg.head_dim = w.params.head_dim;
  cfg.table_length = w.table_length();
  cfg.validate();

  PointCloud cloud = load_tokens(f.input, cfg);
  if (cloud.feature_dim != static_cast<std::size_t>(cfg.channels())) {
    throw ConfigError("feature length " + std::to_string(cloud.feature_dim) +
                      " != heads * head_dim = " + std::to_string(cfg.channels()));
  }
  const DenseMatrix<float> features =
      DenseMatrix<double>(cloud.size(), cloud.feature_dim, cloud.features).cast<float>();
  const SphereFormerConfig layer = cfg.layer();
  const auto result = sphereformer_forward(features, cloud.positions, layer, w.params,
                                           w.radial_tables, w.cubic_tables);
  PointCloud written(static_cast<std::size_t>(cfg.channels()));
  written.positions = cloud.positions;
  const DenseMatrix<double> values = result.output.cast<double>();
  written.features.assign(values.data().begin(), values.data().end());
  write_spc1(std::filesystem::path(f.out), written);
  print(out, {{"command", "forward"},
              {"tokens", cloud.size()},
              {"channels", cfg.channels()},
              {"radial_windows", radial_partition(cloud.positions, cfg.origin, cfg.radial).window_count()},
              {"cubic_windows", cubic_partition(cloud.positions, cfg.cubic).window_count()},
              {"out", f.out}});
  return kExitOk;
}

int cmd_gradcheck(const RunConfig& cfg, const Flags& f, std::ostream& out, std::ostream& err) {
  GradcheckDims dims;
  dims.tokens = cfg.tokens;
  dims.heads = cfg.heads;
  dims.head_dim = cfg.head_dim;
  dims.table_length = cfg.table_length;
  GradcheckOptions opts;
  opts.inject_fault = f.inject_fault;
  const GradcheckReport report = run_gradient_check(cfg.seed, dims, opts);
  json j = report.to_json();
  j["command"] = "gradcheck";
  j["seed"] = cfg.seed;
  print(out, j);
  if (!report.passed) {
    err << "gradcheck: " << report.worst_parameter << " relative error " << report.worst_error
        << " exceeds tolerance " << report.tolerance << '\n';
    return kExitCheckFailed;
  }
  return kExitOk;
}

json timing(std::vector<double> seconds) {
  std::sort(seconds.begin(), seconds.end());
  const std::size_t n = seconds.size();
  const double median = n % 2 == 1 ? seconds[n / 2] : 0.5 * (seconds[n / 2 - 1] + seconds[n / 2]);
  const std::size_t p95_rank = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(n)));
  return {{"median_s", median}, {"p95_s", seconds[std::max<std::size_t>(p95_rank, 1) - 1]}};
}

int cmd_bench(RunConfig cfg, const CLI::App& sub, const Flags& f, std::ostream& out) {
  const bool synthetic = sub.count("--synthetic") > 0;
  if (synthetic == !f.input.empty()) throw ConfigError("bench: give exactly one of INPUT or --synthetic N");
  if (f.repeat < 1) throw ConfigError("bench: --repeat must be >= 1");
  if (synthetic && f.synthetic == 0) throw ConfigError("bench: --synthetic needs N >= 1");

  PointCloud cloud;
  if (synthetic) {
    cfg.scene.feature_dim = static_cast<std::size_t>(cfg.channels());
    cfg.scene.azimuth_steps = (f.synthetic + cfg.scene.beam_count - 1) / cfg.scene.beam_count;
    cfg.scene.dropout_prob = 0.0;
    cloud = generate_scene(cfg.scene, cfg.origin);
    cloud.positions.resize(f.synthetic);
    cloud.features.resize(f.synthetic * cloud.feature_dim);
  } else {
    cloud = load_tokens(f.input, cfg);
  }
  if (cloud.feature_dim != static_cast<std::size_t>(cfg.channels())) {
    throw ConfigError("feature length " + std::to_string(cloud.feature_dim) +
                      " != heads * head_dim = " + std::to_string(cfg.channels()));
  }

  using Clock = std::chrono::steady_clock;
  auto elapsed = [](Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
  };
  const SphereFormerConfig layer = cfg.layer();
  const auto params = AttentionParams<float>::random(cfg.heads, cfg.head_dim, cfg.seed);
  const auto radial_tables = PosTables<float>::random(cfg.table_length, cfg.heads, cfg.head_dim, cfg.seed + 1);
  const auto cubic_tables = PosTables<float>::random(cfg.table_length, cfg.heads, cfg.head_dim, cfg.seed + 2);
  const DenseMatrix<float> features =
      DenseMatrix<double>(cloud.size(), cloud.feature_dim, cloud.features).cast<float>();

  std::vector<double> radial_s, cubic_s, forward_s;
  std::uint64_t radial_hash = 0, cubic_hash = 0;
  std::size_t radial_windows = 0, cubic_windows = 0;
  for (int rep = 0; rep < f.repeat; ++rep) {
    auto t0 = Clock::now();
    const auto rp = radial_partition(cloud.positions, cfg.origin, cfg.radial);
    radial_s.push_back(elapsed(t0));
    t0 = Clock::now();
    const auto cp = cubic_partition(cloud.positions, cfg.cubic);
    cubic_s.push_back(elapsed(t0));
    t0 = Clock::now();
    const auto result = sphereformer_forward(features, cloud.positions, layer, params, radial_tables, cubic_tables);
    forward_s.push_back(elapsed(t0));
    if (!all_finite(result.output)) throw NumericError("bench: non-finite forward output");
    radial_hash = rp.fingerprint();
    cubic_hash = cp.fingerprint();
    radial_windows = rp.window_count();
    cubic_windows = cp.window_count();
  }
  print(out, {{"command", "bench"},
              {"tokens", cloud.size()},
              {"repeat", f.repeat},
              {"partition",
               {{"radial", timing(radial_s)}, {"cubic", timing(cubic_s)}}},
              {"forward", timing(forward_s)},
              {"windows", {{"radial", radial_windows}, {"cubic", cubic_windows}}},
              {"partition_hash", {{"radial", hex64(radial_hash)}, {"cubic", hex64(cubic_hash)}}}});
  return kExitOk;
}

int cmd_init_weights(const RunConfig& cfg, const Flags& f, std::ostream& out) {
  LayerWeights w;
  if (f.zero) {
    w.params = AttentionParams<float>(cfg.heads, cfg.head_dim);
    w.radial_tables = PosTables<float>(cfg.table_length, cfg.heads, cfg.head_dim);
    w.cubic_tables = PosTables<float>(cfg.table_length, cfg.heads, cfg.head_dim);
  } else {
    w.params = AttentionParams<float>::random(cfg.heads, cfg.head_dim, cfg.seed);
    w.radial_tables = PosTables<float>::random(cfg.table_length, cfg.heads, cfg.head_dim, cfg.seed + 1);
    w.cubic_tables = PosTables<float>::random(cfg.table_length, cfg.heads, cfg.head_dim, cfg.seed + 2);
  }
  write_spw1(std::filesystem::path(f.out), w);
  print(out, {{"command", "init-weights"},
              {"heads", cfg.heads},
              {"head_dim", cfg.head_dim},
              {"table_length", cfg.table_length},
              {"zero", f.zero},
              {"out", f.out}});
  return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Radial-window point cloud attention toolkit", "sphere_attn"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Help for every subcommand");
  Flags f;

  auto* gen = app.add_subcommand("gen", "Write a synthetic LiDAR-like scene as SPC1");
  add_base_flags(gen, f);
  add_scene_flags(gen, f);
  gen->add_option("--out", f.out, "Output SPC1 path")->required();

  auto* stats = app.add_subcommand("partition-stats", "Window occupancy and reach statistics");
  add_base_flags(stats, f);
  add_window_flags(stats, f);
  stats->add_option("input", f.input, "SPC1 point cloud")->required();
  stats->add_option("--mode", f.mode, "Window shape")->check(CLI::IsMember({"radial", "cubic"}));

  auto* forward = app.add_subcommand("forward", "Run the head-split attention layer on a cloud");
  add_base_flags(forward, f);
  add_window_flags(forward, f);
  add_model_flags(forward, f);
  forward->add_option("input", f.input, "SPC1 point cloud")->required();
  forward->add_option("--weights", f.weights, "SPW1 weights")->required();
  forward->add_option("--out", f.out, "Output SPC1 path")->required();

  auto* gradcheck = app.add_subcommand("gradcheck", "Analytic vs finite-difference gradients");
  add_base_flags(gradcheck, f);
  add_model_flags(gradcheck, f);
  gradcheck->add_option("--tokens", f.tokens, "Tokens in the random instance");
  gradcheck->add_option("--inject-fault", f.inject_fault)->group("");

  auto* bench = app.add_subcommand("bench", "Time partitioning and the forward pass");
  add_base_flags(bench, f);
  add_window_flags(bench, f);
  add_model_flags(bench, f);
  add_scene_flags(bench, f);
  bench->add_option("input", f.input, "SPC1 point cloud");
  bench->add_option("--synthetic", f.synthetic, "Generate N synthetic tokens instead of reading a file");
  bench->add_option("--repeat", f.repeat, "Repetitions");

  auto* init = app.add_subcommand("init-weights", "Write random (or zero) SPW1 weights");
  add_base_flags(init, f);
  add_model_flags(init, f);
  init->add_option("--out", f.out, "Output SPW1 path")->required();
  init->add_flag("--zero", f.zero, "All-zero weights and tables");

  std::vector<const char*> argv{"sphere_attn"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  const CLI::App* sub = app.get_subcommands().front();
  try {
    const RunConfig cfg = resolve(*sub, f);
    if (sub == gen) return cmd_gen(cfg, f, out);
    if (sub == stats) return cmd_partition_stats(cfg, f, out);
    if (sub == forward) return cmd_forward(cfg, *sub, f, out);
    if (sub == gradcheck) return cmd_gradcheck(cfg, f, out, err);
    if (sub == bench) return cmd_bench(cfg, *sub, f, out);
    return cmd_init_weights(cfg, f, out);
  } catch (const ConfigError& e) {
    err << "sphere_attn: config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const FormatError& e) {
    err << "sphere_attn: I/O error: " << e.what() << '\n';
    return kExitIo;
  } catch (const std::exception& e) {
    err << "sphere_attn: error: " << e.what() << '\n';
    return kExitCheckFailed;
  }
}

}  // namespace sphere_attn::cli
