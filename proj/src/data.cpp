#include "bnerf/data.hpp"
#include "bnerf/png_io.hpp"

#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <numeric>
#include <random>

namespace bnerf {

namespace fs = std::filesystem;
using nlohmann::json;

void SceneSpec::validate() const {
  if (!(bounds.min.array() < bounds.max.array()).all()) throw InvalidArgument("scene bounds are empty");
  for (const auto& p : primitives) {
    if (!((p.albedo >= 0.0).all() && (p.albedo <= 1.0).all()))
      throw InvalidArgument("albedo outside [0,1] for primitive " + p.name);
    const Vec3 half = p.kind == PrimitiveKind::sphere ? Vec3::Constant(p.size.x()) : p.size;
    if (!(half.array() > 0.0).all()) throw InvalidArgument("non-positive size for primitive " + p.name);
    if (!bounds.contains(p.center - half) || !bounds.contains(p.center + half))
      throw InvalidArgument("primitive " + p.name + " leaves the scene bounds");
  }
}

std::vector<std::string> builtin_scene_names() { return {"duo", "sphere", "blocks", "empty"}; }

SceneSpec builtin_scene(const std::string& name) {
  SceneSpec s;
  s.name = name;
  auto sphere = [](std::string n, Vec3 c, double r, Rgb a) {
    return Primitive{std::move(n), PrimitiveKind::sphere, c, Vec3(r, r, r), a};
  };
  auto box = [](std::string n, Vec3 c, Vec3 h, Rgb a) { return Primitive{std::move(n), PrimitiveKind::box, c, h, a}; };
  if (name == "duo") {
    s.primitives = {sphere("ball", Vec3(0.4, -0.3, 0.2), 1.5, Rgb(0.85, 0.35, 0.2)),
                    box("block", Vec3(-1.3, 1.2, -1.0), Vec3(1.1, 0.9, 1.2), Rgb(0.2, 0.5, 0.85))};
  } else if (name == "sphere") {
    s.primitives = {sphere("ball", Vec3::Zero(), 2.0, Rgb(0.9, 0.9, 0.9))};
  } else if (name == "blocks") {
    s.primitives = {box("base", Vec3(0.0, 0.0, -1.6), Vec3(2.2, 2.2, 0.6), Rgb(0.6, 0.6, 0.55)),
                    box("tower", Vec3(0.9, -0.8, 0.2), Vec3(0.7, 0.7, 1.4), Rgb(0.9, 0.7, 0.1)),
                    sphere("cap", Vec3(-1.0, 1.0, 0.2), 1.0, Rgb(0.3, 0.75, 0.35))};
  } else if (name != "empty") {
    throw InvalidArgument("unknown scene: " + name);
  }
  s.validate();
  return s;
}

namespace {

std::optional<double> hit_sphere(const Primitive& p, const Ray& r, double t_min, double t_max) {
  const Vec3 oc = r.origin - p.center;
  const double b = oc.dot(r.direction);
  const double c = oc.squaredNorm() - p.size.x() * p.size.x();
  const double disc = b * b - c;
  if (disc < 0.0) return std::nullopt;
  const double sq = std::sqrt(disc);
  for (double t : {-b - sq, -b + sq})
    if (t >= t_min && t <= t_max) return t;
  return std::nullopt;
}

std::optional<double> hit_box(const Primitive& p, const Ray& r, double t_min, double t_max) {
  double lo = -std::numeric_limits<double>::infinity(), hi = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    const double o = r.origin[a] - p.center[a], d = r.direction[a], h = p.size[a];
    if (d == 0.0) {
      if (std::abs(o) > h) return std::nullopt;
      continue;
    }
    double t0 = (-h - o) / d, t1 = (h - o) / d;
    if (t0 > t1) std::swap(t0, t1);
    lo = std::max(lo, t0);
    hi = std::min(hi, t1);
  }
  if (lo > hi) return std::nullopt;
  for (double t : {lo, hi})
    if (t >= t_min && t <= t_max) return t;
  return std::nullopt;
}

}  // namespace

std::optional<Hit> intersect(const SceneSpec& scene, const Ray& ray, double t_min, double t_max) {
  std::optional<Hit> best;
  for (std::size_t i = 0; i < scene.primitives.size(); ++i) {
    const auto& p = scene.primitives[i];
    const auto t = p.kind == PrimitiveKind::sphere ? hit_sphere(p, ray, t_min, t_max) : hit_box(p, ray, t_min, t_max);
    if (t && (!best || *t < best->t)) best = Hit{*t, static_cast<int>(i)};
  }
  return best;
}

int inside(const SceneSpec& scene, const Vec3& x) {
  for (std::size_t i = 0; i < scene.primitives.size(); ++i) {
    const auto& p = scene.primitives[i];
    const Vec3 d = x - p.center;
    const bool in = p.kind == PrimitiveKind::sphere ? d.squaredNorm() <= p.size.x() * p.size.x()
                                                    : (d.cwiseAbs().array() <= p.size.array()).all();
    if (in) return static_cast<int>(i);
  }
  return -1;
}

PosedImage render_ground_truth(const SceneSpec& scene, const Camera& camera, ImageKind kind) {
  camera.validate();
  const auto& k = camera.intrinsics;
  PosedImage out{camera, kind, Image(k.width, k.height, kind == ImageKind::rgb ? 3 : 1)};
  for (int y = 0; y < k.height; ++y)
    for (int x = 0; x < k.width; ++x) {
      const Ray ray = generate_ray(camera, pixel_center(x, y));
      const auto hit = intersect(scene, ray, camera.near, camera.far);
      if (kind == ImageKind::depth) {
        out.pixels.at(x, y) = hit ? hit->t : 0.0;
      } else {
        const Rgb c = hit ? scene.primitives[hit->primitive].albedo : scene.background;
        for (int ch = 0; ch < 3; ++ch) out.pixels.at(x, y, ch) = c[ch];
      }
    }
  return out;
}

std::string to_string(RigKind kind) {
  switch (kind) {
    case RigKind::orbit_unobserved: return "orbit_unobserved";
    case RigKind::forward_observed: return "forward_observed";
    case RigKind::orbit_depth: return "orbit_depth";
  }
  return "?";
}

RigKind parse_rig_kind(const std::string& s) {
  for (auto k : {RigKind::orbit_unobserved, RigKind::forward_observed, RigKind::orbit_depth})
    if (to_string(k) == s) return k;
  throw InvalidArgument("unknown rig: " + s);
}

double angular_distance_deg(double a, double b) {
  const double d = std::fmod(std::abs(a - b), 360.0);
  return std::min(d, 360.0 - d);
}

Camera orbit_camera(const RigSpec& spec, double azimuth_deg, double elevation_deg) {
  const double az = azimuth_deg * std::numbers::pi / 180.0, el = elevation_deg * std::numbers::pi / 180.0;
  const Vec3 eye = spec.radius * Vec3(std::cos(el) * std::cos(az), std::cos(el) * std::sin(az), std::sin(el));
  Intrinsics k;
  k.width = spec.width;
  k.height = spec.height;
  k.focal = 0.5 * spec.width / std::tan(0.5 * spec.fov_deg * std::numbers::pi / 180.0);
  k.cx = 0.5 * spec.width;
  k.cy = 0.5 * spec.height;
  return look_at(eye, Vec3::Zero(), Vec3::UnitZ(), k, spec.near, spec.far);
}

namespace {

constexpr int kOrbitPoses = 36;
constexpr double kOrbitStep = 10.0;

void add(Rig& rig, const RigSpec& spec, bool train, double az, double el) {
  (train ? rig.train : rig.test).push_back(orbit_camera(spec, az, el));
  (train ? rig.train_azimuth_deg : rig.test_azimuth_deg).push_back(az);
}

// Training arc centered on azimuth 0; test on the half-step offset grid, kept
// only when more than 90 degrees from every training camera. With all 36
// training poses every offset pose is a test pose.
void orbit_unobserved(Rig& rig, const RigSpec& spec) {
  const int k = spec.train_count;
  if (k > kOrbitPoses) throw InvalidArgument("orbit_unobserved supports at most 36 training views");
  for (int j = 0; j < k; ++j) add(rig, spec, true, (j - 0.5 * (k - 1)) * kOrbitStep, spec.elevation_deg);
  for (int m = 0; m < kOrbitPoses; ++m) {
    const double az = (k % 2 == 0 ? 0.0 : 0.5 * kOrbitStep) + m * kOrbitStep - 180.0;
    bool far = true;
    for (double t : rig.train_azimuth_deg) far = far && angular_distance_deg(az, t) > 90.0;
    if (far || k == kOrbitPoses) add(rig, spec, false, az, spec.elevation_deg);
  }
  if (rig.test.empty()) throw InvalidArgument("orbit_unobserved: no pose is more than 90 degrees from training");
}

void orbit_depth(Rig& rig, const RigSpec& spec) {
  const int k = spec.train_count;
  if (k > kOrbitPoses) throw InvalidArgument("orbit_depth supports at most 36 poses");
  std::vector<int> train, test;
  if (spec.split == SplitMode::unobserved) {
    for (int j = 0; j < k; ++j) train.push_back(j);
    // 18 poses spanning 180 degrees centered opposite the training arc.
    const double opposite = 0.5 * (k - 1) * kOrbitStep + 180.0;
    std::vector<int> order(kOrbitPoses);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      return angular_distance_deg(a * kOrbitStep, opposite) < angular_distance_deg(b * kOrbitStep, opposite);
    });
    test.assign(order.begin(), order.begin() + kOrbitPoses / 2);
    std::sort(test.begin(), test.end());
    for (int t : test)
      if (t < k) throw InvalidArgument("orbit_depth: unobserved test arc overlaps training poses");
  } else {
    const int n_test = k >= 30 ? 6 : 3;
    if (k + n_test > kOrbitPoses) throw InvalidArgument("orbit_depth: observed split needs train_count <= 30");
    for (int j = 0; j < k; ++j) train.push_back(static_cast<int>(std::floor(j * double(kOrbitPoses) / k)));
    std::vector<int> rest;
    for (int p = 0; p < kOrbitPoses; ++p)
      if (std::find(train.begin(), train.end(), p) == train.end()) rest.push_back(p);
    for (int j = 0; j < n_test; ++j) test.push_back(rest[(2 * j + 1) * rest.size() / (2 * n_test)]);
  }
  for (int p : train) add(rig, spec, true, p * kOrbitStep, spec.elevation_deg);
  for (int p : test) add(rig, spec, false, p * kOrbitStep, spec.elevation_deg);
}

// Random poses inside a frontal cone around azimuth 0, then a seeded split.
void forward_observed(Rig& rig, const RigSpec& spec) {
  if (spec.test_count < 1) throw InvalidArgument("forward_observed needs test_count >= 1");
  const int total = spec.train_count + spec.test_count;
  StreamRng rng(label_seed(spec.seed, "forward_observed"));
  std::vector<std::pair<double, double>> poses;
  for (int i = 0; i < total; ++i)
    poses.emplace_back(-30.0 + 60.0 * rng.uniform(), spec.elevation_deg - 15.0 + 30.0 * rng.uniform());
  std::vector<int> order(total);
  std::iota(order.begin(), order.end(), 0);
  for (int i = total - 1; i > 0; --i) std::swap(order[i], order[rng.next_u64() % (i + 1)]);
  for (int i = 0; i < total; ++i) {
    const auto [az, el] = poses[order[i]];
    add(rig, spec, i < spec.train_count, az, el);
  }
}

}  // namespace

Rig build_rig(const RigSpec& spec) {
  if (spec.train_count < 1) throw InvalidArgument("train_count must be >= 1");
  if (!(spec.radius > 0.0) || spec.width < 1 || spec.height < 1) throw InvalidArgument("bad rig geometry");
  Rig rig;
  switch (spec.kind) {
    case RigKind::orbit_unobserved: orbit_unobserved(rig, spec); break;
    case RigKind::orbit_depth: orbit_depth(rig, spec); break;
    case RigKind::forward_observed: forward_observed(rig, spec); break;
  }
  return rig;
}

DatasetKinds default_kinds(RigKind kind) {
  return kind == RigKind::orbit_depth ? DatasetKinds{false, true} : DatasetKinds{true, true};
}

Dataset generate_dataset(const SceneSpec& scene, const RigSpec& rig_spec, DatasetKinds kinds) {
  if (!kinds.rgb && !kinds.depth) throw InvalidArgument("dataset needs RGB or depth images");
  scene.validate();
  const Rig rig = build_rig(rig_spec);
  Dataset ds;
  ds.scene = scene;
  auto make = [&](const std::vector<Camera>& cams, const std::string& split, std::vector<Frame>& out) {
    for (std::size_t i = 0; i < cams.size(); ++i) {
      char name[32];
      std::snprintf(name, sizeof name, "%s/%03zu", split.c_str(), i);
      out.push_back(Frame{name, cams[i],
                          kinds.rgb ? render_ground_truth(scene, cams[i], ImageKind::rgb).pixels : Image(),
                          kinds.depth ? render_ground_truth(scene, cams[i], ImageKind::depth).pixels : Image()});
    }
  };
  make(rig.train, "train", ds.train);
  make(rig.test, "test", ds.test);
  return ds;
}

// ---------------------------------------------------------------------------
// I/O

namespace {

json vec_json(const auto& v) { return json::array({v[0], v[1], v[2]}); }

const json& require(const json& j, const std::string& key, const std::string& where) {
  if (!j.is_object() || !j.contains(key)) throw ParseError(where + ": missing key '" + key + "'");
  return j.at(key);
}

template <typename T>
T get(const json& j, const std::string& key, const std::string& where) {
  const json& v = require(j, key, where);
  try {
    return v.get<T>();
  } catch (const json::exception&) {
    throw ParseError(where + ": bad value for key '" + key + "'");
  }
}

Vec3 get_vec(const json& j, const std::string& key, const std::string& where) {
  const auto v = get<std::vector<double>>(j, key, where);
  if (v.size() != 3) throw ParseError(where + ": key '" + key + "' needs 3 numbers");
  return Vec3(v[0], v[1], v[2]);
}

json scene_to_json(const SceneSpec& s) {
  json prims = json::array();
  for (const auto& p : s.primitives)
    prims.push_back({{"name", p.name},
                     {"kind", p.kind == PrimitiveKind::sphere ? "sphere" : "box"},
                     {"center", vec_json(p.center)},
                     {"size", vec_json(p.size)},
                     {"albedo", vec_json(p.albedo)}});
  return {{"name", s.name},
          {"bounds_min", vec_json(s.bounds.min)},
          {"bounds_max", vec_json(s.bounds.max)},
          {"background", vec_json(s.background)},
          {"primitives", prims}};
}

SceneSpec scene_from_json(const json& j, const std::string& where) {
  SceneSpec s;
  s.name = j.value("name", "custom");
  s.bounds.min = get_vec(j, "bounds_min", where);
  s.bounds.max = get_vec(j, "bounds_max", where);
  s.background = get_vec(j, "background", where).array();
  for (const auto& p : require(j, "primitives", where)) {
    Primitive q;
    q.name = p.value("name", "");
    const auto kind = get<std::string>(p, "kind", where);
    if (kind != "sphere" && kind != "box") throw ParseError(where + ": bad value for key 'kind'");
    q.kind = kind == "sphere" ? PrimitiveKind::sphere : PrimitiveKind::box;
    q.center = get_vec(p, "center", where);
    q.size = get_vec(p, "size", where);
    q.albedo = get_vec(p, "albedo", where).array();
    s.primitives.push_back(q);
  }
  try {
    s.validate();
  } catch (const InvalidArgument& e) {
    throw ParseError(where + ": " + e.what());
  }
  return s;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream f(p);
  if (!f) throw InvalidArgument("cannot write " + p.string());
  f << text;
}

json read_json(const fs::path& p) {
  std::ifstream f(p);
  if (!f) throw ParseError("cannot open " + p.string());
  try {
    return json::parse(f);
  } catch (const json::parse_error& e) {
    throw ParseError(p.string() + ": " + e.what());
  }
}

}  // namespace

void save_dataset(const fs::path& dir, const Dataset& ds) {
  if (ds.train.empty()) throw InvalidArgument("dataset has no training frames");
  const auto& k0 = ds.train.front().camera.intrinsics;
  const double near = ds.train.front().camera.near, far = ds.train.front().camera.far;
  fs::create_directories(dir / "train");
  fs::create_directories(dir / "test");
  write_text(dir / "scene.json", scene_to_json(ds.scene).dump(2));
  // Depth PNGs cover [0, far] in 16 bits; the raw sidecars are exact.
  const double depth_scale = far / 65535.0;
  write_text(dir / "depth_meta.json",
             json{{"depth_scale", depth_scale}, {"zero_means_no_hit", true}, {"units", "ray distance"}}.dump(2));

  json frames = json::array();
  for (const auto* split : {&ds.train, &ds.test})
    for (const auto& fr : *split) {
      const auto& k = fr.camera.intrinsics;
      if (k.width != k0.width || k.height != k0.height || k.focal != k0.focal || k.cx != k0.cx || k.cy != k0.cy ||
          fr.camera.near != near || fr.camera.far != far)
        throw InvalidArgument("all frames must share intrinsics and near/far");
      const auto m = fr.camera.world_from_camera.matrix();
      json rows = json::array();
      for (int r = 0; r < 4; ++r) rows.push_back({m(r, 0), m(r, 1), m(r, 2), m(r, 3)});
      frames.push_back({{"file_path", fr.name}, {"transform", rows}});
      if (!fr.rgb.data.empty()) {
        write_png8(dir / (fr.name + ".png"), fr.rgb);
        write_f32(dir / (fr.name + ".f32"), fr.rgb);
      }
      if (!fr.depth.data.empty()) {
        write_png16(dir / (fr.name + "_depth.png"), fr.depth, depth_scale);
        write_f32(dir / (fr.name + "_depth.f32"), fr.depth);
      }
    }
  json poses{{"width", k0.width}, {"height", k0.height}, {"focal", k0.focal}, {"cx", k0.cx},
             {"cy", k0.cy},       {"near", near},        {"far", far},        {"frames", frames}};
  write_text(dir / "poses.json", poses.dump(2));
}

Dataset load_dataset(const fs::path& dir) {
  Dataset ds;
  const std::string scene_where = (dir / "scene.json").string();
  ds.scene = scene_from_json(read_json(dir / "scene.json"), scene_where);

  const std::string where = (dir / "poses.json").string();
  const json poses = read_json(dir / "poses.json");
  Intrinsics k;
  k.width = get<int>(poses, "width", where);
  k.height = get<int>(poses, "height", where);
  k.focal = get<double>(poses, "focal", where);
  k.cx = poses.contains("cx") ? get<double>(poses, "cx", where) : 0.5 * k.width;
  k.cy = poses.contains("cy") ? get<double>(poses, "cy", where) : 0.5 * k.height;
  const double near = get<double>(poses, "near", where), far = get<double>(poses, "far", where);

  double depth_scale = far / 65535.0;
  if (fs::exists(dir / "depth_meta.json"))
    depth_scale = get<double>(read_json(dir / "depth_meta.json"), "depth_scale", (dir / "depth_meta.json").string());

  for (const auto& f : require(poses, "frames", where)) {
    Frame fr;
    fr.name = get<std::string>(f, "file_path", where);
    if (fr.name.starts_with("./")) fr.name = fr.name.substr(2);
    const auto& rows = require(f, "transform", where + " frame " + fr.name);
    if (!rows.is_array() || rows.size() != 4) throw ParseError(where + ": key 'transform' needs 4 rows");
    Eigen::Matrix4d m;
    for (int r = 0; r < 4; ++r) {
      if (!rows[r].is_array() || rows[r].size() != 4) throw ParseError(where + ": key 'transform' needs 4x4 numbers");
      for (int c = 0; c < 4; ++c) m(r, c) = rows[r][c].get<double>();
    }
    fr.camera.intrinsics = k;
    fr.camera.world_from_camera.matrix() = m;
    fr.camera.near = near;
    fr.camera.far = far;
    try {
      fr.camera.validate();
    } catch (const InvalidArgument& e) {
      throw ParseError(where + " frame " + fr.name + ": " + e.what());
    }

    const fs::path base = dir / fr.name;
    if (fs::exists(base.string() + ".f32")) {
      fr.rgb = read_f32(base.string() + ".f32", k.width, k.height, 3);
    } else if (fs::exists(base.string() + ".png")) {
      fr.rgb = read_png(base.string() + ".png");
    }
    if (fs::exists(base.string() + "_depth.f32")) {
      fr.depth = read_f32(base.string() + "_depth.f32", k.width, k.height, 1);
    } else if (fs::exists(base.string() + "_depth.png")) {
      fr.depth = read_png(base.string() + "_depth.png");
      for (double& v : fr.depth.data) v *= 65535.0 * depth_scale;
    }
    if (fr.rgb.data.empty() && fr.depth.data.empty())
      throw ParseError(base.string() + ": no RGB or depth image found");
    if (!fr.rgb.data.empty() && (fr.rgb.width != k.width || fr.rgb.height != k.height || fr.rgb.channels != 3))
      throw ParseError(base.string() + ": RGB image size disagrees with poses.json");
    if (!fr.depth.data.empty() && (fr.depth.width != k.width || fr.depth.height != k.height || fr.depth.channels != 1))
      throw ParseError(base.string() + ": depth image size disagrees with poses.json");
    const auto split = fr.name.substr(0, fr.name.find('/'));
    if (split == "train") {
      ds.train.push_back(std::move(fr));
    } else if (split == "test") {
      ds.test.push_back(std::move(fr));
    } else {
      throw ParseError(where + ": file_path must start with train/ or test/: " + fr.name);
    }
  }
  return ds;
}

}  // namespace bnerf
