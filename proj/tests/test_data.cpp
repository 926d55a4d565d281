#include "bnerf/data.hpp"
#include "bnerf/png_io.hpp"

#include <doctest.h>

#include <fstream>

using namespace bnerf;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("bnerf_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

SceneSpec unit_sphere() {
  SceneSpec s;
  s.primitives = {{"ball", PrimitiveKind::sphere, Vec3::Zero(), Vec3::Ones(), Rgb(0.2, 0.4, 0.6)}};
  return s;
}

Camera axis_camera(int size, double focal) {
  Intrinsics k{focal, 0.5 * size, 0.5 * size, size, size};
  return look_at(Vec3(0, 0, -3), Vec3::Zero(), Vec3::UnitY(), k, 0.5, 10.0);
}

bool same_pose(const Camera& a, const Camera& b) { return (a.center() - b.center()).norm() < 1e-9; }

}  // namespace

TEST_CASE("scene validation and builtins") {
  for (const auto& n : builtin_scene_names()) CHECK_NOTHROW(builtin_scene(n).validate());
  CHECK_THROWS_AS(builtin_scene("teapot"), InvalidArgument);
  auto s = unit_sphere();
  s.primitives[0].center = Vec3(2.5, 0, 0);
  CHECK_THROWS_AS(s.validate(), InvalidArgument);
  s = unit_sphere();
  s.primitives[0].albedo = Rgb(1.2, 0, 0);
  CHECK_THROWS_AS(s.validate(), InvalidArgument);
}

TEST_CASE("ground-truth closed forms") {
  const auto cam = axis_camera(65, 60.0);
  const auto depth = render_ground_truth(unit_sphere(), cam, ImageKind::depth);
  CHECK(depth.pixels.at(32, 32) == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(depth.pixels.at(0, 0) == 0.0);
  const auto rgb = render_ground_truth(unit_sphere(), cam, ImageKind::rgb);
  CHECK(rgb.pixels.at(32, 32, 2) == doctest::Approx(0.6));

  SceneSpec empty;
  empty.background = Rgb(0.1, 0.2, 0.3);
  const auto bg = render_ground_truth(empty, cam, ImageKind::rgb);
  for (int y = 0; y < 65; ++y)
    for (int x = 0; x < 65; ++x) REQUIRE(bg.pixels.at(x, y, 1) == 0.2);
  const auto bgd = render_ground_truth(empty, cam, ImageKind::depth);
  for (double v : bgd.pixels.data) REQUIRE(v == 0.0);
}

TEST_CASE("sphere silhouette matches the projected-cone area") {
  const int n = 256;
  const double f = 200.0, radius = 1.0, dist = 3.0;
  const auto depth = render_ground_truth(unit_sphere(), axis_camera(n, f), ImageKind::depth);
  double hits = 0;
  for (double v : depth.pixels.data) hits += v > 0.0;
  const double r_px = f * std::tan(std::asin(radius / dist));
  const double expect = std::numbers::pi * r_px * r_px;
  CHECK(std::abs(hits - expect) / expect < 0.02);
}

TEST_CASE("box intersection from inside and outside") {
  SceneSpec s;
  s.primitives = {{"b", PrimitiveKind::box, Vec3::Zero(), Vec3(1, 2, 0.5), Rgb::Constant(0.5)}};
  Ray r{Vec3(-5, 0.3, 0.1), Vec3::UnitX()};
  auto h = intersect(s, r, 0.0, 100.0);
  REQUIRE(h);
  CHECK(h->t == doctest::Approx(4.0));
  h = intersect(s, r, 4.5, 100.0);
  REQUIRE(h);
  CHECK(h->t == doctest::Approx(6.0));
  CHECK_FALSE(intersect(s, Ray{Vec3(-5, 3, 0), Vec3::UnitX()}, 0.0, 100.0));
  CHECK(inside(s, Vec3(0.9, -1.9, 0.4)) == 0);
  CHECK(inside(s, Vec3(0.9, -1.9, 0.6)) == -1);
}

TEST_CASE("depth hits lie within the camera range") {
  RigSpec spec;
  spec.kind = RigKind::orbit_depth;
  spec.train_count = 8;
  const auto rig = build_rig(spec);
  for (const auto& name : builtin_scene_names()) {
    const auto scene = builtin_scene(name);
    for (const auto& cam : rig.test) {
      const auto d = render_ground_truth(scene, cam, ImageKind::depth);
      for (double v : d.pixels.data) REQUIRE((v == 0.0 || (v >= cam.near && v <= cam.far)));
    }
  }
}

TEST_CASE("rig splits") {
  RigSpec u;
  u.train_count = 2;
  auto rig = build_rig(u);
  CHECK(rig.train.size() == 2);
  CHECK(angular_distance_deg(rig.train_azimuth_deg[0], rig.train_azimuth_deg[1]) <= 20.0);
  CHECK_FALSE(rig.test.empty());
  for (double t : rig.test_azimuth_deg)
    for (double a : rig.train_azimuth_deg) CHECK(angular_distance_deg(t, a) > 90.0);

  u.train_count = 36;
  rig = build_rig(u);
  CHECK(rig.test.size() == 36);
  u.train_count = 20;
  CHECK_THROWS_AS(build_rig(u), InvalidArgument);
  u.train_count = 0;
  CHECK_THROWS_AS(build_rig(u), InvalidArgument);

  RigSpec d;
  d.kind = RigKind::orbit_depth;
  d.train_count = 36;
  CHECK_THROWS_AS(build_rig(d), InvalidArgument);
  for (int k : {8, 16}) {
    d.train_count = k;
    rig = build_rig(d);
    CHECK(rig.train.size() == static_cast<std::size_t>(k));
    CHECK(rig.test.size() == 18);
    const double first = *std::min_element(rig.test_azimuth_deg.begin(), rig.test_azimuth_deg.end());
    const double last = *std::max_element(rig.test_azimuth_deg.begin(), rig.test_azimuth_deg.end());
    CHECK(last - first == doctest::Approx(170.0));
  }
  d.split = SplitMode::observed;
  for (auto [k, t] : {std::pair{8, 3}, {16, 3}, {30, 6}}) {
    d.train_count = k;
    CHECK(build_rig(d).test.size() == static_cast<std::size_t>(t));
  }
  d.train_count = 31;
  CHECK_THROWS_AS(build_rig(d), InvalidArgument);
}

TEST_CASE("no pose appears in both splits") {
  std::vector<RigSpec> specs;
  for (int k : {1, 2, 4, 8, 36}) {
    RigSpec s;
    s.train_count = k;
    specs.push_back(s);
  }
  for (int k : {1, 8, 16}) {
    RigSpec s;
    s.kind = RigKind::orbit_depth;
    s.train_count = k;
    specs.push_back(s);
    s.split = SplitMode::observed;
    specs.push_back(s);
  }
  for (int k : {4, 8, 20}) {
    RigSpec s;
    s.kind = RigKind::forward_observed;
    s.train_count = k;
    s.seed = k;
    specs.push_back(s);
  }
  for (const auto& s : specs) {
    const auto rig = build_rig(s);
    for (const auto& a : rig.train)
      for (const auto& b : rig.test) REQUIRE_FALSE(same_pose(a, b));
  }
}

TEST_CASE("forward rig is seeded") {
  RigSpec s;
  s.kind = RigKind::forward_observed;
  s.train_count = 5;
  s.seed = 9;
  const auto a = build_rig(s), b = build_rig(s);
  for (std::size_t i = 0; i < a.train.size(); ++i) CHECK(same_pose(a.train[i], b.train[i]));
  for (double az : a.train_azimuth_deg) CHECK(std::abs(az) <= 30.0);
  s.seed = 10;
  CHECK_FALSE(same_pose(build_rig(s).train[0], a.train[0]));
}

TEST_CASE("volume rendering the exact occupancy converges to ground truth") {
  const auto scene = builtin_scene("duo");
  RigSpec spec;
  spec.width = spec.height = 32;
  const auto cam = orbit_camera(spec, 30.0, 20.0);
  const auto gt = render_ground_truth(scene, cam, ImageKind::depth);
  auto lookup = [&](const Vec3& p) -> std::optional<FieldSample> {
    const int id = inside(scene, p);
    if (id < 0) return std::nullopt;
    FieldSample s = vacuum_sample(p);
    s.density_mean = 1e9;
    s.color_mean = scene.primitives[id].albedo;
    return s;
  };
  CompositeOptions depth;
  depth.target = RenderTarget::depth;
  for (int ns : {64, 128, 256}) {
    double err = 0.0;
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x) {
        auto b = stratified_sample(generate_ray(cam, pixel_center(x, y)), cam.near, cam.far, ns, 0, false);
        populate_samples(b, lookup);
        err += std::abs(composite(b, depth).value[0] - gt.pixels.at(x, y));
      }
    err /= 32 * 32;
    CHECK(err < 2.0 * (cam.far - cam.near) / ns);
  }
}

TEST_CASE("dataset round trip") {
  RigSpec spec;
  spec.width = 24;
  spec.height = 16;
  spec.train_count = 2;
  const auto ds = generate_dataset(builtin_scene("duo"), spec);
  const auto dir = scratch("roundtrip");
  save_dataset(dir, ds);
  const auto back = load_dataset(dir);
  REQUIRE(back.train.size() == ds.train.size());
  REQUIRE(back.test.size() == ds.test.size());
  CHECK(back.scene.primitives.size() == 2);
  CHECK(back.scene.primitives[0].center == ds.scene.primitives[0].center);
  for (std::size_t i = 0; i < ds.train.size(); ++i) {
    const auto& a = ds.train[i];
    const auto& b = back.train[i];
    CHECK(a.name == b.name);
    CHECK(a.camera.world_from_camera.matrix() == b.camera.world_from_camera.matrix());
    CHECK(a.camera.intrinsics.focal == b.camera.intrinsics.focal);
    for (std::size_t j = 0; j < a.rgb.data.size(); ++j)
      REQUIRE(b.rgb.data[j] == static_cast<double>(static_cast<float>(a.rgb.data[j])));
    for (std::size_t j = 0; j < a.depth.data.size(); ++j)
      REQUIRE(b.depth.data[j] == static_cast<double>(static_cast<float>(a.depth.data[j])));
  }

  // Without the raw sidecars the PNGs are used: 8-bit color, 16-bit depth.
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.path().extension() == ".f32") fs::remove(e.path());
  const auto png = load_dataset(dir);
  const double step = spec.far / 65535.0;
  for (std::size_t j = 0; j < ds.test[0].rgb.data.size(); ++j)
    REQUIRE(std::abs(png.test[0].rgb.data[j] - ds.test[0].rgb.data[j]) <= 0.5 / 255 + 1e-12);
  for (std::size_t j = 0; j < ds.test[0].depth.data.size(); ++j)
    REQUIRE(std::abs(png.test[0].depth.data[j] - ds.test[0].depth.data[j]) <= 0.5 * step + 1e-12);
  fs::remove_all(dir);
}

TEST_CASE("malformed dataset files name the offending key") {
  RigSpec spec;
  spec.width = spec.height = 8;
  const auto dir = scratch("malformed");
  save_dataset(dir, generate_dataset(builtin_scene("sphere"), spec));
  std::ifstream in(dir / "poses.json");
  std::string text((std::istreambuf_iterator<char>(in)), {});
  in.close();
  const auto pos = text.find("\"focal\"");
  REQUIRE(pos != std::string::npos);
  std::ofstream(dir / "poses.json") << text.replace(pos, 7, "\"focus\"");
  try {
    load_dataset(dir);
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find("'focal'") != std::string::npos);
  }
  std::ofstream(dir / "scene.json") << "{ not json";
  CHECK_THROWS_AS(load_dataset(dir), ParseError);
  fs::remove_all(dir);
}

TEST_CASE("hand-written pose file loads and reprojects") {
  const auto dir = scratch("external");
  fs::create_directories(dir / "train");
  std::ofstream(dir / "scene.json") << R"({"bounds_min": [-1,-1,-1], "bounds_max": [1,1,1],
    "background": [0,0,0], "primitives": []})";
  // Camera 5 units up +z looking down -z, rotated 90 degrees about z.
  std::ofstream(dir / "poses.json") << R"({"width": 100, "height": 80, "focal": 50.0, "near": 1, "far": 9,
    "frames": [{"file_path": "./train/r_0",
                "transform": [[0,-1,0,0],[1,0,0,0],[0,0,1,5],[0,0,0,1]]}]})";
  write_png8(dir / "train/r_0.png", Image(100, 80, 3, 0.5));
  const auto ds = load_dataset(dir);
  REQUIRE(ds.train.size() == 1);
  const auto& cam = ds.train[0].camera;
  CHECK(cam.intrinsics.cx == 50.0);
  CHECK(cam.intrinsics.cy == 40.0);
  // Camera x is world +y and camera y is world -x, so world (0, 1, 0) sits at
  // camera (1, 0, -5).
  const auto px = project_direction(cam, Vec3(0, 1, 0) - cam.center());
  CHECK(px.x == doctest::Approx(60.0));
  CHECK(px.y == doctest::Approx(40.0));
  const auto ray = generate_ray(cam, {60.0, 40.0});
  CHECK((ray.origin + 5.0 / -ray.direction.z() * ray.direction - Vec3(0, 1, 0)).norm() < 1e-12);
  CHECK(ds.train[0].rgb.at(3, 3, 1) == doctest::Approx(128.0 / 255));
  fs::remove_all(dir);
}
