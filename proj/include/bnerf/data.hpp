#pragma once

#include "bnerf/field.hpp"
#include "bnerf/image.hpp"
#include "bnerf/render.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace bnerf {

enum class PrimitiveKind { sphere, box };

struct Primitive {
  std::string name;
  PrimitiveKind kind = PrimitiveKind::sphere;
  Vec3 center = Vec3::Zero();
  Vec3 size = Vec3::Ones();  // sphere: radius in x; box: half extents
  Rgb albedo = Rgb::Constant(0.5);
};

struct SceneSpec {
  std::string name = "custom";
  std::vector<Primitive> primitives;
  Aabb bounds{Vec3::Constant(-3.0), Vec3::Constant(3.0)};
  Rgb background = Rgb::Zero();

  /// Primitives must lie inside the bounds with albedo in [0,1]^3.
  void validate() const;
};

/// Names accepted by builtin_scene.
std::vector<std::string> builtin_scene_names();
SceneSpec builtin_scene(const std::string& name);

struct Hit {
  double t = 0.0;
  int primitive = -1;
};

/// Nearest intersection with t in [t_min, t_max]. Ray direction must be unit length.
std::optional<Hit> intersect(const SceneSpec& scene, const Ray& ray, double t_min, double t_max);
/// Index of the first primitive containing p, or -1.
int inside(const SceneSpec& scene, const Vec3& p);

enum class ImageKind { rgb, depth };

struct PosedImage {
  Camera camera;
  ImageKind kind = ImageKind::rgb;
  Image pixels;  // rgb: 3 channels in [0,1]; depth: 1 channel, 0 = no hit
};

PosedImage render_ground_truth(const SceneSpec& scene, const Camera& camera, ImageKind kind);

enum class RigKind { orbit_unobserved, forward_observed, orbit_depth };
enum class SplitMode { unobserved, observed };

std::string to_string(RigKind kind);
RigKind parse_rig_kind(const std::string& s);

struct RigSpec {
  RigKind kind = RigKind::orbit_unobserved;
  int train_count = 2;
  double radius = 10.0;
  double elevation_deg = 20.0;
  int width = 64;
  int height = 64;
  double fov_deg = 40.0;
  double near = 4.5;
  double far = 15.5;
  SplitMode split = SplitMode::unobserved;  // orbit_depth only
  int test_count = 8;                       // forward_observed only
  std::uint64_t seed = 0;                   // forward_observed only
};

struct Rig {
  std::vector<Camera> train;
  std::vector<Camera> test;
  std::vector<double> train_azimuth_deg;
  std::vector<double> test_azimuth_deg;
};

/// Throws InvalidArgument when the split cannot be formed.
Rig build_rig(const RigSpec& spec);

/// Camera on a z-up orbit around the origin.
Camera orbit_camera(const RigSpec& spec, double azimuth_deg, double elevation_deg);

/// Smallest absolute angular difference in degrees, in [0, 180].
double angular_distance_deg(double a, double b);

struct Frame {
  std::string name;  // relative path without extension, e.g. "train/000"
  Camera camera;
  Image rgb;    // empty in depth-only datasets
  Image depth;  // empty in RGB-only datasets
};

struct Dataset {
  SceneSpec scene;
  std::vector<Frame> train;
  std::vector<Frame> test;
};

struct DatasetKinds {
  bool rgb = true;
  bool depth = true;
};

/// Default kinds per rig: orbit_depth is depth-only, other rigs carry both.
DatasetKinds default_kinds(RigKind kind);

Dataset generate_dataset(const SceneSpec& scene, const RigSpec& rig, DatasetKinds kinds = {});

/// Layout: scene.json, poses.json, depth_meta.json, train/ and test/ with
/// <name>.png (8-bit RGB), <name>_depth.png (16-bit), and raw float32 sidecars
/// <name>.f32 / <name>_depth.f32 that loading prefers when present.
void save_dataset(const std::filesystem::path& dir, const Dataset& dataset);
/// Throws ParseError naming the offending file or key.
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace bnerf
