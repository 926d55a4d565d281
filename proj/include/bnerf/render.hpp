#pragma once

#include "bnerf/common.hpp"
#include "bnerf/field.hpp"

#include <span>
#include <vector>

namespace bnerf {

struct Intrinsics {
  double focal = 1.0;  // pixels
  double cx = 0.0;
  double cy = 0.0;
  int width = 1;
  int height = 1;
};

/// Pinhole camera in the usual radiance-field convention: the camera looks down
/// its local -z axis with +y up and +x right.
struct Camera {
  Intrinsics intrinsics;
  Eigen::Isometry3d world_from_camera = Eigen::Isometry3d::Identity();
  double near = 0.1;
  double far = 10.0;

  Vec3 center() const { return world_from_camera.translation(); }
  Vec3 forward() const { return -world_from_camera.linear().col(2); }

  /// Throws InvalidArgument on bad bounds, size or a non-orthonormal rotation.
  void validate() const;
};

/// Builds a camera at `eye` looking at `target`.
Camera look_at(const Vec3& eye, const Vec3& target, const Vec3& up, const Intrinsics& intrinsics,
               double near, double far);

/// Continuous image coordinates; pixel (col, row) covers [col, col+1) x [row, row+1).
struct PixelCoord {
  double x = 0.0;
  double y = 0.0;
};

inline PixelCoord pixel_center(int col, int row) { return {col + 0.5, row + 0.5}; }

struct Ray {
  Vec3 origin = Vec3::Zero();
  Vec3 direction = Vec3::UnitZ();
};

Ray generate_ray(const Camera& camera, PixelCoord pixel);
std::vector<Ray> generate_rays(const Camera& camera, std::span<const PixelCoord> pixels);

/// Inverse of generate_ray: image coordinates of a world-space direction.
PixelCoord project_direction(const Camera& camera, const Vec3& direction);

/// Samples along one ray. `t_edges` are bin edges; the field is looked up at
/// `sample_t` (jittered inside each bin) while `midpoints` stay the bin centers.
struct RaySampleBatch {
  Vec3 origin = Vec3::Zero();
  Vec3 direction = Vec3::UnitZ();
  std::vector<double> t_edges;
  std::vector<double> deltas;
  std::vector<double> midpoints;
  std::vector<double> sample_t;
  std::vector<FieldSample> samples;

  std::size_t size() const { return deltas.size(); }

  /// Batch with the given bin edges, lookups at bin midpoints, vacuum samples.
  static RaySampleBatch from_edges(std::vector<double> t_edges, const Ray& ray = {});
};

RaySampleBatch stratified_sample(const Ray& ray, double t_near, double t_far, int n_samples,
                                 std::uint64_t seed, bool jitter = true);

/// Fills `batch.samples` by evaluating `lookup(position) -> std::optional<FieldSample>`;
/// empty results become vacuum.
template <typename Lookup>
void populate_samples(RaySampleBatch& batch, const Lookup& lookup) {
  batch.samples.resize(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Vec3 p = batch.origin + batch.sample_t[i] * batch.direction;
    if (auto s = lookup(p)) {
      batch.samples[i] = *s;
    } else {
      batch.samples[i] = vacuum_sample(p);
    }
  }
}

void populate_samples(RaySampleBatch& batch, const UncertainField& field);
void populate_samples(RaySampleBatch& batch, const ActivatedField& field);

enum class RenderTarget { rgb, depth };

struct CompositeOptions {
  RenderTarget target = RenderTarget::rgb;
  Rgb background = Rgb::Zero();
  /// Report depth as value / opacity instead of the raw weighted sum.
  bool normalized_depth = false;
  /// Zero the remaining weights once transmittance drops below the threshold.
  bool early_termination = false;
  double termination_threshold = 1e-4;
};

struct RenderOutput {
  Rgb value = Rgb::Zero();  // depth uses value[0]
  Rgb variance = Rgb::Zero();
  int channels = 3;
  double opacity = 0.0;
  std::vector<double> alpha;
  std::vector<double> transmittance;  // T_1 .. T_N
  double final_transmittance = 1.0;   // T_{N+1}
  std::size_t live_samples = 0;       // samples before early termination
};

inline int channel_count(RenderTarget target) { return target == RenderTarget::rgb ? 3 : 1; }

/// Per-sample compositing weight: color mean (rgb) or bin midpoint (depth).
inline Rgb sample_weight(const RaySampleBatch& batch, std::size_t i, RenderTarget target) {
  return target == RenderTarget::rgb ? batch.samples[i].color_mean
                                     : Rgb::Constant(batch.midpoints[i]);
}

/// Deterministic front-to-back alpha compositing of the density means.
RenderOutput composite(const RaySampleBatch& batch, const CompositeOptions& options);

/// Gradient of <upstream, composite(batch).value> with respect to each sample's
/// density and color means (raw, unnormalized value).
std::vector<FieldSampleGrad> composite_backward(const RaySampleBatch& batch,
                                                const CompositeOptions& options,
                                                const RenderOutput& forward, const Rgb& upstream);

/// Chain rule from per-sample alpha gradients to density gradients, where
/// alpha_i = T_i (1 - exp(-delta_i rho_i)) and T_i = exp(-sum_{j<i} delta_j rho_j).
void backprop_alpha(std::span<const double> deltas, const RenderOutput& forward,
                    std::span<const double> d_alpha, std::span<double> d_density);

}  // namespace bnerf
