#include "bnerf/render.hpp"

#include <Eigen/LU>

#include <string>

namespace bnerf {

void Camera::validate() const {
  if (!(far > near && near > 0.0)) {
    throw InvalidArgument("camera bounds must satisfy far > near > 0");
  }
  if (intrinsics.width < 1 || intrinsics.height < 1 || !(intrinsics.focal > 0.0)) {
    throw InvalidArgument("camera intrinsics must have positive size and focal length");
  }
  const Eigen::Matrix3d r = world_from_camera.linear();
  if (((r.transpose() * r) - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() > 1e-9) {
    throw InvalidArgument("camera rotation is not orthonormal");
  }
  if (std::abs(r.determinant() - 1.0) > 1e-9) {
    throw InvalidArgument("camera rotation must be proper (det = +1)");
  }
}

Camera look_at(const Vec3& eye, const Vec3& target, const Vec3& up, const Intrinsics& intrinsics,
               double near, double far) {
  const Vec3 back = (eye - target).normalized();  // camera +z points away from the target
  const Vec3 right = up.cross(back).normalized();
  const Vec3 cam_up = back.cross(right);
  Camera cam;
  cam.intrinsics = intrinsics;
  Eigen::Matrix3d r;
  r.col(0) = right;
  r.col(1) = cam_up;
  r.col(2) = back;
  cam.world_from_camera.linear() = r;
  cam.world_from_camera.translation() = eye;
  cam.near = near;
  cam.far = far;
  return cam;
}

Ray generate_ray(const Camera& camera, PixelCoord pixel) {
  const auto& k = camera.intrinsics;
  const Vec3 d_cam((pixel.x - k.cx) / k.focal, -(pixel.y - k.cy) / k.focal, -1.0);
  Ray ray;
  ray.origin = camera.center();
  ray.direction = (camera.world_from_camera.linear() * d_cam).normalized();
  return ray;
}

std::vector<Ray> generate_rays(const Camera& camera, std::span<const PixelCoord> pixels) {
  std::vector<Ray> rays;
  rays.reserve(pixels.size());
  for (const auto& p : pixels) {
    if (p.x < 0.0 || p.y < 0.0 || p.x > camera.intrinsics.width || p.y > camera.intrinsics.height) {
      throw InvalidArgument("pixel outside the image");
    }
    rays.push_back(generate_ray(camera, p));
  }
  return rays;
}

PixelCoord project_direction(const Camera& camera, const Vec3& direction) {
  const Vec3 d = camera.world_from_camera.linear().transpose() * direction;
  const auto& k = camera.intrinsics;
  const double depth = -d.z();
  return {k.cx + k.focal * d.x() / depth, k.cy - k.focal * d.y() / depth};
}

RaySampleBatch RaySampleBatch::from_edges(std::vector<double> t_edges, const Ray& ray) {
  if (t_edges.size() < 2) throw InvalidArgument("a ray batch needs at least two bin edges");
  RaySampleBatch b;
  b.origin = ray.origin;
  b.direction = ray.direction;
  const std::size_t n = t_edges.size() - 1;
  b.deltas.resize(n);
  b.midpoints.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    b.deltas[i] = t_edges[i + 1] - t_edges[i];
    b.midpoints[i] = 0.5 * (t_edges[i + 1] + t_edges[i]);
  }
  b.sample_t = b.midpoints;
  b.t_edges = std::move(t_edges);
  b.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    b.samples[i] = vacuum_sample(b.origin + b.sample_t[i] * b.direction);
  }
  return b;
}

RaySampleBatch stratified_sample(const Ray& ray, double t_near, double t_far, int n_samples,
                                 std::uint64_t seed, bool jitter) {
  if (n_samples < 1) throw InvalidArgument("stratified_sample requires at least one sample");
  if (!(t_far > t_near)) throw InvalidArgument("stratified_sample requires t_far > t_near");
  std::vector<double> edges(n_samples + 1);
  const double width = (t_far - t_near) / n_samples;
  for (int i = 0; i <= n_samples; ++i) edges[i] = t_near + width * i;
  edges[n_samples] = t_far;
  RaySampleBatch b = RaySampleBatch::from_edges(std::move(edges), ray);
  if (jitter) {
    StreamRng rng(seed);
    for (int i = 0; i < n_samples; ++i) {
      b.sample_t[i] = b.t_edges[i] + rng.uniform() * b.deltas[i];
      b.samples[i].position = b.origin + b.sample_t[i] * b.direction;
    }
  }
  return b;
}

void populate_samples(RaySampleBatch& batch, const UncertainField& field) {
  populate_samples(batch, [&](const Vec3& p) { return sample_field(field, p); });
}

void populate_samples(RaySampleBatch& batch, const ActivatedField& field) {
  populate_samples(batch, [&](const Vec3& p) { return field.sample(p); });
}

RenderOutput composite(const RaySampleBatch& batch, const CompositeOptions& options) {
  const std::size_t n = batch.size();
  RenderOutput out;
  out.channels = channel_count(options.target);
  out.alpha.resize(n);
  out.transmittance.resize(n);
  out.live_samples = n;
  double transmittance = 1.0;
  double opacity = 0.0;
  bool terminated = false;
  Rgb value = Rgb::Zero();
  for (std::size_t i = 0; i < n; ++i) {
    out.transmittance[i] = transmittance;
    if (!terminated && options.early_termination && transmittance < options.termination_threshold) {
      terminated = true;
      out.live_samples = i;
    }
    if (terminated) {
      out.alpha[i] = 0.0;
      continue;
    }
    const double s = batch.deltas[i] * batch.samples[i].density_mean;
    const double a = -transmittance * std::expm1(-s);
    out.alpha[i] = a;
    opacity += a;
    value += a * sample_weight(batch, i, options.target);
    transmittance *= std::exp(-s);
  }
  out.final_transmittance = transmittance;
  out.opacity = opacity;
  if (options.target == RenderTarget::rgb) {
    value += (1.0 - opacity) * options.background;
  } else {
    if (options.normalized_depth && opacity > 1e-12) value[0] /= opacity;
    value[1] = value[2] = 0.0;
  }
  out.value = value;
  return out;
}

void backprop_alpha(std::span<const double> deltas, const RenderOutput& forward,
                    std::span<const double> d_alpha, std::span<double> d_density) {
  const std::size_t n = deltas.size();
  double downstream = 0.0;  // sum_{i>k} alpha_i dL/dalpha_i
  for (std::size_t k = n; k-- > 0;) {
    const double t_next = k + 1 < n ? forward.transmittance[k + 1] : forward.final_transmittance;
    // Samples zeroed by early termination are constants.
    const bool live = k < forward.live_samples;
    d_density[k] = live ? deltas[k] * (t_next * d_alpha[k] - downstream) : 0.0;
    downstream += forward.alpha[k] * d_alpha[k];
  }
}

std::vector<FieldSampleGrad> composite_backward(const RaySampleBatch& batch,
                                                const CompositeOptions& options,
                                                const RenderOutput& forward, const Rgb& upstream) {
  const std::size_t n = batch.size();
  std::vector<FieldSampleGrad> grads(n);
  std::vector<double> d_alpha(n);
  std::vector<double> d_density(n);
  const bool rgb = options.target == RenderTarget::rgb;
  for (std::size_t i = 0; i < n; ++i) {
    if (rgb) {
      d_alpha[i] = (upstream * (batch.samples[i].color_mean - options.background)).sum();
      grads[i].color_mean = forward.alpha[i] * upstream;
    } else {
      d_alpha[i] = upstream[0] * batch.midpoints[i];
    }
  }
  backprop_alpha(batch.deltas, forward, d_alpha, d_density);
  for (std::size_t i = 0; i < n; ++i) grads[i].density_mean = d_density[i];
  return grads;
}

}  // namespace bnerf
