#pragma once

#include "bnerf/render.hpp"

#include <array>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

namespace bnerf {

struct GaussianMoment {
  double mean = 0.0;
  double variance = 0.0;
};

/// Training objectives. RGB/depth pairs share one formula family and differ in
/// the per-sample weight (color mean vs bin midpoint).
enum class LossMode {
  baseline,
  color,
  density_rgb,
  density_depth,
  color_density,
  occupancy_rgb,
  occupancy_depth,
};

inline constexpr std::array<LossMode, 7> kAllLossModes{
    LossMode::baseline,      LossMode::color,         LossMode::density_rgb,    LossMode::density_depth,
    LossMode::color_density, LossMode::occupancy_rgb, LossMode::occupancy_depth};

std::string_view to_string(LossMode mode);
/// Accepts the lower snake case names; throws InvalidArgument otherwise.
LossMode parse_loss_mode(std::string_view name);

bool supports_target(LossMode mode, RenderTarget target);
/// Target a mode trains against; baseline has none of its own.
std::optional<RenderTarget> required_target(LossMode mode);
inline bool is_occupancy(LossMode m) {
  return m == LossMode::occupancy_rgb || m == LossMode::occupancy_depth;
}

/// Per-channel Gaussian prediction for one ray. `variance` is floored at
/// kVarianceFloor; `raw_variance` is the propagated value before flooring.
struct ChannelMoments {
  Rgb mean = Rgb::Zero();
  Rgb variance = Rgb::Constant(kVarianceFloor);
  Rgb raw_variance = Rgb::Zero();
  int channels = 3;

  GaussianMoment channel(int c) const { return {mean[c], variance[c]}; }
};

/// Color treated as Gaussian, alpha taken from the deterministic composite.
/// mean = sum mu_c alpha (+ background residual), variance = sum sigma_c^2 alpha^2.
ChannelMoments propagate_color(const RaySampleBatch& batch, const RenderOutput& forward,
                               const Rgb& background = Rgb::Zero());

/// Density treated as Gaussian under alpha_i ~ delta_i rho_i.
/// mean = sum w delta mu, variance = sum w^2 delta^2 sigma^2 with w = color mean or midpoint.
ChannelMoments propagate_density_linearized(const RaySampleBatch& batch, RenderTarget target);

/// Density and color both Gaussian; product moments under the linearized alpha.
ChannelMoments propagate_color_density(const RaySampleBatch& batch);

/// Occupancy o_i ~ N(mu_o, sigma_o^2) with transmittance held fixed:
/// T_{i+1} = T_i (1 - mu_o_i); mean = sum w T mu_o (+ background), variance = sum w^2 T^2 sigma_o^2.
/// `frozen_transmittance` (N+1 values) replaces the T computed from the means.
ChannelMoments propagate_occupancy(const RaySampleBatch& batch, RenderTarget target,
                                   const Rgb& background = Rgb::Zero(),
                                   std::span<const double> frozen_transmittance = {});

/// Transmittance T_1..T_{N+1} implied by occupancy means.
std::vector<double> occupancy_transmittance(const RaySampleBatch& batch);

/// ln(variance) + (target - mean)^2 / variance.
double nll_loss(const GaussianMoment& predicted, double target);
double nll_loss(const ChannelMoments& predicted, const Rgb& target);

struct LossOptions {
  RenderTarget target = RenderTarget::rgb;
  Rgb background = Rgb::Zero();
  /// Occupancy modes: differentiate through T instead of holding it constant.
  bool gradient_through_T = false;
  /// Occupancy modes: use these T_1..T_{N+1} instead of recomputing them.
  std::span<const double> frozen_transmittance = {};
  bool early_termination = false;
};

struct RayLoss {
  double loss = 0.0;
  ChannelMoments prediction;
  std::vector<FieldSampleGrad> grads;  // empty unless requested
};

/// Loss of one ray for `mode`, and optionally its gradient with respect to
/// every FieldSample entry on the ray. Throws InvalidArgument when the mode
/// cannot train against options.target.
RayLoss ray_loss(LossMode mode, const RaySampleBatch& batch, const Rgb& target,
                 const LossOptions& options, bool with_grad = true);

/// Squared error between the deterministic composite and the target, summed
/// over channels.
double baseline_loss(const RaySampleBatch& batch, const Rgb& target, const CompositeOptions& options);

/// The value a trained field reports for `mode`: the mode's predicted mean and
/// floored variance (baseline: composite and kVarianceFloor).
RenderOutput predict(LossMode mode, const RaySampleBatch& batch, const CompositeOptions& options);

}  // namespace bnerf
