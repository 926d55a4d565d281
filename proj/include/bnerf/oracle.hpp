#pragma once

#include "bnerf/uncertainty.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace bnerf {

/// Which per-sample quantities the Monte Carlo oracle treats as random.
enum class DrawSpec { density, color, both, occupancy_frozen_T };

std::string_view to_string(DrawSpec spec);

struct NormalityStats {
  double mean = 0.0;
  double variance = 0.0;  // unbiased
  double skewness = 0.0;
  double excess_kurtosis = 0.0;
  double jarque_bera = 0.0;
  double p_value = 1.0;  // chi-square(2) tail of the Jarque-Bera statistic
};

NormalityStats describe(std::span<const double> values);

struct MonteCarloReport {
  double empirical_mean = 0.0;
  double empirical_variance = 0.0;
  double predicted_mean = 0.0;
  double predicted_variance = 0.0;
  double relative_mean_error = 0.0;
  double relative_variance_error = 0.0;
  double skewness = 0.0;
  double excess_kurtosis = 0.0;
  double normality_p_value = 1.0;
  double truncated_fraction = 0.0;
  std::size_t n_draws = 0;
  std::uint64_t seed = 0;
};

inline constexpr std::size_t kMinDraws = 10000;
inline constexpr double kRelativeEpsilon = 1e-12;

inline double relative_difference(double empirical, double predicted) {
  return std::abs(empirical - predicted) / std::max(std::abs(empirical), kRelativeEpsilon);
}

struct McOptions {
  RenderTarget target = RenderTarget::rgb;
  int channel = 0;
  Rgb background = Rgb::Zero();
};

/// Draws the selected variables from their per-sample Gaussians (negative
/// density draws clamp to 0 and are counted), renders each draw exactly, and
/// compares the empirical moments with the matching propagate_* prediction.
/// Throws InvalidArgument for n_draws < kMinDraws.
MonteCarloReport mc_render_distribution(const RaySampleBatch& batch, DrawSpec spec, std::size_t n_draws,
                                        std::uint64_t seed, const McOptions& options = {});

/// Moments of ln T_i (1-based i >= 2) under Gaussian densities against
/// mean -sum_{j<i} delta_j mu_j and variance sum_{j<i} delta_j^2 sigma_j^2.
/// Draws are not clamped; truncated_fraction reports the negative-density share.
MonteCarloReport lognormal_check(const RaySampleBatch& batch, std::size_t i, std::size_t n_draws,
                                 std::uint64_t seed);

/// Draws of alpha_i = T_i - T_{i+1} (1-based i) under Gaussian densities.
std::vector<double> sample_alpha(const RaySampleBatch& batch, std::size_t i, std::size_t n_draws,
                                 std::uint64_t seed);

// ---------------------------------------------------------------------------
// Finite differences

/// Per sample: density mean, density spread, color mean (3), color spread (3).
inline constexpr int kEntriesPerSample = 8;
std::vector<double> flatten_samples(const RaySampleBatch& batch);
void unflatten_samples(std::span<const double> values, RaySampleBatch& batch);
std::vector<double> flatten_grads(std::span<const FieldSampleGrad> grads);

enum class GradientFunction {
  composite_rgb,      // <u, composite value>, u random from the seed
  composite_depth,
  color_mean,         // <u, propagate_color mean> w.r.t. color means only (linear)
  loss,               // ray_loss(mode)
};

enum class FdTransmittance { recompute, freeze_at_base };

/// Central stencils: 2 points (error O(h^2)) or 4 points (error O(h^4)).
enum class FdStencil { second_order, fourth_order };

struct FdCase {
  GradientFunction function = GradientFunction::loss;
  LossMode mode = LossMode::baseline;
  RaySampleBatch batch;
  Rgb target = Rgb::Zero();
  LossOptions options;
  /// Occupancy modes: how the finite-difference side treats T.
  FdTransmittance fd_transmittance = FdTransmittance::recompute;
  FdStencil stencil = FdStencil::fourth_order;
};

struct FdResult {
  double max_relative_error = 0.0;
  std::size_t worst_coordinate = 0;
  std::size_t coordinates = 0;
};

/// Central differences per input coordinate against the analytic gradient;
/// relative error uses the floor max(|analytic|, 1e-6).
FdResult fd_gradient_check(const FdCase& fd_case, double step, std::uint64_t seed);

}  // namespace bnerf
