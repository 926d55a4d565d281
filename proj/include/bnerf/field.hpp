#pragma once

#include "bnerf/common.hpp"

#include <array>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

namespace bnerf {

enum class ActivationKind { density, spread, color };
enum class DensityActivation { sigmoid, softplus };

double activate(double raw, ActivationKind kind,
                DensityActivation density_act = DensityActivation::sigmoid);
/// d activate / d raw.
double activate_derivative(double raw, ActivationKind kind,
                           DensityActivation density_act = DensityActivation::sigmoid);
/// Inverse of activate; values outside the range are clamped just inside it.
double deactivate(double value, ActivationKind kind,
                  DensityActivation density_act = DensityActivation::sigmoid);

struct Aabb {
  Vec3 min = Vec3::Constant(-1.0);
  Vec3 max = Vec3::Constant(1.0);

  bool contains(const Vec3& p) const {
    return (p.array() >= min.array()).all() && (p.array() <= max.array()).all();
  }
  Vec3 extent() const { return max - min; }
};

using GridResolution = std::array<int, 3>;

/// Activated Gaussian parameters at one point. `density_*` holds the density
/// moments in density modes and the occupancy moments in occupancy modes.
struct FieldSample {
  Vec3 position = Vec3::Zero();
  double density_mean = 0.0;
  double density_spread = kSigmaFloor;
  Rgb color_mean = Rgb::Zero();
  Rgb color_spread = Rgb::Constant(kSigmaFloor);
};

/// Gradient with the same shape as FieldSample (position excluded).
struct FieldSampleGrad {
  double density_mean = 0.0;
  double density_spread = 0.0;
  Rgb color_mean = Rgb::Zero();
  Rgb color_spread = Rgb::Zero();

  FieldSampleGrad& operator+=(const FieldSampleGrad& o) {
    density_mean += o.density_mean;
    density_spread += o.density_spread;
    color_mean += o.color_mean;
    color_spread += o.color_spread;
    return *this;
  }
};

/// Value used for samples that fall outside the field bounds.
FieldSample vacuum_sample(const Vec3& position);

/// Per-cell parameter slots, interleaved per cell.
enum Channel : int {
  kDensity = 0,
  kDensitySpread = 1,
  kColor = 2,        // 2, 3, 4
  kColorSpread = 5,  // 5, 6, 7
  kChannels = 8,
};

ActivationKind channel_activation(int channel);

class UncertainField {
 public:
  static constexpr double kInitDensityRaw = -2.0;
  static constexpr double kInitSpreadRaw = -2.0;
  static constexpr double kInitColorRaw = 0.0;

  UncertainField(GridResolution resolution, Aabb bounds,
                 DensityActivation density_act = DensityActivation::sigmoid);

  const GridResolution& resolution() const { return resolution_; }
  const Aabb& bounds() const { return bounds_; }
  DensityActivation density_activation() const { return density_act_; }
  std::size_t cell_count() const { return cell_count_; }
  Vec3 cell_size() const;
  Vec3 cell_center(int ix, int iy, int iz) const;

  std::size_t cell_index(int ix, int iy, int iz) const {
    return (static_cast<std::size_t>(ix) * resolution_[1] + iy) * resolution_[2] + iz;
  }

  double& raw(std::size_t cell, int channel) { return params_[cell * kChannels + channel]; }
  double raw(std::size_t cell, int channel) const { return params_[cell * kChannels + channel]; }

  std::span<double> params() { return params_; }
  std::span<const double> params() const { return params_; }

  double activated(std::size_t cell, int channel) const;

 private:
  GridResolution resolution_;
  Aabb bounds_;
  DensityActivation density_act_;
  std::size_t cell_count_;
  std::vector<double> params_;
};

/// The 8 cells surrounding a point and their trilinear weights.
struct TrilinearStencil {
  std::array<std::size_t, 8> cells{};
  std::array<double, 8> weights{};
};

/// Empty when the point lies outside the field bounds. Points between the
/// boundary and the outermost cell centers clamp to the edge cells.
std::optional<TrilinearStencil> trilinear_stencil(const GridResolution& resolution,
                                                  const Aabb& bounds, const Vec3& position);

/// Activated, interpolated parameters; empty when outside the bounds.
std::optional<FieldSample> sample_field(const UncertainField& field, const Vec3& position);

/// Adds the raw-parameter gradient of one sample to `raw_grad` (same layout as
/// field.params()). Points outside the bounds contribute nothing.
void accumulate_field_gradient(const UncertainField& field, const Vec3& position,
                               const FieldSampleGrad& upstream, std::span<double> raw_grad);

/// Snapshot with all cells activated once; used for many lookups
/// against the same parameters.
class ActivatedField {
 public:
  explicit ActivatedField(const UncertainField& field);

  std::optional<FieldSample> sample(const Vec3& position) const;
  std::optional<TrilinearStencil> stencil(const Vec3& position) const {
    return trilinear_stencil(resolution_, bounds_, position);
  }
  const GridResolution& resolution() const { return resolution_; }
  const Aabb& bounds() const { return bounds_; }
  /// Activated values in params() layout; writable so an optimizer can refresh
  /// single entries after an update.
  std::span<double> values() { return values_; }

 private:
  GridResolution resolution_;
  Aabb bounds_;
  std::vector<double> values_;
};

/// Scatters a sample gradient onto activated-space cell gradients.
void scatter_activated_gradient(const TrilinearStencil& stencil, const FieldSampleGrad& upstream,
                                std::span<double> activated_grad);

/// Converts activated-space cell gradients into raw-parameter gradients.
void chain_activation(const UncertainField& field, std::span<const double> activated_grad,
                      std::span<double> raw_grad);

/// Reinterprets every cell's density moments (per unit length) as the occupancy
/// moments of one segment of length `delta`: mu_o = 1 - exp(-delta mu) and
/// sigma_o = delta exp(-delta mu) sigma. The field must use sigmoid density.
void density_to_occupancy(UncertainField& field, double delta);

// Checkpoint I/O: "BNRF" magic, u32 version, resolution, bounds, four raw float32 arrays.
inline constexpr std::uint32_t kCheckpointVersion = 1;
void save_checkpoint(const UncertainField& field, const std::filesystem::path& path);
UncertainField load_checkpoint(const std::filesystem::path& path,
                               DensityActivation density_act = DensityActivation::sigmoid);

}  // namespace bnerf
