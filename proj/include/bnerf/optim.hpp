#pragma once

#include "bnerf/data.hpp"
#include "bnerf/field.hpp"
#include "bnerf/uncertainty.hpp"

#include <json.hpp>

#include <filesystem>
#include <functional>
#include <span>
#include <vector>

namespace bnerf {

struct TrainConfig {
  int iterations = 20000;
  int batch_rays = 1024;
  double learning_rate = 5e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  int warmup_iterations = 2000;
  LossMode loss_mode = LossMode::baseline;
  std::uint64_t seed = 0;
  int n_samples = 64;
  Rgb background = Rgb::Zero();
  bool normalized_depth = false;
  bool gradient_through_T = false;
  bool early_termination = false;
  GridResolution resolution{32, 32, 32};
  DensityActivation density_activation = DensityActivation::sigmoid;
  bool sample_without_replacement = false;
  /// When an occupancy mode takes over from warmup, convert the density slot
  /// to per-segment occupancy (density_to_occupancy with the mean bin length)
  /// and restart the Adam moments.
  bool occupancy_handoff = true;
  /// Raw (pre-activation) density every cell starts from.
  double initial_density_raw = UncertainField::kInitDensityRaw;
  int checkpoint_every = 0;  // 0 disables
  std::filesystem::path out_dir;

  /// Throws InvalidArgument when an invariant is broken.
  void validate() const;
};

nlohmann::json to_json(const TrainConfig& config);

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::int64_t step = 0;

  explicit AdamState(std::size_t n = 0) : m(n, 0.0), v(n, 0.0) {}
};

/// One bias-corrected Adam update of `params` in place.
void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state, double learning_rate,
               double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

/// Posed target images, one channel per depth image and three per RGB image.
struct TrainingSet {
  RenderTarget kind = RenderTarget::rgb;
  std::vector<Camera> cameras;
  std::vector<Image> targets;

  std::size_t pixel_count() const;
};

/// Training frames of `dataset` as RGB or depth targets.
TrainingSet make_training_set(const Dataset& dataset, RenderTarget kind);

struct RayTarget {
  Ray ray;
  Rgb target = Rgb::Zero();
  std::uint32_t image = 0;
  std::uint32_t pixel = 0;  // row-major
  double t_near = 0.0;
  double t_far = 1.0;
};

/// Uniform draws over all pixels of all images. Without replacement the
/// batch must not exceed the pixel count.
std::vector<RayTarget> select_ray_batch(const TrainingSet& set, int batch_rays, StreamRng& rng,
                                        bool without_replacement = false);

struct LogRow {
  int iteration = 0;
  double loss = 0.0;
  double psnr_train = 0.0;
  double wall_ms = 0.0;
};

inline constexpr int kGuardWindow = 200;
inline constexpr int kGuardReferenceIterations = 100;
inline constexpr double kGuardFactor = 10.0;

/// Post-warmup divergence detector. The reference is the mean of the first
/// kGuardReferenceIterations losses; it fires once, after kGuardWindow
/// consecutive losses above reference + (kGuardFactor - 1) |reference|
/// (the NLL can be negative, so a plain ratio is meaningless).
class DivergenceGuard {
 public:
  /// True exactly once, on the iteration the guard fires.
  bool observe(double loss);
  bool armed() const { return count_ >= kGuardReferenceIterations; }
  bool fired() const { return fired_; }
  double reference() const { return reference_; }

 private:
  double sum_ = 0.0;
  int count_ = 0;
  double reference_ = 0.0;
  int streak_ = 0;
  bool fired_ = false;
};

struct TrainState {
  UncertainField field;
  AdamState adam;
  int iteration = 0;
  double learning_rate = 0.0;
  DivergenceGuard guard;
  std::size_t rejected_rays = 0;  // non-finite targets
  std::vector<LogRow> log;
};

/// Thrown when a loss or parameter becomes non-finite.
struct TrainingDiverged : std::runtime_error {
  int iteration = 0;
  std::vector<std::uint32_t> rays;  // image * pixel_count_per_image + pixel
  TrainingDiverged(const std::string& what, int it, std::vector<std::uint32_t> r)
      : std::runtime_error(what), iteration(it), rays(std::move(r)) {}
};

TrainState initial_state(const TrainConfig& config, const Aabb& bounds);

/// Runs config.iterations steps. Baseline loss is used before
/// warmup_iterations, then config.loss_mode. Deterministic given the seed.
TrainState train(const TrainConfig& config, const TrainingSet& set, const Aabb& bounds);

/// Training log as CSV (iteration, loss, psnr_train, wall_ms).
void write_log_csv(const std::filesystem::path& path, const std::vector<LogRow>& log, bool with_timing = true);

struct RenderedView {
  Image value;     // mode's predicted mean
  Image variance;  // floored propagated variance
  Image opacity;
};

struct ViewOptions {
  LossMode mode = LossMode::baseline;
  RenderTarget target = RenderTarget::rgb;
  int n_samples = 64;
  Rgb background = Rgb::Zero();
  bool normalized_depth = false;
};

/// Renders every pixel with unjittered bin-center samples.
RenderedView render_view(const UncertainField& field, const Camera& camera, const ViewOptions& options);

}  // namespace bnerf
