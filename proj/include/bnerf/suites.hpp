#pragma once

#include "bnerf/oracle.hpp"

#include <json.hpp>

#include <optional>
#include <string>
#include <vector>

namespace bnerf {

/// Random ray with `n` bins of random widths and random per-sample moments.
RaySampleBatch random_ray(StreamRng& rng, int n, double density_hi = 1.0);

/// Random ray whose per-sample delta * mu lies in [dmu_lo, dmu_hi] and sigma = mu / ratio.
RaySampleBatch regime_ray(StreamRng& rng, int n, double dmu_lo, double dmu_hi, double ratio);

/// Largest total optical depth sum delta mu of the moment suite's
/// approximation-regime rays.
inline constexpr double kRegimeOpticalDepth = 0.01;

enum class Comparison { below, above };

struct SuiteCheck {
  std::string suite;
  std::string name;
  double value = 0.0;
  Comparison comparison = Comparison::below;
  double tolerance = 0.0;
  bool passed = false;
  nlohmann::json detail;
};

struct SuiteOptions {
  std::uint64_t seed = 0;
  std::size_t n_draws = 1'000'000;
  int rays = 100;
  int samples = 16;
  /// Replaces every check's default threshold.
  std::optional<double> tolerance;
  /// Restricts the gradients suite to one loss mode.
  std::optional<LossMode> mode;
};

/// "moments", "gradients", "lognormal", "breakdown".
const std::vector<std::string>& suite_names();

/// Runs one named suite; throws InvalidArgument for an unknown name.
std::vector<SuiteCheck> run_suite(const std::string& name, const SuiteOptions& options);

nlohmann::json to_json(const MonteCarloReport& report);
nlohmann::json to_json(const SuiteCheck& check);

}  // namespace bnerf
