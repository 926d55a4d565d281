#pragma once

#include "bnerf/image.hpp"

#include <optional>
#include <stdexcept>
#include <vector>

namespace bnerf {

struct UndefinedMetric : std::domain_error {
  using std::domain_error::domain_error;
};

inline constexpr double kPsnrCap = 100.0;
inline constexpr double kDepthClamp = 1e-6;

/// 10 log10(1 / MSE) over all pixels and channels, capped at kPsnrCap.
double psnr(const Image& pred, const Image& gt);

struct SsimOptions {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double data_range = 1.0;
};

/// Mean local SSIM with a Gaussian window over the valid region (no padding),
/// averaged over channels. Population (biased) local covariances.
double ssim(const Image& pred, const Image& gt, const SsimOptions& options = {});

struct DepthMetrics {
  double absrel = 0.0;
  double rmse_log = 0.0;
  double log10_err = 0.0;
  double delta1 = 0.0;
  double delta2 = 0.0;
  double delta3 = 0.0;
  std::size_t n_valid = 0;
};

/// Metrics over pixels with gt > 0 (and mask set, when given). Predictions are
/// clamped to kDepthClamp before logs. Throws UndefinedMetric on an empty mask.
DepthMetrics depth_metrics(const Image& pred, const Image& gt, const std::vector<bool>* mask = nullptr);

struct MetricReport {
  std::optional<double> psnr;
  std::optional<double> ssim;
  std::optional<DepthMetrics> depth;
};

}  // namespace bnerf
