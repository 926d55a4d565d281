#include "bnerf/metrics.hpp"

#include <algorithm>

namespace bnerf {

namespace {

void require_same_shape(const Image& a, const Image& b) {
  if (!a.same_shape(b)) throw InvalidArgument("image shapes differ");
  if (a.data.empty()) throw InvalidArgument("empty image");
}

std::vector<double> gaussian_kernel(int size, double sigma) {
  std::vector<double> k(size);
  const double c = 0.5 * (size - 1);
  double sum = 0.0;
  for (int i = 0; i < size; ++i) {
    k[i] = std::exp(-0.5 * (i - c) * (i - c) / (sigma * sigma));
    sum += k[i];
  }
  for (double& v : k) v /= sum;
  return k;
}

// Separable valid-mode filter of one channel plane.
std::vector<double> filter_valid(const std::vector<double>& plane, int w, int h, const std::vector<double>& k) {
  const int n = static_cast<int>(k.size());
  const int ow = w - n + 1, oh = h - n + 1;
  std::vector<double> tmp(static_cast<std::size_t>(ow) * h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < ow; ++x) {
      double s = 0.0;
      for (int i = 0; i < n; ++i) s += k[i] * plane[static_cast<std::size_t>(y) * w + x + i];
      tmp[static_cast<std::size_t>(y) * ow + x] = s;
    }
  std::vector<double> out(static_cast<std::size_t>(ow) * oh);
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x) {
      double s = 0.0;
      for (int i = 0; i < n; ++i) s += k[i] * tmp[static_cast<std::size_t>(y + i) * ow + x];
      out[static_cast<std::size_t>(y) * ow + x] = s;
    }
  return out;
}

}  // namespace

double psnr(const Image& pred, const Image& gt) {
  require_same_shape(pred, gt);
  double se = 0.0;
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    const double d = pred.data[i] - gt.data[i];
    se += d * d;
  }
  const double mse = se / static_cast<double>(pred.data.size());
  if (mse <= 0.0) return kPsnrCap;
  return std::min(kPsnrCap, -10.0 * std::log10(mse));
}

double ssim(const Image& pred, const Image& gt, const SsimOptions& o) {
  require_same_shape(pred, gt);
  if (o.window < 1 || o.window % 2 == 0) throw InvalidArgument("SSIM window must be odd");
  if (pred.width < o.window || pred.height < o.window) throw InvalidArgument("image smaller than SSIM window");
  const auto k = gaussian_kernel(o.window, o.sigma);
  const double c1 = (o.k1 * o.data_range) * (o.k1 * o.data_range);
  const double c2 = (o.k2 * o.data_range) * (o.k2 * o.data_range);
  const int w = pred.width, h = pred.height;
  const std::size_t n = pred.pixel_count();

  double total = 0.0;
  for (int c = 0; c < pred.channels; ++c) {
    std::vector<double> x(n), y(n), xx(n), yy(n), xy(n);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = pred.data[i * pred.channels + c];
      y[i] = gt.data[i * gt.channels + c];
      xx[i] = x[i] * x[i];
      yy[i] = y[i] * y[i];
      xy[i] = x[i] * y[i];
    }
    const auto mx = filter_valid(x, w, h, k), my = filter_valid(y, w, h, k);
    const auto mxx = filter_valid(xx, w, h, k), myy = filter_valid(yy, w, h, k), mxy = filter_valid(xy, w, h, k);
    double sum = 0.0;
    for (std::size_t i = 0; i < mx.size(); ++i) {
      const double vx = mxx[i] - mx[i] * mx[i];
      const double vy = myy[i] - my[i] * my[i];
      const double cov = mxy[i] - mx[i] * my[i];
      sum += ((2 * mx[i] * my[i] + c1) * (2 * cov + c2)) /
             ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
    }
    total += sum / static_cast<double>(mx.size());
  }
  return total / pred.channels;
}

DepthMetrics depth_metrics(const Image& pred, const Image& gt, const std::vector<bool>* mask) {
  require_same_shape(pred, gt);
  if (gt.channels != 1) throw InvalidArgument("depth images must have one channel");
  if (mask && mask->size() != gt.pixel_count()) throw InvalidArgument("mask size mismatch");
  DepthMetrics m;
  double abs_rel = 0.0, sq_log = 0.0, l10 = 0.0;
  std::size_t d1 = 0, d2 = 0, d3 = 0;
  for (std::size_t i = 0; i < gt.data.size(); ++i) {
    const double g = gt.data[i];
    if (!(g > 0.0) || (mask && !(*mask)[i])) continue;
    const double p = std::max(pred.data[i], kDepthClamp);
    ++m.n_valid;
    abs_rel += std::abs(p - g) / g;
    const double dl = std::log(p) - std::log(g);
    sq_log += dl * dl;
    l10 += std::abs(std::log10(p) - std::log10(g));
    const double ratio = std::max(p / g, g / p);
    d1 += ratio < 1.25;
    d2 += ratio < 1.25 * 1.25;
    d3 += ratio < 1.25 * 1.25 * 1.25;
  }
  if (m.n_valid == 0) throw UndefinedMetric("no valid depth pixels");
  const double n = static_cast<double>(m.n_valid);
  m.absrel = abs_rel / n;
  m.rmse_log = std::sqrt(sq_log / n);
  m.log10_err = l10 / n;
  m.delta1 = d1 / n;
  m.delta2 = d2 / n;
  m.delta3 = d3 / n;
  return m;
}

}  // namespace bnerf
