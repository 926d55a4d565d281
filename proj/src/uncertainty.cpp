#include "bnerf/uncertainty.hpp"

#include <algorithm>
#include <string>

namespace bnerf {

namespace {

constexpr std::array<std::string_view, 7> kModeNames{
    "baseline", "color", "density_rgb", "density_depth", "color_density", "occupancy_rgb", "occupancy_depth"};

void floor_moments(ChannelMoments& m) {
  for (int c = 0; c < 3; ++c) {
    m.variance[c] = c < m.channels ? std::max(m.raw_variance[c], kVarianceFloor) : kVarianceFloor;
  }
}

// Weight of sample i in channel c.
double weight(const RaySampleBatch& b, std::size_t i, int c, RenderTarget target) {
  return target == RenderTarget::rgb ? b.samples[i].color_mean[c] : b.midpoints[i];
}

// dL/dmean and dL/dvariance of the summed NLL, per channel.
struct NllGrad {
  Rgb d_mean = Rgb::Zero();
  Rgb d_var = Rgb::Zero();
};

double nll_with_grad(const ChannelMoments& p, const Rgb& target, NllGrad* grad) {
  double loss = 0.0;
  for (int c = 0; c < p.channels; ++c) {
    const double v = p.variance[c];
    const double r = target[c] - p.mean[c];
    loss += std::log(v) + r * r / v;
    if (grad) {
      grad->d_mean[c] = -2.0 * r / v;
      // The floor is a constant below the threshold.
      grad->d_var[c] = p.raw_variance[c] >= kVarianceFloor ? 1.0 / v - r * r / (v * v) : 0.0;
    }
  }
  return loss;
}

}  // namespace

std::string_view to_string(LossMode mode) { return kModeNames[static_cast<int>(mode)]; }

LossMode parse_loss_mode(std::string_view name) {
  for (std::size_t i = 0; i < kModeNames.size(); ++i) {
    if (kModeNames[i] == name) return static_cast<LossMode>(i);
  }
  throw InvalidArgument("unknown loss mode '" + std::string(name) + "'");
}

std::optional<RenderTarget> required_target(LossMode mode) {
  switch (mode) {
    case LossMode::baseline:
      return std::nullopt;
    case LossMode::density_depth:
    case LossMode::occupancy_depth:
      return RenderTarget::depth;
    default:
      return RenderTarget::rgb;
  }
}

bool supports_target(LossMode mode, RenderTarget target) {
  const auto req = required_target(mode);
  return !req || *req == target;
}

ChannelMoments propagate_color(const RaySampleBatch& batch, const RenderOutput& forward,
                               const Rgb& background) {
  ChannelMoments m;
  m.channels = 3;
  double opacity = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const double a = forward.alpha[i];
    const auto& s = batch.samples[i];
    m.mean += a * s.color_mean;
    m.raw_variance += a * a * s.color_spread.square();
    opacity += a;
  }
  m.mean += (1.0 - opacity) * background;
  floor_moments(m);
  return m;
}

ChannelMoments propagate_density_linearized(const RaySampleBatch& batch, RenderTarget target) {
  ChannelMoments m;
  m.channels = channel_count(target);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& s = batch.samples[i];
    const double d = batch.deltas[i];
    for (int c = 0; c < m.channels; ++c) {
      const double w = weight(batch, i, c, target);
      m.mean[c] += w * d * s.density_mean;
      m.raw_variance[c] += w * w * d * d * s.density_spread * s.density_spread;
    }
  }
  floor_moments(m);
  return m;
}

ChannelMoments propagate_color_density(const RaySampleBatch& batch) {
  ChannelMoments m;
  m.channels = 3;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& s = batch.samples[i];
    const double d = batch.deltas[i];
    const double mu = s.density_mean;
    const double var = s.density_spread * s.density_spread;
    const Rgb mu_c = s.color_mean;
    const Rgb var_c = s.color_spread.square();
    m.mean += d * mu * mu_c;
    m.raw_variance += d * d * (var * mu_c.square() + var_c * mu * mu + var * var_c);
  }
  floor_moments(m);
  return m;
}

std::vector<double> occupancy_transmittance(const RaySampleBatch& batch) {
  std::vector<double> t(batch.size() + 1);
  t[0] = 1.0;
  for (std::size_t i = 0; i < batch.size(); ++i) t[i + 1] = t[i] * (1.0 - batch.samples[i].density_mean);
  return t;
}

ChannelMoments propagate_occupancy(const RaySampleBatch& batch, RenderTarget target,
                                   const Rgb& background, std::span<const double> frozen_transmittance) {
  std::vector<double> own;
  std::span<const double> t = frozen_transmittance;
  if (t.empty()) {
    own = occupancy_transmittance(batch);
    t = own;
  } else if (t.size() != batch.size() + 1) {
    throw InvalidArgument("frozen transmittance must hold N+1 values");
  }
  ChannelMoments m;
  m.channels = channel_count(target);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& s = batch.samples[i];
    for (int c = 0; c < m.channels; ++c) {
      const double w = weight(batch, i, c, target);
      m.mean[c] += w * t[i] * s.density_mean;
      m.raw_variance[c] += w * w * t[i] * t[i] * s.density_spread * s.density_spread;
    }
  }
  if (target == RenderTarget::rgb) m.mean += t[batch.size()] * background;
  floor_moments(m);
  return m;
}

double nll_loss(const GaussianMoment& predicted, double target) {
  const double r = target - predicted.mean;
  return std::log(predicted.variance) + r * r / predicted.variance;
}

double nll_loss(const ChannelMoments& predicted, const Rgb& target) {
  return nll_with_grad(predicted, target, nullptr);
}

double baseline_loss(const RaySampleBatch& batch, const Rgb& target, const CompositeOptions& options) {
  const RenderOutput out = composite(batch, options);
  const int ch = channel_count(options.target);
  return (out.value - target).head(ch).square().sum();
}

namespace {

RayLoss baseline_ray_loss(const RaySampleBatch& batch, const Rgb& target, const LossOptions& o,
                          bool with_grad) {
  CompositeOptions co;
  co.target = o.target;
  co.background = o.background;
  co.early_termination = o.early_termination;
  const RenderOutput out = composite(batch, co);
  RayLoss res;
  res.prediction.channels = out.channels;
  res.prediction.mean = out.value;
  floor_moments(res.prediction);
  Rgb residual = Rgb::Zero();
  residual.head(out.channels) = (out.value - target).head(out.channels);
  res.loss = residual.square().sum();
  if (with_grad) res.grads = composite_backward(batch, co, out, 2.0 * residual);
  return res;
}

RayLoss color_ray_loss(const RaySampleBatch& batch, const Rgb& target, const LossOptions& o,
                       bool with_grad) {
  CompositeOptions co;
  co.target = RenderTarget::rgb;
  co.background = o.background;
  co.early_termination = o.early_termination;
  const RenderOutput fwd = composite(batch, co);
  RayLoss res;
  res.prediction = propagate_color(batch, fwd, o.background);
  NllGrad g;
  res.loss = nll_with_grad(res.prediction, target, with_grad ? &g : nullptr);
  if (!with_grad) return res;
  const std::size_t n = batch.size();
  res.grads.resize(n);
  std::vector<double> d_alpha(n);
  std::vector<double> d_density(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& s = batch.samples[i];
    const double a = fwd.alpha[i];
    res.grads[i].color_mean = g.d_mean * a;
    res.grads[i].color_spread = g.d_var * 2.0 * s.color_spread * a * a;
    d_alpha[i] = (g.d_mean * (s.color_mean - o.background) + g.d_var * 2.0 * s.color_spread.square() * a).sum();
  }
  backprop_alpha(batch.deltas, fwd, d_alpha, d_density);
  for (std::size_t i = 0; i < n; ++i) res.grads[i].density_mean = d_density[i];
  return res;
}

RayLoss density_ray_loss(const RaySampleBatch& batch, const Rgb& target, const LossOptions& o,
                         bool with_grad) {
  RayLoss res;
  res.prediction = propagate_density_linearized(batch, o.target);
  NllGrad g;
  res.loss = nll_with_grad(res.prediction, target, with_grad ? &g : nullptr);
  if (!with_grad) return res;
  const int ch = res.prediction.channels;
  res.grads.resize(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& s = batch.samples[i];
    const double d = batch.deltas[i];
    const double var = s.density_spread * s.density_spread;
    auto& gi = res.grads[i];
    for (int c = 0; c < ch; ++c) {
      const double w = weight(batch, i, c, o.target);
      gi.density_mean += g.d_mean[c] * w * d;
      gi.density_spread += g.d_var[c] * 2.0 * w * w * d * d * s.density_spread;
      if (o.target == RenderTarget::rgb) {
        gi.color_mean[c] = g.d_mean[c] * d * s.density_mean + g.d_var[c] * 2.0 * w * d * d * var;
      }
    }
  }
  return res;
}

RayLoss color_density_ray_loss(const RaySampleBatch& batch, const Rgb& target, bool with_grad) {
  RayLoss res;
  res.prediction = propagate_color_density(batch);
  NllGrad g;
  res.loss = nll_with_grad(res.prediction, target, with_grad ? &g : nullptr);
  if (!with_grad) return res;
  res.grads.resize(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& s = batch.samples[i];
    const double d = batch.deltas[i];
    const double d2 = d * d;
    const double mu = s.density_mean;
    const double sd = s.density_spread;
    const Rgb mu_c = s.color_mean;
    const Rgb sd_c = s.color_spread;
    auto& gi = res.grads[i];
    gi.density_mean = (g.d_mean * d * mu_c + g.d_var * d2 * 2.0 * sd_c.square() * mu).sum();
    gi.density_spread = (g.d_var * d2 * 2.0 * sd * (mu_c.square() + sd_c.square())).sum();
    gi.color_mean = g.d_mean * d * mu + g.d_var * d2 * 2.0 * sd * sd * mu_c;
    gi.color_spread = g.d_var * d2 * 2.0 * sd_c * (mu * mu + sd * sd);
  }
  return res;
}

RayLoss occupancy_ray_loss(const RaySampleBatch& batch, const Rgb& target, const LossOptions& o,
                           bool with_grad) {
  const std::size_t n = batch.size();
  std::vector<double> own;
  std::span<const double> t = o.frozen_transmittance;
  const bool frozen = !t.empty();
  if (!frozen) {
    own = occupancy_transmittance(batch);
    t = own;
  }
  RayLoss res;
  res.prediction = propagate_occupancy(batch, o.target, o.background, t);
  NllGrad g;
  res.loss = nll_with_grad(res.prediction, target, with_grad ? &g : nullptr);
  if (!with_grad) return res;
  const int ch = res.prediction.channels;
  const bool rgb = o.target == RenderTarget::rgb;
  res.grads.resize(n);
  std::vector<double> d_t(n + 1, 0.0);  // direct dL/dT_i
  for (std::size_t i = 0; i < n; ++i) {
    const auto& s = batch.samples[i];
    const double mu = s.density_mean;
    const double var = s.density_spread * s.density_spread;
    auto& gi = res.grads[i];
    for (int c = 0; c < ch; ++c) {
      const double w = weight(batch, i, c, o.target);
      gi.density_mean += g.d_mean[c] * w * t[i];
      gi.density_spread += g.d_var[c] * 2.0 * w * w * t[i] * t[i] * s.density_spread;
      if (rgb) gi.color_mean[c] = g.d_mean[c] * t[i] * mu + g.d_var[c] * 2.0 * w * t[i] * t[i] * var;
      d_t[i] += g.d_mean[c] * w * mu + g.d_var[c] * 2.0 * w * w * t[i] * var;
    }
  }
  if (rgb) d_t[n] = (g.d_mean * o.background).sum();
  if (o.gradient_through_T && !frozen) {
    // T_i = prod_{j<i} (1 - mu_j); h accumulates sum_{i>k} dL/dT_i * prod_{k<j<i} (1 - mu_j).
    double h = d_t[n];
    for (std::size_t k = n; k-- > 0;) {
      res.grads[k].density_mean -= t[k] * h;
      h = d_t[k] + (1.0 - batch.samples[k].density_mean) * h;
    }
  }
  return res;
}

}  // namespace

RayLoss ray_loss(LossMode mode, const RaySampleBatch& batch, const Rgb& target, const LossOptions& options,
                 bool with_grad) {
  if (!supports_target(mode, options.target)) {
    throw InvalidArgument(std::string("loss mode ") + std::string(to_string(mode)) + " cannot train on " +
                          (options.target == RenderTarget::rgb ? "rgb" : "depth") + " targets");
  }
  switch (mode) {
    case LossMode::baseline:
      return baseline_ray_loss(batch, target, options, with_grad);
    case LossMode::color:
      return color_ray_loss(batch, target, options, with_grad);
    case LossMode::density_rgb:
    case LossMode::density_depth:
      return density_ray_loss(batch, target, options, with_grad);
    case LossMode::color_density:
      return color_density_ray_loss(batch, target, with_grad);
    case LossMode::occupancy_rgb:
    case LossMode::occupancy_depth:
      return occupancy_ray_loss(batch, target, options, with_grad);
  }
  throw InvalidArgument("unhandled loss mode");
}

RenderOutput predict(LossMode mode, const RaySampleBatch& batch, const CompositeOptions& options) {
  if (!supports_target(mode, options.target)) {
    throw InvalidArgument(std::string("loss mode ") + std::string(to_string(mode)) +
                          " does not render this target kind");
  }
  RenderOutput out;
  ChannelMoments m;
  if (mode == LossMode::baseline || mode == LossMode::color) {
    CompositeOptions raw = options;
    raw.normalized_depth = false;
    out = composite(batch, raw);
    if (mode == LossMode::color) {
      m = propagate_color(batch, out, options.background);
    } else {
      m.channels = out.channels;
      m.mean = out.value;
      floor_moments(m);
    }
  } else if (is_occupancy(mode)) {
    const auto t = occupancy_transmittance(batch);
    m = propagate_occupancy(batch, options.target, options.background, t);
    out.channels = m.channels;
    out.transmittance.assign(t.begin(), t.end() - 1);
    out.final_transmittance = t.back();
    out.alpha.resize(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) out.alpha[i] = t[i] * batch.samples[i].density_mean;
    out.opacity = 1.0 - t.back();
    out.live_samples = batch.size();
  } else {
    m = mode == LossMode::color_density ? propagate_color_density(batch)
                                        : propagate_density_linearized(batch, options.target);
    out.channels = m.channels;
    out.alpha.resize(batch.size());
    out.transmittance.assign(batch.size(), 1.0);
    double opacity = 0.0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      out.alpha[i] = batch.deltas[i] * batch.samples[i].density_mean;
      opacity += out.alpha[i];
    }
    out.opacity = opacity;
    out.live_samples = batch.size();
  }
  out.value = m.mean;
  out.variance = m.variance;
  if (options.target == RenderTarget::depth) {
    if (options.normalized_depth && out.opacity > 1e-12) out.value[0] /= out.opacity;
    out.value[1] = out.value[2] = 0.0;
    out.variance[1] = out.variance[2] = 0.0;
  }
  return out;
}

}  // namespace bnerf
