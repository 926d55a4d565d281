#include "bnerf/oracle.hpp"

#include <algorithm>

namespace bnerf {

std::string_view to_string(DrawSpec spec) {
  switch (spec) {
    case DrawSpec::density: return "density";
    case DrawSpec::color: return "color";
    case DrawSpec::both: return "both";
    case DrawSpec::occupancy_frozen_T: return "occupancy_frozen_T";
  }
  return "?";
}

NormalityStats describe(std::span<const double> values) {
  NormalityStats st;
  const double n = static_cast<double>(values.size());
  if (values.size() < 2) return st;
  double sum = 0.0;
  for (double v : values) sum += v;
  st.mean = sum / n;
  double m2 = 0.0, m3 = 0.0, m4 = 0.0;
  for (double v : values) {
    const double d = v - st.mean;
    const double d2 = d * d;
    m2 += d2;
    m3 += d2 * d;
    m4 += d2 * d2;
  }
  st.variance = m2 / (n - 1.0);
  m2 /= n;
  m3 /= n;
  m4 /= n;
  if (m2 > 0.0) {
    st.skewness = m3 / std::pow(m2, 1.5);
    st.excess_kurtosis = m4 / (m2 * m2) - 3.0;
    st.jarque_bera = n / 6.0 * (st.skewness * st.skewness + 0.25 * st.excess_kurtosis * st.excess_kurtosis);
    st.p_value = std::exp(-0.5 * st.jarque_bera);
  }
  return st;
}

namespace {

void require_draws(std::size_t n) {
  if (n < kMinDraws) throw InvalidArgument("Monte Carlo oracle needs at least 10^4 draws");
}

MonteCarloReport finish(const std::vector<double>& values, double predicted_mean, double predicted_variance,
                        std::size_t truncated, std::size_t draws_subject_to_truncation, std::uint64_t seed) {
  const NormalityStats st = describe(values);
  MonteCarloReport r;
  r.empirical_mean = st.mean;
  r.empirical_variance = st.variance;
  r.predicted_mean = predicted_mean;
  r.predicted_variance = predicted_variance;
  r.relative_mean_error = relative_difference(st.mean, predicted_mean);
  r.relative_variance_error = relative_difference(st.variance, predicted_variance);
  r.skewness = st.skewness;
  r.excess_kurtosis = st.excess_kurtosis;
  r.normality_p_value = st.p_value;
  r.n_draws = values.size();
  r.seed = seed;
  r.truncated_fraction = draws_subject_to_truncation
                             ? static_cast<double>(truncated) / static_cast<double>(draws_subject_to_truncation)
                             : 0.0;
  return r;
}

}  // namespace

MonteCarloReport mc_render_distribution(const RaySampleBatch& batch, DrawSpec spec, std::size_t n_draws,
                                        std::uint64_t seed, const McOptions& options) {
  require_draws(n_draws);
  const std::size_t n = batch.size();
  const int c = options.target == RenderTarget::rgb ? options.channel : 0;
  const bool rgb = options.target == RenderTarget::rgb;
  const double bg = rgb ? options.background[c] : 0.0;

  // Prediction from the propagation op that models this draw spec.
  double pred_mean = 0.0;
  double pred_var = 0.0;
  CompositeOptions co;
  co.target = options.target;
  co.background = options.background;
  const RenderOutput base = composite(batch, co);
  switch (spec) {
    case DrawSpec::color: {
      if (!rgb) throw InvalidArgument("color draws need an rgb target");
      const auto m = propagate_color(batch, base, options.background);
      pred_mean = m.mean[c];
      pred_var = m.raw_variance[c];
      break;
    }
    case DrawSpec::density: {
      const auto m = propagate_density_linearized(batch, options.target);
      pred_mean = m.mean[c];
      pred_var = m.raw_variance[c];
      break;
    }
    case DrawSpec::both: {
      if (!rgb) throw InvalidArgument("color draws need an rgb target");
      const auto m = propagate_color_density(batch);
      pred_mean = m.mean[c];
      pred_var = m.raw_variance[c];
      break;
    }
    case DrawSpec::occupancy_frozen_T: {
      const auto m = propagate_occupancy(batch, options.target, options.background);
      pred_mean = m.mean[c];
      pred_var = m.raw_variance[c];
      break;
    }
  }

  const auto frozen_t = occupancy_transmittance(batch);
  std::vector<double> values(n_draws);
  std::size_t truncated = 0;
  const bool draw_density = spec == DrawSpec::density || spec == DrawSpec::both;
  const bool draw_color = spec == DrawSpec::color || spec == DrawSpec::both;
  for (std::size_t k = 0; k < n_draws; ++k) {
    StreamRng rng(derive_seed(seed, k));
    double value = 0.0;
    if (spec == DrawSpec::occupancy_frozen_T) {
      for (std::size_t i = 0; i < n; ++i) {
        const auto& s = batch.samples[i];
        const double o = s.density_mean + s.density_spread * rng.normal();
        const double w = rgb ? s.color_mean[c] : batch.midpoints[i];
        value += w * frozen_t[i] * o;
      }
      value += frozen_t[n] * bg;
    } else {
      double transmittance = 1.0;
      for (std::size_t i = 0; i < n; ++i) {
        const auto& s = batch.samples[i];
        double rho = s.density_mean;
        if (draw_density) {
          rho += s.density_spread * rng.normal();
          if (rho < 0.0) {
            rho = 0.0;
            ++truncated;
          }
        }
        double w = rgb ? s.color_mean[c] : batch.midpoints[i];
        if (draw_color) w += s.color_spread[c] * rng.normal();
        const double sd = batch.deltas[i] * rho;
        const double alpha = -transmittance * std::expm1(-sd);
        value += alpha * w;
        transmittance *= std::exp(-sd);
      }
      value += transmittance * bg;
    }
    values[k] = value;
  }
  return finish(values, pred_mean, pred_var, truncated, draw_density ? n_draws * n : 0, seed);
}

MonteCarloReport lognormal_check(const RaySampleBatch& batch, std::size_t i, std::size_t n_draws,
                                 std::uint64_t seed) {
  require_draws(n_draws);
  if (i < 2 || i > batch.size() + 1) throw InvalidArgument("lognormal_check needs 2 <= i <= N+1");
  double pred_mean = 0.0;
  double pred_var = 0.0;
  for (std::size_t j = 0; j + 1 < i; ++j) {
    const auto& s = batch.samples[j];
    pred_mean -= batch.deltas[j] * s.density_mean;
    pred_var += batch.deltas[j] * batch.deltas[j] * s.density_spread * s.density_spread;
  }
  std::vector<double> values(n_draws);
  std::size_t truncated = 0;
  for (std::size_t k = 0; k < n_draws; ++k) {
    StreamRng rng(derive_seed(seed, k));
    double log_t = 0.0;
    for (std::size_t j = 0; j + 1 < i; ++j) {
      const auto& s = batch.samples[j];
      // No clamping here: the claim under test is about untruncated Gaussians.
      const double rho = s.density_mean + s.density_spread * rng.normal();
      if (rho < 0.0) ++truncated;
      log_t -= batch.deltas[j] * rho;
    }
    values[k] = log_t;
  }
  return finish(values, pred_mean, pred_var, truncated, n_draws * (i - 1), seed);
}

std::vector<double> sample_alpha(const RaySampleBatch& batch, std::size_t i, std::size_t n_draws,
                                 std::uint64_t seed) {
  if (i < 1 || i > batch.size()) throw InvalidArgument("sample_alpha needs 1 <= i <= N");
  std::vector<double> values(n_draws);
  for (std::size_t k = 0; k < n_draws; ++k) {
    StreamRng rng(derive_seed(seed, k));
    double log_t = 0.0;
    double alpha = 0.0;
    for (std::size_t j = 0; j < i; ++j) {
      const auto& s = batch.samples[j];
      const double rho = std::max(0.0, s.density_mean + s.density_spread * rng.normal());
      const double sd = batch.deltas[j] * rho;
      if (j + 1 == i) alpha = -std::exp(log_t) * std::expm1(-sd);
      log_t -= sd;
    }
    values[k] = alpha;
  }
  return values;
}

// ---------------------------------------------------------------------------

std::vector<double> flatten_samples(const RaySampleBatch& batch) {
  std::vector<double> v;
  v.reserve(batch.size() * kEntriesPerSample);
  for (const auto& s : batch.samples) {
    v.push_back(s.density_mean);
    v.push_back(s.density_spread);
    for (int c = 0; c < 3; ++c) v.push_back(s.color_mean[c]);
    for (int c = 0; c < 3; ++c) v.push_back(s.color_spread[c]);
  }
  return v;
}

void unflatten_samples(std::span<const double> v, RaySampleBatch& batch) {
  if (v.size() != batch.size() * kEntriesPerSample) throw InvalidArgument("flattened size mismatch");
  std::size_t k = 0;
  for (auto& s : batch.samples) {
    s.density_mean = v[k++];
    s.density_spread = v[k++];
    for (int c = 0; c < 3; ++c) s.color_mean[c] = v[k++];
    for (int c = 0; c < 3; ++c) s.color_spread[c] = v[k++];
  }
}

std::vector<double> flatten_grads(std::span<const FieldSampleGrad> grads) {
  std::vector<double> v;
  v.reserve(grads.size() * kEntriesPerSample);
  for (const auto& g : grads) {
    v.push_back(g.density_mean);
    v.push_back(g.density_spread);
    for (int c = 0; c < 3; ++c) v.push_back(g.color_mean[c]);
    for (int c = 0; c < 3; ++c) v.push_back(g.color_spread[c]);
  }
  return v;
}

FdResult fd_gradient_check(const FdCase& fc, double step, std::uint64_t seed) {
  if (!(step > 0.0)) throw InvalidArgument("finite-difference step must be positive");
  StreamRng rng(seed);
  const Rgb u(rng.uniform() * 2.0 - 1.0, rng.uniform() * 2.0 - 1.0, rng.uniform() * 2.0 - 1.0);

  CompositeOptions co;
  co.target = fc.function == GradientFunction::composite_depth ? RenderTarget::depth : RenderTarget::rgb;
  co.background = fc.options.background;

  std::vector<double> frozen;
  if (fc.fd_transmittance == FdTransmittance::freeze_at_base) frozen = occupancy_transmittance(fc.batch);

  RaySampleBatch work = fc.batch;
  auto evaluate = [&](const RaySampleBatch& b) -> double {
    switch (fc.function) {
      case GradientFunction::composite_rgb:
      case GradientFunction::composite_depth: {
        const auto out = composite(b, co);
        return (u.head(out.channels) * out.value.head(out.channels)).sum();
      }
      case GradientFunction::color_mean: {
        const auto out = composite(b, co);
        return (u * propagate_color(b, out, co.background).mean).sum();
      }
      case GradientFunction::loss: {
        LossOptions o = fc.options;
        if (!frozen.empty()) o.frozen_transmittance = frozen;
        return ray_loss(fc.mode, b, fc.target, o, false).loss;
      }
    }
    return 0.0;
  };

  std::vector<double> analytic;
  switch (fc.function) {
    case GradientFunction::composite_rgb:
    case GradientFunction::composite_depth: {
      const auto out = composite(fc.batch, co);
      analytic = flatten_grads(composite_backward(fc.batch, co, out, u));
      break;
    }
    case GradientFunction::color_mean: {
      const auto out = composite(fc.batch, co);
      std::vector<FieldSampleGrad> g(fc.batch.size());
      for (std::size_t i = 0; i < g.size(); ++i) g[i].color_mean = out.alpha[i] * u;
      analytic = flatten_grads(g);
      break;
    }
    case GradientFunction::loss:
      analytic = flatten_grads(ray_loss(fc.mode, fc.batch, fc.target, fc.options, true).grads);
      break;
  }

  const std::vector<double> base = flatten_samples(fc.batch);
  std::vector<double> x = base;
  FdResult res;
  for (std::size_t k = 0; k < base.size(); ++k) {
    if (fc.function == GradientFunction::color_mean) {
      const std::size_t slot = k % kEntriesPerSample;
      if (slot < 2 || slot >= 5) continue;
    }
    auto at = [&](double offset) {
      x[k] = base[k] + offset;
      unflatten_samples(x, work);
      const double f = evaluate(work);
      x[k] = base[k];
      return f;
    };
    const double numeric =
        fc.stencil == FdStencil::second_order
            ? (at(step) - at(-step)) / (2.0 * step)
            : (8.0 * (at(step) - at(-step)) - (at(2.0 * step) - at(-2.0 * step))) / (12.0 * step);
    const double err = std::abs(analytic[k] - numeric) / std::max(std::abs(analytic[k]), 1e-6);
    ++res.coordinates;
    if (err > res.max_relative_error) {
      res.max_relative_error = err;
      res.worst_coordinate = k;
    }
  }
  return res;
}

}  // namespace bnerf
