#include "bnerf/suites.hpp"

#include <algorithm>
#include <string>

namespace bnerf {

RaySampleBatch random_ray(StreamRng& rng, int n, double density_hi) {
  std::vector<double> edges(n + 1);
  edges[0] = 1.0 + rng.uniform();
  for (int i = 0; i < n; ++i) edges[i + 1] = edges[i] + 0.05 + 0.2 * rng.uniform();
  auto b = RaySampleBatch::from_edges(std::move(edges));
  for (auto& s : b.samples) {
    s.density_mean = 0.05 + (density_hi - 0.05) * rng.uniform();
    s.density_spread = 0.05 + 0.3 * rng.uniform();
    for (int c = 0; c < 3; ++c) {
      s.color_mean[c] = 0.05 + 0.9 * rng.uniform();
      s.color_spread[c] = 0.02 + 0.2 * rng.uniform();
    }
  }
  return b;
}

RaySampleBatch regime_ray(StreamRng& rng, int n, double dmu_lo, double dmu_hi, double ratio) {
  auto b = random_ray(rng, n);
  for (std::size_t i = 0; i < b.size(); ++i) {
    auto& s = b.samples[i];
    s.density_mean = (dmu_lo + (dmu_hi - dmu_lo) * rng.uniform()) / b.deltas[i];
    s.density_spread = s.density_mean / ratio;
  }
  return b;
}

nlohmann::json to_json(const MonteCarloReport& r) {
  return {{"empirical_mean", r.empirical_mean},
          {"empirical_variance", r.empirical_variance},
          {"predicted_mean", r.predicted_mean},
          {"predicted_variance", r.predicted_variance},
          {"relative_mean_error", r.relative_mean_error},
          {"relative_variance_error", r.relative_variance_error},
          {"skewness", r.skewness},
          {"excess_kurtosis", r.excess_kurtosis},
          {"normality_p_value", r.normality_p_value},
          {"truncated_fraction", r.truncated_fraction},
          {"n_draws", r.n_draws},
          {"seed", r.seed}};
}

nlohmann::json to_json(const SuiteCheck& c) {
  return {{"suite", c.suite},
          {"name", c.name},
          {"value", c.value},
          {"comparison", c.comparison == Comparison::below ? "<" : ">"},
          {"tolerance", c.tolerance},
          {"passed", c.passed},
          {"detail", c.detail}};
}

const std::vector<std::string>& suite_names() {
  static const std::vector<std::string> names{"moments", "gradients", "lognormal", "breakdown"};
  return names;
}

namespace {

class Collector {
 public:
  Collector(std::string suite, const SuiteOptions& options) : suite_(std::move(suite)), options_(options) {}

  void add(std::string name, double value, Comparison cmp, double default_tolerance, nlohmann::json detail = {}) {
    SuiteCheck c;
    c.suite = suite_;
    c.name = std::move(name);
    c.value = value;
    c.comparison = cmp;
    c.tolerance = options_.tolerance.value_or(default_tolerance);
    c.passed = cmp == Comparison::below ? value < c.tolerance : value > c.tolerance;
    c.detail = std::move(detail);
    checks_.push_back(std::move(c));
  }

  // Mean and variance agreement of one Monte Carlo report.
  void add_report(const std::string& name, const MonteCarloReport& r, double tolerance) {
    add(name, std::max(r.relative_mean_error, r.relative_variance_error), Comparison::below, tolerance, to_json(r));
  }

  std::vector<SuiteCheck> take() { return std::move(checks_); }

 private:
  std::string suite_;
  const SuiteOptions& options_;
  std::vector<SuiteCheck> checks_;
};

const char* target_name(RenderTarget t) { return t == RenderTarget::rgb ? "rgb" : "depth"; }

std::vector<SuiteCheck> moments_suite(const SuiteOptions& o) {
  Collector out("moments", o);
  const std::uint64_t base = label_seed(o.seed, "oracle/moments");
  StreamRng rng(derive_seed(base, 0));

  // Color spreads only: the propagation is exact, so only sampling noise remains.
  for (int c = 0; c < 3; ++c) {
    auto b = random_ray(rng, o.samples);
    McOptions mc;
    mc.channel = c;
    mc.background = Rgb::Constant(0.25);
    out.add_report("color/channel" + std::to_string(c),
                   mc_render_distribution(b, DrawSpec::color, o.n_draws, derive_seed(base, 1, c), mc), 0.01);
  }

  // Narrow intervals with mu >= 10 sigma: the ray's total optical depth
  // sum delta mu stays within kRegimeOpticalDepth.
  const double dmu_hi = kRegimeOpticalDepth / o.samples;
  for (int trial = 0; trial < 3; ++trial) {
    auto b = regime_ray(rng, o.samples, dmu_hi / 3.0, dmu_hi, 10.0);
    for (auto target : {RenderTarget::rgb, RenderTarget::depth}) {
      McOptions mc;
      mc.target = target;
      const auto r = mc_render_distribution(b, DrawSpec::density, o.n_draws, derive_seed(base, 2, trial), mc);
      out.add_report(std::string("density_") + target_name(target) + "/ray" + std::to_string(trial), r, 0.02);
      out.add(std::string("density_") + target_name(target) + "/ray" + std::to_string(trial) + "/truncation",
              r.truncated_fraction, Comparison::below, 0.01);
    }
    out.add_report("color_density/ray" + std::to_string(trial),
                   mc_render_distribution(b, DrawSpec::both, o.n_draws, derive_seed(base, 3, trial)), 0.02);
  }

  auto occ = random_ray(rng, o.samples, 0.6);
  for (auto target : {RenderTarget::rgb, RenderTarget::depth}) {
    McOptions mc;
    mc.target = target;
    out.add_report(std::string("occupancy_") + target_name(target) + "/frozen_T",
                   mc_render_distribution(occ, DrawSpec::occupancy_frozen_T, o.n_draws, derive_seed(base, 4), mc),
                   0.01);
  }
  return out.take();
}

Rgb random_target(StreamRng& rng, RenderTarget target, const RaySampleBatch& b) {
  if (target == RenderTarget::rgb) return Rgb(rng.uniform(), rng.uniform(), rng.uniform());
  return Rgb(b.t_edges.front() + rng.uniform() * (b.t_edges.back() - b.t_edges.front()), 0, 0);
}

std::vector<SuiteCheck> gradients_suite(const SuiteOptions& o) {
  Collector out("gradients", o);
  const std::uint64_t base = label_seed(o.seed, "oracle/gradients");
  const Rgb background(0.05, 0.1, 0.15);
  constexpr double kStep = 1e-4;

  if (!o.mode) {
    for (auto fn : {GradientFunction::composite_rgb, GradientFunction::composite_depth}) {
      StreamRng rng(derive_seed(base, 0, static_cast<std::uint64_t>(fn)));
      double worst = 0.0;
      for (int r = 0; r < o.rays; ++r) {
        FdCase fc;
        fc.function = fn;
        fc.batch = random_ray(rng, o.samples, 2.0);
        fc.options.background = background;
        worst = std::max(worst, fd_gradient_check(fc, kStep, derive_seed(base, 1, r)).max_relative_error);
      }
      out.add(fn == GradientFunction::composite_rgb ? "composite/rgb" : "composite/depth", worst, Comparison::below,
              1e-4, {{"rays", o.rays}, {"samples", o.samples}, {"step", kStep}});
    }
  }

  for (auto mode : kAllLossModes) {
    if (o.mode && *o.mode != mode) continue;
    for (auto target : {RenderTarget::rgb, RenderTarget::depth}) {
      if (!supports_target(mode, target)) continue;
      StreamRng rng(derive_seed(base, 2 + static_cast<std::uint64_t>(mode), static_cast<std::uint64_t>(target)));
      double worst = 0.0;
      for (int r = 0; r < o.rays; ++r) {
        FdCase fc;
        fc.mode = mode;
        // Occupancy moments must stay below 1, and the finite-difference side
        // holds T at its base value to match the frozen-T gradient.
        fc.batch = random_ray(rng, o.samples, is_occupancy(mode) ? 0.6 : 2.0);
        fc.options.target = target;
        fc.options.background = background;
        fc.target = random_target(rng, target, fc.batch);
        fc.fd_transmittance = is_occupancy(mode) ? FdTransmittance::freeze_at_base : FdTransmittance::recompute;
        worst = std::max(worst, fd_gradient_check(fc, kStep, derive_seed(base, 3, r)).max_relative_error);
      }
      out.add(std::string(to_string(mode)) + "/" + target_name(target), worst, Comparison::below, 1e-4,
              {{"rays", o.rays}, {"samples", o.samples}, {"step", kStep}});
    }
  }
  return out.take();
}

std::vector<SuiteCheck> lognormal_suite(const SuiteOptions& o) {
  Collector out("lognormal", o);
  const std::uint64_t base = label_seed(o.seed, "oracle/lognormal");
  StreamRng rng(derive_seed(base, 0));
  for (int trial = 0; trial < 3; ++trial) {
    auto b = regime_ray(rng, o.samples, 0.05, 0.2, 5.0);
    for (std::size_t i : {std::size_t{2}, b.size() / 2, b.size()}) {
      out.add_report("ray" + std::to_string(trial) + "/ln_T" + std::to_string(i),
                     lognormal_check(b, i, o.n_draws, derive_seed(base, 1 + trial, i)), 0.01);
    }
  }
  return out.take();
}

std::vector<SuiteCheck> breakdown_suite(const SuiteOptions& o) {
  Collector out("breakdown", o);
  const std::uint64_t base = label_seed(o.seed, "oracle/breakdown");
  StreamRng rng(derive_seed(base, 0));
  // Passing means the linearized density mean is detectably wrong here.
  auto b = regime_ray(rng, o.samples, 0.5, 0.5, 2.0);
  const auto r = mc_render_distribution(b, DrawSpec::density, o.n_draws, derive_seed(base, 1));
  out.add("density_rgb/mean_error", r.relative_mean_error, Comparison::above, 0.05, to_json(r));
  return out.take();
}

}  // namespace

std::vector<SuiteCheck> run_suite(const std::string& name, const SuiteOptions& options) {
  if (options.samples < 2 || options.rays < 1) throw InvalidArgument("suite needs at least 2 samples and 1 ray");
  if (name == "moments") return moments_suite(options);
  if (name == "gradients") return gradients_suite(options);
  if (name == "lognormal") return lognormal_suite(options);
  if (name == "breakdown") return breakdown_suite(options);
  throw InvalidArgument("unknown oracle suite '" + name + "'");
}

}  // namespace bnerf
