#include "bnerf/optim.hpp"

#include <chrono>
#include <fstream>
#include <numeric>

namespace bnerf {

void TrainConfig::validate() const {
  if (iterations < 0) throw InvalidArgument("iterations must be >= 0");
  if (warmup_iterations < 0 || warmup_iterations > iterations)
    throw InvalidArgument("warmup_iterations must lie in [0, iterations]");
  if (batch_rays < 1) throw InvalidArgument("batch_rays must be >= 1");
  if (!(learning_rate > 0.0)) throw InvalidArgument("learning_rate must be > 0");
  if (n_samples < 1) throw InvalidArgument("n_samples must be >= 1");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0 && adam_eps > 0.0))
    throw InvalidArgument("bad Adam hyperparameters");
  for (int r : resolution)
    if (r < 1) throw InvalidArgument("grid resolution must be positive");
  if (checkpoint_every < 0) throw InvalidArgument("checkpoint_every must be >= 0");
  if (is_occupancy(loss_mode) && density_activation != DensityActivation::sigmoid)
    throw InvalidArgument("occupancy modes need the sigmoid density activation");
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"iterations", c.iterations},
          {"batch_rays", c.batch_rays},
          {"learning_rate", c.learning_rate},
          {"adam_beta1", c.adam_beta1},
          {"adam_beta2", c.adam_beta2},
          {"adam_eps", c.adam_eps},
          {"warmup_iterations", c.warmup_iterations},
          {"loss_mode", to_string(c.loss_mode)},
          {"seed", c.seed},
          {"n_samples", c.n_samples},
          {"background", {c.background[0], c.background[1], c.background[2]}},
          {"normalized_depth", c.normalized_depth},
          {"gradient_through_t", c.gradient_through_T},
          {"early_termination", c.early_termination},
          {"resolution", c.resolution},
          {"density_activation", c.density_activation == DensityActivation::sigmoid ? "sigmoid" : "softplus"},
          {"sample_without_replacement", c.sample_without_replacement},
          {"occupancy_handoff", c.occupancy_handoff},
          {"initial_density_raw", c.initial_density_raw}};
}

void adam_step(std::span<double> params, std::span<const double> grads, AdamState& s, double lr, double beta1,
               double beta2, double eps) {
  if (grads.size() != params.size() || s.m.size() != params.size() || s.v.size() != params.size())
    throw InvalidArgument("adam_step: shape mismatch");
  ++s.step;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(s.step));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(s.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    s.m[i] = beta1 * s.m[i] + (1.0 - beta1) * g;
    s.v[i] = beta2 * s.v[i] + (1.0 - beta2) * g * g;
    params[i] -= lr * (s.m[i] / c1) / (std::sqrt(s.v[i] / c2) + eps);
  }
}

std::size_t TrainingSet::pixel_count() const {
  std::size_t n = 0;
  for (const auto& t : targets) n += t.pixel_count();
  return n;
}

TrainingSet make_training_set(const Dataset& ds, RenderTarget kind) {
  TrainingSet set;
  set.kind = kind;
  for (const auto& f : ds.train) {
    const Image& im = kind == RenderTarget::rgb ? f.rgb : f.depth;
    if (im.data.empty()) throw InvalidArgument("frame " + f.name + " lacks the requested target kind");
    set.cameras.push_back(f.camera);
    set.targets.push_back(im);
  }
  if (set.cameras.empty()) throw InvalidArgument("dataset has no training frames");
  return set;
}

namespace {

// Unbiased integer in [0, n).
std::uint64_t bounded(StreamRng& rng, std::uint64_t n) {
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t x;
  do {
    x = rng.next_u64();
  } while (x >= limit);
  return x % n;
}

RayTarget make_target(const TrainingSet& set, std::size_t flat) {
  RayTarget rt;
  std::size_t img = 0;
  while (flat >= set.targets[img].pixel_count()) flat -= set.targets[img++].pixel_count();
  const Image& im = set.targets[img];
  const Camera& cam = set.cameras[img];
  const int x = static_cast<int>(flat % im.width), y = static_cast<int>(flat / im.width);
  rt.ray = generate_ray(cam, pixel_center(x, y));
  for (int c = 0; c < im.channels; ++c) rt.target[c] = im.at(x, y, c);
  rt.image = static_cast<std::uint32_t>(img);
  rt.pixel = static_cast<std::uint32_t>(flat);
  rt.t_near = cam.near;
  rt.t_far = cam.far;
  return rt;
}

}  // namespace

std::vector<RayTarget> select_ray_batch(const TrainingSet& set, int batch_rays, StreamRng& rng,
                                        bool without_replacement) {
  const std::size_t total = set.pixel_count();
  if (total == 0) throw InvalidArgument("empty training set");
  if (batch_rays < 1) throw InvalidArgument("batch_rays must be >= 1");
  std::vector<RayTarget> out;
  out.reserve(batch_rays);
  if (without_replacement) {
    if (static_cast<std::size_t>(batch_rays) > total) throw InvalidArgument("batch larger than the pixel count");
    std::vector<std::size_t> idx(total);
    std::iota(idx.begin(), idx.end(), 0);
    for (int i = 0; i < batch_rays; ++i) {
      std::swap(idx[i], idx[i + bounded(rng, total - i)]);
      out.push_back(make_target(set, idx[i]));
    }
  } else {
    for (int i = 0; i < batch_rays; ++i) out.push_back(make_target(set, bounded(rng, total)));
  }
  return out;
}

bool DivergenceGuard::observe(double loss) {
  if (fired_) return false;
  if (count_ < kGuardReferenceIterations) {
    sum_ += loss;
    if (++count_ == kGuardReferenceIterations) reference_ = sum_ / count_;
    return false;
  }
  const double limit = reference_ + (kGuardFactor - 1.0) * std::max(std::abs(reference_), 1e-12);
  streak_ = loss > limit ? streak_ + 1 : 0;
  if (streak_ >= kGuardWindow) fired_ = true;
  return fired_;
}

TrainState initial_state(const TrainConfig& config, const Aabb& bounds) {
  TrainState st{UncertainField(config.resolution, bounds, config.density_activation), AdamState(), 0,
                config.learning_rate, {}, 0, {}};
  st.adam = AdamState(st.field.params().size());
  for (std::size_t c = 0; c < st.field.cell_count(); ++c) st.field.raw(c, kDensity) = config.initial_density_raw;
  return st;
}

namespace {

void write_checkpoint(const TrainConfig& config, const TrainState& st) {
  std::filesystem::create_directories(config.out_dir);
  char name[64];
  std::snprintf(name, sizeof name, "checkpoint_%06d", st.iteration);
  save_checkpoint(st.field, config.out_dir / (std::string(name) + ".bnrf"));
  nlohmann::json meta{{"config", to_json(config)}, {"iteration", st.iteration}, {"seed", config.seed}};
  std::ofstream(config.out_dir / (std::string(name) + ".json")) << meta.dump(2);
}

// Chain rule, Adam and snapshot refresh in one pass; same arithmetic as
// chain_activation followed by adam_step. Entries with zero moments and zero
// gradient cannot move and are skipped.
bool fused_update(const TrainConfig& config, TrainState& st, std::span<const double> act_grad,
                  ActivatedField& snapshot) {
  auto params = st.field.params();
  auto values = snapshot.values();
  auto& s = st.adam;
  ++s.step;
  const double b1 = config.adam_beta1, b2 = config.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(s.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(s.step));
  const auto dact = st.field.density_activation();
  bool finite = true;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double ga = act_grad[i];
    if (ga == 0.0 && s.m[i] == 0.0 && s.v[i] == 0.0) continue;
    const auto kind = channel_activation(static_cast<int>(i % kChannels));
    const double g = ga == 0.0 ? 0.0 : ga * activate_derivative(params[i], kind, dact);
    s.m[i] = b1 * s.m[i] + (1.0 - b1) * g;
    s.v[i] = b2 * s.v[i] + (1.0 - b2) * g * g;
    params[i] -= st.learning_rate * (s.m[i] / c1) / (std::sqrt(s.v[i] / c2) + config.adam_eps);
    values[i] = activate(params[i], kind, dact);
    finite = finite && std::isfinite(params[i]);
  }
  return finite;
}

}  // namespace

TrainState train(const TrainConfig& config, const TrainingSet& set, const Aabb& bounds) {
  config.validate();
  if (!supports_target(config.loss_mode, set.kind))
    throw InvalidArgument("loss mode " + std::string(to_string(config.loss_mode)) + " does not match the dataset kind");
  TrainState st = initial_state(config, bounds);
  const std::size_t n_params = st.field.params().size();
  std::vector<double> act_grad(n_params);
  ActivatedField snapshot(st.field);
  const std::uint64_t batch_seed = label_seed(config.seed, "train/batch");
  const std::uint64_t jitter_seed = label_seed(config.seed, "train/jitter");
  const int channels = channel_count(set.kind);
  const auto start = std::chrono::steady_clock::now();

  for (int it = 0; it < config.iterations; ++it) {
    if (it == config.warmup_iterations && is_occupancy(config.loss_mode) && config.occupancy_handoff) {
      double span = 0.0;
      for (const auto& cam : set.cameras) span += cam.far - cam.near;
      density_to_occupancy(st.field, span / set.cameras.size() / config.n_samples);
      st.adam = AdamState(n_params);
      snapshot = ActivatedField(st.field);
    }
    const bool warm = it < config.warmup_iterations;
    const LossMode mode = warm ? LossMode::baseline : config.loss_mode;
    StreamRng rng(derive_seed(batch_seed, static_cast<std::uint64_t>(it)));
    const auto batch = select_ray_batch(set, config.batch_rays, rng, config.sample_without_replacement);
    std::fill(act_grad.begin(), act_grad.end(), 0.0);

    LossOptions lo;
    lo.target = set.kind;
    lo.background = config.background;
    lo.gradient_through_T = config.gradient_through_T;
    lo.early_termination = config.early_termination;
    std::size_t valid = 0;
    for (const auto& rt : batch) valid += rt.target.head(channels).isFinite().all();
    st.rejected_rays += batch.size() - valid;
    const double inv = valid ? 1.0 / static_cast<double>(valid) : 0.0;
    double loss_sum = 0.0, sq_err = 0.0;
    for (std::size_t r = 0; r < batch.size(); ++r) {
      const auto& rt = batch[r];
      if (!rt.target.head(channels).isFinite().all()) continue;
      auto samples = stratified_sample(rt.ray, rt.t_near, rt.t_far, config.n_samples,
                                       derive_seed(jitter_seed, static_cast<std::uint64_t>(it), r));
      populate_samples(samples, snapshot);
      const RayLoss rl = ray_loss(mode, samples, rt.target, lo, true);
      if (!std::isfinite(rl.loss)) {
        std::vector<std::uint32_t> bad;
        for (const auto& b : batch) bad.push_back(b.image * static_cast<std::uint32_t>(set.targets[0].pixel_count()) + b.pixel);
        throw TrainingDiverged("non-finite loss at iteration " + std::to_string(it) + " (image " +
                                   std::to_string(rt.image) + ", pixel " + std::to_string(rt.pixel) + ")",
                               it, bad);
      }
      loss_sum += rl.loss;
      const double scale = set.kind == RenderTarget::depth ? 1.0 / rt.t_far : 1.0;
      for (int c = 0; c < channels; ++c) sq_err += std::pow((rl.prediction.mean[c] - rt.target[c]) * scale, 2);
      for (std::size_t i = 0; i < samples.size(); ++i) {
        if (const auto stn = snapshot.stencil(samples.origin + samples.sample_t[i] * samples.direction)) {
          FieldSampleGrad g = rl.grads[i];
          g.density_mean *= inv;
          g.density_spread *= inv;
          g.color_mean *= inv;
          g.color_spread *= inv;
          scatter_activated_gradient(*stn, g, act_grad);
        }
      }
    }
    if (!fused_update(config, st, act_grad, snapshot))
      throw TrainingDiverged("non-finite parameter at iteration " + std::to_string(it), it, {});

    const double loss = loss_sum * inv;
    const double mse = valid ? sq_err / (static_cast<double>(valid) * channels) : 0.0;
    const double psnr_train = mse > 0.0 ? std::min(100.0, -10.0 * std::log10(mse)) : 100.0;
    st.iteration = it + 1;
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    st.log.push_back({st.iteration, loss, psnr_train, ms});

    if (!warm && st.guard.observe(loss)) st.learning_rate *= 0.5;
    if (config.checkpoint_every > 0 && !config.out_dir.empty() && st.iteration % config.checkpoint_every == 0)
      write_checkpoint(config, st);
  }
  return st;
}

void write_log_csv(const std::filesystem::path& path, const std::vector<LogRow>& log, bool with_timing) {
  std::ofstream f(path);
  if (!f) throw InvalidArgument("cannot write " + path.string());
  f << (with_timing ? "iteration,loss,psnr_train,wall_ms\n" : "iteration,loss,psnr_train\n");
  char buf[128];
  for (const auto& r : log) {
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g", r.iteration, r.loss, r.psnr_train);
    f << buf;
    if (with_timing) {
      std::snprintf(buf, sizeof buf, ",%.3f", r.wall_ms);
      f << buf;
    }
    f << '\n';
  }
}

RenderedView render_view(const UncertainField& field, const Camera& camera, const ViewOptions& o) {
  camera.validate();
  const auto& k = camera.intrinsics;
  const int ch = channel_count(o.target);
  RenderedView out{Image(k.width, k.height, ch), Image(k.width, k.height, ch), Image(k.width, k.height, 1)};
  const ActivatedField snapshot(field);
  CompositeOptions co;
  co.target = o.target;
  co.background = o.background;
  co.normalized_depth = o.normalized_depth;
  for (int y = 0; y < k.height; ++y)
    for (int x = 0; x < k.width; ++x) {
      auto b = stratified_sample(generate_ray(camera, pixel_center(x, y)), camera.near, camera.far, o.n_samples, 0,
                                 false);
      populate_samples(b, snapshot);
      const RenderOutput r = predict(o.mode, b, co);
      for (int c = 0; c < ch; ++c) {
        out.value.at(x, y, c) = r.value[c];
        out.variance.at(x, y, c) = r.variance[c];
      }
      out.opacity.at(x, y) = r.opacity;
    }
  return out;
}

}  // namespace bnerf
