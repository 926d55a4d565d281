#include "bnerf/optim.hpp"

#include <boost/math/distributions/chi_squared.hpp>
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

using namespace bnerf;

namespace {

// A few small RGB views of the builtin sphere.
TrainingSet tiny_set(int size = 8, int views = 2) {
  RigSpec rig;
  rig.width = rig.height = size;
  rig.train_count = views;
  return make_training_set(generate_dataset(builtin_scene("sphere"), rig), RenderTarget::rgb);
}

TrainConfig tiny_config(LossMode mode = LossMode::baseline) {
  TrainConfig c;
  c.iterations = 30;
  c.warmup_iterations = 10;
  c.batch_rays = 16;
  c.n_samples = 16;
  c.resolution = {6, 6, 6};
  c.loss_mode = mode;
  c.seed = 5;
  return c;
}

const Aabb kBounds{Vec3::Constant(-3.0), Vec3::Constant(3.0)};

}  // namespace

TEST_CASE("adam: zero gradient leaves parameters and decays moments") {
  std::vector<double> p{1.0, -2.0}, g{0.0, 0.0};
  AdamState s(2);
  s.m = {0.5, -0.5};
  s.v = {0.25, 0.25};
  s.step = 3;
  adam_step(p, g, s, 0.0);
  CHECK(p[0] == 1.0);
  CHECK(s.m[0] == doctest::Approx(0.45));
  CHECK(s.v[1] == doctest::Approx(0.25 * 0.999));
  AdamState fresh(2);
  adam_step(p, g, fresh, 0.1);
  CHECK(p[0] == 1.0);
  CHECK(p[1] == -2.0);
}

TEST_CASE("adam: first step moves by the learning rate against the gradient sign") {
  std::vector<double> p{0.0, 0.0, 0.0}, g{3.0, -0.02, 1e3};
  AdamState s(3);
  adam_step(p, g, s, 0.01);
  CHECK(p[0] == doctest::Approx(-0.01).epsilon(1e-6));
  CHECK(p[1] == doctest::Approx(0.01).epsilon(1e-5));
  CHECK(p[2] == doctest::Approx(-0.01).epsilon(1e-6));
  CHECK_THROWS_AS(adam_step(p, std::vector<double>{1.0}, s, 0.01), InvalidArgument);
}

TEST_CASE("adam: converges on a scalar quadratic") {
  std::vector<double> x{0.0}, g{0.0};
  AdamState s(1);
  for (int i = 0; i < 2000; ++i) {
    g[0] = 2.0 * (x[0] - 3.0);
    adam_step(x, g, s, 0.05);
  }
  CHECK(std::abs(x[0] - 3.0) < 1e-6);
}

TEST_CASE("ray batches") {
  Image a(10, 5, 3), b(10, 5, 3);
  for (std::size_t i = 0; i < a.data.size(); ++i) a.data[i] = b.data[i] = 0.01 * (i % 97);
  TrainingSet set;
  set.cameras = {look_at(Vec3(0, 0, 5), Vec3::Zero(), Vec3::UnitY(), {10, 5, 2.5, 10, 5}, 1, 9),
                 look_at(Vec3(5, 0, 0), Vec3::Zero(), Vec3::UnitY(), {10, 5, 2.5, 10, 5}, 1, 9)};
  set.targets = {a, b};

  StreamRng rng(1);
  const auto all = select_ray_batch(set, 100, rng, true);
  std::set<std::pair<int, int>> seen;
  for (const auto& r : all) seen.insert({static_cast<int>(r.image), static_cast<int>(r.pixel)});
  CHECK(seen.size() == 100);
  CHECK_THROWS_AS(select_ray_batch(set, 101, rng, true), InvalidArgument);

  // Pixel 23 of image 1 sits at column 3, row 2.
  for (const auto& r : all)
    if (r.image == 1 && r.pixel == 23) {
      CHECK(r.target[1] == b.at(3, 2, 1));
      const auto px = project_direction(set.cameras[1], r.ray.direction);
      CHECK(px.x == doctest::Approx(3.5));
      CHECK(px.y == doctest::Approx(2.5));
    }

  StreamRng r1(42), r2(42);
  const auto x = select_ray_batch(set, 64, r1), y = select_ray_batch(set, 64, r2);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(x[i].pixel == y[i].pixel);
}

TEST_CASE("ray selection is uniform (chi-square)") {
  TrainingSet set;
  set.cameras = {look_at(Vec3(0, 0, 5), Vec3::Zero(), Vec3::UnitY(), {10, 5, 5, 10, 10}, 1, 9)};
  set.targets = {Image(10, 10, 3)};
  std::vector<double> counts(100, 0.0);
  StreamRng rng(7);
  const int rounds = 1000, per = 1000;
  for (int r = 0; r < rounds; ++r)
    for (const auto& t : select_ray_batch(set, per, rng)) counts[t.pixel] += 1.0;
  const double expect = rounds * per / 100.0;
  double chi2 = 0.0;
  for (double c : counts) chi2 += (c - expect) * (c - expect) / expect;
  const double p = boost::math::cdf(boost::math::complement(boost::math::chi_squared(99), chi2));
  CHECK(p > 0.01);
}

TEST_CASE("config validation") {
  auto c = tiny_config();
  c.warmup_iterations = 31;
  CHECK_THROWS_AS(c.validate(), InvalidArgument);
  c = tiny_config();
  c.learning_rate = 0.0;
  CHECK_THROWS_AS(c.validate(), InvalidArgument);
  c = tiny_config(LossMode::occupancy_rgb);
  c.density_activation = DensityActivation::softplus;
  CHECK_THROWS_AS(c.validate(), InvalidArgument);
  c = tiny_config(LossMode::density_depth);
  CHECK_THROWS_AS(train(c, tiny_set(), kBounds), InvalidArgument);
}

TEST_CASE("zero iterations return the initial state") {
  auto c = tiny_config();
  c.iterations = c.warmup_iterations = 0;
  const auto st = train(c, tiny_set(), kBounds);
  const auto init = initial_state(c, kBounds);
  CHECK(st.iteration == 0);
  CHECK(st.log.empty());
  CHECK(std::equal(st.field.params().begin(), st.field.params().end(), init.field.params().begin()));
}

TEST_CASE("overfitting one pixel") {
  TrainingSet set;
  set.cameras = {look_at(Vec3(0, 0, 5), Vec3::Zero(), Vec3::UnitY(), {1, 0.5, 0.5, 1, 1}, 3, 7)};
  set.targets = {Image(1, 1, 3)};
  set.targets[0].data = {0.8, 0.3, 0.5};
  auto c = tiny_config();
  c.iterations = 500;
  c.warmup_iterations = 0;
  c.batch_rays = 1;
  c.learning_rate = 0.05;
  const auto st = train(c, set, Aabb{Vec3::Constant(-1.0), Vec3::Constant(1.0)});
  // Smoothed over 50-iteration windows the loss never rises.
  std::vector<double> windows;
  for (std::size_t i = 0; i + 50 <= st.log.size(); i += 50) {
    double s = 0.0;
    for (std::size_t j = i; j < i + 50; ++j) s += st.log[j].loss;
    windows.push_back(s / 50);
  }
  for (std::size_t i = 1; i < windows.size(); ++i) CHECK(windows[i] <= windows[i - 1] + 1e-12);
  CHECK(st.log.back().loss < 1e-4);
}

TEST_CASE("training is deterministic and warmup is shared across modes") {
  const auto set = tiny_set();
  const auto c = tiny_config(LossMode::color_density);
  const auto a = train(c, set, kBounds), b = train(c, set, kBounds);
  CHECK(std::equal(a.field.params().begin(), a.field.params().end(), b.field.params().begin()));
  for (std::size_t i = 0; i < a.log.size(); ++i) REQUIRE(a.log[i].loss == b.log[i].loss);

  const auto base = train(tiny_config(LossMode::baseline), set, kBounds);
  for (auto mode : {LossMode::color, LossMode::occupancy_rgb, LossMode::density_rgb}) {
    const auto other = train(tiny_config(mode), set, kBounds);
    for (int i = 0; i < c.warmup_iterations; ++i) {
      REQUIRE(other.log[i].loss == base.log[i].loss);
      REQUIRE(other.log[i].psnr_train == base.log[i].psnr_train);
    }
    CHECK(other.log[c.warmup_iterations].loss != base.log[c.warmup_iterations].loss);
  }

  auto full = tiny_config(LossMode::occupancy_rgb);
  full.warmup_iterations = full.iterations;
  const auto w = train(full, set, kBounds);
  auto pure = tiny_config(LossMode::baseline);
  pure.warmup_iterations = pure.iterations;
  const auto p = train(pure, set, kBounds);
  CHECK(std::equal(w.field.params().begin(), w.field.params().end(), p.field.params().begin()));
}

TEST_CASE("occupancy handoff converts the density slot once") {
  UncertainField f({2, 2, 2}, kBounds);
  f.raw(3, kDensity) = 1.0;
  const double mu = f.activated(3, kDensity), sigma = f.activated(3, kDensitySpread);
  density_to_occupancy(f, 0.2);
  CHECK(f.activated(3, kDensity) == doctest::Approx(1.0 - std::exp(-0.2 * mu)).epsilon(1e-10));
  CHECK(f.activated(3, kDensitySpread) == doctest::Approx(0.2 * std::exp(-0.2 * mu) * sigma).epsilon(1e-10));
  UncertainField soft({2, 2, 2}, kBounds, DensityActivation::softplus);
  CHECK_THROWS_AS(density_to_occupancy(soft, 0.2), InvalidArgument);
}

TEST_CASE("divergence guard") {
  DivergenceGuard g;
  for (int i = 0; i < kGuardReferenceIterations; ++i) CHECK_FALSE(g.observe(-2.0));
  CHECK(g.armed());
  CHECK(g.reference() == -2.0);
  // Limit is -2 + 9 * 2 = 16.
  for (int i = 0; i < kGuardWindow - 1; ++i) CHECK_FALSE(g.observe(17.0));
  CHECK_FALSE(g.observe(15.0));
  for (int i = 0; i < kGuardWindow - 1; ++i) CHECK_FALSE(g.observe(17.0));
  CHECK(g.observe(17.0));
  CHECK(g.fired());
  CHECK_FALSE(g.observe(17.0));
}

TEST_CASE("non-finite parameters abort and non-finite targets are skipped") {
  auto c = tiny_config();
  c.learning_rate = 1e308;
  c.iterations = 20;
  CHECK_THROWS_AS(train(c, tiny_set(), kBounds), TrainingDiverged);

  auto set = tiny_set(4, 1);
  set.targets[0].at(1, 1, 0) = std::numeric_limits<double>::quiet_NaN();
  c = tiny_config();
  c.batch_rays = 16;
  c.sample_without_replacement = true;
  const auto st = train(c, set, kBounds);
  CHECK(st.rejected_rays == static_cast<std::size_t>(c.iterations));
  for (const auto& row : st.log) CHECK(std::isfinite(row.loss));
}

TEST_CASE("checkpoints and logs") {
  const auto dir = std::filesystem::temp_directory_path() / "bnerf_test_ckpt";
  std::filesystem::remove_all(dir);
  auto c = tiny_config();
  c.checkpoint_every = 10;
  c.out_dir = dir;
  const auto st = train(c, tiny_set(), kBounds);
  CHECK(std::filesystem::exists(dir / "checkpoint_000010.bnrf"));
  CHECK(std::filesystem::exists(dir / "checkpoint_000030.json"));
  const auto back = load_checkpoint(dir / "checkpoint_000030.bnrf");
  for (std::size_t i = 0; i < st.field.params().size(); ++i)
    REQUIRE(back.params()[i] == static_cast<double>(static_cast<float>(st.field.params()[i])));
  write_log_csv(dir / "log.csv", st.log, false);
  std::ifstream f(dir / "log.csv");
  std::string header;
  std::getline(f, header);
  CHECK(header == "iteration,loss,psnr_train");
  std::filesystem::remove_all(dir);
}

TEST_CASE("render_view of an untrained field and baseline variance") {
  RigSpec rig;
  rig.width = rig.height = 8;
  const auto cam = orbit_camera(rig, 0.0, 20.0);
  UncertainField f({8, 8, 8}, kBounds);
  for (std::size_t c = 0; c < f.cell_count(); ++c) f.raw(c, kDensity) = -12.0;
  ViewOptions o;
  o.background = Rgb(0.2, 0.4, 0.6);
  const auto v = render_view(f, cam, o);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) {
      CHECK(v.value.at(x, y, 2) == doctest::Approx(0.6).epsilon(1e-3));
      CHECK(v.variance.at(x, y, 0) == kVarianceFloor);
    }
}

TEST_CASE("occupancy variance concentrates on unobserved silhouette edges") {
  const auto ds = generate_dataset(builtin_scene("duo"), RigSpec{});
  TrainConfig c;
  c.iterations = 3000;
  c.warmup_iterations = 300;
  c.batch_rays = 256;
  c.loss_mode = LossMode::occupancy_rgb;
  const auto st = train(c, make_training_set(ds, RenderTarget::rgb), ds.scene.bounds);
  ViewOptions o;
  o.mode = LossMode::occupancy_rgb;
  double edge = 0.0, interior = 0.0;
  int n_edge = 0, n_interior = 0;
  for (const auto& fr : ds.test) {
    const auto v = render_view(st.field, fr.camera, o);
    const auto& d = fr.depth;
    for (int y = 1; y + 1 < d.height; ++y)
      for (int x = 1; x + 1 < d.width; ++x) {
        if (d.at(x, y) <= 0.0) continue;
        bool on_edge = false;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) on_edge |= d.at(x + dx, y + dy) <= 0.0;
        const double var = (v.variance.at(x, y, 0) + v.variance.at(x, y, 1) + v.variance.at(x, y, 2)) / 3.0;
        (on_edge ? edge : interior) += var;
        ++(on_edge ? n_edge : n_interior);
      }
  }
  REQUIRE(n_edge > 0);
  REQUIRE(n_interior > 0);
  CHECK(edge / n_edge > 1.5 * (interior / n_interior));
}
