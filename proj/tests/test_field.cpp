#include "bnerf/field.hpp"
#include "test_util.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>

using namespace bnerf;

namespace {

// Tent-weight interpolation over every cell; independent of trilinear_stencil.
double reference_interpolate(const UncertainField& f, const Vec3& p, int channel) {
  const auto& res = f.resolution();
  const Vec3 cell = f.cell_size();
  double total = 0.0;
  for (int ix = 0; ix < res[0]; ++ix) {
    for (int iy = 0; iy < res[1]; ++iy) {
      for (int iz = 0; iz < res[2]; ++iz) {
        double w = 1.0;
        const int idx[3] = {ix, iy, iz};
        for (int a = 0; a < 3; ++a) {
          double g = (p[a] - f.bounds().min[a]) / cell[a] - 0.5;
          g = std::min(std::max(g, 0.0), res[a] - 1.0);
          w *= std::max(0.0, 1.0 - std::abs(g - idx[a]));
        }
        if (w > 0.0) total += w * f.activated(f.cell_index(ix, iy, iz), channel);
      }
    }
  }
  return total;
}

Vec3 random_point(const Aabb& box, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  return box.min + Vec3(u(rng), u(rng), u(rng)).cwiseProduct(box.extent());
}

double get_entry(const FieldSample& s, int k) {
  if (k == 0) return s.density_mean;
  if (k == 1) return s.density_spread;
  if (k < 5) return s.color_mean[k - 2];
  return s.color_spread[k - 5];
}

void set_entry(FieldSampleGrad& g, int k, double v) {
  if (k == 0) g.density_mean = v;
  else if (k == 1) g.density_spread = v;
  else if (k < 5) g.color_mean[k - 2] = v;
  else g.color_spread[k - 5] = v;
}

}  // namespace

TEST_CASE("activate matches its closed forms") {
  CHECK(activate(0.0, ActivationKind::density) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(activate(0.0, ActivationKind::color) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(activate(0.0, ActivationKind::spread) == doctest::Approx(std::log(2.0) + kSigmaFloor).epsilon(1e-15));
  CHECK(std::abs(activate(-50.0, ActivationKind::spread) - kSigmaFloor) < 1e-12);
  CHECK(activate(0.0, ActivationKind::density, DensityActivation::softplus) ==
        doctest::Approx(std::log(2.0)));
}

TEST_CASE("activation ranges hold over a raw sweep") {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(-100.0, 100.0);
  for (int i = 0; i < 100000; ++i) {
    const double r = u(rng);
    const double sp = activate(r, ActivationKind::spread);
    REQUIRE(sp >= kSigmaFloor);
    const double d = activate(r, ActivationKind::density);
    REQUIRE(d >= 0.0);
    REQUIRE(d <= 1.0);
  }
  // strict interior for moderate raw values
  CHECK(activate(-30.0, ActivationKind::density) > 0.0);
  CHECK(activate(30.0, ActivationKind::color) < 1.0);
}

TEST_CASE("activation derivatives agree with central differences") {
  for (auto kind : {ActivationKind::density, ActivationKind::spread, ActivationKind::color}) {
    for (double r : {-4.0, -0.7, 0.0, 1.3, 5.0}) {
      const double h = 1e-6;
      const double fd = (activate(r + h, kind) - activate(r - h, kind)) / (2 * h);
      CHECK(test::relative_error(activate_derivative(r, kind), fd) < 1e-7);
    }
  }
}

TEST_CASE("constant field interpolates to the constant") {
  UncertainField f({4, 4, 4}, Aabb{});
  std::mt19937_64 rng(1);
  for (int i = 0; i < 50; ++i) {
    const auto s = sample_field(f, random_point(f.bounds(), rng));
    REQUIRE(s);
    CHECK(s->density_mean == doctest::Approx(activate(UncertainField::kInitDensityRaw, ActivationKind::density)));
  }
  for (double& p : f.params()) p = 0.0;
  const auto s = sample_field(f, Vec3(0.1, -0.3, 0.45));
  REQUIRE(s);
  CHECK(s->density_mean == doctest::Approx(0.5).epsilon(1e-14));
}

TEST_CASE("cell centers return the cell's own values") {
  UncertainField f({3, 4, 5}, Aabb{Vec3(-1, -2, 0), Vec3(2, 2, 5)});
  std::mt19937_64 rng(2);
  test::randomize(f, rng);
  for (int ix = 0; ix < 3; ++ix) {
    for (int iy = 0; iy < 4; ++iy) {
      for (int iz = 0; iz < 5; ++iz) {
        const auto s = sample_field(f, f.cell_center(ix, iy, iz));
        REQUIRE(s);
        const auto c = f.cell_index(ix, iy, iz);
        for (int k = 0; k < kChannels; ++k) CHECK(get_entry(*s, k) == doctest::Approx(f.activated(c, k)).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("trilinear interpolation matches an independent tent-weight sum") {
  UncertainField f({5, 3, 4}, Aabb{Vec3(-1, -1, -1), Vec3(1, 2, 0.5)});
  std::mt19937_64 rng(3);
  test::randomize(f, rng);
  for (int i = 0; i < 200; ++i) {
    const Vec3 p = random_point(f.bounds(), rng);
    const auto s = sample_field(f, p);
    REQUIRE(s);
    for (int k = 0; k < kChannels; ++k) CHECK(std::abs(get_entry(*s, k) - reference_interpolate(f, p, k)) < 1e-12);
    const auto st = trilinear_stencil(f.resolution(), f.bounds(), p);
    double wsum = 0.0;
    for (double w : st->weights) wsum += w;
    CHECK(std::abs(wsum - 1.0) < 1e-15);
  }
}

TEST_CASE("interpolated values stay inside the surrounding cell range") {
  UncertainField f({6, 6, 6}, Aabb{});
  std::mt19937_64 rng(4);
  test::randomize(f, rng, 5.0);
  for (int i = 0; i < 500; ++i) {
    const Vec3 p = random_point(f.bounds(), rng);
    const auto st = *trilinear_stencil(f.resolution(), f.bounds(), p);
    const auto s = *sample_field(f, p);
    for (int k = 0; k < kChannels; ++k) {
      double lo = 1e300, hi = -1e300;
      for (auto c : st.cells) {
        lo = std::min(lo, f.activated(c, k));
        hi = std::max(hi, f.activated(c, k));
      }
      CHECK(get_entry(s, k) >= lo - 1e-14);
      CHECK(get_entry(s, k) <= hi + 1e-14);
      if (k == kDensitySpread || k >= kColorSpread) CHECK(get_entry(s, k) >= kSigmaFloor);
    }
  }
}

TEST_CASE("sample_field is Lipschitz along each axis inside a cell") {
  UncertainField f({5, 5, 5}, Aabb{});
  std::mt19937_64 rng(5);
  test::randomize(f, rng, 3.0);
  const Vec3 h = f.cell_size();
  for (int i = 0; i < 300; ++i) {
    const Vec3 p = random_point(Aabb{Vec3::Constant(-0.7), Vec3::Constant(0.7)}, rng);
    const auto st = *trilinear_stencil(f.resolution(), f.bounds(), p);
    const auto s0 = *sample_field(f, p);
    for (int a = 0; a < 3; ++a) {
      const double eps = 1e-4;
      Vec3 q = p;
      q[a] += eps;
      const auto s1 = *sample_field(f, q);
      for (int k = 0; k < kChannels; ++k) {
        double lo = 1e300, hi = -1e300;
        for (auto c : st.cells) {
          lo = std::min(lo, f.activated(c, k));
          hi = std::max(hi, f.activated(c, k));
        }
        // Moving may cross into the next cell; allow its range too via a small slack.
        CHECK(std::abs(get_entry(s1, k) - get_entry(s0, k)) <= eps * (hi - lo) / h[a] + 1e-6 * eps);
      }
    }
  }
}

TEST_CASE("outside the bounds there is no sample") {
  UncertainField f({2, 2, 2}, Aabb{});
  CHECK_FALSE(sample_field(f, Vec3(1.5, 0, 0)).has_value());
  CHECK(sample_field(f, Vec3(1.0, 1.0, -1.0)).has_value());
  std::vector<double> g(f.params().size(), 0.0);
  FieldSampleGrad up;
  up.density_mean = 1.0;
  accumulate_field_gradient(f, Vec3(0, 0, 3), up, g);
  for (double v : g) CHECK(v == 0.0);
}

TEST_CASE("field gradient: zero upstream and constant-field sum") {
  UncertainField f({3, 3, 3}, Aabb{});
  std::vector<double> g(f.params().size(), 0.0);
  accumulate_field_gradient(f, Vec3(0.2, 0.1, -0.3), FieldSampleGrad{}, g);
  for (double v : g) CHECK(v == 0.0);

  FieldSampleGrad up;
  up.density_mean = 1.0;
  accumulate_field_gradient(f, Vec3(0.2, 0.1, -0.3), up, g);
  double sum = 0.0;
  for (std::size_t c = 0; c < f.cell_count(); ++c) sum += g[c * kChannels + kDensity];
  CHECK(sum == doctest::Approx(activate_derivative(UncertainField::kInitDensityRaw, ActivationKind::density)).epsilon(1e-14));
}

TEST_CASE("field gradient matches central finite differences on raw parameters") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    UncertainField f({3, 4, 3}, Aabb{Vec3(-1, -1, -1), Vec3(1, 1.5, 1)});
    test::randomize(f, rng);
    const Vec3 p = random_point(f.bounds(), rng);
    FieldSampleGrad up;
    up.density_mean = u(rng);
    up.density_spread = u(rng);
    up.color_mean = Rgb(u(rng), u(rng), u(rng));
    up.color_spread = Rgb(u(rng), u(rng), u(rng));
    auto objective = [&](const UncertainField& ff) {
      const auto s = *sample_field(ff, p);
      double v = up.density_mean * s.density_mean + up.density_spread * s.density_spread;
      v += (up.color_mean * s.color_mean).sum() + (up.color_spread * s.color_spread).sum();
      return v;
    };
    std::vector<double> g(f.params().size(), 0.0);
    accumulate_field_gradient(f, p, up, g);
    const auto st = *trilinear_stencil(f.resolution(), f.bounds(), p);
    for (auto cell : st.cells) {
      for (int k = 0; k < kChannels; ++k) {
        const std::size_t idx = cell * kChannels + k;
        const double h = 1e-4;
        const double orig = f.params()[idx];
        f.params()[idx] = orig + h;
        const double fp = objective(f);
        f.params()[idx] = orig - h;
        const double fm = objective(f);
        f.params()[idx] = orig;
        const double fd = (fp - fm) / (2 * h);
        if (std::abs(g[idx]) < 1e-9 && std::abs(fd) < 1e-9) continue;
        worst = std::max(worst, test::relative_error(g[idx], fd));
      }
    }
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("activated snapshot path equals the direct gradient path") {
  std::mt19937_64 rng(12);
  UncertainField f({4, 4, 4}, Aabb{});
  test::randomize(f, rng);
  ActivatedField snap(f);
  std::vector<double> direct(f.params().size(), 0.0), act(f.params().size(), 0.0), via(f.params().size(), 0.0);
  for (int i = 0; i < 20; ++i) {
    const Vec3 p = random_point(f.bounds(), rng);
    const auto a = *sample_field(f, p);
    const auto b = *snap.sample(p);
    for (int k = 0; k < kChannels; ++k) CHECK(std::abs(get_entry(a, k) - get_entry(b, k)) < 1e-15);
    FieldSampleGrad up;
    for (int k = 0; k < kChannels; ++k) set_entry(up, k, std::sin(i + k));
    accumulate_field_gradient(f, p, up, direct);
    scatter_activated_gradient(*snap.stencil(p), up, act);
  }
  chain_activation(f, act, via);
  for (std::size_t i = 0; i < direct.size(); ++i) CHECK(std::abs(direct[i] - via[i]) < 1e-12);
}

TEST_CASE("checkpoint round trip and validation") {
  const auto dir = std::filesystem::temp_directory_path() / "bnerf_field_test";
  std::filesystem::create_directories(dir);
  std::mt19937_64 rng(13);
  UncertainField f({3, 2, 5}, Aabb{Vec3(-1, -2, -3), Vec3(1, 2, 3)});
  test::randomize(f, rng);
  save_checkpoint(f, dir / "a.bnrf");
  const auto g = load_checkpoint(dir / "a.bnrf");
  CHECK(g.resolution() == f.resolution());
  CHECK(g.bounds().min == f.bounds().min);
  CHECK(g.bounds().max == f.bounds().max);
  for (std::size_t i = 0; i < f.params().size(); ++i) {
    CHECK(g.params()[i] == static_cast<double>(static_cast<float>(f.params()[i])));
  }
  // header layout: magic, version, resolution, bounds, then 8 floats per cell
  CHECK(std::filesystem::file_size(dir / "a.bnrf") == 4 + 4 + 12 + 48 + f.cell_count() * 8 * 4);

  {
    std::ofstream os(dir / "bad.bnrf", std::ios::binary);
    os << "XXXXjunk";
  }
  CHECK_THROWS_AS(load_checkpoint(dir / "bad.bnrf"), ParseError);
  {
    std::ofstream os(dir / "ver.bnrf", std::ios::binary);
    os.write("BNRF", 4);
    const std::uint32_t v = 99;
    os.write(reinterpret_cast<const char*>(&v), 4);
  }
  CHECK_THROWS_AS(load_checkpoint(dir / "ver.bnrf"), ParseError);
  std::filesystem::remove_all(dir);
}
