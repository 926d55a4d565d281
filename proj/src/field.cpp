#include "bnerf/field.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>

namespace bnerf {

namespace {

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double softplus(double x) {
  if (x > 30.0) return x;
  return std::log1p(std::exp(x));
}

}  // namespace

double activate(double raw, ActivationKind kind, DensityActivation density_act) {
  switch (kind) {
    case ActivationKind::density:
      return density_act == DensityActivation::sigmoid ? sigmoid(raw) : softplus(raw);
    case ActivationKind::spread:
      return softplus(raw) + kSigmaFloor;
    case ActivationKind::color:
      return sigmoid(raw);
  }
  return 0.0;
}

double activate_derivative(double raw, ActivationKind kind, DensityActivation density_act) {
  if (kind == ActivationKind::spread ||
      (kind == ActivationKind::density && density_act == DensityActivation::softplus)) {
    return sigmoid(raw);
  }
  const double s = sigmoid(raw);
  return s * (1.0 - s);
}

double deactivate(double value, ActivationKind kind, DensityActivation density_act) {
  static constexpr double kTiny = 1e-12;
  auto logit = [](double y) {
    y = std::clamp(y, kTiny, 1.0 - kTiny);
    return std::log(y) - std::log1p(-y);
  };
  auto inv_softplus = [](double y) {
    y = std::max(y, kTiny);
    return y > 30.0 ? y : std::log(std::expm1(y));
  };
  switch (kind) {
    case ActivationKind::density:
      return density_act == DensityActivation::sigmoid ? logit(value) : inv_softplus(value);
    case ActivationKind::spread:
      return inv_softplus(value - kSigmaFloor);
    case ActivationKind::color:
      return logit(value);
  }
  return 0.0;
}

FieldSample vacuum_sample(const Vec3& position) {
  FieldSample s;
  s.position = position;
  return s;
}

ActivationKind channel_activation(int channel) {
  if (channel == kDensity) return ActivationKind::density;
  if (channel == kDensitySpread || channel >= kColorSpread) return ActivationKind::spread;
  return ActivationKind::color;
}

UncertainField::UncertainField(GridResolution resolution, Aabb bounds, DensityActivation density_act)
    : resolution_(resolution), bounds_(std::move(bounds)), density_act_(density_act) {
  for (int n : resolution_) {
    if (n < 1) throw InvalidArgument("field resolution must be positive on every axis");
  }
  if (!(bounds_.max.array() > bounds_.min.array()).all()) {
    throw InvalidArgument("field bounds must have positive extent");
  }
  cell_count_ = static_cast<std::size_t>(resolution_[0]) * resolution_[1] * resolution_[2];
  params_.resize(cell_count_ * kChannels);
  for (std::size_t c = 0; c < cell_count_; ++c) {
    double* p = &params_[c * kChannels];
    p[kDensity] = kInitDensityRaw;
    p[kDensitySpread] = kInitSpreadRaw;
    for (int k = 0; k < 3; ++k) {
      p[kColor + k] = kInitColorRaw;
      p[kColorSpread + k] = kInitSpreadRaw;
    }
  }
}

Vec3 UncertainField::cell_size() const {
  return bounds_.extent().cwiseQuotient(Vec3(resolution_[0], resolution_[1], resolution_[2]));
}

Vec3 UncertainField::cell_center(int ix, int iy, int iz) const {
  return bounds_.min + (Vec3(ix, iy, iz).array() + 0.5).matrix().cwiseProduct(cell_size());
}

double UncertainField::activated(std::size_t cell, int channel) const {
  return activate(raw(cell, channel), channel_activation(channel), density_act_);
}

std::optional<TrilinearStencil> trilinear_stencil(const GridResolution& resolution,
                                                  const Aabb& bounds, const Vec3& position) {
  if (!bounds.contains(position)) return std::nullopt;
  std::array<int, 3> lo{};
  std::array<int, 3> hi{};
  std::array<double, 3> frac{};
  for (int a = 0; a < 3; ++a) {
    const int n = resolution[a];
    const double cell = (bounds.max[a] - bounds.min[a]) / n;
    double g = (position[a] - bounds.min[a]) / cell - 0.5;
    g = std::clamp(g, 0.0, static_cast<double>(n - 1));
    int i0 = static_cast<int>(std::floor(g));
    i0 = std::min(i0, std::max(n - 2, 0));
    lo[a] = i0;
    hi[a] = std::min(i0 + 1, n - 1);
    frac[a] = n == 1 ? 0.0 : g - i0;
  }
  TrilinearStencil st;
  for (int corner = 0; corner < 8; ++corner) {
    const int dx = (corner >> 2) & 1;
    const int dy = (corner >> 1) & 1;
    const int dz = corner & 1;
    const int ix = dx ? hi[0] : lo[0];
    const int iy = dy ? hi[1] : lo[1];
    const int iz = dz ? hi[2] : lo[2];
    st.cells[corner] = (static_cast<std::size_t>(ix) * resolution[1] + iy) * resolution[2] + iz;
    st.weights[corner] = (dx ? frac[0] : 1.0 - frac[0]) * (dy ? frac[1] : 1.0 - frac[1]) *
                         (dz ? frac[2] : 1.0 - frac[2]);
  }
  return st;
}

namespace {

FieldSample blend(const Vec3& position, const TrilinearStencil& st,
                  const auto& value_of /* (cell, channel) -> activated */) {
  FieldSample s;
  s.position = position;
  s.density_mean = 0.0;
  s.density_spread = 0.0;
  s.color_mean = Rgb::Zero();
  s.color_spread = Rgb::Zero();
  for (int k = 0; k < 8; ++k) {
    const double w = st.weights[k];
    const std::size_t c = st.cells[k];
    s.density_mean += w * value_of(c, kDensity);
    s.density_spread += w * value_of(c, kDensitySpread);
    for (int ch = 0; ch < 3; ++ch) {
      s.color_mean[ch] += w * value_of(c, kColor + ch);
      s.color_spread[ch] += w * value_of(c, kColorSpread + ch);
    }
  }
  return s;
}

}  // namespace

std::optional<FieldSample> sample_field(const UncertainField& field, const Vec3& position) {
  const auto st = trilinear_stencil(field.resolution(), field.bounds(), position);
  if (!st) return std::nullopt;
  return blend(position, *st,
               [&](std::size_t c, int ch) { return field.activated(c, ch); });
}

void accumulate_field_gradient(const UncertainField& field, const Vec3& position,
                               const FieldSampleGrad& upstream, std::span<double> raw_grad) {
  if (raw_grad.size() != field.params().size()) {
    throw InvalidArgument("gradient buffer does not match field parameter count");
  }
  const auto st = trilinear_stencil(field.resolution(), field.bounds(), position);
  if (!st) return;
  const auto dact = field.density_activation();
  for (int k = 0; k < 8; ++k) {
    const double w = st->weights[k];
    if (w == 0.0) continue;
    const std::size_t c = st->cells[k];
    double* g = &raw_grad[c * kChannels];
    auto chain = [&](int ch, double up) {
      g[ch] += w * up * activate_derivative(field.raw(c, ch), channel_activation(ch), dact);
    };
    chain(kDensity, upstream.density_mean);
    chain(kDensitySpread, upstream.density_spread);
    for (int i = 0; i < 3; ++i) {
      chain(kColor + i, upstream.color_mean[i]);
      chain(kColorSpread + i, upstream.color_spread[i]);
    }
  }
}

ActivatedField::ActivatedField(const UncertainField& field)
    : resolution_(field.resolution()), bounds_(field.bounds()) {
  const auto raw = field.params();
  values_.resize(raw.size());
  const auto dact = field.density_activation();
  for (std::size_t i = 0; i < raw.size(); ++i) {
    values_[i] = activate(raw[i], channel_activation(static_cast<int>(i % kChannels)), dact);
  }
}

std::optional<FieldSample> ActivatedField::sample(const Vec3& position) const {
  const auto st = stencil(position);
  if (!st) return std::nullopt;
  return blend(position, *st,
               [&](std::size_t c, int ch) { return values_[c * kChannels + ch]; });
}

void scatter_activated_gradient(const TrilinearStencil& st, const FieldSampleGrad& up,
                                std::span<double> activated_grad) {
  for (int k = 0; k < 8; ++k) {
    const double w = st.weights[k];
    if (w == 0.0) continue;
    double* g = &activated_grad[st.cells[k] * kChannels];
    g[kDensity] += w * up.density_mean;
    g[kDensitySpread] += w * up.density_spread;
    for (int i = 0; i < 3; ++i) {
      g[kColor + i] += w * up.color_mean[i];
      g[kColorSpread + i] += w * up.color_spread[i];
    }
  }
}

void chain_activation(const UncertainField& field, std::span<const double> activated_grad,
                      std::span<double> raw_grad) {
  const auto raw = field.params();
  const auto dact = field.density_activation();
  for (std::size_t i = 0; i < raw.size(); ++i) {
    const double g = activated_grad[i];
    raw_grad[i] =
        g == 0.0 ? 0.0
                 : g * activate_derivative(raw[i], channel_activation(static_cast<int>(i % kChannels)),
                                           dact);
  }
}

void density_to_occupancy(UncertainField& field, double delta) {
  if (field.density_activation() != DensityActivation::sigmoid)
    throw InvalidArgument("occupancy needs a sigmoid density activation");
  if (!(delta > 0.0)) throw InvalidArgument("segment length must be positive");
  for (std::size_t c = 0; c < field.cell_count(); ++c) {
    const double mu = field.activated(c, kDensity);
    const double sigma = field.activated(c, kDensitySpread);
    field.raw(c, kDensity) = deactivate(-std::expm1(-delta * mu), ActivationKind::density);
    field.raw(c, kDensitySpread) =
        deactivate(std::max(delta * std::exp(-delta * mu) * sigma, kSigmaFloor), ActivationKind::spread);
  }
}

// ---------------------------------------------------------------------------
// Checkpoint

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little-endian host");

constexpr char kMagic[4] = {'B', 'N', 'R', 'F'};

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is, const char* what) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw ParseError(std::string("checkpoint truncated while reading ") + what);
  return v;
}

// Slot order inside each raw array: density, density spread, color (3), color spread (3).
struct ArraySpec {
  int first_channel;
  int width;
};
constexpr std::array<ArraySpec, 4> kArrays{{{kDensity, 1}, {kDensitySpread, 1}, {kColor, 3}, {kColorSpread, 3}}};

}  // namespace

void save_checkpoint(const UncertainField& field, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open checkpoint for writing: " + path.string());
  os.write(kMagic, 4);
  put<std::uint32_t>(os, kCheckpointVersion);
  for (int n : field.resolution()) put<std::uint32_t>(os, static_cast<std::uint32_t>(n));
  for (int a = 0; a < 3; ++a) put<double>(os, field.bounds().min[a]);
  for (int a = 0; a < 3; ++a) put<double>(os, field.bounds().max[a]);
  for (const auto& arr : kArrays) {
    for (std::size_t c = 0; c < field.cell_count(); ++c) {
      for (int k = 0; k < arr.width; ++k) {
        put<float>(os, static_cast<float>(field.raw(c, arr.first_channel + k)));
      }
    }
  }
  if (!os) throw std::runtime_error("failed writing checkpoint: " + path.string());
}

UncertainField load_checkpoint(const std::filesystem::path& path, DensityActivation density_act) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ParseError("cannot open checkpoint: " + path.string());
  char magic[4] = {};
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0) {
    throw ParseError("not a field checkpoint (bad magic): " + path.string());
  }
  const auto version = get<std::uint32_t>(is, "version");
  if (version != kCheckpointVersion) {
    throw ParseError("unsupported checkpoint version " + std::to_string(version));
  }
  GridResolution res{};
  for (int& n : res) n = static_cast<int>(get<std::uint32_t>(is, "resolution"));
  Aabb bounds;
  for (int a = 0; a < 3; ++a) bounds.min[a] = get<double>(is, "bounds");
  for (int a = 0; a < 3; ++a) bounds.max[a] = get<double>(is, "bounds");
  UncertainField field(res, bounds, density_act);
  for (const auto& arr : kArrays) {
    for (std::size_t c = 0; c < field.cell_count(); ++c) {
      for (int k = 0; k < arr.width; ++k) {
        field.raw(c, arr.first_channel + k) = get<float>(is, "parameters");
      }
    }
  }
  return field;
}

}  // namespace bnerf
