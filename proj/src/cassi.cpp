#include "sci/cassi.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace sci {

using i64 = std::int64_t;

template <class S>
HsiCube<S> HsiCube<S>::zeros(i64 width, i64 height, i64 bands) {
  if (width < 1 || height < 1 || bands < 1)
    throw DimensionError("cube extents must be positive, got " + shape_str(Shape{width, height, bands}));
  HsiCube c;
  c.width = width;
  c.height = height;
  c.bands = bands;
  c.values = Vec<S>::Zero(width * height * bands);
  return c;
}

template <class S>
void HsiCube<S>::validate() const {
  if (width < 1 || height < 1 || bands < 1 || values.size() != size())
    throw DimensionError("malformed cube " + shape_str(Shape{width, height, bands}));
  for (i64 i = 0; i < values.size(); ++i)
    if (!std::isfinite(values[i]) || values[i] < S(0))
      throw NumericError("cube value at index " + std::to_string(i) + " is negative or non-finite");
}

template <class S>
CodedAperture<S> CodedAperture<S>::random_binary(std::uint64_t seed, i64 width, i64 height) {
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution coin(0.5);
  CodedAperture m;
  m.width = width;
  m.height = height;
  m.values.resize(width * height);
  for (i64 i = 0; i < m.values.size(); ++i) m.values[i] = coin(rng) ? S(1) : S(0);
  return m;
}

template <class S>
CodedAperture<S> CodedAperture<S>::constant(i64 width, i64 height, S value) {
  CodedAperture m;
  m.width = width;
  m.height = height;
  m.values = Vec<S>::Constant(width * height, value);
  return m;
}

template <class S>
void CodedAperture<S>::validate() const {
  if (width < 1 || height < 1 || values.size() != width * height)
    throw DimensionError("malformed mask " + shape_str(Shape{width, height}));
  for (i64 i = 0; i < values.size(); ++i)
    if (!(values[i] >= S(0) && values[i] <= S(1)))
      throw NumericError("mask value at index " + std::to_string(i) + " outside [0,1]");
}

template <class S>
HsiCube<S> shift_cube(const HsiCube<S>& x, const ShiftSpec& spec) {
  if (spec.step < 0) throw DimensionError("dispersion step must be nonnegative");
  auto out = HsiCube<S>::zeros(x.width, spec.shifted_height(x.height, x.bands), x.bands);
  for (i64 l = 0; l < x.bands; ++l) {
    const i64 d = spec.offset(l);
    for (i64 r = 0; r < x.height; ++r)
      for (i64 c = 0; c < x.width; ++c) out.at(l, r + d, c) = x.at(l, r, c);
  }
  return out;
}

template <class S>
HsiCube<S> unshift_cube(const HsiCube<S>& shifted, i64 height, const ShiftSpec& spec) {
  if (spec.shifted_height(height, shifted.bands) != shifted.height)
    throw DimensionError("shifted cube height " + std::to_string(shifted.height) + " does not match height " +
                         std::to_string(height));
  auto out = HsiCube<S>::zeros(shifted.width, height, shifted.bands);
  for (i64 l = 0; l < shifted.bands; ++l) {
    const i64 d = spec.offset(l);
    for (i64 r = 0; r < height; ++r)
      for (i64 c = 0; c < shifted.width; ++c) out.at(l, r, c) = shifted.at(l, r + d, c);
  }
  return out;
}

template <class S>
SensingOperator<S>::SensingOperator(const CodedAperture<S>& mask, i64 bands, ShiftSpec spec)
    : mask_(mask), spec_(spec), width_(mask.width), height_(mask.height), bands_(bands) {
  mask_.validate();
  if (bands < 1) throw DimensionError("sensing operator needs at least one band");
  if (spec.step < 0) throw DimensionError("dispersion step must be nonnegative");
  shifted_height_ = spec.shifted_height(height_, bands_);
  shifted_mask_ = Vec<S>::Zero(width_ * shifted_height_ * bands_);
  phi_ = Vec<S>::Zero(width_ * shifted_height_);
  for (i64 l = 0; l < bands_; ++l) {
    const i64 d = spec_.offset(l);
    for (i64 r = 0; r < height_; ++r)
      for (i64 c = 0; c < width_; ++c) shifted_mask_[(l * shifted_height_ + r + d) * width_ + c] = mask_.values[r * width_ + c];
  }
  for (i64 l = 0; l < bands_; ++l)
    for (i64 p = 0; p < width_ * shifted_height_; ++p) {
      const S m = shifted_mask_[l * width_ * shifted_height_ + p];
      phi_[p] += m * m;
    }
}

template <class S>
void SensingOperator<S>::apply(const S* cube, S* meas) const {
  std::fill_n(meas, measurement_size(), S(0));
  for (i64 l = 0; l < bands_; ++l) {
    const i64 d = spec_.offset(l);
    for (i64 r = 0; r < height_; ++r) {
      const S* src = cube + (l * height_ + r) * width_;
      const S* m = shifted_mask_.data() + (l * shifted_height_ + r + d) * width_;
      S* dst = meas + (r + d) * width_;
      for (i64 c = 0; c < width_; ++c) dst[c] += src[c] * m[c];
    }
  }
}

template <class S>
void SensingOperator<S>::apply_adjoint(const S* meas, S* cube) const {
  for (i64 l = 0; l < bands_; ++l) {
    const i64 d = spec_.offset(l);
    for (i64 r = 0; r < height_; ++r) {
      S* dst = cube + (l * height_ + r) * width_;
      const S* m = shifted_mask_.data() + (l * shifted_height_ + r + d) * width_;
      const S* src = meas + (r + d) * width_;
      for (i64 c = 0; c < width_; ++c) dst[c] = src[c] * m[c];
    }
  }
}

template <class S>
void SensingOperator<S>::divide_phi(const S* meas, S* out) const {
  for (i64 p = 0; p < measurement_size(); ++p) out[p] = phi_[p] > S(0) ? meas[p] / phi_[p] : S(0);
}

template <class S>
Vec<S> SensingOperator<S>::apply(const Vec<S>& cube) const {
  if (cube.size() != cube_size())
    throw DimensionError("cube has " + std::to_string(cube.size()) + " values, operator expects " +
                         std::to_string(cube_size()));
  Vec<S> y(measurement_size());
  apply(cube.data(), y.data());
  return y;
}

template <class S>
Vec<S> SensingOperator<S>::apply_adjoint(const Vec<S>& meas) const {
  if (meas.size() != measurement_size())
    throw DimensionError("measurement has " + std::to_string(meas.size()) + " values, operator expects " +
                         std::to_string(measurement_size()));
  Vec<S> x(cube_size());
  apply_adjoint(meas.data(), x.data());
  return x;
}

namespace {

template <class S>
void check_cube(const HsiCube<S>& x, const SensingOperator<S>& op) {
  if (x.width != op.width() || x.height != op.height() || x.bands != op.bands() || x.values.size() != x.size())
    throw DimensionError("cube " + shape_str(Shape{x.width, x.height, x.bands}) + " does not match operator " +
                         shape_str(Shape{op.width(), op.height(), op.bands()}));
}

template <class S>
void check_measurement(const Measurement<S>& y, const SensingOperator<S>& op) {
  if (y.width != op.width() || y.height != op.shifted_height() || y.values.size() != op.measurement_size())
    throw DimensionError("measurement " + shape_str(Shape{y.width, y.height}) + " does not match operator " +
                         shape_str(Shape{op.width(), op.shifted_height()}));
}

}  // namespace

template <class S>
Measurement<S> forward(const HsiCube<S>& x, const SensingOperator<S>& op) {
  check_cube(x, op);
  Measurement<S> y;
  y.width = op.width();
  y.height = op.shifted_height();
  y.values = op.apply(x.values);
  return y;
}

template <class S>
Measurement<S> forward(const HsiCube<S>& x, const SensingOperator<S>& op, S noise_sigma, std::mt19937_64& rng) {
  if (noise_sigma < S(0)) throw UsageError("noise sigma must be nonnegative");
  auto y = forward(x, op);
  y.noise_sigma = noise_sigma;
  if (noise_sigma > S(0)) {
    std::normal_distribution<double> noise(0.0, static_cast<double>(noise_sigma));
    for (i64 i = 0; i < y.values.size(); ++i) y.values[i] += static_cast<S>(noise(rng));
  }
  return y;
}

template <class S>
HsiCube<S> adjoint(const Measurement<S>& y, const SensingOperator<S>& op) {
  check_measurement(y, op);
  auto x = HsiCube<S>::zeros(op.width(), op.height(), op.bands());
  x.values = op.apply_adjoint(y.values);
  return x;
}

template <class S>
HsiCube<S> normalize_measurement(const Measurement<S>& y, const SensingOperator<S>& op) {
  check_measurement(y, op);
  Vec<S> q(op.measurement_size());
  op.divide_phi(y.values.data(), q.data());
  auto x = HsiCube<S>::zeros(op.width(), op.height(), op.bands());
  op.apply_adjoint(q.data(), x.values.data());
  return x;
}

SceneKind parse_scene_kind(const std::string& name) {
  if (name == "gaussian_blobs") return SceneKind::gaussian_blobs;
  if (name == "spectral_ramps") return SceneKind::spectral_ramps;
  if (name == "checker") return SceneKind::checker;
  throw UsageError("unknown scene kind '" + name + "'");
}

std::string scene_kind_name(SceneKind kind) {
  switch (kind) {
    case SceneKind::gaussian_blobs: return "gaussian_blobs";
    case SceneKind::spectral_ramps: return "spectral_ramps";
    case SceneKind::checker: return "checker";
  }
  return "unknown";
}

namespace {

// Smooth reflectance-like curve: baseline plus one Gaussian bump.
std::vector<double> random_spectrum(std::mt19937_64& rng, i64 bands) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double centre = u(rng);
  const double width = 0.15 + 0.35 * u(rng);
  const double amp = 0.4 + 0.5 * u(rng);
  const double base = 0.02 + 0.18 * u(rng);
  std::vector<double> s(static_cast<std::size_t>(bands));
  for (i64 l = 0; l < bands; ++l) {
    const double t = bands > 1 ? static_cast<double>(l) / static_cast<double>(bands - 1) : 0.5;
    const double z = (t - centre) / width;
    s[static_cast<std::size_t>(l)] = std::clamp(base + amp * std::exp(-0.5 * z * z), 0.0, 1.0);
  }
  return s;
}

}  // namespace

template <class S>
HsiCube<S> make_synthetic_scene(std::uint64_t seed, i64 width, i64 height, i64 bands, SceneKind kind) {
  if (width < 8 || height < 8 || bands < 1)
    throw UsageError("synthetic scenes need extents >= 8 and at least one band");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto cube = HsiCube<S>::zeros(width, height, bands);
  std::vector<double> acc(static_cast<std::size_t>(cube.size()), 0.0);
  auto put = [&](i64 l, i64 r, i64 c, double v) { acc[static_cast<std::size_t>((l * height + r) * width + c)] += v; };

  switch (kind) {
    case SceneKind::gaussian_blobs: {
      const auto bg = random_spectrum(rng, bands);
      const double bg_level = 0.1 + 0.2 * u(rng);
      for (i64 l = 0; l < bands; ++l)
        for (i64 r = 0; r < height; ++r)
          for (i64 c = 0; c < width; ++c) put(l, r, c, bg_level * bg[static_cast<std::size_t>(l)]);
      const int blobs = 3 + static_cast<int>(u(rng) * 4.0);
      const double extent = static_cast<double>(std::min(width, height));
      for (int k = 0; k < blobs; ++k) {
        const double cy = u(rng) * static_cast<double>(height);
        const double cx = u(rng) * static_cast<double>(width);
        const double radius = (0.08 + 0.22 * u(rng)) * extent;
        const auto spec = random_spectrum(rng, bands);
        for (i64 r = 0; r < height; ++r)
          for (i64 c = 0; c < width; ++c) {
            const double dy = (static_cast<double>(r) - cy) / radius;
            const double dx = (static_cast<double>(c) - cx) / radius;
            const double g = std::exp(-0.5 * (dx * dx + dy * dy));
            for (i64 l = 0; l < bands; ++l) put(l, r, c, g * spec[static_cast<std::size_t>(l)]);
          }
      }
      break;
    }
    case SceneKind::spectral_ramps: {
      const auto s1 = random_spectrum(rng, bands);
      const auto s2 = random_spectrum(rng, bands);
      const double angle = 2.0 * std::numbers::pi * u(rng);
      const double fy = std::sin(angle), fx = std::cos(angle);
      const double freq = 1.0 + 3.0 * u(rng);
      const double phase = 2.0 * std::numbers::pi * u(rng);
      double lo = 1e300, hi = -1e300;
      for (i64 r = 0; r < height; ++r)
        for (i64 c = 0; c < width; ++c) {
          const double p = fy * static_cast<double>(r) + fx * static_cast<double>(c);
          lo = std::min(lo, p);
          hi = std::max(hi, p);
        }
      for (i64 r = 0; r < height; ++r)
        for (i64 c = 0; c < width; ++c) {
          const double p = fy * static_cast<double>(r) + fx * static_cast<double>(c);
          const double t = hi > lo ? (p - lo) / (hi - lo) : 0.5;
          const double texture =
              0.85 + 0.15 * std::sin(2.0 * std::numbers::pi * freq * static_cast<double>(r + c) /
                                         static_cast<double>(width + height) + phase);
          for (i64 l = 0; l < bands; ++l) {
            const auto lu = static_cast<std::size_t>(l);
            put(l, r, c, texture * ((1.0 - t) * s1[lu] + t * s2[lu]));
          }
        }
      break;
    }
    case SceneKind::checker: {
      const auto sa = random_spectrum(rng, bands);
      auto sb = random_spectrum(rng, bands);
      if (sa == sb) sb[0] = sb[0] > 0.5 ? sb[0] - 0.25 : sb[0] + 0.25;
      const i64 cells[] = {2, 4, 8};
      const i64 cell = cells[static_cast<int>(u(rng) * 3.0) % 3];
      for (i64 r = 0; r < height; ++r)
        for (i64 c = 0; c < width; ++c) {
          const auto& s = ((r / cell + c / cell) % 2 == 0) ? sa : sb;
          for (i64 l = 0; l < bands; ++l) put(l, r, c, s[static_cast<std::size_t>(l)]);
        }
      break;
    }
  }
  for (i64 i = 0; i < cube.size(); ++i) cube.values[i] = static_cast<S>(std::clamp(acc[static_cast<std::size_t>(i)], 0.0, 1.0));
  return cube;
}

template <class S>
Tensor<S> sense(const SensingOperator<S>& op, const Tensor<S>& cube) {
  if (cube.rank() != 4 || cube.dim(1) != op.bands() || cube.dim(2) != op.height() || cube.dim(3) != op.width())
    throw DimensionError("sense expects [B," + std::to_string(op.bands()) + "," + std::to_string(op.height()) + "," +
                         std::to_string(op.width()) + "], got " + shape_str(cube.shape()));
  const i64 B = cube.dim(0), n = op.cube_size(), m = op.measurement_size();
  const bool diff = autograd::needs_grad<S>({&cube});
  auto out = autograd::make_result<S>({B, 1, op.shifted_height(), op.width()}, diff);
  for (i64 b = 0; b < B; ++b) op.apply(cube.data().data() + b * n, out.mutable_data().data() + b * m);
  if (diff) {
    autograd::record([&op, xn = cube.node(), on = out.node(), B, n, m] {
      if (on->grad.empty()) return;
      xn->ensure_grad();
      std::vector<S> tmp(static_cast<std::size_t>(n));
      for (i64 b = 0; b < B; ++b) {
        op.apply_adjoint(on->grad.data() + b * m, tmp.data());
        for (i64 i = 0; i < n; ++i) xn->grad[static_cast<std::size_t>(b * n + i)] += tmp[static_cast<std::size_t>(i)];
      }
    });
  }
  return out;
}

template <class S>
Tensor<S> sense_adjoint(const SensingOperator<S>& op, const Tensor<S>& meas) {
  if (meas.rank() != 4 || meas.dim(1) != 1 || meas.dim(2) != op.shifted_height() || meas.dim(3) != op.width())
    throw DimensionError("sense_adjoint expects [B,1," + std::to_string(op.shifted_height()) + "," +
                         std::to_string(op.width()) + "], got " + shape_str(meas.shape()));
  const i64 B = meas.dim(0), n = op.cube_size(), m = op.measurement_size();
  const bool diff = autograd::needs_grad<S>({&meas});
  auto out = autograd::make_result<S>({B, op.bands(), op.height(), op.width()}, diff);
  for (i64 b = 0; b < B; ++b) op.apply_adjoint(meas.data().data() + b * m, out.mutable_data().data() + b * n);
  if (diff) {
    autograd::record([&op, yn = meas.node(), on = out.node(), B, n, m] {
      if (on->grad.empty()) return;
      yn->ensure_grad();
      std::vector<S> tmp(static_cast<std::size_t>(m));
      for (i64 b = 0; b < B; ++b) {
        op.apply(on->grad.data() + b * n, tmp.data());
        for (i64 i = 0; i < m; ++i) yn->grad[static_cast<std::size_t>(b * m + i)] += tmp[static_cast<std::size_t>(i)];
      }
    });
  }
  return out;
}

template <class S>
Tensor<S> divide_phi(const SensingOperator<S>& op, const Tensor<S>& meas) {
  if (meas.rank() != 4 || meas.dim(1) != 1 || meas.dim(2) != op.shifted_height() || meas.dim(3) != op.width())
    throw DimensionError("divide_phi expects a [B,1,H~,W] measurement, got " + shape_str(meas.shape()));
  const i64 B = meas.dim(0), m = op.measurement_size();
  const bool diff = autograd::needs_grad<S>({&meas});
  auto out = autograd::make_result<S>(meas.shape(), diff);
  for (i64 b = 0; b < B; ++b) op.divide_phi(meas.data().data() + b * m, out.mutable_data().data() + b * m);
  if (diff) {
    autograd::record([&op, yn = meas.node(), on = out.node(), B, m] {
      if (on->grad.empty()) return;
      yn->ensure_grad();
      std::vector<S> tmp(static_cast<std::size_t>(m));
      for (i64 b = 0; b < B; ++b) {
        op.divide_phi(on->grad.data() + b * m, tmp.data());
        for (i64 i = 0; i < m; ++i) yn->grad[static_cast<std::size_t>(b * m + i)] += tmp[static_cast<std::size_t>(i)];
      }
    });
  }
  return out;
}

template <class S>
Tensor<S> to_tensor(const HsiCube<S>& cube) {
  return Tensor<S>::from({1, cube.bands, cube.height, cube.width},
                         std::vector<S>(cube.values.data(), cube.values.data() + cube.values.size()));
}

template <class S>
Tensor<S> to_tensor(const Measurement<S>& y) {
  return Tensor<S>::from({1, 1, y.height, y.width}, std::vector<S>(y.values.data(), y.values.data() + y.values.size()));
}

template <class S>
HsiCube<S> cube_from_tensor(const Tensor<S>& t, i64 b) {
  if (t.rank() != 4 || b < 0 || b >= t.dim(0)) throw DimensionError("cube_from_tensor expects [B,L,H,W]");
  auto cube = HsiCube<S>::zeros(t.dim(3), t.dim(2), t.dim(1));
  const i64 n = cube.size();
  std::copy_n(t.data().data() + b * n, n, cube.values.data());
  return cube;
}

#define SCI_INSTANTIATE_CASSI(S)                                                                        \
  template struct HsiCube<S>;                                                                           \
  template struct CodedAperture<S>;                                                                     \
  template class SensingOperator<S>;                                                                    \
  template HsiCube<S> shift_cube(const HsiCube<S>&, const ShiftSpec&);                                  \
  template HsiCube<S> unshift_cube(const HsiCube<S>&, i64, const ShiftSpec&);                           \
  template Measurement<S> forward(const HsiCube<S>&, const SensingOperator<S>&, S, std::mt19937_64&);   \
  template Measurement<S> forward(const HsiCube<S>&, const SensingOperator<S>&);                        \
  template HsiCube<S> adjoint(const Measurement<S>&, const SensingOperator<S>&);                        \
  template HsiCube<S> normalize_measurement(const Measurement<S>&, const SensingOperator<S>&);          \
  template HsiCube<S> make_synthetic_scene(std::uint64_t, i64, i64, i64, SceneKind);                    \
  template Tensor<S> sense(const SensingOperator<S>&, const Tensor<S>&);                                \
  template Tensor<S> sense_adjoint(const SensingOperator<S>&, const Tensor<S>&);                        \
  template Tensor<S> divide_phi(const SensingOperator<S>&, const Tensor<S>&);                           \
  template Tensor<S> to_tensor(const HsiCube<S>&);                                                      \
  template Tensor<S> to_tensor(const Measurement<S>&);                                                  \
  template HsiCube<S> cube_from_tensor(const Tensor<S>&, i64);

SCI_INSTANTIATE_CASSI(float)
SCI_INSTANTIATE_CASSI(double)

}  // namespace sci
