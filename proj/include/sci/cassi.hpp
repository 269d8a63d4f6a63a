#ifndef SCI_CASSI_HPP
#define SCI_CASSI_HPP

#include <Eigen/Core>
#include <cstdint>
#include <random>
#include <string>

#include "sci/tensor.hpp"

// Single-disperser CASSI camera model.
//
// Cubes are stored band-major, row-major within a band: value (band l, row
// r, col c) lives at (l*H + r)*W + c. The disperser shifts band l down by
// d(l) = step*l rows, so the sensor has H + step*(L-1) rows.

namespace sci {

template <class S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

template <class S>
struct HsiCube {
  std::int64_t width = 0, height = 0, bands = 0;
  Vec<S> values;

  static HsiCube zeros(std::int64_t width, std::int64_t height, std::int64_t bands);
  std::int64_t size() const { return width * height * bands; }
  S& at(std::int64_t band, std::int64_t row, std::int64_t col) { return values[(band * height + row) * width + col]; }
  S at(std::int64_t band, std::int64_t row, std::int64_t col) const {
    return values[(band * height + row) * width + col];
  }
  /// Throws DimensionError/NumericError unless extents are positive and values finite and nonnegative.
  void validate() const;
};

/// Binary or graded mask, rows x cols = height x width.
template <class S>
struct CodedAperture {
  std::int64_t width = 0, height = 0;
  Vec<S> values;

  /// I.i.d. Bernoulli(0.5) binary mask.
  static CodedAperture random_binary(std::uint64_t seed, std::int64_t width, std::int64_t height);
  static CodedAperture constant(std::int64_t width, std::int64_t height, S value);
  void validate() const;
};

struct ShiftSpec {
  int step = 2;

  std::int64_t offset(std::int64_t band) const { return static_cast<std::int64_t>(step) * band; }
  std::int64_t shifted_height(std::int64_t height, std::int64_t bands) const {
    return height + offset(bands - 1);
  }
};

template <class S>
struct Measurement {
  std::int64_t width = 0, height = 0;  // height is the shifted height
  Vec<S> values;
  S noise_sigma = 0;
};

/// Shifts every band down by its dispersion offset into an H~-row cube.
template <class S>
HsiCube<S> shift_cube(const HsiCube<S>& x, const ShiftSpec& spec);
/// Exact transpose of shift_cube: crops each band's window back out.
template <class S>
HsiCube<S> unshift_cube(const HsiCube<S>& shifted, std::int64_t height, const ShiftSpec& spec);

/// The sensing matrix A, applied implicitly.
///
/// A maps a W x H x L cube to a W x H~ sensor frame: A x = sum_l shift(x)_l * M~_l.
/// AA^T is diagonal with entries phi = sum_l M~_l^2.
template <class S>
class SensingOperator {
 public:
  SensingOperator(const CodedAperture<S>& mask, std::int64_t bands, ShiftSpec spec);

  std::int64_t width() const { return width_; }
  std::int64_t height() const { return height_; }
  std::int64_t bands() const { return bands_; }
  std::int64_t shifted_height() const { return shifted_height_; }
  const ShiftSpec& shift() const { return spec_; }
  const CodedAperture<S>& mask() const { return mask_; }
  /// Shifted mask M~, band-major W x H~ x L.
  const Vec<S>& shifted_mask() const { return shifted_mask_; }
  /// diag(AA^T), W x H~.
  const Vec<S>& phi() const { return phi_; }

  std::int64_t cube_size() const { return width_ * height_ * bands_; }
  std::int64_t measurement_size() const { return width_ * shifted_height_; }

  void apply(const S* cube, S* meas) const;
  void apply_adjoint(const S* meas, S* cube) const;
  /// meas / phi, with 0 where phi vanishes.
  void divide_phi(const S* meas, S* out) const;

  Vec<S> apply(const Vec<S>& cube) const;
  Vec<S> apply_adjoint(const Vec<S>& meas) const;

 private:
  CodedAperture<S> mask_;
  ShiftSpec spec_;
  std::int64_t width_, height_, bands_, shifted_height_;
  Vec<S> shifted_mask_;
  Vec<S> phi_;
};

/// Simulated snapshot y = A x + n with n ~ N(0, sigma^2) i.i.d.
template <class S>
Measurement<S> forward(const HsiCube<S>& x, const SensingOperator<S>& op, S noise_sigma, std::mt19937_64& rng);
/// Noiseless snapshot.
template <class S>
Measurement<S> forward(const HsiCube<S>& x, const SensingOperator<S>& op);

template <class S>
HsiCube<S> adjoint(const Measurement<S>& y, const SensingOperator<S>& op);

/// y_norm = A^T (AA^T)^{-1} y.
template <class S>
HsiCube<S> normalize_measurement(const Measurement<S>& y, const SensingOperator<S>& op);

enum class SceneKind { gaussian_blobs, spectral_ramps, checker };

SceneKind parse_scene_kind(const std::string& name);
std::string scene_kind_name(SceneKind kind);

/// Deterministic synthetic cube with values in [0,1] and smooth spectra.
template <class S>
HsiCube<S> make_synthetic_scene(std::uint64_t seed, std::int64_t width, std::int64_t height, std::int64_t bands,
                                SceneKind kind);

// Differentiable versions over batched tensors: cubes are [B,L,H,W],
// measurements [B,1,H~,W].
template <class S>
Tensor<S> sense(const SensingOperator<S>& op, const Tensor<S>& cube);
template <class S>
Tensor<S> sense_adjoint(const SensingOperator<S>& op, const Tensor<S>& meas);
template <class S>
Tensor<S> divide_phi(const SensingOperator<S>& op, const Tensor<S>& meas);

template <class S>
Tensor<S> to_tensor(const HsiCube<S>& cube);
template <class S>
Tensor<S> to_tensor(const Measurement<S>& y);
/// Element b of a [B,L,H,W] tensor.
template <class S>
HsiCube<S> cube_from_tensor(const Tensor<S>& t, std::int64_t b = 0);

}  // namespace sci

#endif
