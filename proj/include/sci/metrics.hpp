#ifndef SCI_METRICS_HPP
#define SCI_METRICS_HPP

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "sci/cassi.hpp"

namespace sci {

inline constexpr double kPsnrCap = 100.0;

/// Mean over bands of 10 log10(1 / MSE_band), each band capped at 100 dB.
template <class S>
double psnr(const HsiCube<S>& est, const HsiCube<S>& ref);
/// 10 log10(1 / MSE) over the whole cube, capped at 100 dB.
template <class S>
double psnr_whole(const HsiCube<S>& est, const HsiCube<S>& ref);

struct SsimOptions {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01, k2 = 0.03;
};

/// Gaussian-window SSIM per band over all valid window positions, averaged
/// over bands. Data range 1.
template <class S>
double ssim(const HsiCube<S>& est, const HsiCube<S>& ref, const SsimOptions& opt = {});

struct Region {
  std::int64_t x = 0, y = 0, width = 0, height = 0;  // x: column, y: row
};

/// Pearson correlation between the region-mean spectra of est and ref.
template <class S>
double spectral_corr(const HsiCube<S>& est, const HsiCube<S>& ref, const Region& region);

/// 256-entry black -> red -> yellow -> white ramp. Entry 0 is black.
const std::array<std::array<std::uint8_t, 3>, 256>& error_colormap();

struct RgbImage {
  std::int64_t width = 0, height = 0;
  std::vector<std::uint8_t> rgb;  // row-major, 3 bytes per pixel
};

/// |est - ref| of one band (1-based), quantised as round(255 * min(err / full_scale, 1))
/// and coloured through error_colormap().
template <class S>
RgbImage error_map(const HsiCube<S>& est, const HsiCube<S>& ref, std::int64_t band, double full_scale = 0.25);

void write_png(const std::string& path, const RgbImage& image);
RgbImage read_png(const std::string& path);

}  // namespace sci

#endif
