#include "sci/metrics.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>

namespace sci {

using i64 = std::int64_t;

namespace {

template <class S>
void check_same(const HsiCube<S>& a, const HsiCube<S>& b, const char* what) {
  if (a.width != b.width || a.height != b.height || a.bands != b.bands)
    throw DimensionError(std::string(what) + ": cube " + std::to_string(a.width) + "x" + std::to_string(a.height) + "x" +
                         std::to_string(a.bands) + " vs " + std::to_string(b.width) + "x" + std::to_string(b.height) +
                         "x" + std::to_string(b.bands));
}

double capped_psnr(double mse) { return mse <= 0 ? kPsnrCap : std::min(kPsnrCap, -10.0 * std::log10(mse)); }

constexpr std::array<std::array<std::uint8_t, 3>, 256> make_colormap() {
  std::array<std::array<std::uint8_t, 3>, 256> m{};
  for (int i = 0; i < 256; ++i) {
    const int r = std::min(255, 3 * i);
    const int g = std::clamp(3 * i - 255, 0, 255);
    const int b = std::clamp(3 * i - 510, 0, 255);
    m[static_cast<std::size_t>(i)] = {static_cast<std::uint8_t>(r), static_cast<std::uint8_t>(g),
                                      static_cast<std::uint8_t>(b)};
  }
  return m;
}

constexpr auto kColormap = make_colormap();
static_assert(kColormap[0][0] == 0 && kColormap[255][2] == 255);

// Valid-mode separable filtering of one band plane with a normalised 1-D kernel.
std::vector<double> filter_valid(const std::vector<double>& plane, i64 h, i64 w, const std::vector<double>& k) {
  const i64 n = static_cast<i64>(k.size());
  const i64 oh = h - n + 1, ow = w - n + 1;
  std::vector<double> rows(static_cast<std::size_t>(h * ow), 0.0);
  for (i64 r = 0; r < h; ++r)
    for (i64 c = 0; c < ow; ++c) {
      double acc = 0;
      for (i64 j = 0; j < n; ++j) acc += k[static_cast<std::size_t>(j)] * plane[static_cast<std::size_t>(r * w + c + j)];
      rows[static_cast<std::size_t>(r * ow + c)] = acc;
    }
  std::vector<double> out(static_cast<std::size_t>(oh * ow), 0.0);
  for (i64 r = 0; r < oh; ++r)
    for (i64 c = 0; c < ow; ++c) {
      double acc = 0;
      for (i64 i = 0; i < n; ++i) acc += k[static_cast<std::size_t>(i)] * rows[static_cast<std::size_t>((r + i) * ow + c)];
      out[static_cast<std::size_t>(r * ow + c)] = acc;
    }
  return out;
}

}  // namespace

template <class S>
double psnr(const HsiCube<S>& est, const HsiCube<S>& ref) {
  check_same(est, ref, "psnr");
  const i64 plane = ref.width * ref.height;
  double total = 0;
  for (i64 l = 0; l < ref.bands; ++l) {
    double se = 0;
    for (i64 i = 0; i < plane; ++i) {
      const double d = static_cast<double>(est.values[l * plane + i]) - static_cast<double>(ref.values[l * plane + i]);
      se += d * d;
    }
    total += capped_psnr(se / static_cast<double>(plane));
  }
  return total / static_cast<double>(ref.bands);
}

template <class S>
double psnr_whole(const HsiCube<S>& est, const HsiCube<S>& ref) {
  check_same(est, ref, "psnr");
  const double mse = (est.values.template cast<double>() - ref.values.template cast<double>()).squaredNorm() /
                     static_cast<double>(ref.size());
  return capped_psnr(mse);
}

template <class S>
double ssim(const HsiCube<S>& est, const HsiCube<S>& ref, const SsimOptions& opt) {
  check_same(est, ref, "ssim");
  if (opt.window < 1 || opt.window % 2 == 0) throw UsageError("ssim window must be a positive odd size");
  if (ref.width < opt.window || ref.height < opt.window)
    throw UsageError("ssim needs spatial extents >= " + std::to_string(opt.window) +
                     "; pass a smaller window with --ssim-window");
  std::vector<double> k(static_cast<std::size_t>(opt.window));
  const int half = opt.window / 2;
  double ks = 0;
  for (int i = 0; i < opt.window; ++i) ks += k[static_cast<std::size_t>(i)] = std::exp(-0.5 * (i - half) * (i - half) / (opt.sigma * opt.sigma));
  for (auto& v : k) v /= ks;
  const double c1 = (opt.k1) * (opt.k1), c2 = (opt.k2) * (opt.k2);
  const i64 h = ref.height, w = ref.width, plane = h * w;
  double total = 0;
  for (i64 l = 0; l < ref.bands; ++l) {
    std::vector<double> a(static_cast<std::size_t>(plane)), b(a.size()), aa(a.size()), bb(a.size()), ab(a.size());
    for (i64 i = 0; i < plane; ++i) {
      const auto u = static_cast<std::size_t>(i);
      a[u] = static_cast<double>(est.values[l * plane + i]);
      b[u] = static_cast<double>(ref.values[l * plane + i]);
      aa[u] = a[u] * a[u];
      bb[u] = b[u] * b[u];
      ab[u] = a[u] * b[u];
    }
    const auto ma = filter_valid(a, h, w, k), mb = filter_valid(b, h, w, k);
    const auto maa = filter_valid(aa, h, w, k), mbb = filter_valid(bb, h, w, k), mab = filter_valid(ab, h, w, k);
    double band = 0;
    for (std::size_t i = 0; i < ma.size(); ++i) {
      const double va = maa[i] - ma[i] * ma[i], vb = mbb[i] - mb[i] * mb[i], cov = mab[i] - ma[i] * mb[i];
      band += ((2 * ma[i] * mb[i] + c1) * (2 * cov + c2)) / ((ma[i] * ma[i] + mb[i] * mb[i] + c1) * (va + vb + c2));
    }
    total += band / static_cast<double>(ma.size());
  }
  return total / static_cast<double>(ref.bands);
}

template <class S>
double spectral_corr(const HsiCube<S>& est, const HsiCube<S>& ref, const Region& region) {
  check_same(est, ref, "spectral_corr");
  if (region.width < 1 || region.height < 1 || region.x < 0 || region.y < 0 || region.x + region.width > ref.width ||
      region.y + region.height > ref.height)
    throw UsageError("region " + std::to_string(region.x) + "," + std::to_string(region.y) + "," +
                     std::to_string(region.width) + "," + std::to_string(region.height) + " outside the " +
                     std::to_string(ref.width) + "x" + std::to_string(ref.height) + " image");
  const auto L = ref.bands;
  Eigen::VectorXd se(L), sr(L);
  for (i64 l = 0; l < L; ++l) {
    double a = 0, b = 0;
    for (i64 r = region.y; r < region.y + region.height; ++r)
      for (i64 c = region.x; c < region.x + region.width; ++c) {
        a += static_cast<double>(est.at(l, r, c));
        b += static_cast<double>(ref.at(l, r, c));
      }
    se[l] = a / static_cast<double>(region.width * region.height);
    sr[l] = b / static_cast<double>(region.width * region.height);
  }
  const Eigen::VectorXd de = se.array() - se.mean(), dr = sr.array() - sr.mean();
  if (dr.squaredNorm() == 0) throw NumericError("ground-truth region spectrum is constant; correlation undefined");
  if (de.squaredNorm() == 0) throw NumericError("reconstructed region spectrum is constant; correlation undefined");
  return de.dot(dr) / std::sqrt(de.squaredNorm() * dr.squaredNorm());
}

const std::array<std::array<std::uint8_t, 3>, 256>& error_colormap() { return kColormap; }

template <class S>
RgbImage error_map(const HsiCube<S>& est, const HsiCube<S>& ref, i64 band, double full_scale) {
  check_same(est, ref, "error_map");
  if (band < 1 || band > ref.bands)
    throw UsageError("band " + std::to_string(band) + " outside [1," + std::to_string(ref.bands) + "]");
  if (!(full_scale > 0)) throw UsageError("error map full scale must be positive");
  RgbImage img{ref.width, ref.height, std::vector<std::uint8_t>(static_cast<std::size_t>(3 * ref.width * ref.height))};
  for (i64 r = 0; r < ref.height; ++r)
    for (i64 c = 0; c < ref.width; ++c) {
      const double err = std::abs(static_cast<double>(est.at(band - 1, r, c)) - static_cast<double>(ref.at(band - 1, r, c)));
      const auto q = static_cast<std::size_t>(std::lround(255.0 * std::min(err / full_scale, 1.0)));
      const auto& rgb = kColormap[q];
      std::copy(rgb.begin(), rgb.end(), img.rgb.begin() + 3 * (r * ref.width + c));
    }
  return img;
}

void write_png(const std::string& path, const RgbImage& image) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(image.width);
  png.height = static_cast<png_uint_32>(image.height);
  png.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&png, path.c_str(), 0, image.rgb.data(), 0, nullptr))
    throw FormatError("cannot write PNG " + path + ": " + png.message);
}

RgbImage read_png(const std::string& path) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str())) throw FormatError("cannot read PNG " + path + ": " + png.message);
  png.format = PNG_FORMAT_RGB;
  RgbImage img{png.width, png.height, std::vector<std::uint8_t>(PNG_IMAGE_SIZE(png))};
  if (!png_image_finish_read(&png, nullptr, img.rgb.data(), 0, nullptr)) {
    png_image_free(&png);
    throw FormatError("cannot decode PNG " + path + ": " + png.message);
  }
  return img;
}

#define SCI_INSTANTIATE_METRICS(S)                                                     \
  template double psnr(const HsiCube<S>&, const HsiCube<S>&);                         \
  template double psnr_whole(const HsiCube<S>&, const HsiCube<S>&);                   \
  template double ssim(const HsiCube<S>&, const HsiCube<S>&, const SsimOptions&);     \
  template double spectral_corr(const HsiCube<S>&, const HsiCube<S>&, const Region&); \
  template RgbImage error_map(const HsiCube<S>&, const HsiCube<S>&, i64, double);

SCI_INSTANTIATE_METRICS(float)
SCI_INSTANTIATE_METRICS(double)

}  // namespace sci
