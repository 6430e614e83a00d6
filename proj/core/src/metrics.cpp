#include "flowibr/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <utility>
#include <vector>

namespace flowibr {

namespace {

template <typename T>
void check_pair(const BasicImage<T>& a, const BasicImage<T>& b, const Mask* mask) {
  if (!a.same_shape(b) || a.empty()) throw std::invalid_argument("metrics: images differ in shape or are empty");
  if (mask && (mask->width != a.width || mask->height != a.height)) {
    throw std::invalid_argument("metrics: mask shape differs from image");
  }
}

template <typename T>
double psnr_impl(const BasicImage<T>& a, const BasicImage<T>& b, const Mask* mask) {
  check_pair(a, b, mask);
  double se = 0.0;
  std::size_t count = 0;
  for (int y = 0; y < a.height; ++y) {
    for (int x = 0; x < a.width; ++x) {
      if (mask && !mask->at(x, y)) continue;
      for (int c = 0; c < a.channels; ++c) {
        const double d = static_cast<double>(a.at(x, y, c)) - static_cast<double>(b.at(x, y, c));
        se += d * d;
      }
      count += a.channels;
    }
  }
  if (count == 0) throw std::invalid_argument("psnr: mask selects no pixel");
  const double mse = se / static_cast<double>(count);
  if (mse <= 0.0) return kPsnrCap;
  return std::min(kPsnrCap, -10.0 * std::log10(mse));
}

std::vector<double> gaussian_kernel(const SsimConfig& cfg) {
  if (cfg.window < 1 || cfg.window % 2 == 0 || !(cfg.sigma > 0.0)) {
    throw std::invalid_argument("ssim: window must be odd and sigma positive");
  }
  std::vector<double> k(cfg.window);
  const int r = cfg.window / 2;
  double s = 0.0;
  for (int i = 0; i < cfg.window; ++i) {
    k[i] = std::exp(-0.5 * (i - r) * (i - r) / (cfg.sigma * cfg.sigma));
    s += k[i];
  }
  for (double& v : k) v /= s;
  return k;
}

/// Returns (sum of SSIM over counted centers and channels, number counted).
template <typename T>
std::pair<double, std::size_t> ssim_sum(const BasicImage<T>& a, const BasicImage<T>& b,
                                        const Mask* mask, const SsimConfig& cfg) {
  check_pair(a, b, mask);
  if (a.width < cfg.window || a.height < cfg.window) {
    throw std::invalid_argument("ssim: image smaller than the window");
  }
  const std::vector<double> k = gaussian_kernel(cfg);
  const int r = cfg.window / 2;
  const double c1 = cfg.k1 * cfg.k1;
  const double c2 = cfg.k2 * cfg.k2;
  double total = 0.0;
  std::size_t count = 0;
  for (int cy = r; cy < a.height - r; ++cy) {
    for (int cx = r; cx < a.width - r; ++cx) {
      if (mask && !mask->at(cx, cy)) continue;
      for (int c = 0; c < a.channels; ++c) {
        double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
        for (int dy = -r; dy <= r; ++dy) {
          for (int dx = -r; dx <= r; ++dx) {
            const double w = k[dy + r] * k[dx + r];
            const double va = a.at(cx + dx, cy + dy, c);
            const double vb = b.at(cx + dx, cy + dy, c);
            ma += w * va;
            mb += w * vb;
            saa += w * va * va;
            sbb += w * vb * vb;
            sab += w * va * vb;
          }
        }
        const double var_a = saa - ma * ma;
        const double var_b = sbb - mb * mb;
        const double cov = sab - ma * mb;
        total += ((2 * ma * mb + c1) * (2 * cov + c2)) /
                 ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
        ++count;
      }
    }
  }
  return {total, count};
}

template <typename T>
double ssim_impl(const BasicImage<T>& a, const BasicImage<T>& b, const Mask* mask,
                 const SsimConfig& cfg) {
  const auto [sum, count] = ssim_sum(a, b, mask, cfg);
  if (count == 0) throw std::invalid_argument("ssim: mask selects no window center");
  return sum / static_cast<double>(count);
}

template <typename T>
std::optional<RegionMetrics> region_impl(const BasicImage<T>& a, const BasicImage<T>& b,
                                         const Mask& mask) {
  check_pair(a, b, &mask);
  if (mask.count() == 0) return std::nullopt;
  const auto [sum, count] = ssim_sum(a, b, &mask, SsimConfig{});
  if (count == 0) return std::nullopt;
  return RegionMetrics{psnr_impl(a, b, &mask), sum / static_cast<double>(count)};
}

}  // namespace

double psnr(const Image& a, const Image& b, const Mask* mask) { return psnr_impl(a, b, mask); }
double psnr(const ImageD& a, const ImageD& b, const Mask* mask) { return psnr_impl(a, b, mask); }

double ssim(const Image& a, const Image& b, const Mask* mask, const SsimConfig& config) {
  return ssim_impl(a, b, mask, config);
}
double ssim(const ImageD& a, const ImageD& b, const Mask* mask, const SsimConfig& config) {
  return ssim_impl(a, b, mask, config);
}

std::optional<RegionMetrics> dynamic_region_metrics(const Image& a, const Image& b, const Mask& mask) {
  return region_impl(a, b, mask);
}
std::optional<RegionMetrics> dynamic_region_metrics(const ImageD& a, const ImageD& b,
                                                    const Mask& mask) {
  return region_impl(a, b, mask);
}

}  // namespace flowibr
