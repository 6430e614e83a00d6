#pragma once

// Image-quality metrics on [0,1] rasters. Masked variants restrict PSNR to
// masked pixels and SSIM to windows whose center pixel is masked.

#include <optional>

#include "flowibr/image.hpp"

namespace flowibr {

inline constexpr double kPsnrCap = 99.0;

/// -10 log10(MSE), capped at kPsnrCap. Throws if shapes differ or the mask
/// selects nothing.
[[nodiscard]] double psnr(const Image& a, const Image& b, const Mask* mask = nullptr);
[[nodiscard]] double psnr(const ImageD& a, const ImageD& b, const Mask* mask = nullptr);

struct SsimConfig {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
};

/// Gaussian-window SSIM averaged over channels and window centers whose window
/// lies fully inside the image. Throws for images smaller than the window.
[[nodiscard]] double ssim(const Image& a, const Image& b, const Mask* mask = nullptr,
                          const SsimConfig& config = {});
[[nodiscard]] double ssim(const ImageD& a, const ImageD& b, const Mask* mask = nullptr,
                          const SsimConfig& config = {});

struct RegionMetrics {
  double psnr = 0.0;
  double ssim = 0.0;
};

/// Both metrics restricted to the mask; nullopt when the mask (or, for SSIM,
/// the set of usable window centers) is empty.
[[nodiscard]] std::optional<RegionMetrics> dynamic_region_metrics(const Image& a, const Image& b,
                                                                  const Mask& mask);
[[nodiscard]] std::optional<RegionMetrics> dynamic_region_metrics(const ImageD& a, const ImageD& b,
                                                                  const Mask& mask);

}  // namespace flowibr
