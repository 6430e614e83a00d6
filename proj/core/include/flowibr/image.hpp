#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

namespace flowibr {

/// Row-major H x W x C raster. Colors live in [0,1].
template <typename T>
struct BasicImage {
  using value_type = T;
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<T> data;

  BasicImage() = default;
  BasicImage(int w, int h, int c, T fill = T(0))
      : width(w), height(h), channels(c),
        data(static_cast<std::size_t>(w) * h * c, fill) {
    if (w < 0 || h < 0 || c <= 0) throw std::invalid_argument("image: bad dimensions");
  }

  [[nodiscard]] bool empty() const { return data.empty(); }
  [[nodiscard]] std::size_t index(int x, int y, int c = 0) const {
    return (static_cast<std::size_t>(y) * width + x) * channels + c;
  }
  T& at(int x, int y, int c = 0) { return data[index(x, y, c)]; }
  [[nodiscard]] T at(int x, int y, int c = 0) const { return data[index(x, y, c)]; }
  template <typename U>
  [[nodiscard]] bool same_shape(const BasicImage<U>& o) const {
    return width == o.width && height == o.height && channels == o.channels;
  }
};

/// Storage format for observations and renders.
using Image = BasicImage<float>;
/// Full-precision raster for evaluation.
using ImageD = BasicImage<double>;

/// Binary H x W mask, one byte per pixel (0 or 1).
struct Mask {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> data;

  Mask() = default;
  Mask(int w, int h, std::uint8_t fill = 0)
      : width(w), height(h), data(static_cast<std::size_t>(w) * h, fill) {}

  std::uint8_t& at(int x, int y) { return data[static_cast<std::size_t>(y) * width + x]; }
  [[nodiscard]] std::uint8_t at(int x, int y) const {
    return data[static_cast<std::size_t>(y) * width + x];
  }
  [[nodiscard]] std::size_t count() const {
    std::size_t n = 0;
    for (auto v : data) n += v != 0;
    return n;
  }
};

}  // namespace flowibr
