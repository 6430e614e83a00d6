#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include "flowibr/image.hpp"

namespace flowibr::io {

/// Binary P6, 8 bits per channel; values are clamped to [0,1] and rounded.
void write_ppm(const std::filesystem::path& path, const Image& image);
Image read_ppm(const std::filesystem::path& path);

/// Binary P5; nonzero mask entries are written as 255.
void write_pgm(const std::filesystem::path& path, const Mask& mask);
Mask read_pgm(const std::filesystem::path& path);

/// Raw little-endian IEEE-754 doubles, no header.
void write_f64(const std::filesystem::path& path, std::span<const double> values);
std::vector<double> read_f64(const std::filesystem::path& path);

}  // namespace flowibr::io
