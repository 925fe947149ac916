#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tomoforge/radon.hpp"

namespace tomoforge {

/// Reads a grayscale PNG. 8-bit files are widened by 257 so 255 maps to 65535.
/// Throws IoError for missing files, colour images or decode failures.
Array2<std::uint16_t> read_png16(const std::string& path);

void write_png16(const std::string& path, const Array2<std::uint16_t>& img);

/// Maps [lo, hi] to [0, 65535] (clamped) and writes a 16-bit PNG.
void write_image_png16(const std::string& path, const Array2<double>& img, double lo = 0.0,
                       double hi = 1.0);

/// Tiles equally sized images row-major into `cols` columns with `pad` pixels of
/// black between tiles.
Array2<double> tile_images(const std::vector<Array2<double>>& images, int cols, int pad = 2);

}  // namespace tomoforge
