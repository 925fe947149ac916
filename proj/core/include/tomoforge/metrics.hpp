#pragma once

#include <optional>

#include "tomoforge/radon.hpp"

namespace tomoforge {

/// SSIM of `test` against `reference` (both square). 11x11 Gaussian window
/// (sigma 1.5, half-sample symmetric padding), K1 = 0.01, K2 = 0.03,
/// population covariances. The dynamic range defaults to max - min of the
/// reference (1 if the reference is constant). The SSIM map is averaged over
/// pixels inside the inscribed circle.
double ssim(const Array2<double>& reference, const Array2<double>& test,
            std::optional<double> data_range = std::nullopt);

/// Peak signal-to-noise ratio in dB over the inscribed circle, peak = range of the reference.
double psnr(const Array2<double>& reference, const Array2<double>& test);

}  // namespace tomoforge
