#pragma once

#include <cstdint>
#include <vector>

#include "tomoforge/radon.hpp"
#include "tomoforge/random.hpp"

namespace tomoforge {

/// Lower bound applied to every posterior standard deviation.
inline constexpr double kSigmaFloor = 1e-4;

/// Detector physics: z ~ Pois(exp(s - y)) + N(0, epsilon), r = clamp(round(z/k), 0, 2^b - 1).
struct NoiseParams {
  double s = 6.907755278982137;  // ln(1000)
  double epsilon = 1.0;          // electronic-noise variance
  double k = 1.0;
  int b = 16;

  void validate() const;
  std::int32_t max_reading() const { return (std::int32_t{1} << b) - 1; }
  /// exp(s - y), exponent clamped to [-700, 700].
  double photon_mean(double y) const;

  friend bool operator==(const NoiseParams&, const NoiseParams&) = default;
};

class SensorReadings : public Array2<std::int32_t> {
 public:
  SensorReadings() = default;
  SensorReadings(const ScanGeometry& g, const NoiseParams& p)
      : Array2<std::int32_t>(g.n_angles, g.n_detectors), geometry_(g), params_(p) {}

  const ScanGeometry& geometry() const { return geometry_; }
  const NoiseParams& params() const { return params_; }
  bool in_range() const;

 private:
  ScanGeometry geometry_;
  NoiseParams params_;
};

/// One analog sample z (before quantization) for noiseless value y.
double sample_analog(double y, const NoiseParams& p, RandomStream& rng);

/// clamp(round_half_away(z / k), 0, 2^b - 1).
std::int32_t quantize(double z, const NoiseParams& p);

/// Entry e draws from rng.substream(e), so the result depends only on the
/// stream identity and not on evaluation order.
SensorReadings simulate_readings(const Sinogram<double>& y, const NoiseParams& p,
                                 const RandomStream& rng);

/// Uniform prior support for the posterior oracle.
struct YGrid {
  double lo = -1.0;
  double hi = 8.0;
  double step = 1e-3;

  std::size_t points() const;
  double at(std::size_t i) const { return lo + step * static_cast<double>(i); }
};

/// log P(r | y) under the full quantized Poisson + Gaussian model.
double log_reading_likelihood(std::int32_t r, double y, const NoiseParams& p);

struct PixelPosterior {
  double mu = 0.0;
  double sigma = kSigmaFloor;
  /// Posterior mass on the two end points of the grid.
  double boundary_mass = 0.0;
  bool grid_too_narrow() const { return boundary_mass > 1e-6; }
};

/// Exact posterior moments of y given r on a uniform grid prior.
PixelPosterior posterior_oracle_pixel(std::int32_t r, const NoiseParams& p, const YGrid& grid);

struct PosteriorGrid {
  Sinogram<double> mu;
  Sinogram<double> sigma;
  /// Distinct reading values whose posterior hit the grid boundary.
  std::size_t narrow_grid_count = 0;
};

/// posterior_oracle_pixel applied per entry, memoized by reading value.
PosteriorGrid posterior_oracle_grid(const SensorReadings& r, const YGrid& grid);

}  // namespace tomoforge
