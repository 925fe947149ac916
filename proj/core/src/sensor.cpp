#include "tomoforge/sensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>

namespace tomoforge {

void NoiseParams::validate() const {
  if (!std::isfinite(s)) throw std::invalid_argument("noise.s must be finite");
  if (!(epsilon >= 0.0) || !std::isfinite(epsilon))
    throw std::invalid_argument("noise.epsilon must be >= 0");
  if (!(k > 0.0) || !std::isfinite(k)) throw std::invalid_argument("noise.k must be > 0");
  if (b < 1 || b > 16) throw std::invalid_argument("noise.b must be in [1, 16]");
}

double NoiseParams::photon_mean(double y) const {
  return std::exp(std::clamp(s - y, -700.0, 700.0));
}

bool SensorReadings::in_range() const {
  const auto hi = params_.max_reading();
  return std::all_of(data_.begin(), data_.end(), [hi](std::int32_t v) { return v >= 0 && v <= hi; });
}

double sample_analog(double y, const NoiseParams& p, RandomStream& rng) {
  const double counts = static_cast<double>(rng.poisson(p.photon_mean(y)));
  const double noise = p.epsilon > 0.0 ? std::sqrt(p.epsilon) * rng.normal() : 0.0;
  return counts + noise;
}

std::int32_t quantize(double z, const NoiseParams& p) {
  const double q = std::round(z / p.k);  // half away from zero
  const double hi = static_cast<double>(p.max_reading());
  return static_cast<std::int32_t>(std::clamp(q, 0.0, hi));
}

SensorReadings simulate_readings(const Sinogram<double>& y, const NoiseParams& p,
                                 const RandomStream& rng) {
  p.validate();
  if (!y.all_finite()) throw std::invalid_argument("simulate_readings: non-finite sinogram");
  SensorReadings r(y.geometry(), p);
  auto in = y.values();
  auto out = r.values();
  for (std::size_t e = 0; e < in.size(); ++e) {
    RandomStream local = rng.substream(e);
    out[e] = quantize(sample_analog(in[e], p, local), p);
  }
  return r;
}

std::size_t YGrid::points() const {
  if (!(step > 0.0) || !(hi > lo)) throw std::invalid_argument("YGrid: need hi > lo and step > 0");
  return static_cast<std::size_t>(std::floor((hi - lo) / step + 1e-9)) + 1;
}

namespace {

/// P(a <= X < b) for standard normal X, stable in both tails.
double normal_interval(double a, double b) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  if (a >= 0.0) return 0.5 * (std::erfc(a * kInvSqrt2) - std::erfc(b * kInvSqrt2));
  if (b <= 0.0) return 0.5 * (std::erfc(-b * kInvSqrt2) - std::erfc(-a * kInvSqrt2));
  return 1.0 - 0.5 * (std::erfc(-a * kInvSqrt2) + std::erfc(b * kInvSqrt2));
}

double log_poisson(double n, double mean, double log_mean) {
  return n * log_mean - mean - std::lgamma(n + 1.0);
}

}  // namespace

double log_reading_likelihood(std::int32_t r, double y, const NoiseParams& p) {
  const double neg_inf = -std::numeric_limits<double>::infinity();
  const std::int32_t top = p.max_reading();
  if (r < 0 || r > top) return neg_inf;
  const double mean = p.photon_mean(y);
  const double log_mean = std::log(mean);
  const double sd_pois = std::sqrt(mean);
  double n_lo = std::max(0.0, std::floor(mean - 8.0 * sd_pois - 10.0));
  double n_hi = std::ceil(mean + 8.0 * sd_pois + 25.0);

  // Analog cell that quantizes to r; the clamp bins absorb the tails.
  const double cell_lo = r == 0 ? neg_inf : (r - 0.5) * p.k;
  const double cell_hi = r == top ? std::numeric_limits<double>::infinity() : (r + 0.5) * p.k;
  const double sd = std::sqrt(p.epsilon);
  if (std::isfinite(cell_lo)) n_lo = std::max(n_lo, std::floor(cell_lo - 10.0 * sd - 1.0));
  if (std::isfinite(cell_hi)) n_hi = std::min(n_hi, std::ceil(cell_hi + 10.0 * sd + 1.0));
  if (n_lo > n_hi) return neg_inf;

  double peak = neg_inf;
  // Two passes: find the max log term, then sum relative to it.
  auto term = [&](double n) -> double {
    double cell;
    if (sd == 0.0) {
      cell = quantize(n, p) == r ? 1.0 : 0.0;
    } else {
      const double a = std::isfinite(cell_lo) ? (cell_lo - n) / sd : neg_inf;
      const double b = std::isfinite(cell_hi) ? (cell_hi - n) / sd
                                              : std::numeric_limits<double>::infinity();
      cell = normal_interval(a, b);
    }
    if (cell <= 0.0) return neg_inf;
    return log_poisson(n, mean, log_mean) + std::log(cell);
  };
  for (double n = n_lo; n <= n_hi; n += 1.0) peak = std::max(peak, term(n));
  if (peak == neg_inf) return neg_inf;
  double acc = 0.0;
  for (double n = n_lo; n <= n_hi; n += 1.0) {
    const double t = term(n);
    if (t != neg_inf) acc += std::exp(t - peak);
  }
  return peak + std::log(acc);
}

PixelPosterior posterior_oracle_pixel(std::int32_t r, const NoiseParams& p, const YGrid& grid) {
  p.validate();
  const std::size_t n = grid.points();
  std::vector<double> ll(n);
  double peak = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i) {
    ll[i] = log_reading_likelihood(r, grid.at(i), p);
    peak = std::max(peak, ll[i]);
  }
  if (!std::isfinite(peak))
    throw std::domain_error("posterior_oracle_pixel: reading " + std::to_string(r) +
                            " has zero likelihood on the whole grid");
  double w_sum = 0.0, wy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    ll[i] = std::exp(ll[i] - peak);
    w_sum += ll[i];
    wy += ll[i] * grid.at(i);
  }
  const double mu = wy / w_sum;
  double var = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = grid.at(i) - mu;
    var += ll[i] * d * d;
  }
  var /= w_sum;
  PixelPosterior out;
  out.mu = mu;
  out.sigma = std::max(std::sqrt(var), kSigmaFloor);
  out.boundary_mass = (ll.front() + ll.back()) / w_sum;
  return out;
}

PosteriorGrid posterior_oracle_grid(const SensorReadings& r, const YGrid& grid) {
  PosteriorGrid out{Sinogram<double>(r.geometry()), Sinogram<double>(r.geometry()), 0};
  std::vector<std::optional<PixelPosterior>> memo(static_cast<std::size_t>(r.params().max_reading()) + 1);
  auto in = r.values();
  auto mu = out.mu.values();
  auto sigma = out.sigma.values();
  for (std::size_t e = 0; e < in.size(); ++e) {
    auto& slot = memo.at(static_cast<std::size_t>(in[e]));
    if (!slot) {
      slot = posterior_oracle_pixel(in[e], r.params(), grid);
      if (slot->grid_too_narrow()) ++out.narrow_grid_count;
    }
    mu[e] = slot->mu;
    sigma[e] = slot->sigma;
  }
  return out;
}

}  // namespace tomoforge
