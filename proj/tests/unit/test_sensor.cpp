#include <gtest/gtest.h>

#include <boost/math/special_functions/digamma.hpp>
#include <boost/math/special_functions/trigamma.hpp>
#include <cmath>
#include <vector>

#include "test_util.hpp"
#include "tomoforge/sensor.hpp"

namespace {

using namespace tomoforge;

NoiseParams params(double s, double eps, double k, int b) {
  NoiseParams p;
  p.s = s;
  p.epsilon = eps;
  p.k = k;
  p.b = b;
  return p;
}

TEST(NoiseParams, RejectsInvalidValues) {
  EXPECT_THROW(params(1, -1, 1, 16).validate(), std::invalid_argument);
  EXPECT_THROW(params(1, 0, 0, 16).validate(), std::invalid_argument);
  EXPECT_THROW(params(1, 0, 1, 0).validate(), std::invalid_argument);
  EXPECT_THROW(params(1, 0, 1, 17).validate(), std::invalid_argument);
  EXPECT_NO_THROW(params(1, 0, 1, 1).validate());
}

TEST(Quantize, ArithmeticExamples) {
  EXPECT_EQ(quantize(5.6, params(0, 0, 2, 2)), 3);
  EXPECT_EQ(quantize(-1.3, params(0, 0, 1, 16)), 0);
  EXPECT_EQ(quantize(-1.3, params(0, 0, 0.1, 16)), 0);
  // Half away from zero.
  EXPECT_EQ(quantize(2.5, params(0, 0, 1, 16)), 3);
  EXPECT_EQ(quantize(1e9, params(0, 0, 1, 4)), 15);
}

TEST(SimulateReadings, PoissonMeanEqualsVariance) {
  const auto p = params(std::log(100.0), 0.0, 1.0, 16);
  const int n = 100000;
  RandomStream rng(2024);
  double sum = 0, sum2 = 0;
  for (int i = 0; i < n; ++i) {
    RandomStream local = rng.substream(i);
    const double r = quantize(sample_analog(0.0, p, local), p);
    sum += r;
    sum2 += r * r;
  }
  const double mean = sum / n;
  const double var = sum2 / n - mean * mean;
  EXPECT_NEAR(mean, 100.0, 3.0 * 10.0 / std::sqrt(1e5));
  EXPECT_NEAR(var, 100.0, 5.0);
}

struct MomentCase {
  double mean;
  double eps;
};

class AnalogMoments : public ::testing::TestWithParam<MomentCase> {};

TEST_P(AnalogMoments, MatchPoissonPlusGaussianWithinFiveStandardErrors) {
  const auto c = GetParam();
  const auto p = params(std::log(c.mean), c.eps, 1.0, 16);
  const int n = 100000;
  RandomStream rng(77, static_cast<std::uint64_t>(c.mean * 10 + c.eps));
  double sum = 0, sum2 = 0;
  for (int i = 0; i < n; ++i) {
    const double z = sample_analog(0.0, p, rng);
    sum += z;
    sum2 += z * z;
  }
  const double mean = sum / n;
  const double var = sum2 / n - mean * mean;
  const double var_true = c.mean + c.eps;
  // Poisson cumulants all equal the mean; the Gaussian adds no fourth cumulant.
  const double kappa4 = c.mean;
  const double se_mean = std::sqrt(var_true / n);
  const double se_var = std::sqrt((kappa4 + 2.0 * var_true * var_true) / n);
  EXPECT_NEAR(mean, c.mean, 5.0 * se_mean);
  EXPECT_NEAR(var, var_true, 5.0 * se_var);
}

INSTANTIATE_TEST_SUITE_P(Settings, AnalogMoments,
                         ::testing::Values(MomentCase{3.0, 0.0}, MomentCase{9.5, 0.5},
                                           MomentCase{100.0, 1.0}, MomentCase{1000.0, 4.0},
                                           MomentCase{20000.0, 25.0}));

TEST(SimulateReadings, DeterministicAndInRange) {
  auto g = ScanGeometry::make(16, 12);
  auto y = tomoforge::testing::random_sinogram<double>(g, 3);
  for (auto& v : y.values()) v = 2.0 * std::abs(v);
  const auto p = params(std::log(300.0), 2.0, 1.5, 8);
  auto a = simulate_readings(y, p, RandomStream(5));
  auto b = simulate_readings(y, p, RandomStream(5));
  auto c = simulate_readings(y, p, RandomStream(6));
  EXPECT_TRUE(a.in_range());
  EXPECT_EQ(std::vector<std::int32_t>(a.values().begin(), a.values().end()),
            std::vector<std::int32_t>(b.values().begin(), b.values().end()));
  EXPECT_NE(std::vector<std::int32_t>(a.values().begin(), a.values().end()),
            std::vector<std::int32_t>(c.values().begin(), c.values().end()));
}

TEST(SimulateReadings, SaturatesAtBitDepth) {
  auto g = ScanGeometry::make(8, 4);
  Sinogram<double> y(g);  // photon mean exp(s) far above 2^b - 1
  auto r = simulate_readings(y, params(std::log(1e6), 1.0, 1.0, 4), RandomStream(1));
  for (auto v : r.values()) EXPECT_EQ(v, 15);
  EXPECT_TRUE(r.in_range());
}

TEST(PosteriorOracle, NoiselessMatchesGammaClosedForm) {
  // With eps = 0 and k = 1 the reading is the photon count; under a flat prior
  // on y, lambda = exp(s - y) is Gamma(r, 1), so mu = s - digamma(r) and
  // sigma^2 = trigamma(r).
  const auto p = params(std::log(10000.0), 0.0, 1.0, 16);
  const auto post = posterior_oracle_pixel(100, p, YGrid{});
  EXPECT_NEAR(post.mu, p.s - boost::math::digamma(100.0), 1e-4);
  EXPECT_NEAR(post.sigma, std::sqrt(boost::math::trigamma(100.0)), 1e-4);
  EXPECT_NEAR(post.mu, p.s - std::log(100.0), 6e-3);
  EXPECT_FALSE(post.grid_too_narrow());
}

/// Rejection sampling: y uniform on the grid range, keep draws whose
/// simulated reading equals r.
std::pair<double, double> monte_carlo_posterior(std::int32_t r, const NoiseParams& p,
                                                const YGrid& grid, int draws, int* accepted) {
  RandomStream rng(99, static_cast<std::uint64_t>(r));
  double sum = 0, sum2 = 0;
  int n = 0;
  for (int i = 0; i < draws; ++i) {
    const double y = grid.lo + (grid.hi - grid.lo) * rng.uniform();
    if (quantize(sample_analog(y, p, rng), p) != r) continue;
    sum += y;
    sum2 += y * y;
    ++n;
  }
  *accepted = n;
  const double mean = sum / n;
  return {mean, std::sqrt(sum2 / n - mean * mean)};
}

TEST(PosteriorOracle, AgreesWithMonteCarloRejection) {
  const auto p = params(std::log(10000.0), 0.0, 1.0, 16);
  const YGrid grid;
  int accepted = 0;
  auto [mc_mu, mc_sigma] = monte_carlo_posterior(100, p, grid, 1000000, &accepted);
  ASSERT_GT(accepted, 200);
  const auto post = posterior_oracle_pixel(100, p, grid);
  EXPECT_NEAR(mc_mu, post.mu, 5.0 * post.sigma / std::sqrt(accepted));
  EXPECT_NEAR(mc_sigma, post.sigma, 0.15 * post.sigma);
}

TEST(PosteriorOracle, SaturatedBinHasLargestSigma) {
  // The grid must contain the whole saturated region y < s - ln(15) as well
  // as the broad low-count posteriors near y = s.
  const auto p = params(std::log(15.0) + 8.0, 0.5, 1.0, 4);
  const YGrid grid{-4.0, 20.0, 5e-3};
  const auto top = posterior_oracle_pixel(p.max_reading(), p, grid);
  for (std::int32_t r = 1; r < p.max_reading(); ++r)
    EXPECT_GT(top.sigma, posterior_oracle_pixel(r, p, grid).sigma) << "r=" << r;
  int accepted = 0;
  auto [mc_mu, mc_sigma] = monte_carlo_posterior(p.max_reading(), p, grid, 200000, &accepted);
  ASSERT_GT(accepted, 1000);
  EXPECT_NEAR(mc_mu, top.mu, 5.0 * top.sigma / std::sqrt(accepted));
  EXPECT_NEAR(mc_sigma, top.sigma, 0.05 * top.sigma);
}

TEST(PosteriorOracle, SingleBitReadingsPartitionTheLikelihood) {
  const auto p = params(std::log(3.0), 0.7, 2.0, 1);
  const YGrid grid{-1.0, 4.0, 1e-2};
  double prior_mass = 0.0;
  for (std::size_t i = 0; i < grid.points(); ++i) {
    const double y = grid.at(i);
    const double total = std::exp(log_reading_likelihood(0, y, p)) +
                         std::exp(log_reading_likelihood(1, y, p));
    EXPECT_NEAR(total, 1.0, 1e-9) << "y=" << y;
    prior_mass += total / static_cast<double>(grid.points());
  }
  EXPECT_NEAR(prior_mass, 1.0, 1e-9);
}

TEST(PosteriorOracle, MeanNonincreasingInReadingWithoutElectronicNoise) {
  const auto p = params(std::log(500.0), 0.0, 1.0, 10);
  const YGrid grid{-1.0, 9.0, 2e-3};
  double prev = std::numeric_limits<double>::infinity();
  for (std::int32_t r = 1; r < 1000; r += 7) {
    const double mu = posterior_oracle_pixel(r, p, grid).mu;
    EXPECT_LE(mu, prev + 1e-12) << "r=" << r;
    prev = mu;
  }
}

TEST(PosteriorOracle, SigmaRespectsFloor) {
  const auto p = params(std::log(1e6), 0.0, 1.0, 16);
  const auto post = posterior_oracle_pixel(50000, p, YGrid{-1.0, 8.0, 1e-2});
  EXPECT_GE(post.sigma, kSigmaFloor);
}

TEST(PosteriorGrid, UniformReadingsGiveConstantGrids) {
  auto g = ScanGeometry::make(8, 6);
  const auto p = params(std::log(1000.0), 1.0, 1.0, 12);
  SensorReadings r(g, p);
  for (auto& v : r.values()) v = 400;
  auto post = posterior_oracle_grid(r, YGrid{});
  for (std::size_t e = 0; e < post.mu.values().size(); ++e) {
    EXPECT_EQ(post.mu.values()[e], post.mu.values()[0]);
    EXPECT_EQ(post.sigma.values()[e], post.sigma.values()[0]);
  }
}

TEST(PosteriorGrid, MatchesPerPixelCallsAndPermutes) {
  auto g = ScanGeometry::make(8, 8);
  const auto p = params(std::log(200.0), 0.5, 1.0, 10);
  Sinogram<double> y(g);
  auto noise = tomoforge::testing::random_vector(y.values().size(), 8, 0.0, 3.0);
  std::copy(noise.begin(), noise.end(), y.values().begin());
  auto r = simulate_readings(y, p, RandomStream(31));
  const YGrid grid{-1.0, 9.0, 5e-3};
  auto post = posterior_oracle_grid(r, grid);
  for (std::size_t e = 0; e < r.values().size(); ++e) {
    const auto px = posterior_oracle_pixel(r.values()[e], p, grid);
    EXPECT_EQ(post.mu.values()[e], px.mu);
    EXPECT_EQ(post.sigma.values()[e], px.sigma);
  }
  // Reversing the entries reverses the outputs.
  SensorReadings rev(g, p);
  std::reverse_copy(r.values().begin(), r.values().end(), rev.values().begin());
  auto post_rev = posterior_oracle_grid(rev, grid);
  const std::size_t n = r.values().size();
  for (std::size_t e = 0; e < n; ++e) {
    EXPECT_EQ(post_rev.mu.values()[e], post.mu.values()[n - 1 - e]);
    EXPECT_EQ(post_rev.sigma.values()[e], post.sigma.values()[n - 1 - e]);
  }
}

}  // namespace
