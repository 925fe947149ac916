#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "test_util.hpp"
#include "tomoforge/parallel.hpp"
#include "tomoforge/radon.hpp"

namespace tomoforge {
namespace {

using testing::dot;
using testing::random_image;
using testing::random_sinogram;
using testing::relative_error;

double max_abs(std::span<const double> v) {
  double m = 0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

TEST(SystemMatrix, ShapeContract) {
  auto g = ScanGeometry::make(4, 1);
  auto m = assemble_system_matrix(g);
  EXPECT_EQ(m.rows(), 1 * g.n_detectors);
  EXPECT_EQ(m.cols(), 16);
}

TEST(SystemMatrix, ZeroImageGivesZeroVector) {
  auto g = ScanGeometry::make(8, 5);
  auto m = assemble_system_matrix(g);
  Eigen::VectorXd x = Eigen::VectorXd::Zero(64);
  EXPECT_EQ((m * x).cwiseAbs().maxCoeff(), 0.0);
}

TEST(SystemMatrix, RejectsLargeGeometry) {
  EXPECT_THROW(assemble_system_matrix(ScanGeometry::make(65)), std::length_error);
}

TEST(SystemMatrix, ForwardProjectMatchesDenseProduct) {
  for (int n : {16, 17}) {
    auto g = ScanGeometry::make(n, 11, 0, 0.7);
    auto x = random_image<double>(g, 3);
    auto m = assemble_system_matrix(g);
    Eigen::Map<const Eigen::VectorXd> xv(x.values().data(), x.values().size());
    Eigen::VectorXd expected = m * xv;
    auto s = forward_project(x, g);
    const double scale = expected.cwiseAbs().maxCoeff();
    for (std::size_t i = 0; i < s.size(); ++i)
      ASSERT_NEAR(s.values()[i], expected[static_cast<Eigen::Index>(i)], 1e-10 * scale) << i;
  }
}

TEST(SystemMatrix, BackProjectMatchesDenseTranspose) {
  auto g = ScanGeometry::make(16, 9, 21);
  auto s = random_sinogram<double>(g, 5);
  auto m = assemble_system_matrix(g);
  Eigen::Map<const Eigen::VectorXd> sv(s.values().data(), s.values().size());
  Eigen::VectorXd expected = m.transpose() * sv;
  auto x = back_project(s, g);
  const double scale = expected.cwiseAbs().maxCoeff();
  for (std::size_t i = 0; i < x.size(); ++i)
    ASSERT_NEAR(x.values()[i], expected[static_cast<Eigen::Index>(i)], 1e-10 * scale) << i;
}

TEST(Radon, ZeroInputsGiveZeroOutputs) {
  auto g = ScanGeometry::make(16);
  EXPECT_EQ(max_abs(forward_project(ImageGrid<double>(g), g).values()), 0.0);
  EXPECT_EQ(max_abs(back_project(Sinogram<double>(g), g).values()), 0.0);
  EXPECT_EQ(max_abs(fbp_reconstruct(Sinogram<double>(g), g).values()), 0.0);
}

TEST(Radon, AdjointIdentityDouble) {
  for (int n : {16, 32}) {
    auto g = ScanGeometry::make(n);
    for (std::uint32_t seed = 0; seed < 20; ++seed) {
      auto x = random_image<double>(g, 2 * seed);
      auto s = random_sinogram<double>(g, 2 * seed + 1);
      const double lhs = dot(forward_project(x, g).values(), s.values());
      const double rhs = dot(x.values(), back_project(s, g).values());
      EXPECT_LT(relative_error(lhs, rhs), 1e-10) << "n=" << n << " seed=" << seed;
    }
  }
}

TEST(Radon, AdjointIdentitySingle) {
  auto g = ScanGeometry::make(32);
  for (std::uint32_t seed = 0; seed < 10; ++seed) {
    auto x = random_image<float>(g, 7 * seed);
    auto s = random_sinogram<float>(g, 7 * seed + 1);
    const double lhs = dot(forward_project(x, g).values(), s.values());
    const double rhs = dot(x.values(), back_project(s, g).values());
    EXPECT_LT(relative_error(lhs, rhs), 1e-4);
  }
}

TEST(Radon, PlaneBatchesMatchSingleCalls) {
  auto g = ScanGeometry::make(24, 17, 29);
  const std::size_t planes = 3, in = g.image_pixels(), sn = g.sinogram_entries();
  std::vector<float> imgs, sinos;
  for (std::uint32_t p = 0; p < planes; ++p) {
    auto x = random_image<float>(g, 40 + p);
    auto s = random_sinogram<float>(g, 50 + p);
    imgs.insert(imgs.end(), x.values().begin(), x.values().end());
    sinos.insert(sinos.end(), s.values().begin(), s.values().end());
  }
  std::vector<float> fwd(planes * sn), bwd(planes * in);
  forward_project_planes<float>(imgs, planes, g, fwd);
  back_project_planes<float>(sinos, planes, g, bwd);
  for (std::size_t p = 0; p < planes; ++p) {
    std::vector<float> f1(sn), b1(in);
    forward_project_into<float>(std::span<const float>(imgs).subspan(p * in, in), g, f1);
    back_project_into<float>(std::span<const float>(sinos).subspan(p * sn, sn), g, b1);
    for (std::size_t i = 0; i < sn; ++i) ASSERT_EQ(fwd[p * sn + i], f1[i]);
    for (std::size_t i = 0; i < in; ++i) ASSERT_EQ(bwd[p * in + i], b1[i]);
  }
  EXPECT_THROW(forward_project_planes<float>(imgs, planes + 1, g, fwd), ShapeError);
}

// 256 x 256 with 64 angles is past the weight-table limit, so this exercises
// the on-the-fly path.
TEST(Radon, AdjointIdentityUncachedGeometry) {
  auto g = ScanGeometry::make(256, 64, 256);
  auto x = random_image<double>(g, 3);
  auto s = random_sinogram<double>(g, 4);
  const double lhs = dot(forward_project(x, g).values(), s.values());
  const double rhs = dot(x.values(), back_project(s, g).values());
  EXPECT_LT(relative_error(lhs, rhs), 1e-10);
}

TEST(Radon, ShapeMismatchThrows) {
  auto g = ScanGeometry::make(16);
  auto other = ScanGeometry::make(8);
  EXPECT_THROW(forward_project(ImageGrid<double>(other), g), ShapeError);
  EXPECT_THROW(back_project(Sinogram<double>(other), g), ShapeError);
  EXPECT_THROW(ScanGeometry::make(1), std::invalid_argument);
}

TEST(Radon, BackProjectionRespectsCircleMask) {
  auto g = ScanGeometry::make(24);
  auto x = back_project(random_sinogram<double>(g, 1), g);
  EXPECT_TRUE(x.satisfies_mask());
}

TEST(Radon, CenteredDiskRowsAreIdentical) {
  // Pixelisation of the disk edge is the only asymmetry, so a fine grid is used.
  auto g = ScanGeometry::make(512, 32);
  ImageGrid<double> disk(g);
  const double c = 0.5 * (g.image_size - 1), radius = 0.3 * g.image_size;
  for (int i = 0; i < g.image_size; ++i)
    for (int j = 0; j < g.image_size; ++j) {
      int hits = 0;
      for (int a = 0; a < 16; ++a)
        for (int b = 0; b < 16; ++b) {
          const double dy = i - c + (a + 0.5) / 16 - 0.5, dx = j - c + (b + 0.5) / 16 - 0.5;
          hits += dx * dx + dy * dy <= radius * radius;
        }
      disk(i, j) = hits / 256.0;
    }
  auto s = forward_project(disk, g);
  for (int a = 1; a < g.n_angles; ++a) {
    double num = 0, den = 0;
    for (int d = 0; d < g.n_detectors; ++d) {
      num += (s(a, d) - s(0, d)) * (s(a, d) - s(0, d));
      den += s(0, d) * s(0, d);
    }
    EXPECT_LT(std::sqrt(num / den), 1e-3) << "angle " << a;
  }
}

TEST(Radon, ResultsIndependentOfThreadCount) {
  auto g = ScanGeometry::make(32, 20);
  auto x = random_image<double>(g, 9);
  auto sino = random_sinogram<double>(g, 10);
  set_num_threads(1);
  auto s1 = forward_project(x, g);
  auto b1 = back_project(sino, g);
  set_num_threads(4);
  auto s4 = forward_project(x, g);
  auto b4 = back_project(sino, g);
  set_num_threads(1);
  EXPECT_TRUE(std::equal(s1.values().begin(), s1.values().end(), s4.values().begin()));
  EXPECT_TRUE(std::equal(b1.values().begin(), b1.values().end(), b4.values().begin()));
}

TEST(RampFilter, DcTermIsTheSpatialKernelSum) {
  // H[0] = 2 sum_m h[m] = 2 (1/4 - 2/pi^2 sum_{odd 0<m<P/2} 1/m^2), of order 1/P
  // and vanishing as the padding grows; a constant row keeps only that gain.
  const std::size_t p = ramp_padded_length(37);
  double odd = 0;
  for (std::size_t m = 1; m < p / 2; m += 2) odd += 1.0 / static_cast<double>(m * m);
  const double h0 = 2.0 * (0.25 - 2.0 / (std::numbers::pi * std::numbers::pi) * odd);
  EXPECT_NEAR(ramp_response(37, RampWindow::ramlak)[0], h0, 1e-12);
  EXPECT_GT(h0, 0.0);
  EXPECT_LT(h0, 2.0 / static_cast<double>(p));
  std::vector<double> row(37, 2.5);
  auto out = ramp_filter_row_padded(row, RampWindow::ramlak);
  EXPECT_EQ(out.size(), 128u);
  double total = 0;
  for (double v : out) total += v;
  EXPECT_NEAR(total, h0 * 2.5 * 37, 1e-9);
  EXPECT_LT(ramp_response(1024, RampWindow::ramlak)[0], 1e-3);
}

TEST(RampFilter, ResponseApproachesTwiceAbsFrequency) {
  const std::size_t p = ramp_padded_length(64);
  const auto h = ramp_response(64, RampWindow::ramlak);
  EXPECT_NEAR(h[p / 2], 1.0, 5e-3);
  for (std::size_t k = 8; k <= p / 2; ++k)
    EXPECT_NEAR(h[k], 2.0 * static_cast<double>(k) / static_cast<double>(p), 5e-3) << k;
}

// Spatial Ram-Lak kernel at an offset, periodic over P.
double direct_ramlak(int offset, std::size_t p) {
  long m = ((offset % static_cast<long>(p)) + static_cast<long>(p)) % static_cast<long>(p);
  if (m > static_cast<long>(p / 2)) m -= static_cast<long>(p);
  if (m == 0) return 0.5;
  if (m % 2 == 0) return 0.0;
  return -2.0 / (std::numbers::pi * std::numbers::pi * static_cast<double>(m * m));
}

TEST(RampFilter, ImpulseMatchesSpatialKernel) {
  auto g = ScanGeometry::make(20, 3, 25);
  Sinogram<double> s(g);
  s(1, 12) = 1.0;
  auto f = ramp_filter(s, RampWindow::ramlak);
  const std::size_t p = ramp_padded_length(25);
  for (int d = 0; d < 25; ++d) {
    EXPECT_NEAR(f(1, d), direct_ramlak(d - 12, p), 1e-12) << d;
    EXPECT_EQ(f(0, d), 0.0);
  }
}

TEST(RampFilter, IsLinear) {
  auto g = ScanGeometry::make(16, 6, 23);
  auto s1 = random_sinogram<double>(g, 1);
  auto s2 = random_sinogram<double>(g, 2);
  Sinogram<double> mix(g);
  for (std::size_t i = 0; i < mix.size(); ++i) mix.values()[i] = 0.3 * s1.values()[i] - 1.7 * s2.values()[i];
  for (auto w : {RampWindow::ramlak, RampWindow::hann}) {
    auto f1 = ramp_filter(s1, w), f2 = ramp_filter(s2, w), fm = ramp_filter(mix, w);
    for (std::size_t i = 0; i < fm.size(); ++i)
      EXPECT_NEAR(fm.values()[i], 0.3 * f1.values()[i] - 1.7 * f2.values()[i], 1e-10);
  }
}

TEST(Fbp, DoublingSinogramDoublesImage) {
  auto g = ScanGeometry::make(24, 30);
  auto s = random_sinogram<double>(g, 4);
  Sinogram<double> s2(g);
  for (std::size_t i = 0; i < s.size(); ++i) s2.values()[i] = 2 * s.values()[i];
  auto x1 = fbp_reconstruct(s, g), x2 = fbp_reconstruct(s2, g);
  for (std::size_t i = 0; i < x1.size(); ++i) EXPECT_NEAR(x2.values()[i], 2 * x1.values()[i], 1e-12);
  EXPECT_TRUE(x1.satisfies_mask());
}

TEST(Fbp, RecoversUniformDiskLevel) {
  auto g = ScanGeometry::make(64, 90, 0, 0.5);
  ImageGrid<double> disk(g);
  for (int i = 0; i < 64; ++i)
    for (int j = 0; j < 64; ++j)
      if ((i - 31.5) * (i - 31.5) + (j - 31.5) * (j - 31.5) < 20 * 20) disk(i, j) = 1.0;
  auto rec = fbp_reconstruct(forward_project(disk, g), g);
  EXPECT_NEAR(rec(32, 32), 1.0, 0.05);
  EXPECT_NEAR(rec(32, 20), 1.0, 0.05);
  EXPECT_NEAR(rec(5, 32), 0.0, 0.05);
}

}  // namespace
}  // namespace tomoforge
