#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <set>

#include "tomoforge/data.hpp"
#include "tomoforge/image_io.hpp"
#include "tomoforge/metrics.hpp"

namespace {

using namespace tomoforge;

TEST(SheppLogan, RangeAndMask) {
  const auto img = shepp_logan(128);
  EXPECT_TRUE(img.satisfies_mask());
  double lo = 1e9, hi = -1e9;
  for (double v : img.values()) lo = std::min(lo, v), hi = std::max(hi, v);
  EXPECT_EQ(lo, 0.0);
  EXPECT_EQ(hi, 1.0);  // the skull ring
}

TEST(SheppLogan, CentrePixelMatchesEllipseSum) {
  // (64, 64) of N=128 is (0.0078, -0.0078): inside the outer two ellipses
  // only, 1.0 - 0.8.
  const auto img = shepp_logan(128);
  EXPECT_NEAR(img(64, 64), 0.2, 1e-12);
  // Corner lies outside every ellipse.
  EXPECT_EQ(img(0, 0), 0.0);
}

TEST(RandomPhantom, ReproducibleAndInRange) {
  PhantomSpec spec;
  spec.seed = 42;
  const auto a = make_phantom(64, spec, 3);
  const auto b = make_phantom(64, spec, 3);
  const auto c = make_phantom(64, spec, 4);
  EXPECT_TRUE(std::equal(a.values().begin(), a.values().end(), b.values().begin()));
  EXPECT_FALSE(std::equal(a.values().begin(), a.values().end(), c.values().begin()));
  for (std::uint64_t k = 0; k < 20; ++k) {
    const auto img = make_phantom(64, spec, k);
    EXPECT_TRUE(img.satisfies_mask());
    int nonzero = 0;
    for (double v : img.values()) {
      ASSERT_GE(v, 0.0);
      ASSERT_LE(v, 1.0);
      if (v != 0.0) {
        ASSERT_GE(v, spec.intensity_lo);
        ++nonzero;
      }
    }
    // The body covers at least 0.6 * 0.6 of the unit disk.
    EXPECT_GT(nonzero, static_cast<int>(0.3 * 64 * 64 * 0.785));
  }
}

TEST(RandomPhantom, RejectsBadSpec) {
  PhantomSpec spec;
  spec.min_ellipses = 0;
  RandomStream rng(1);
  EXPECT_THROW(random_ellipse_phantom(32, spec, rng), std::invalid_argument);
  spec = {};
  spec.intensity_hi = 1.5;
  EXPECT_THROW(random_ellipse_phantom(32, spec, rng), std::invalid_argument);
}

// Exhaustive oracle: smallest circle through 2 or 3 of the points containing all.
Circle brute_force_mec(const std::vector<std::pair<double, double>>& p) {
  auto covers = [&](double cx, double cy, double r) {
    for (const auto& q : p)
      if (std::hypot(q.first - cx, q.second - cy) > r + 1e-9) return false;
    return true;
  };
  Circle best{0, 0, 1e300};
  const std::size_t n = p.size();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const double cx = (p[i].first + p[j].first) / 2, cy = (p[i].second + p[j].second) / 2;
      const double r = std::hypot(p[i].first - cx, p[i].second - cy);
      if (r < best.r && covers(cx, cy, r)) best = {cx, cy, r};
      for (std::size_t k = j + 1; k < n; ++k) {
        const double ax = p[i].first, ay = p[i].second;
        const double bx = p[j].first - ax, by = p[j].second - ay;
        const double qx = p[k].first - ax, qy = p[k].second - ay;
        const double d = 2 * (bx * qy - by * qx);
        if (std::abs(d) < 1e-12) continue;
        const double b2 = bx * bx + by * by, q2 = qx * qx + qy * qy;
        const double ux = (qy * b2 - by * q2) / d, uy = (bx * q2 - qx * b2) / d;
        const double rr = std::hypot(ux, uy);
        if (rr < best.r && covers(ax + ux, ay + uy, rr)) best = {ax + ux, ay + uy, rr};
      }
    }
  return best;
}

TEST(MinEnclosingCircle, MatchesExhaustiveSearch) {
  RandomStream rng(9);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<std::pair<double, double>> pts;
    for (int i = 0; i < 25; ++i) pts.emplace_back(20 * rng.uniform(), 30 * rng.uniform());
    const Circle w = min_enclosing_circle(pts, trial);
    const Circle b = brute_force_mec(pts);
    EXPECT_NEAR(w.r, b.r, 1e-9);
    EXPECT_NEAR(w.cx, b.cx, 1e-7);
    EXPECT_NEAR(w.cy, b.cy, 1e-7);
  }
}

TEST(MinEnclosingCircle, DegenerateInputs) {
  const Circle one = min_enclosing_circle({{3, 4}});
  EXPECT_EQ(one.r, 0.0);
  const Circle line = min_enclosing_circle({{0, 0}, {1, 0}, {2, 0}, {5, 0}});
  EXPECT_NEAR(line.cx, 2.5, 1e-12);
  EXPECT_NEAR(line.r, 2.5, 1e-12);
  EXPECT_THROW(min_enclosing_circle({}), std::invalid_argument);
}

Array2<double> disk_hu(int size, double cx, double cy, double radius, double bg) {
  Array2<double> hu(size, size, bg);
  for (int i = 0; i < size; ++i)
    for (int j = 0; j < size; ++j)
      if (std::hypot(j - cx, i - cy) <= radius) hu(i, j) = 0.0;
  return hu;
}

TEST(Preprocess, AllAirRejectedAtAirThreshold) {
  Array2<double> air(64, 64, -1000.0);
  PreprocessConfig cfg;
  cfg.n = 32;
  cfg.threshold_hu = -950;
  const auto res = preprocess_hu_slice(air, cfg);
  EXPECT_FALSE(res.accepted());
  EXPECT_FALSE(res.circle.has_value());
}

TEST(Preprocess, WaterDiskSizeRule) {
  // Raw 0 background (HU -32768) below the default threshold; disk radius 200.
  Array2<std::uint16_t> raw(512, 512, 0);
  for (int i = 0; i < 512; ++i)
    for (int j = 0; j < 512; ++j)
      if (std::hypot(j - 255.5, i - 255.5) <= 200) raw(i, j) = 32768;
  PreprocessConfig cfg;
  const auto ok = preprocess_ct_slice(raw, cfg);
  ASSERT_TRUE(ok.accepted());
  EXPECT_NEAR(ok.circle->r, 200, 1.0);
  EXPECT_TRUE(ok.image->satisfies_mask());
  // Water at HU 0 maps to 1000 / 3000.
  EXPECT_NEAR((*ok.image)(128, 128), 1.0 / 3.0, 1e-12);
  cfg.n = 512;
  const auto rejected = preprocess_ct_slice(raw, cfg);
  EXPECT_FALSE(rejected.accepted());
  EXPECT_TRUE(rejected.circle.has_value());
}

TEST(Preprocess, OffCentreDiskIsRecentred) {
  // Circle centre found within 1 px of the true centre, and the output disk
  // sits in the middle of the grid.
  const auto hu = disk_hu(120, 40.3, 70.8, 30, -32768);
  PreprocessConfig cfg;
  cfg.n = 48;
  const auto res = preprocess_hu_slice(hu, cfg);
  ASSERT_TRUE(res.accepted());
  EXPECT_NEAR(res.circle->cx, 40.3, 1.0);
  EXPECT_NEAR(res.circle->cy, 70.8, 1.0);
  // Centroid of the water pixels in the output.
  double sx = 0, sy = 0, w = 0;
  const auto& img = *res.image;
  for (int i = 0; i < 48; ++i)
    for (int j = 0; j < 48; ++j) {
      const double v = img(i, j);
      sx += v * j, sy += v * i, w += v;
    }
  EXPECT_NEAR(sx / w, 23.5, 1.0);
  EXPECT_NEAR(sy / w, 23.5, 1.0);
}

TEST(Preprocess, IdempotentOnProcessedImages) {
  PhantomSpec spec;
  spec.seed = 5;
  PreprocessConfig cfg;
  for (int n : {32, 64}) {
    cfg.n = n;
    const auto img = make_phantom(n, spec, 1);
    const auto hu = processed_to_hu(img, cfg);
    const auto res = preprocess_hu_slice(hu, cfg);
    ASSERT_TRUE(res.accepted()) << res.reason;
    EXPECT_EQ(res.crop_side, n);
    for (std::size_t k = 0; k < img.size(); ++k) EXPECT_NEAR(res.image->values()[k], img.values()[k], 1e-6);
  }
}

TEST(Split, DisjointCoveringAndDeterministic) {
  std::vector<std::string> ids;
  for (int p = 0; p < 50; ++p)
    for (int s = 0; s < 3; ++s) ids.push_back("patient" + std::to_string(p));
  const auto a = split_by_id(ids, 0.7, 0.15, 3);
  const auto b = split_by_id(ids, 0.7, 0.15, 3);
  EXPECT_EQ(a.train, b.train);
  EXPECT_EQ(a.test, b.test);
  EXPECT_EQ(a.train.size(), 35u);
  EXPECT_EQ(a.validation.size(), 8u);  // round(7.5)
  EXPECT_EQ(a.test.size(), 7u);
  std::set<std::string> all;
  for (const auto* part : {&a.train, &a.validation, &a.test}) all.insert(part->begin(), part->end());
  EXPECT_EQ(all.size(), 50u);
  const auto c = split_by_id(ids, 0.7, 0.15, 4);
  EXPECT_NE(a.train, c.train);
  EXPECT_THROW(split_by_id(ids, 0.8, 0.3, 1), std::invalid_argument);
}

TEST(ImageIo, Png16RoundTrip) {
  const auto path = (std::filesystem::temp_directory_path() / "tomoforge_io_test.png").string();
  Array2<std::uint16_t> img(7, 5);
  for (std::size_t k = 0; k < img.size(); ++k) img.values()[k] = static_cast<std::uint16_t>(k * 1871 + 3);
  write_png16(path, img);
  const auto back = read_png16(path);
  ASSERT_EQ(back.rows(), 7);
  ASSERT_EQ(back.cols(), 5);
  EXPECT_TRUE(std::equal(img.values().begin(), img.values().end(), back.values().begin()));
  std::filesystem::remove(path);
  EXPECT_THROW(read_png16(path), IoError);
}

TEST(ImageIo, TileLayout) {
  std::vector<Array2<double>> tiles(3, Array2<double>(2, 2, 1.0));
  const auto t = tile_images(tiles, 2, 1);
  EXPECT_EQ(t.rows(), 5);
  EXPECT_EQ(t.cols(), 5);
  EXPECT_EQ(t(0, 2), 0.0);
  EXPECT_EQ(t(3, 0), 1.0);
  EXPECT_EQ(t(3, 3), 0.0);
}

}  // namespace

namespace {

TEST(SheppLoganFbp, SsimFloorAndAngleLadder) {
  using namespace tomoforge;
  const auto x = shepp_logan(128);
  double prev = -1;
  for (int na : {16, 45, 90, 180}) {
    auto g = ScanGeometry::make(128, na);
    const double s = ssim(x, fbp_reconstruct(forward_project(x, g), g));
    EXPECT_GE(s, prev - 0.01) << na;
    prev = s;
  }
  // Measured 0.904 with the Ram-Lak response.
  EXPECT_GE(prev, 0.85);
}

}  // namespace
