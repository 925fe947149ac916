#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "tomoforge/radon.hpp"
#include "tomoforge/random.hpp"

namespace tomoforge {

/// Modified (Toft) Shepp-Logan head phantom, point-sampled at pixel centres.
ImageGrid<double> shepp_logan(int n);

struct Ellipse {
  double intensity;
  double a, b;     // semi-axes along the rotated x and y directions
  double x0, y0;   // centre, unit-disk coordinates
  double phi;      // rotation in radians
};

/// Pixel centre (row, col) of an n x n grid in unit-disk coordinates:
/// x to the right, y up, the inscribed circle has radius 1.
inline std::pair<double, double> unit_coords(int row, int col, int n) {
  const double c = 0.5 * (n - 1), h = 0.5 * n;
  return {(col - c) / h, (c - row) / h};
}

bool inside_ellipse(const Ellipse& e, double x, double y);

/// The ten ellipses of the modified Shepp-Logan phantom.
const std::vector<Ellipse>& shepp_logan_ellipses();

struct PhantomSpec {
  enum class Kind { shepp_logan, random_ellipses };
  Kind kind = Kind::random_ellipses;
  int min_ellipses = 3;
  int max_ellipses = 8;
  double intensity_lo = 0.1;
  double intensity_hi = 1.0;
  std::uint64_t seed = 0;
};

/// Painter's-order ellipses: a body ellipse followed by smaller ellipses
/// inside it, each overwriting what lies below with an intensity drawn from
/// [intensity_lo, intensity_hi]. The background is 0.
ImageGrid<double> random_ellipse_phantom(int n, const PhantomSpec& spec, RandomStream& rng);

/// Phantom `index` of a spec: drawn from RandomStream(spec.seed).substream(index).
ImageGrid<double> make_phantom(int n, const PhantomSpec& spec, std::uint64_t index);

// ---- CT slice ingestion ------------------------------------------------------

struct Circle {
  double cx = 0;  // column
  double cy = 0;  // row
  double r = 0;
};

/// Smallest circle containing every point (x = column, y = row); Welzl's
/// algorithm on a seeded random permutation.
Circle min_enclosing_circle(std::vector<std::pair<double, double>> points, std::uint64_t seed = 1);

struct PreprocessConfig {
  int n = 256;
  double threshold_hu = -9050.0;
  double window_lo_hu = -1000.0;
  double window_hi_hu = 2000.0;
};

struct PreprocessResult {
  std::optional<ImageGrid<double>> image;  // empty when rejected
  std::optional<Circle> circle;            // empty when the mask is empty
  int crop_side = 0;
  std::string reason;                      // why the slice was rejected
  bool accepted() const { return image.has_value(); }
};

/// HU slice: mask HU > threshold, enclose it with the minimal circle of mask
/// pixel centres, crop the pixel-aligned square of side ceil(2r) around it,
/// reject if smaller than n, else bilinearly resample to n x n, map the
/// HU window linearly to [0, 1] (clamped) and zero outside the inscribed circle.
PreprocessResult preprocess_hu_slice(const Array2<double>& hu, const PreprocessConfig& cfg);

/// Raw 16-bit slice: HU = value - 32768, then preprocess_hu_slice.
PreprocessResult preprocess_ct_slice(const Array2<std::uint16_t>& raw, const PreprocessConfig& cfg);

/// Inverse of the window map, with pixels outside the inscribed circle set
/// to the lowest representable HU; feeding the result back through
/// preprocess_hu_slice reproduces the image.
Array2<double> processed_to_hu(const ImageGrid<double>& img, const PreprocessConfig& cfg);

// ---- splits -----------------------------------------------------------------

struct DatasetSplit {
  std::vector<std::string> train;
  std::vector<std::string> validation;
  std::vector<std::string> test;
};

/// Splits the distinct ids (items sharing an id stay together) with the given
/// train/validation fractions; the test split takes the rest. Deterministic
/// per seed.
DatasetSplit split_by_id(const std::vector<std::string>& item_ids, double train_fraction,
                         double validation_fraction, std::uint64_t seed);

}  // namespace tomoforge
