#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <span>
#include <vector>

#include "tomoforge/error.hpp"

namespace tomoforge {

/// Parallel-beam scan: angles a*pi/n_angles for a in [0, n_angles), detector
/// bins spaced pixel_spacing apart and centred on the rotation axis.
struct ScanGeometry {
  int image_size = 0;
  int n_angles = 0;
  int n_detectors = 0;
  double pixel_spacing = 1.0;

  /// n_angles and n_detectors default to image_size when passed as 0.
  static ScanGeometry make(int image_size, int n_angles = 0, int n_detectors = 0,
                           double pixel_spacing = 1.0);

  void validate() const;
  double angle(int a) const;
  /// Pixel centre within the inscribed circle (radius image_size/2).
  bool inside_circle(int row, int col) const;
  std::size_t image_pixels() const { return static_cast<std::size_t>(image_size) * image_size; }
  std::size_t sinogram_entries() const {
    return static_cast<std::size_t>(n_angles) * n_detectors;
  }

  friend bool operator==(const ScanGeometry&, const ScanGeometry&) = default;
};

/// Dense row-major 2-D array.
template <typename T>
class Array2 {
 public:
  Array2() = default;
  Array2(int rows, int cols, T fill = T(0))
      : rows_(rows), cols_(cols), data_(static_cast<std::size_t>(rows) * cols, fill) {}

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }

  T& operator()(int r, int c) { return data_[static_cast<std::size_t>(r) * cols_ + c]; }
  T operator()(int r, int c) const { return data_[static_cast<std::size_t>(r) * cols_ + c]; }

  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  std::span<T> row(int r) { return values().subspan(static_cast<std::size_t>(r) * cols_, cols_); }
  std::span<const T> row(int r) const {
    return values().subspan(static_cast<std::size_t>(r) * cols_, cols_);
  }

 protected:
  int rows_ = 0;
  int cols_ = 0;
  std::vector<T> data_;
};

/// Square image that is zero outside the inscribed circle.
template <typename T>
class ImageGrid : public Array2<T> {
 public:
  ImageGrid() = default;
  explicit ImageGrid(const ScanGeometry& g);
  /// Copies `values` (row-major, image_size^2 entries) and applies the circle mask.
  ImageGrid(const ScanGeometry& g, std::span<const T> values);

  const ScanGeometry& geometry() const { return geometry_; }
  /// Re-establishes the circle invariant after direct pixel writes.
  void apply_mask();
  bool satisfies_mask() const;

 private:
  ScanGeometry geometry_;
};

/// n_angles x n_detectors line-integral data.
template <typename T>
class Sinogram : public Array2<T> {
 public:
  Sinogram() = default;
  explicit Sinogram(const ScanGeometry& g);
  Sinogram(const ScanGeometry& g, std::span<const T> values);

  const ScanGeometry& geometry() const { return geometry_; }
  bool all_finite() const;

 private:
  ScanGeometry geometry_;
};

/// A x. Each pixel spreads pixel_spacing * value over the detector bins its
/// square footprint covers (the trapezoid shadow of the pixel, integrated per
/// bin; at most three bins).
template <typename T>
Sinogram<T> forward_project(const ImageGrid<T>& x, const ScanGeometry& g);

/// A^T s, the exact transpose of forward_project: both are driven by the same
/// per-(angle, pixel) weight enumeration.
template <typename T>
ImageGrid<T> back_project(const Sinogram<T>& s, const ScanGeometry& g);

/// Raw-span variants used by the autodiff bridge (batch x channel loops).
template <typename T>
void forward_project_into(std::span<const T> image, const ScanGeometry& g, std::span<T> sino);
template <typename T>
void back_project_into(std::span<const T> sino, const ScanGeometry& g, std::span<T> image);
/// `planes` contiguous images / sinograms at once. Per-plane results are
/// bitwise equal to the single-plane calls; the weights are computed once per
/// geometry and cached when the table stays small (2^21 angle-pixel pairs).
template <typename T>
void forward_project_planes(std::span<const T> images, std::size_t planes, const ScanGeometry& g,
                            std::span<T> sinos);
template <typename T>
void back_project_planes(std::span<const T> sinos, std::size_t planes, const ScanGeometry& g,
                         std::span<T> images);

enum class RampWindow { ramlak, hann };

/// Zero-padded DFT length used by the ramp filter: next power of two >= 2*n.
std::size_t ramp_padded_length(int n_detectors);

/// Frequency response over the padded DFT grid: twice the DFT of the spatial
/// Ram-Lak kernel, i.e. 2|f| (1 at Nyquist) plus a low-frequency lift of order
/// 1/P, optionally Hann-apodized.
std::vector<double> ramp_response(int n_detectors, RampWindow window);

/// Filters one zero-padded detector row and returns the full padded output.
std::vector<double> ramp_filter_row_padded(std::span<const double> row, RampWindow window);

template <typename T>
Sinogram<T> ramp_filter(const Sinogram<T>& s, RampWindow window = RampWindow::ramlak);

/// pi/(2 n_angles) * A^T ramp(s) / pixel_spacing^2, circle-masked.
template <typename T>
ImageGrid<T> fbp_reconstruct(const Sinogram<T>& s, const ScanGeometry& g,
                             RampWindow window = RampWindow::ramlak);

/// Dense A (rows: angle-major sinogram entries, cols: row-major pixels). Each
/// weight is the area of the pixel square inside the detector bin's strip,
/// computed by polygon clipping.
/// Throws std::length_error above image_size 64.
Eigen::MatrixXd assemble_system_matrix(const ScanGeometry& g);

inline constexpr int kSystemMatrixMaxSize = 64;

}  // namespace tomoforge
