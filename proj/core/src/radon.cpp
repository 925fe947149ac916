#include "tomoforge/radon.hpp"

#include <unsupported/Eigen/FFT>

#include <array>
#include <bit>
#include <memory>
#include <mutex>
#include <cmath>
#include <complex>
#include <numbers>
#include <stdexcept>
#include <string>

#include "tomoforge/parallel.hpp"

namespace tomoforge {

ScanGeometry ScanGeometry::make(int image_size, int n_angles, int n_detectors,
                                double pixel_spacing) {
  ScanGeometry g{image_size, n_angles > 0 ? n_angles : image_size,
                 n_detectors > 0 ? n_detectors : image_size, pixel_spacing};
  g.validate();
  return g;
}

void ScanGeometry::validate() const {
  if (image_size < 2) throw std::invalid_argument("geometry: image_size must be >= 2");
  if (n_angles < 1) throw std::invalid_argument("geometry: n_angles must be >= 1");
  if (n_detectors < 1) throw std::invalid_argument("geometry: n_detectors must be >= 1");
  if (!(pixel_spacing > 0.0) || !std::isfinite(pixel_spacing))
    throw std::invalid_argument("geometry: pixel_spacing must be positive");
}

double ScanGeometry::angle(int a) const {
  return std::numbers::pi * static_cast<double>(a) / static_cast<double>(n_angles);
}

bool ScanGeometry::inside_circle(int row, int col) const {
  const double c = 0.5 * (image_size - 1);
  const double dx = col - c;
  const double dy = row - c;
  const double r = 0.5 * image_size;
  return dx * dx + dy * dy <= r * r;
}

template <typename T>
ImageGrid<T>::ImageGrid(const ScanGeometry& g)
    : Array2<T>(g.image_size, g.image_size), geometry_(g) {}

template <typename T>
ImageGrid<T>::ImageGrid(const ScanGeometry& g, std::span<const T> values)
    : Array2<T>(g.image_size, g.image_size), geometry_(g) {
  if (values.size() != this->data_.size())
    throw ShapeError("ImageGrid: expected " + std::to_string(this->data_.size()) + " values, got " +
                     std::to_string(values.size()));
  std::copy(values.begin(), values.end(), this->data_.begin());
  apply_mask();
}

template <typename T>
void ImageGrid<T>::apply_mask() {
  for (int i = 0; i < this->rows_; ++i)
    for (int j = 0; j < this->cols_; ++j)
      if (!geometry_.inside_circle(i, j)) (*this)(i, j) = T(0);
}

template <typename T>
bool ImageGrid<T>::satisfies_mask() const {
  for (int i = 0; i < this->rows_; ++i)
    for (int j = 0; j < this->cols_; ++j)
      if (!geometry_.inside_circle(i, j) && (*this)(i, j) != T(0)) return false;
  return true;
}

template <typename T>
Sinogram<T>::Sinogram(const ScanGeometry& g)
    : Array2<T>(g.n_angles, g.n_detectors), geometry_(g) {}

template <typename T>
Sinogram<T>::Sinogram(const ScanGeometry& g, std::span<const T> values)
    : Array2<T>(g.n_angles, g.n_detectors), geometry_(g) {
  if (values.size() != this->data_.size())
    throw ShapeError("Sinogram: expected " + std::to_string(this->data_.size()) + " values, got " +
                     std::to_string(values.size()));
  std::copy(values.begin(), values.end(), this->data_.begin());
}

template <typename T>
bool Sinogram<T>::all_finite() const {
  for (T v : this->data_)
    if (!std::isfinite(v)) return false;
  return true;
}

namespace {

/// Columns [lo, hi) of `row` whose pixel centres lie in the inscribed circle.
struct RowSpan {
  int lo = 0;
  int hi = 0;
};

std::vector<RowSpan> circle_spans(const ScanGeometry& g) {
  std::vector<RowSpan> spans(g.image_size);
  for (int i = 0; i < g.image_size; ++i) {
    int lo = g.image_size, hi = 0;
    for (int j = 0; j < g.image_size; ++j) {
      if (g.inside_circle(i, j)) {
        lo = std::min(lo, j);
        hi = std::max(hi, j + 1);
      }
    }
    spans[i] = lo < hi ? RowSpan{lo, hi} : RowSpan{0, 0};
  }
  return spans;
}

struct Trig {
  double cos = 0;
  double sin = 0;
};

std::vector<Trig> angle_table(const ScanGeometry& g) {
  std::vector<Trig> t(g.n_angles);
  for (int a = 0; a < g.n_angles; ++a) t[a] = {std::cos(g.angle(a)), std::sin(g.angle(a))};
  return t;
}

/// Cumulative integral of the unit-area trapezoid that a unit square pixel
/// casts onto the detector axis at an angle with |cos| = p, |sin| = q.
double trapezoid_cdf(double t, double p, double q) {
  const double hi = std::max(p, q);
  const double h1 = 0.5 * (p + q);
  const double h0 = 0.5 * (hi - std::min(p, q));
  const double ramp = h1 - h0;
  const double height = 1.0 / hi;
  const double at = std::abs(t);
  double tail;  // mass beyond |t|
  if (at >= h1) {
    tail = 0.0;
  } else if (at >= h0) {
    const double r = h1 - at;
    tail = 0.5 * height * r * r / ramp;
  } else {
    tail = 0.5 * height * ramp + height * (h0 - at);
  }
  return t < 0 ? tail : 1.0 - tail;
}

/// Detector weights of one pixel against one angle: the exact trapezoid
/// footprint of the square pixel integrated over each unit detector bin. It
/// covers at most three bins. Both projection directions call this, so
/// back_project is the exact transpose of forward_project.
template <typename T>
struct PixelWeights {
  int d0;
  T w[3];
};

template <typename T>
inline PixelWeights<T> pixel_weights(const ScanGeometry& g, const Trig& t, int row, int col) {
  const double c = 0.5 * (g.image_size - 1);
  const double x = col - c;
  const double y = c - row;
  const double u = x * t.cos + y * t.sin + 0.5 * (g.n_detectors - 1);
  const double p = std::abs(t.cos);
  const double q = std::abs(t.sin);
  const double h1 = 0.5 * (p + q);
  const int d0 = static_cast<int>(std::floor(u - h1 + 0.5));
  PixelWeights<T> out{d0, {T(0), T(0), T(0)}};
  double prev = trapezoid_cdf(d0 - 0.5 - u, p, q);
  for (int k = 0; k < 3; ++k) {
    const double next = trapezoid_cdf(d0 + k + 0.5 - u, p, q);
    out.w[k] = static_cast<T>(g.pixel_spacing * (next - prev));
    prev = next;
  }
  return out;
}

void check_image(std::size_t n, const ScanGeometry& g) {
  if (n != g.image_pixels())
    throw ShapeError("image has " + std::to_string(n) + " pixels, geometry expects " +
                     std::to_string(g.image_pixels()));
}

void check_sino(std::size_t n, const ScanGeometry& g) {
  if (n != g.sinogram_entries())
    throw ShapeError("sinogram has " + std::to_string(n) + " entries, geometry expects " +
                     std::to_string(g.sinogram_entries()));
}

}  // namespace

namespace {

/// Weights of every (angle, in-circle pixel) pair, kept twice: angle-major for
/// forward projection and pixel-major for backprojection.
struct WeightTable {
  std::vector<int> pixel_index;             // row * n + col, in-circle pixels in row-major order
  std::vector<std::size_t> row_start;       // first table pixel of each image row
  std::vector<PixelWeights<double>> by_angle;  // [angle][pixel]
  std::vector<PixelWeights<double>> by_pixel;  // [pixel][angle]
};

constexpr std::size_t kMaxTableEntries = std::size_t{1} << 21;

bool same_geometry(const ScanGeometry& a, const ScanGeometry& b) { return a == b; }

std::shared_ptr<const WeightTable> weight_table(const ScanGeometry& g) {
  static std::mutex m;
  static std::vector<std::pair<ScanGeometry, std::shared_ptr<const WeightTable>>> cache;
  std::lock_guard lock(m);
  for (const auto& [geo, t] : cache)
    if (same_geometry(geo, g)) return t;
  auto t = std::make_shared<WeightTable>();
  const auto spans = circle_spans(g);
  const auto trig = angle_table(g);
  t->row_start.resize(g.image_size + 1);
  for (int i = 0; i < g.image_size; ++i) {
    t->row_start[i] = t->pixel_index.size();
    for (int j = spans[i].lo; j < spans[i].hi; ++j) t->pixel_index.push_back(i * g.image_size + j);
  }
  t->row_start[g.image_size] = t->pixel_index.size();
  const std::size_t np = t->pixel_index.size(), na = static_cast<std::size_t>(g.n_angles);
  if (np * na > kMaxTableEntries) return nullptr;
  t->by_angle.resize(np * na);
  t->by_pixel.resize(np * na);
  for (std::size_t a = 0; a < na; ++a)
    for (std::size_t k = 0; k < np; ++k) {
      const int idx = t->pixel_index[k];
      const auto w = pixel_weights<double>(g, trig[a], idx / g.image_size, idx % g.image_size);
      t->by_angle[a * np + k] = w;
      t->by_pixel[k * na + a] = w;
    }
  if (cache.size() >= 4) cache.erase(cache.begin());
  cache.emplace_back(g, t);
  return t;
}

}  // namespace

template <typename T>
void forward_project_planes(std::span<const T> images, std::size_t planes, const ScanGeometry& g,
                            std::span<T> sinos) {
  g.validate();
  if (images.size() != planes * g.image_pixels() || sinos.size() != planes * g.sinogram_entries())
    throw ShapeError("forward_project_planes: buffer sizes do not match the plane count");
  const int nd = g.n_detectors;
  const std::size_t img_n = g.image_pixels(), sino_n = g.sinogram_entries();
  if (auto table = weight_table(g)) {
    const std::size_t np = table->pixel_index.size();
    parallel_for(0, static_cast<std::size_t>(g.n_angles), [&](std::size_t a) {
      const PixelWeights<double>* wrow = table->by_angle.data() + a * np;
      std::vector<double> acc(nd);
      for (std::size_t p = 0; p < planes; ++p) {
        const T* img = images.data() + p * img_n;
        T* out = sinos.data() + p * sino_n + a * nd;
        std::fill(acc.begin(), acc.end(), 0.0);
        for (std::size_t k = 0; k < np; ++k) {
          const T v = img[table->pixel_index[k]];
          if (v == T(0)) continue;
          const auto& w = wrow[k];
          for (int q = 0; q < 3; ++q) {
            const int d = w.d0 + q;
            if (d >= 0 && d < nd) acc[d] += w.w[q] * static_cast<double>(v);
          }
        }
        for (int d = 0; d < nd; ++d) out[d] = static_cast<T>(acc[d]);
      }
    });
    return;
  }
  const auto spans = circle_spans(g);
  const auto trig = angle_table(g);
  parallel_for(0, static_cast<std::size_t>(g.n_angles), [&](std::size_t a) {
    std::vector<double> acc(nd);
    for (std::size_t p = 0; p < planes; ++p) {
      const T* img = images.data() + p * img_n;
      T* out = sinos.data() + p * sino_n + a * nd;
      std::fill(acc.begin(), acc.end(), 0.0);
      for (int i = 0; i < g.image_size; ++i) {
        const T* px = img + static_cast<std::size_t>(i) * g.image_size;
        for (int j = spans[i].lo; j < spans[i].hi; ++j) {
          const T v = px[j];
          if (v == T(0)) continue;
          const auto w = pixel_weights<T>(g, trig[a], i, j);
          for (int k = 0; k < 3; ++k) {
            const int d = w.d0 + k;
            if (d >= 0 && d < nd) acc[d] += static_cast<double>(w.w[k]) * v;
          }
        }
      }
      for (int d = 0; d < nd; ++d) out[d] = static_cast<T>(acc[d]);
    }
  });
}

template <typename T>
void back_project_planes(std::span<const T> sinos, std::size_t planes, const ScanGeometry& g,
                         std::span<T> images) {
  g.validate();
  if (images.size() != planes * g.image_pixels() || sinos.size() != planes * g.sinogram_entries())
    throw ShapeError("back_project_planes: buffer sizes do not match the plane count");
  const int nd = g.n_detectors;
  const std::size_t img_n = g.image_pixels(), sino_n = g.sinogram_entries();
  const std::size_t na = static_cast<std::size_t>(g.n_angles);
  if (auto table = weight_table(g)) {
    parallel_for(0, static_cast<std::size_t>(g.image_size), [&](std::size_t row) {
      for (std::size_t p = 0; p < planes; ++p) {
        T* px = images.data() + p * img_n + row * g.image_size;
        std::fill(px, px + g.image_size, T(0));
        const T* sino = sinos.data() + p * sino_n;
        for (std::size_t k = table->row_start[row]; k < table->row_start[row + 1]; ++k) {
          const PixelWeights<double>* wk = table->by_pixel.data() + k * na;
          double acc = 0.0;  // float sums lose the adjoint identity
          for (std::size_t a = 0; a < na; ++a) {
            const auto& w = wk[a];
            const T* s = sino + a * nd;
            for (int q = 0; q < 3; ++q) {
              const int d = w.d0 + q;
              if (d >= 0 && d < nd) acc += w.w[q] * static_cast<double>(s[d]);
            }
          }
          px[table->pixel_index[k] % g.image_size] = static_cast<T>(acc);
        }
      }
    });
    return;
  }
  const auto spans = circle_spans(g);
  const auto trig = angle_table(g);
  parallel_for(0, static_cast<std::size_t>(g.image_size), [&](std::size_t row) {
    const int i = static_cast<int>(row);
    for (std::size_t p = 0; p < planes; ++p) {
      T* px = images.data() + p * img_n + row * g.image_size;
      std::fill(px, px + g.image_size, T(0));
      const T* sino = sinos.data() + p * sino_n;
      for (int j = spans[i].lo; j < spans[i].hi; ++j) {
        double acc = 0.0;
        for (int a = 0; a < g.n_angles; ++a) {
          const auto w = pixel_weights<T>(g, trig[a], i, j);
          const T* s = sino + static_cast<std::size_t>(a) * nd;
          for (int k = 0; k < 3; ++k) {
            const int d = w.d0 + k;
            if (d >= 0 && d < nd) acc += static_cast<double>(w.w[k]) * s[d];
          }
        }
        px[j] = static_cast<T>(acc);
      }
    }
  });
}

template <typename T>
void forward_project_into(std::span<const T> image, const ScanGeometry& g, std::span<T> sino) {
  g.validate();
  check_image(image.size(), g);
  check_sino(sino.size(), g);
  forward_project_planes<T>(image, 1, g, sino);
}

template <typename T>
void back_project_into(std::span<const T> sino, const ScanGeometry& g, std::span<T> image) {
  g.validate();
  check_image(image.size(), g);
  check_sino(sino.size(), g);
  back_project_planes<T>(sino, 1, g, image);
}

template <typename T>
Sinogram<T> forward_project(const ImageGrid<T>& x, const ScanGeometry& g) {
  if (x.rows() != g.image_size || x.cols() != g.image_size)
    throw ShapeError("forward_project: image is " + std::to_string(x.rows()) + "x" +
                     std::to_string(x.cols()) + ", geometry expects " +
                     std::to_string(g.image_size));
  Sinogram<T> s(g);
  forward_project_into<T>(x.values(), g, s.values());
  return s;
}

template <typename T>
ImageGrid<T> back_project(const Sinogram<T>& s, const ScanGeometry& g) {
  if (s.rows() != g.n_angles || s.cols() != g.n_detectors)
    throw ShapeError("back_project: sinogram is " + std::to_string(s.rows()) + "x" +
                     std::to_string(s.cols()) + ", geometry expects " +
                     std::to_string(g.n_angles) + "x" + std::to_string(g.n_detectors));
  ImageGrid<T> x(g);
  back_project_into<T>(s.values(), g, x.values());
  return x;
}

std::size_t ramp_padded_length(int n_detectors) {
  return std::bit_ceil(static_cast<std::size_t>(2 * std::max(1, n_detectors)));
}

std::vector<double> ramp_response(int n_detectors, RampWindow window) {
  const std::size_t p = ramp_padded_length(n_detectors);
  // DFT of the band-limited spatial kernel: h[0] = 1/4, h[odd m] = -1/(pi m)^2.
  // Unlike sampled |f| it keeps a small DC term, which the zero-padded
  // periodic convolution needs to preserve the image mean.
  std::vector<double> kernel(p, 0.0);
  kernel[0] = 0.25;
  for (std::size_t k = 1; k < p; ++k) {
    const long m = k <= p / 2 ? static_cast<long>(k) : static_cast<long>(k) - static_cast<long>(p);
    if (m % 2 != 0) kernel[k] = -1.0 / (std::numbers::pi * std::numbers::pi * static_cast<double>(m * m));
  }
  std::vector<std::complex<double>> spec;
  Eigen::FFT<double> fft;
  fft.fwd(spec, kernel);
  std::vector<double> h(p);
  for (std::size_t k = 0; k < p; ++k) {
    const double f = static_cast<double>(k <= p / 2 ? k : p - k) / static_cast<double>(p);
    double v = 2.0 * spec[k].real();
    if (window == RampWindow::hann) v *= 0.5 * (1.0 + std::cos(2.0 * std::numbers::pi * f));
    h[k] = v;
  }
  return h;
}

namespace {

class RowFilter {
 public:
  RowFilter(int n_detectors, RampWindow window)
      : n_(n_detectors), response_(ramp_response(n_detectors, window)),
        padded_(response_.size()), spectrum_(response_.size()) {}

  /// Filters `row` (length n) into the full padded output held by `padded()`.
  void run(std::span<const double> row) {
    std::fill(padded_.begin(), padded_.end(), 0.0);
    std::copy(row.begin(), row.end(), padded_.begin());
    fft_.fwd(spectrum_, padded_);
    for (std::size_t k = 0; k < spectrum_.size(); ++k) spectrum_[k] *= response_[k];
    fft_.inv(padded_, spectrum_);
  }
  const std::vector<double>& padded() const { return padded_; }
  int n() const { return n_; }

 private:
  int n_;
  std::vector<double> response_;
  std::vector<double> padded_;
  std::vector<std::complex<double>> spectrum_;
  Eigen::FFT<double> fft_;
};

}  // namespace

std::vector<double> ramp_filter_row_padded(std::span<const double> row, RampWindow window) {
  RowFilter f(static_cast<int>(row.size()), window);
  f.run(row);
  return f.padded();
}

template <typename T>
Sinogram<T> ramp_filter(const Sinogram<T>& s, RampWindow window) {
  Sinogram<T> out(s.geometry());
  const int nd = s.cols();
  parallel_for(0, static_cast<std::size_t>(s.rows()), [&](std::size_t a) {
    RowFilter f(nd, window);
    std::vector<double> row(nd);
    auto in = s.row(static_cast<int>(a));
    std::copy(in.begin(), in.end(), row.begin());
    f.run(row);
    auto o = out.row(static_cast<int>(a));
    for (int d = 0; d < nd; ++d) o[d] = static_cast<T>(f.padded()[d]);
  });
  return out;
}

template <typename T>
ImageGrid<T> fbp_reconstruct(const Sinogram<T>& s, const ScanGeometry& g, RampWindow window) {
  auto x = back_project(ramp_filter(s, window), g);
  const double scale =
      std::numbers::pi / (2.0 * g.n_angles) / (g.pixel_spacing * g.pixel_spacing);
  for (T& v : x.values()) v = static_cast<T>(v * scale);
  x.apply_mask();
  return x;
}

namespace {

using Poly = std::vector<std::array<double, 2>>;

/// Keeps the part of a convex polygon where dot(p, n) <= limit.
Poly clip_halfplane(const Poly& in, double nx, double ny, double limit) {
  Poly out;
  for (std::size_t k = 0; k < in.size(); ++k) {
    const auto& p = in[k];
    const auto& q = in[(k + 1) % in.size()];
    const double fp = p[0] * nx + p[1] * ny - limit;
    const double fq = q[0] * nx + q[1] * ny - limit;
    if (fp <= 0) out.push_back(p);
    if ((fp < 0 && fq > 0) || (fp > 0 && fq < 0)) {
      const double t = fp / (fp - fq);
      out.push_back({p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])});
    }
  }
  return out;
}

double polygon_area(const Poly& p) {
  double a = 0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    const auto& u = p[k];
    const auto& v = p[(k + 1) % p.size()];
    a += u[0] * v[1] - v[0] * u[1];
  }
  return 0.5 * std::abs(a);
}

}  // namespace

// Independent of pixel_weights: the weight is the area of the pixel square
// intersected with the strip of detector bin d, found by polygon clipping.
Eigen::MatrixXd assemble_system_matrix(const ScanGeometry& g) {
  g.validate();
  if (g.image_size > kSystemMatrixMaxSize)
    throw std::length_error("assemble_system_matrix: image_size " +
                            std::to_string(g.image_size) + " exceeds " +
                            std::to_string(kSystemMatrixMaxSize));
  const int n = g.image_size;
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(g.sinogram_entries()),
                                            static_cast<Eigen::Index>(g.image_pixels()));
  const double c = 0.5 * (n - 1);
  const double off = 0.5 * (g.n_detectors - 1);
  for (int a = 0; a < g.n_angles; ++a) {
    const double ct = std::cos(g.angle(a)), st = std::sin(g.angle(a));
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) {
        if (!g.inside_circle(i, j)) continue;
        const double x = j - c, y = c - i;
        const Poly square{{x - 0.5, y - 0.5}, {x + 0.5, y - 0.5}, {x + 0.5, y + 0.5}, {x - 0.5, y + 0.5}};
        for (int d = 0; d < g.n_detectors; ++d) {
          const Poly upper = clip_halfplane(square, ct, st, d + 0.5 - off);
          if (upper.size() < 3) continue;
          const Poly strip = clip_halfplane(upper, -ct, -st, -(d - 0.5 - off));
          if (strip.size() < 3) continue;
          const double area = polygon_area(strip);
          if (area > 0.0)
            m(static_cast<Eigen::Index>(a) * g.n_detectors + d, static_cast<Eigen::Index>(i) * n + j) =
                g.pixel_spacing * area;
        }
      }
    }
  }
  return m;
}

#define TOMOFORGE_INSTANTIATE_RADON(T)                                                    \
  template class ImageGrid<T>;                                                            \
  template class Sinogram<T>;                                                             \
  template Sinogram<T> forward_project(const ImageGrid<T>&, const ScanGeometry&);         \
  template ImageGrid<T> back_project(const Sinogram<T>&, const ScanGeometry&);            \
  template void forward_project_into(std::span<const T>, const ScanGeometry&, std::span<T>); \
  template void back_project_into(std::span<const T>, const ScanGeometry&, std::span<T>);    \
  template void forward_project_planes(std::span<const T>, std::size_t, const ScanGeometry&, std::span<T>); \
  template void back_project_planes(std::span<const T>, std::size_t, const ScanGeometry&, std::span<T>);    \
  template Sinogram<T> ramp_filter(const Sinogram<T>&, RampWindow);                       \
  template ImageGrid<T> fbp_reconstruct(const Sinogram<T>&, const ScanGeometry&, RampWindow);

TOMOFORGE_INSTANTIATE_RADON(float)
TOMOFORGE_INSTANTIATE_RADON(double)

}  // namespace tomoforge
