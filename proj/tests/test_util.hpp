#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "tomoforge/radon.hpp"
#include "tomoforge/tensor.hpp"

namespace tomoforge::testing {

inline std::vector<double> random_vector(std::size_t n, std::uint32_t seed, double lo = -1.0,
                                         double hi = 1.0) {
  std::mt19937 gen(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = dist(gen);
  return v;
}

template <typename T>
ImageGrid<T> random_image(const ScanGeometry& g, std::uint32_t seed) {
  auto v = random_vector(g.image_pixels(), seed);
  std::vector<T> t(v.begin(), v.end());
  return ImageGrid<T>(g, t);
}

template <typename T>
Sinogram<T> random_sinogram(const ScanGeometry& g, std::uint32_t seed) {
  auto v = random_vector(g.sinogram_entries(), seed);
  std::vector<T> t(v.begin(), v.end());
  return Sinogram<T>(g, t);
}

template <typename T>
Tensor<T> random_tensor(Shape shape, std::uint32_t seed, double lo = -1.0, double hi = 1.0) {
  auto v = random_vector(shape_numel(shape), seed, lo, hi);
  return Tensor<T>(std::move(shape), std::vector<T>(v.begin(), v.end()));
}

template <typename A, typename B>
double dot(const A& a, const B& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return acc;
}

inline double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-300});
}

}  // namespace tomoforge::testing
