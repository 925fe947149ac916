#include "tomoforge/metrics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <string>

namespace tomoforge {

namespace {

constexpr int kRadius = 5;

std::array<double, 2 * kRadius + 1> gaussian_window() {
  std::array<double, 2 * kRadius + 1> w{};
  double total = 0.0;
  for (int i = -kRadius; i <= kRadius; ++i) {
    w[i + kRadius] = std::exp(-0.5 * i * i / (1.5 * 1.5));
    total += w[i + kRadius];
  }
  for (double& v : w) v /= total;
  return w;
}

/// Half-sample symmetric extension: ... b a | a b c ... c | c b ...
int reflect(int k, int n) {
  const int period = 2 * n;
  k %= period;
  if (k < 0) k += period;
  return k < n ? k : period - 1 - k;
}

Array2<double> blur(const Array2<double>& x) {
  static const auto w = gaussian_window();
  const int n = x.rows(), m = x.cols();
  Array2<double> tmp(n, m), out(n, m);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) {
      double acc = 0.0;
      for (int t = -kRadius; t <= kRadius; ++t) acc += w[t + kRadius] * x(i, reflect(j + t, m));
      tmp(i, j) = acc;
    }
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) {
      double acc = 0.0;
      for (int t = -kRadius; t <= kRadius; ++t) acc += w[t + kRadius] * tmp(reflect(i + t, n), j);
      out(i, j) = acc;
    }
  return out;
}

void check_pair(const Array2<double>& a, const Array2<double>& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols() || a.rows() != a.cols() || a.rows() < 1)
    throw ShapeError(std::string(op) + ": images must be square and of equal size");
}

double reference_range(const Array2<double>& a) {
  const auto [lo, hi] = std::minmax_element(a.values().begin(), a.values().end());
  const double r = *hi - *lo;
  return r > 0.0 ? r : 1.0;
}

bool in_circle(int i, int j, int n) {
  const double c = 0.5 * (n - 1), r = 0.5 * n;
  return (i - c) * (i - c) + (j - c) * (j - c) <= r * r;
}

}  // namespace

double ssim(const Array2<double>& a, const Array2<double>& b, std::optional<double> data_range) {
  check_pair(a, b, "ssim");
  const double range = data_range.value_or(reference_range(a));
  const double c1 = (0.01 * range) * (0.01 * range);
  const double c2 = (0.03 * range) * (0.03 * range);
  const int n = a.rows();
  Array2<double> aa(n, n), bb(n, n), ab(n, n);
  for (std::size_t i = 0; i < a.size(); ++i) {
    aa.values()[i] = a.values()[i] * a.values()[i];
    bb.values()[i] = b.values()[i] * b.values()[i];
    ab.values()[i] = a.values()[i] * b.values()[i];
  }
  const auto mu_a = blur(a), mu_b = blur(b), e_aa = blur(aa), e_bb = blur(bb), e_ab = blur(ab);
  double acc = 0.0;
  std::size_t count = 0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      if (!in_circle(i, j, n)) continue;
      const double ma = mu_a(i, j), mb = mu_b(i, j);
      const double va = e_aa(i, j) - ma * ma, vb = e_bb(i, j) - mb * mb, cov = e_ab(i, j) - ma * mb;
      acc += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
      ++count;
    }
  return acc / static_cast<double>(count);
}

double psnr(const Array2<double>& a, const Array2<double>& b) {
  check_pair(a, b, "psnr");
  const int n = a.rows();
  double se = 0.0;
  std::size_t count = 0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      if (!in_circle(i, j, n)) continue;
      const double d = a(i, j) - b(i, j);
      se += d * d;
      ++count;
    }
  const double mse = se / static_cast<double>(count);
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  const double peak = reference_range(a);
  return 10.0 * std::log10(peak * peak / mse);
}

}  // namespace tomoforge
