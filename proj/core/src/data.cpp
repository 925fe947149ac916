#include "tomoforge/data.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>
#include <stdexcept>

namespace tomoforge {

bool inside_ellipse(const Ellipse& e, double x, double y) {
  const double c = std::cos(e.phi), s = std::sin(e.phi);
  const double dx = x - e.x0, dy = y - e.y0;
  const double u = (dx * c + dy * s) / e.a;
  const double v = (-dx * s + dy * c) / e.b;
  return u * u + v * v <= 1.0;
}

const std::vector<Ellipse>& shepp_logan_ellipses() {
  constexpr double deg = std::numbers::pi / 180.0;
  static const std::vector<Ellipse> e{
      {1.0, 0.69, 0.92, 0.0, 0.0, 0.0},
      {-0.8, 0.6624, 0.8740, 0.0, -0.0184, 0.0},
      {-0.2, 0.1100, 0.3100, 0.22, 0.0, -18.0 * deg},
      {-0.2, 0.1600, 0.4100, -0.22, 0.0, 18.0 * deg},
      {0.1, 0.2100, 0.2500, 0.0, 0.35, 0.0},
      {0.1, 0.0460, 0.0460, 0.0, 0.1, 0.0},
      {0.1, 0.0460, 0.0460, 0.0, -0.1, 0.0},
      {0.1, 0.0460, 0.0230, -0.08, -0.605, 0.0},
      {0.1, 0.0230, 0.0230, 0.0, -0.606, 0.0},
      {0.1, 0.0230, 0.0460, 0.06, -0.605, 0.0},
  };
  return e;
}

ImageGrid<double> shepp_logan(int n) {
  auto g = ScanGeometry::make(n, 1);
  ImageGrid<double> img(g);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      const auto [x, y] = unit_coords(i, j, n);
      double v = 0.0;
      for (const auto& e : shepp_logan_ellipses())
        if (inside_ellipse(e, x, y)) v += e.intensity;
      img(i, j) = std::clamp(v, 0.0, 1.0);
    }
  img.apply_mask();
  return img;
}

namespace {

double uniform(RandomStream& rng, double lo, double hi) { return lo + (hi - lo) * rng.uniform(); }

}  // namespace

ImageGrid<double> random_ellipse_phantom(int n, const PhantomSpec& spec, RandomStream& rng) {
  if (spec.min_ellipses < 1 || spec.max_ellipses < spec.min_ellipses)
    throw std::invalid_argument("random_ellipse_phantom: need 1 <= min_ellipses <= max_ellipses");
  if (!(spec.intensity_lo >= 0.0) || !(spec.intensity_hi <= 1.0) || spec.intensity_lo > spec.intensity_hi)
    throw std::invalid_argument("random_ellipse_phantom: intensity range must lie in [0, 1]");
  const int count = spec.min_ellipses +
                    static_cast<int>(rng.uniform() * (spec.max_ellipses - spec.min_ellipses + 1));
  std::vector<Ellipse> es;
  const Ellipse body{uniform(rng, spec.intensity_lo, spec.intensity_hi), uniform(rng, 0.6, 0.88),
                     uniform(rng, 0.6, 0.88), uniform(rng, -0.05, 0.05), uniform(rng, -0.05, 0.05),
                     uniform(rng, 0.0, std::numbers::pi)};
  es.push_back(body);
  while (static_cast<int>(es.size()) < count) {
    const double x = uniform(rng, -0.9, 0.9), y = uniform(rng, -0.9, 0.9);
    Ellipse shrunk = body;
    shrunk.a *= 0.85;
    shrunk.b *= 0.85;
    if (!inside_ellipse(shrunk, x, y)) continue;
    es.push_back({uniform(rng, spec.intensity_lo, spec.intensity_hi), uniform(rng, 0.04, 0.3),
                  uniform(rng, 0.04, 0.3), x, y, uniform(rng, 0.0, std::numbers::pi)});
  }
  auto g = ScanGeometry::make(n, 1);
  ImageGrid<double> img(g);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      const auto [x, y] = unit_coords(i, j, n);
      if (!inside_ellipse(body, x, y)) continue;
      double v = 0.0;
      for (const auto& e : es)
        if (inside_ellipse(e, x, y)) v = e.intensity;
      img(i, j) = v;
    }
  img.apply_mask();
  return img;
}

ImageGrid<double> make_phantom(int n, const PhantomSpec& spec, std::uint64_t index) {
  if (spec.kind == PhantomSpec::Kind::shepp_logan) return shepp_logan(n);
  RandomStream rng = RandomStream(spec.seed).substream(index);
  return random_ellipse_phantom(n, spec, rng);
}

// ---- minimal enclosing circle -------------------------------------------------

namespace {

using Pt = std::pair<double, double>;

bool contains(const Circle& c, const Pt& p) {
  const double dx = p.first - c.cx, dy = p.second - c.cy;
  return std::sqrt(dx * dx + dy * dy) <= c.r * (1.0 + 1e-12) + 1e-9;
}

Circle from_two(const Pt& a, const Pt& b) {
  const double cx = 0.5 * (a.first + b.first), cy = 0.5 * (a.second + b.second);
  return {cx, cy, std::hypot(a.first - cx, a.second - cy)};
}

Circle from_three(const Pt& a, const Pt& b, const Pt& c) {
  const double bx = b.first - a.first, by = b.second - a.second;
  const double cx = c.first - a.first, cy = c.second - a.second;
  const double d = 2.0 * (bx * cy - by * cx);
  if (std::abs(d) < 1e-12) {
    // Collinear: the two farthest-apart points span the circle.
    Circle best = from_two(a, b);
    for (const Circle& cand : {from_two(a, c), from_two(b, c)})
      if (cand.r > best.r) best = cand;
    return best;
  }
  const double b2 = bx * bx + by * by, c2 = cx * cx + cy * cy;
  const double ux = (cy * b2 - by * c2) / d, uy = (bx * c2 - cx * b2) / d;
  return {a.first + ux, a.second + uy, std::hypot(ux, uy)};
}

}  // namespace

Circle min_enclosing_circle(std::vector<Pt> pts, std::uint64_t seed) {
  if (pts.empty()) throw std::invalid_argument("min_enclosing_circle: no points");
  RandomStream rng(seed);
  for (std::size_t i = pts.size(); i > 1; --i)
    std::swap(pts[i - 1], pts[static_cast<std::size_t>(rng.uniform() * i)]);
  Circle c{pts[0].first, pts[0].second, 0.0};
  for (std::size_t i = 1; i < pts.size(); ++i) {
    if (contains(c, pts[i])) continue;
    c = {pts[i].first, pts[i].second, 0.0};
    for (std::size_t j = 0; j < i; ++j) {
      if (contains(c, pts[j])) continue;
      c = from_two(pts[i], pts[j]);
      for (std::size_t k = 0; k < j; ++k)
        if (!contains(c, pts[k])) c = from_three(pts[i], pts[j], pts[k]);
    }
  }
  return c;
}

// ---- CT slices --------------------------------------------------------------------

PreprocessResult preprocess_hu_slice(const Array2<double>& hu, const PreprocessConfig& cfg) {
  if (cfg.n < 2) throw std::invalid_argument("preprocess: n must be >= 2");
  if (!(cfg.window_hi_hu > cfg.window_lo_hu)) throw std::invalid_argument("preprocess: empty HU window");
  PreprocessResult res;
  const int rows = hu.rows(), cols = hu.cols();
  auto in_mask = [&](int i, int j) {
    return i >= 0 && j >= 0 && i < rows && j < cols && hu(i, j) > cfg.threshold_hu;
  };
  std::vector<Pt> boundary;
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) {
      if (!in_mask(i, j)) continue;
      if (!in_mask(i - 1, j) || !in_mask(i + 1, j) || !in_mask(i, j - 1) || !in_mask(i, j + 1))
        boundary.emplace_back(j, i);
    }
  if (boundary.empty()) {
    res.reason = "empty mask";
    return res;
  }
  const Circle c = min_enclosing_circle(std::move(boundary));
  res.circle = c;
  const int side = static_cast<int>(std::ceil(2.0 * c.r - 1e-6));
  res.crop_side = side;
  if (side < cfg.n) {
    res.reason = "crop side " + std::to_string(side) + " < " + std::to_string(cfg.n);
    return res;
  }
  const double r0 = std::round(c.cy - 0.5 * side + 0.5);
  const double c0 = std::round(c.cx - 0.5 * side + 0.5);
  const double step = static_cast<double>(side) / cfg.n;
  auto at = [&](int i, int j) {
    return (i >= 0 && j >= 0 && i < rows && j < cols) ? hu(i, j) : cfg.window_lo_hu;
  };
  auto g = ScanGeometry::make(cfg.n, 1);
  ImageGrid<double> img(g);
  for (int i = 0; i < cfg.n; ++i) {
    const double sy = r0 - 0.5 + (i + 0.5) * step;
    const double fy = std::floor(sy), ty = sy - fy;
    for (int j = 0; j < cfg.n; ++j) {
      const double sx = c0 - 0.5 + (j + 0.5) * step;
      const double fx = std::floor(sx), tx = sx - fx;
      const int y0 = static_cast<int>(fy), x0 = static_cast<int>(fx);
      double v = (1 - ty) * ((1 - tx) * at(y0, x0) + (tx > 0 ? tx * at(y0, x0 + 1) : 0.0));
      if (ty > 0) v += ty * ((1 - tx) * at(y0 + 1, x0) + (tx > 0 ? tx * at(y0 + 1, x0 + 1) : 0.0));
      img(i, j) = std::clamp((v - cfg.window_lo_hu) / (cfg.window_hi_hu - cfg.window_lo_hu), 0.0, 1.0);
    }
  }
  img.apply_mask();
  res.image = std::move(img);
  return res;
}

PreprocessResult preprocess_ct_slice(const Array2<std::uint16_t>& raw, const PreprocessConfig& cfg) {
  Array2<double> hu(raw.rows(), raw.cols());
  for (std::size_t i = 0; i < raw.size(); ++i) hu.values()[i] = static_cast<double>(raw.values()[i]) - 32768.0;
  return preprocess_hu_slice(hu, cfg);
}

Array2<double> processed_to_hu(const ImageGrid<double>& img, const PreprocessConfig& cfg) {
  const int n = img.rows();
  const auto& g = img.geometry();
  Array2<double> hu(n, n, -32768.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      if (g.inside_circle(i, j))
        hu(i, j) = cfg.window_lo_hu + img(i, j) * (cfg.window_hi_hu - cfg.window_lo_hu);
  return hu;
}

// ---- splits ---------------------------------------------------------------------------

DatasetSplit split_by_id(const std::vector<std::string>& item_ids, double train_fraction,
                         double validation_fraction, std::uint64_t seed) {
  if (train_fraction < 0 || validation_fraction < 0 || train_fraction + validation_fraction > 1.0 + 1e-12)
    throw std::invalid_argument("split_by_id: fractions must be >= 0 and sum to at most 1");
  const std::set<std::string> unique(item_ids.begin(), item_ids.end());
  std::vector<std::string> ids(unique.begin(), unique.end());
  RandomStream rng(seed);
  for (std::size_t i = ids.size(); i > 1; --i)
    std::swap(ids[i - 1], ids[static_cast<std::size_t>(rng.uniform() * i)]);
  const auto n = static_cast<double>(ids.size());
  const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * n));
  const auto n_val = std::min(ids.size() - n_train, static_cast<std::size_t>(std::llround(validation_fraction * n)));
  DatasetSplit s;
  s.train.assign(ids.begin(), ids.begin() + n_train);
  s.validation.assign(ids.begin() + n_train, ids.begin() + n_train + n_val);
  s.test.assign(ids.begin() + n_train + n_val, ids.end());
  return s;
}

}  // namespace tomoforge
