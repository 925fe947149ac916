#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <string>

#include "tomoforge/autograd.hpp"

namespace tomoforge {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <typename T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shapes " + shape_string(a.shape()) + " and " +
                     shape_string(b.shape()) + " differ");
}

template <typename T>
void require_rank(const Var<T>& a, std::size_t rank, const char* op) {
  if (a.value().rank() != rank)
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_string(a.shape()));
}

/// Unary elementwise op with derivative expressed through (x, y = f(x)).
template <typename T, class F, class D>
Var<T> unary(const char* name, Var<T> a, F f, D dfdx) {
  const Tensor<T>& x = a.value();
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = f(x[i]);
  return a.tape().record(name, std::move(out), {a},
                         [a, dfdx](Tape<T>& t, const Tensor<T>& g, const Tensor<T>& y) {
                           if (Tensor<T>* ga = t.grad_slot(a)) {
                             const Tensor<T>& x = a.value();
                             for (std::size_t i = 0; i < g.numel(); ++i)
                               (*ga)[i] += g[i] * dfdx(x[i], y[i]);
                           }
                         });
}

}  // namespace

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  require_same_shape(a, b, "add");
  Tensor<T> out = a.value();
  const Tensor<T>& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += bv[i];
  return a.tape().record("add", std::move(out), {a, b},
                         [a, b](Tape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
                           if (Tensor<T>* ga = t.grad_slot(a))
                             for (std::size_t i = 0; i < g.numel(); ++i) (*ga)[i] += g[i];
                           if (Tensor<T>* gb = t.grad_slot(b))
                             for (std::size_t i = 0; i < g.numel(); ++i) (*gb)[i] += g[i];
                         });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  require_same_shape(a, b, "sub");
  Tensor<T> out = a.value();
  const Tensor<T>& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= bv[i];
  return a.tape().record("sub", std::move(out), {a, b},
                         [a, b](Tape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
                           if (Tensor<T>* ga = t.grad_slot(a))
                             for (std::size_t i = 0; i < g.numel(); ++i) (*ga)[i] += g[i];
                           if (Tensor<T>* gb = t.grad_slot(b))
                             for (std::size_t i = 0; i < g.numel(); ++i) (*gb)[i] -= g[i];
                         });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  require_same_shape(a, b, "mul");
  Tensor<T> out = a.value();
  const Tensor<T>& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
  return a.tape().record("mul", std::move(out), {a, b},
                         [a, b](Tape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
                           const Tensor<T>& av = a.value();
                           const Tensor<T>& bv = b.value();
                           if (Tensor<T>* ga = t.grad_slot(a))
                             for (std::size_t i = 0; i < g.numel(); ++i) (*ga)[i] += g[i] * bv[i];
                           if (Tensor<T>* gb = t.grad_slot(b))
                             for (std::size_t i = 0; i < g.numel(); ++i) (*gb)[i] += g[i] * av[i];
                         });
}

template <typename T>
Var<T> div(Var<T> a, Var<T> b) {
  require_same_shape(a, b, "div");
  Tensor<T> out = a.value();
  const Tensor<T>& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] /= bv[i];
  return a.tape().record("div", std::move(out), {a, b},
                         [a, b](Tape<T>& t, const Tensor<T>& g, const Tensor<T>& y) {
                           const Tensor<T>& bv = b.value();
                           if (Tensor<T>* ga = t.grad_slot(a))
                             for (std::size_t i = 0; i < g.numel(); ++i) (*ga)[i] += g[i] / bv[i];
                           if (Tensor<T>* gb = t.grad_slot(b))
                             for (std::size_t i = 0; i < g.numel(); ++i) (*gb)[i] -= g[i] * y[i] / bv[i];
                         });
}

template <typename T>
Var<T> scale(Var<T> a, T c) {
  return unary<T>("scale", a, [c](T x) { return c * x; }, [c](T, T) { return c; });
}

template <typename T>
Var<T> add_scalar(Var<T> a, T c) {
  return unary<T>("add_scalar", a, [c](T x) { return x + c; }, [](T, T) { return T(1); });
}

template <typename T>
Var<T> square(Var<T> a) {
  return unary<T>("square", a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

template <typename T>
Var<T> abs(Var<T> a) {
  return unary<T>("abs", a, [](T x) { return std::abs(x); },
                  [](T x, T) { return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)); });
}

template <typename T>
Var<T> clamp_min(Var<T> a, T c) {
  return unary<T>("clamp_min", a, [c](T x) { return x > c ? x : c; },
                  [c](T x, T) { return x > c ? T(1) : T(0); });
}

template <typename T>
Var<T> exp(Var<T> a) {
  return unary<T>("exp", a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Var<T> log(Var<T> a) {
  return unary<T>("log", a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <typename T>
Var<T> sigmoid(Var<T> a) {
  return unary<T>(
      "sigmoid", a,
      [](T x) { return x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x)); },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Var<T> prelu(Var<T> x, Var<T> slope) {
  const Tensor<T>& xv = x.value();
  if (xv.rank() < 2) throw ShapeError("prelu: input needs a channel axis");
  const std::size_t n = xv.dim(0), c = xv.dim(1), inner = xv.numel() / (n * c);
  if (slope.value().numel() != c)
    throw ShapeError("prelu: slope has " + std::to_string(slope.value().numel()) +
                     " entries for " + std::to_string(c) + " channels");
  Tensor<T> out(xv.shape());
  const Tensor<T>& sv = slope.value();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (b * c + ch) * inner;
      for (std::size_t i = 0; i < inner; ++i) {
        const T v = xv[base + i];
        out[base + i] = v >= T(0) ? v : sv[ch] * v;
      }
    }
  return x.tape().record(
      "prelu", std::move(out), {x, slope},
      [x, slope, n, c, inner](Tape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
        const Tensor<T>& xv = x.value();
        const Tensor<T>& sv = slope.value();
        Tensor<T>* gx = t.grad_slot(x);
        Tensor<T>* gs = t.grad_slot(slope);
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t base = (b * c + ch) * inner;
            T acc = T(0);
            for (std::size_t i = 0; i < inner; ++i) {
              const T v = xv[base + i];
              if (v >= T(0)) {
                if (gx) (*gx)[base + i] += g[base + i];
              } else {
                if (gx) (*gx)[base + i] += sv[ch] * g[base + i];
                acc += g[base + i] * v;
              }
            }
            if (gs) (*gs)[ch] += acc;
          }
      });
}

template <typename T>
Var<T> sum(Var<T> a) {
  T acc = T(0);
  for (T v : a.value().values()) acc += v;
  return a.tape().record("sum", Tensor<T>(Shape{}, acc), {a},
                         [a](Tape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
                           if (Tensor<T>* ga = t.grad_slot(a))
                             for (std::size_t i = 0; i < ga->numel(); ++i) (*ga)[i] += g[0];
                         });
}

template <typename T>
Var<T> mean(Var<T> a) {
  const T inv = T(1) / static_cast<T>(a.value().numel());
  return scale(sum(a), inv);
}

template <typename T>
Var<T> reshape(Var<T> a, Shape s) {
  Tensor<T> out = a.value().reshaped(std::move(s));
  return a.tape().record("reshape", std::move(out), {a},
                         [a](Tape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
                           if (Tensor<T>* ga = t.grad_slot(a))
                             for (std::size_t i = 0; i < g.numel(); ++i) (*ga)[i] += g[i];
                         });
}

namespace {

struct AxisLayout {
  std::size_t outer = 1;
  std::size_t inner = 1;
};

inline AxisLayout axis_layout(const Shape& s, std::size_t axis) {
  AxisLayout l;
  for (std::size_t i = 0; i < axis; ++i) l.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) l.inner *= s[i];
  return l;
}

}  // namespace

template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw ShapeError("concat: axis out of range");
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != first.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i)
      if (i != axis && s[i] != first[i])
        throw ShapeError("concat: " + shape_string(s) + " incompatible with " + shape_string(first));
    out_shape[axis] += s[axis];
  }
  const AxisLayout lay = axis_layout(out_shape, axis);
  Tensor<T> out(out_shape);
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t width = p.shape()[axis] * lay.inner;
    const Tensor<T>& v = p.value();
    for (std::size_t o = 0; o < lay.outer; ++o)
      std::copy_n(v.data() + o * width, width, out.data() + o * out_shape[axis] * lay.inner + offset);
    offset += width;
  }
  const std::size_t row = out_shape[axis] * lay.inner;
  return parts.front().tape().record(
      "concat", std::move(out), parts,
      [parts, offsets, lay, row, axis](Tape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
        for (std::size_t k = 0; k < parts.size(); ++k) {
          Tensor<T>* gp = t.grad_slot(parts[k]);
          if (!gp) continue;
          const std::size_t width = parts[k].shape()[axis] * lay.inner;
          for (std::size_t o = 0; o < lay.outer; ++o) {
            const T* src = g.data() + o * row + offsets[k];
            T* dst = gp->data() + o * width;
            for (std::size_t i = 0; i < width; ++i) dst[i] += src[i];
          }
        }
      });
}

template <typename T>
Var<T> slice(Var<T> a, std::size_t axis, std::size_t start, std::size_t length) {
  const Shape& s = a.shape();
  if (axis >= s.size() || start + length > s[axis])
    throw ShapeError("slice: [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") out of range for axis " + std::to_string(axis) + " of " + shape_string(s));
  Shape out_shape = s;
  out_shape[axis] = length;
  const AxisLayout lay = axis_layout(s, axis);
  const std::size_t in_row = s[axis] * lay.inner;
  const std::size_t width = length * lay.inner;
  const std::size_t offset = start * lay.inner;
  Tensor<T> out(out_shape);
  const Tensor<T>& v = a.value();
  for (std::size_t o = 0; o < lay.outer; ++o)
    std::copy_n(v.data() + o * in_row + offset, width, out.data() + o * width);
  return a.tape().record("slice", std::move(out), {a},
                         [a, lay, in_row, width, offset](Tape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
                           Tensor<T>* ga = t.grad_slot(a);
                           if (!ga) return;
                           for (std::size_t o = 0; o < lay.outer; ++o) {
                             T* dst = ga->data() + o * in_row + offset;
                             const T* src = g.data() + o * width;
                             for (std::size_t i = 0; i < width; ++i) dst[i] += src[i];
                           }
                         });
}

template <typename T>
std::vector<Var<T>> split(Var<T> a, const std::vector<std::size_t>& sizes, std::size_t axis) {
  std::size_t total = 0;
  for (auto s : sizes) total += s;
  if (axis >= a.shape().size() || total != a.shape()[axis])
    throw ShapeError("split: sizes do not cover axis " + std::to_string(axis) + " of " +
                     shape_string(a.shape()));
  std::vector<Var<T>> out;
  std::size_t start = 0;
  for (auto s : sizes) {
    out.push_back(slice(a, axis, start, s));
    start += s;
  }
  return out;
}

namespace {

struct ConvDims {
  std::size_t n, c, h, w, o, k, ho, wo;
  int stride, pad;
  std::size_t ckk() const { return c * k * k; }
  std::size_t hwo() const { return ho * wo; }
  bool pointwise() const { return k == 1 && stride == 1 && pad == 0; }
};

template <typename T>
void im2col(const T* x, const ConvDims& d, T* col) {
  const int h = static_cast<int>(d.h), w = static_cast<int>(d.w), k = static_cast<int>(d.k);
  for (std::size_t c = 0; c < d.c; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        T* dst = col + ((c * d.k + ky) * d.k + kx) * d.hwo();
        const T* src = x + c * d.h * d.w;
        for (std::size_t oy = 0; oy < d.ho; ++oy) {
          const int iy = static_cast<int>(oy) * d.stride + ky - d.pad;
          T* row = dst + oy * d.wo;
          if (iy < 0 || iy >= h) {
            std::fill(row, row + d.wo, T(0));
            continue;
          }
          const T* srow = src + static_cast<std::size_t>(iy) * d.w;
          for (std::size_t ox = 0; ox < d.wo; ++ox) {
            const int ix = static_cast<int>(ox) * d.stride + kx - d.pad;
            row[ox] = (ix >= 0 && ix < w) ? srow[ix] : T(0);
          }
        }
      }
}

template <typename T>
void col2im_add(const T* col, const ConvDims& d, T* x) {
  const int h = static_cast<int>(d.h), w = static_cast<int>(d.w), k = static_cast<int>(d.k);
  for (std::size_t c = 0; c < d.c; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const T* src = col + ((c * d.k + ky) * d.k + kx) * d.hwo();
        T* dst = x + c * d.h * d.w;
        for (std::size_t oy = 0; oy < d.ho; ++oy) {
          const int iy = static_cast<int>(oy) * d.stride + ky - d.pad;
          if (iy < 0 || iy >= h) continue;
          const T* row = src + oy * d.wo;
          T* drow = dst + static_cast<std::size_t>(iy) * d.w;
          for (std::size_t ox = 0; ox < d.wo; ++ox) {
            const int ix = static_cast<int>(ox) * d.stride + kx - d.pad;
            if (ix >= 0 && ix < w) drow[ix] += row[ox];
          }
        }
      }
}

}  // namespace

template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, OptionalVar<T> bias, int stride, int padding) {
  require_rank(x, 4, "conv2d");
  require_rank(w, 4, "conv2d weight");
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  if (ws[1] != xs[1] || ws[2] != ws[3])
    throw ShapeError("conv2d: weight " + shape_string(ws) + " incompatible with input " +
                     shape_string(xs));
  if (stride < 1 || padding < 0) throw ShapeError("conv2d: invalid stride/padding");
  ConvDims d{xs[0], xs[1], xs[2], xs[3], ws[0], ws[2], 0, 0, stride, padding};
  const long span_h = static_cast<long>(d.h) + 2 * padding - static_cast<long>(d.k);
  const long span_w = static_cast<long>(d.w) + 2 * padding - static_cast<long>(d.k);
  if (span_h < 0 || span_w < 0) throw ShapeError("conv2d: kernel larger than padded input");
  d.ho = static_cast<std::size_t>(span_h / stride + 1);
  d.wo = static_cast<std::size_t>(span_w / stride + 1);
  if (bias && bias->value().numel() != d.o) throw ShapeError("conv2d: bias size mismatch");

  Tensor<T> out(Shape{d.n, d.o, d.ho, d.wo});
  ConstMatMap<T> wm(w.value().data(), d.o, d.ckk());
  RowMat<T> col(d.pointwise() ? 0 : d.ckk(), d.pointwise() ? 0 : d.hwo());
  for (std::size_t b = 0; b < d.n; ++b) {
    const T* xb = x.value().data() + b * d.c * d.h * d.w;
    MatMap<T> yb(out.data() + b * d.o * d.hwo(), d.o, d.hwo());
    if (d.pointwise()) {
      yb.noalias() = wm * ConstMatMap<T>(xb, d.c, d.hwo());
    } else {
      im2col(xb, d, col.data());
      yb.noalias() = wm * col;
    }
    if (bias) {
      const Tensor<T>& bv = bias->value();
      for (std::size_t o = 0; o < d.o; ++o) yb.row(o).array() += bv[o];
    }
  }
  std::vector<Var<T>> inputs{x, w};
  if (bias) inputs.push_back(*bias);
  return x.tape().record("conv2d", std::move(out), inputs,
                         [x, w, bias, d](Tape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
    Tensor<T>* gx = t.grad_slot(x);
    Tensor<T>* gw = t.grad_slot(w);
    Tensor<T>* gb = bias ? t.grad_slot(*bias) : nullptr;
    ConstMatMap<T> wm(w.value().data(), d.o, d.ckk());
    RowMat<T> col(d.pointwise() ? 0 : d.ckk(), d.pointwise() ? 0 : d.hwo());
    RowMat<T> gcol(gx && !d.pointwise() ? d.ckk() : 0, gx && !d.pointwise() ? d.hwo() : 0);
    for (std::size_t b = 0; b < d.n; ++b) {
      ConstMatMap<T> gy(g.data() + b * d.o * d.hwo(), d.o, d.hwo());
      const T* xb = x.value().data() + b * d.c * d.h * d.w;
      if (gb)
        for (std::size_t o = 0; o < d.o; ++o) (*gb)[o] += gy.row(o).sum();
      if (gw) {
        MatMap<T> gwm(gw->data(), d.o, d.ckk());
        if (d.pointwise()) {
          gwm.noalias() += gy * ConstMatMap<T>(xb, d.c, d.hwo()).transpose();
        } else {
          im2col(xb, d, col.data());
          gwm.noalias() += gy * col.transpose();
        }
      }
      if (gx) {
        T* gxb = gx->data() + b * d.c * d.h * d.w;
        if (d.pointwise()) {
          MatMap<T>(gxb, d.c, d.hwo()).noalias() += wm.transpose() * gy;
        } else {
          gcol.noalias() = wm.transpose() * gy;
          col2im_add(gcol.data(), d, gxb);
        }
      }
    }
  });
}

namespace {

/// Source taps of output index o for factor f over an axis of length n.
struct Taps {
  std::size_t i0, i1;
  double t;
};

inline Taps upsample_taps(std::size_t o, int f, std::size_t n) {
  const std::size_t i = o / static_cast<std::size_t>(f);
  const double t = static_cast<double>(o % static_cast<std::size_t>(f)) / f;
  return {i, std::min(i + 1, n - 1), t};
}

}  // namespace

template <typename T>
Var<T> upsample_bilinear(Var<T> x, int factor) {
  require_rank(x, 4, "upsample_bilinear");
  if (factor < 1) throw ShapeError("upsample_bilinear: factor must be >= 1");
  const Shape& s = x.shape();
  const std::size_t planes = s[0] * s[1], h = s[2], w = s[3];
  const std::size_t ho = h * factor, wo = w * factor;
  std::vector<Taps> ty(ho), tx(wo);
  for (std::size_t o = 0; o < ho; ++o) ty[o] = upsample_taps(o, factor, h);
  for (std::size_t o = 0; o < wo; ++o) tx[o] = upsample_taps(o, factor, w);
  Tensor<T> out(Shape{s[0], s[1], ho, wo});
  const Tensor<T>& xv = x.value();
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = xv.data() + p * h * w;
    T* dst = out.data() + p * ho * wo;
    for (std::size_t oy = 0; oy < ho; ++oy) {
      const Taps& a = ty[oy];
      const T wy0 = static_cast<T>(1.0 - a.t), wy1 = static_cast<T>(a.t);
      for (std::size_t ox = 0; ox < wo; ++ox) {
        const Taps& b = tx[ox];
        const T wx0 = static_cast<T>(1.0 - b.t), wx1 = static_cast<T>(b.t);
        dst[oy * wo + ox] = wy0 * (wx0 * src[a.i0 * w + b.i0] + wx1 * src[a.i0 * w + b.i1]) +
                            wy1 * (wx0 * src[a.i1 * w + b.i0] + wx1 * src[a.i1 * w + b.i1]);
      }
    }
  }
  return x.tape().record(
      "upsample_bilinear", std::move(out), {x},
      [x, ty, tx, planes, h, w, ho, wo](Tape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
        Tensor<T>* gx = t.grad_slot(x);
        if (!gx) return;
        for (std::size_t p = 0; p < planes; ++p) {
          const T* src = g.data() + p * ho * wo;
          T* dst = gx->data() + p * h * w;
          for (std::size_t oy = 0; oy < ho; ++oy) {
            const Taps& a = ty[oy];
            const T wy0 = static_cast<T>(1.0 - a.t), wy1 = static_cast<T>(a.t);
            for (std::size_t ox = 0; ox < wo; ++ox) {
              const Taps& b = tx[ox];
              const T wx0 = static_cast<T>(1.0 - b.t), wx1 = static_cast<T>(b.t);
              const T v = src[oy * wo + ox];
              dst[a.i0 * w + b.i0] += wy0 * wx0 * v;
              dst[a.i0 * w + b.i1] += wy0 * wx1 * v;
              dst[a.i1 * w + b.i0] += wy1 * wx0 * v;
              dst[a.i1 * w + b.i1] += wy1 * wx1 * v;
            }
          }
        }
      });
}

template <typename T>
Var<T> global_avg_pool(Var<T> x) {
  require_rank(x, 4, "global_avg_pool");
  const Shape& s = x.shape();
  const std::size_t planes = s[0] * s[1], hw = s[2] * s[3];
  Tensor<T> out(Shape{s[0], s[1]});
  for (std::size_t p = 0; p < planes; ++p) {
    T acc = T(0);
    for (std::size_t i = 0; i < hw; ++i) acc += x.value()[p * hw + i];
    out[p] = acc / static_cast<T>(hw);
  }
  return x.tape().record("global_avg_pool", std::move(out), {x},
                         [x, planes, hw](Tape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
                           Tensor<T>* gx = t.grad_slot(x);
                           if (!gx) return;
                           for (std::size_t p = 0; p < planes; ++p) {
                             const T v = g[p] / static_cast<T>(hw);
                             for (std::size_t i = 0; i < hw; ++i) (*gx)[p * hw + i] += v;
                           }
                         });
}

template <typename T>
Var<T> linear(Var<T> x, Var<T> w, OptionalVar<T> bias) {
  require_rank(x, 2, "linear");
  require_rank(w, 2, "linear weight");
  const std::size_t n = x.dim(0), in = x.dim(1), o = w.dim(0);
  if (w.dim(1) != in)
    throw ShapeError("linear: weight " + shape_string(w.shape()) + " incompatible with input " +
                     shape_string(x.shape()));
  if (bias && bias->value().numel() != o) throw ShapeError("linear: bias size mismatch");
  Tensor<T> out(Shape{n, o});
  MatMap<T> y(out.data(), n, o);
  ConstMatMap<T> xm(x.value().data(), n, in);
  ConstMatMap<T> wm(w.value().data(), o, in);
  y.noalias() = xm * wm.transpose();
  if (bias)
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < o; ++c) y(r, c) += bias->value()[c];
  std::vector<Var<T>> inputs{x, w};
  if (bias) inputs.push_back(*bias);
  return x.tape().record("linear", std::move(out), inputs,
                         [x, w, bias, n, in, o](Tape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
                           ConstMatMap<T> gy(g.data(), n, o);
                           if (Tensor<T>* gx = t.grad_slot(x))
                             MatMap<T>(gx->data(), n, in).noalias() +=
                                 gy * ConstMatMap<T>(w.value().data(), o, in);
                           if (Tensor<T>* gw = t.grad_slot(w))
                             MatMap<T>(gw->data(), o, in).noalias() +=
                                 gy.transpose() * ConstMatMap<T>(x.value().data(), n, in);
                           if (bias)
                             if (Tensor<T>* gb = t.grad_slot(*bias))
                               for (std::size_t c = 0; c < o; ++c) (*gb)[c] += gy.col(c).sum();
                         });
}

template <typename T>
Var<T> channel_scale(Var<T> x, Var<T> gates) {
  require_rank(x, 4, "channel_scale");
  const Shape& s = x.shape();
  if (gates.shape() != Shape{s[0], s[1]})
    throw ShapeError("channel_scale: gates " + shape_string(gates.shape()) + " for input " +
                     shape_string(s));
  const std::size_t planes = s[0] * s[1], hw = s[2] * s[3];
  Tensor<T> out = x.value();
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < hw; ++i) out[p * hw + i] *= gates.value()[p];
  return x.tape().record("channel_scale", std::move(out), {x, gates},
                         [x, gates, planes, hw](Tape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
                           Tensor<T>* gx = t.grad_slot(x);
                           Tensor<T>* gg = t.grad_slot(gates);
                           for (std::size_t p = 0; p < planes; ++p) {
                             const T gate = gates.value()[p];
                             T acc = T(0);
                             for (std::size_t i = 0; i < hw; ++i) {
                               if (gx) (*gx)[p * hw + i] += gate * g[p * hw + i];
                               acc += g[p * hw + i] * x.value()[p * hw + i];
                             }
                             if (gg) (*gg)[p] += acc;
                           }
                         });
}

template <typename T>
Var<T> radon_backproject(Var<T> sino, const ScanGeometry& g) {
  require_rank(sino, 4, "radon_backproject");
  const Shape& s = sino.shape();
  if (s[2] != static_cast<std::size_t>(g.n_angles) || s[3] != static_cast<std::size_t>(g.n_detectors))
    throw ShapeError("radon_backproject: input " + shape_string(s) + " does not match geometry " +
                     std::to_string(g.n_angles) + "x" + std::to_string(g.n_detectors));
  const std::size_t planes = s[0] * s[1];
  const std::size_t sino_n = g.sinogram_entries(), img_n = g.image_pixels();
  Tensor<T> out(Shape{s[0], s[1], static_cast<std::size_t>(g.image_size),
                      static_cast<std::size_t>(g.image_size)});
  back_project_planes<T>(sino.value().values(), planes, g, out.values());
  return sino.tape().record(
      "radon_backproject", std::move(out), {sino},
      [sino, g, planes, sino_n, img_n](Tape<T>& t, const Tensor<T>& grad, const Tensor<T>&) {
        Tensor<T>* gs = t.grad_slot(sino);
        if (!gs) return;
        std::vector<T> buf(planes * sino_n);
        forward_project_planes<T>(grad.values(), planes, g, buf);
        for (std::size_t i = 0; i < buf.size(); ++i) (*gs)[i] += buf[i];
      });
}

template <typename T>
Var<T> radon_forward(Var<T> image, const ScanGeometry& g) {
  require_rank(image, 4, "radon_forward");
  const Shape& s = image.shape();
  if (s[2] != static_cast<std::size_t>(g.image_size) || s[3] != static_cast<std::size_t>(g.image_size))
    throw ShapeError("radon_forward: input " + shape_string(s) + " does not match geometry size " +
                     std::to_string(g.image_size));
  const std::size_t planes = s[0] * s[1];
  const std::size_t sino_n = g.sinogram_entries(), img_n = g.image_pixels();
  Tensor<T> out(Shape{s[0], s[1], static_cast<std::size_t>(g.n_angles),
                      static_cast<std::size_t>(g.n_detectors)});
  forward_project_planes<T>(image.value().values(), planes, g, out.values());
  return image.tape().record(
      "radon_forward", std::move(out), {image},
      [image, g, planes, sino_n, img_n](Tape<T>& t, const Tensor<T>& grad, const Tensor<T>&) {
        Tensor<T>* gi = t.grad_slot(image);
        if (!gi) return;
        std::vector<T> buf(planes * img_n);
        back_project_planes<T>(grad.values(), planes, g, buf);
        for (std::size_t i = 0; i < buf.size(); ++i) (*gi)[i] += buf[i];
      });
}

namespace {

template <typename T>
void normalize_in_place(Eigen::Matrix<T, Eigen::Dynamic, 1>& v) {
  const T n = v.norm();
  v /= std::max(n, T(1e-12));
}

template <typename T>
void check_spectral_state(const Tensor<T>& w, const SpectralState<T>& st) {
  if (!st.uv) throw std::invalid_argument("spectral_normalize: missing state");
  const std::size_t rows = w.dim(0), cols = w.numel() / rows;
  if (st.uv->value.numel() != rows + cols)
    throw ShapeError("spectral_normalize: state size " + std::to_string(st.uv->value.numel()) +
                     " for weight " + shape_string(w.shape()));
}

}  // namespace

template <typename T>
Parameter<T> make_spectral_state(const Tensor<T>& w, RandomStream& rng, std::string name) {
  if (w.rank() < 2) throw ShapeError("make_spectral_state: weight must have rank >= 2");
  const std::size_t rows = w.dim(0), cols = w.numel() / rows;
  ConstMatMap<T> wm(w.data(), rows, cols);
  using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;
  Vec u(rows), v(cols);
  for (auto& e : u) e = static_cast<T>(rng.normal());
  normalize_in_place(u);
  double prev = 0.0;
  for (int it = 0; it < 5000; ++it) {
    v = wm.transpose() * u;
    normalize_in_place(v);
    u = wm * v;
    const double sigma = static_cast<double>(u.norm());
    normalize_in_place(u);
    if (it > 0 && std::abs(sigma - prev) <= 1e-10 * std::abs(sigma)) break;
    prev = sigma;
  }
  Parameter<T> p;
  p.name = std::move(name);
  p.trainable = false;
  p.value = Tensor<T>({rows + cols});
  std::copy_n(u.data(), rows, p.value.data());
  std::copy_n(v.data(), cols, p.value.data() + rows);
  return p;
}

template <typename T>
T spectral_sigma(const Tensor<T>& w, const SpectralState<T>& st) {
  check_spectral_state(w, st);
  const std::size_t rows = w.dim(0), cols = w.numel() / rows;
  ConstMatMap<T> wm(w.data(), rows, cols);
  Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> u(st.uv->value.data(), rows);
  Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> v(st.uv->value.data() + rows, cols);
  return u.dot(wm * v);
}

template <typename T>
Var<T> spectral_normalize(Var<T> w, SpectralState<T> st, int power_iters, bool update) {
  const Tensor<T>& wv = w.value();
  if (wv.rank() < 2) throw ShapeError("spectral_normalize: weight must have rank >= 2");
  check_spectral_state(wv, st);
  const std::size_t rows = wv.dim(0), cols = wv.numel() / rows;
  ConstMatMap<T> wm(wv.data(), rows, cols);
  using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;
  Vec u = Eigen::Map<const Vec>(st.uv->value.data(), rows);
  Vec v = Eigen::Map<const Vec>(st.uv->value.data() + rows, cols);
  if (update) {
    for (int it = 0; it < power_iters; ++it) {
      v = wm.transpose() * u;
      normalize_in_place(v);
      u = wm * v;
      normalize_in_place(u);
    }
    std::copy_n(u.data(), rows, st.uv->value.data());
    std::copy_n(v.data(), cols, st.uv->value.data() + rows);
  }
  const T sigma = u.dot(wm * v);
  Tensor<T> out = wv;
  for (T& e : out.values()) e /= sigma;
  return w.tape().record("spectral_normalize", std::move(out), {w},
                         [w, u, v, sigma, rows, cols](Tape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
                           Tensor<T>* gw = t.grad_slot(w);
                           if (!gw) return;
                           const Tensor<T>& wv = w.value();
                           T gdotw = T(0);
                           for (std::size_t i = 0; i < g.numel(); ++i) gdotw += g[i] * wv[i];
                           const T coef = gdotw / (sigma * sigma);
                           for (std::size_t r = 0; r < rows; ++r)
                             for (std::size_t c = 0; c < cols; ++c) {
                               const std::size_t i = r * cols + c;
                               (*gw)[i] += g[i] / sigma - coef * u[r] * v[c];
                             }
                         });
}

#define TOMOFORGE_INSTANTIATE_OPS(T)                                                       \
  template Var<T> add(Var<T>, Var<T>);                                                     \
  template Var<T> sub(Var<T>, Var<T>);                                                     \
  template Var<T> mul(Var<T>, Var<T>);                                                     \
  template Var<T> div(Var<T>, Var<T>);                                                     \
  template Var<T> scale(Var<T>, T);                                                        \
  template Var<T> add_scalar(Var<T>, T);                                                   \
  template Var<T> square(Var<T>);                                                          \
  template Var<T> abs(Var<T>);                                                             \
  template Var<T> clamp_min(Var<T>, T);                                                    \
  template Var<T> exp(Var<T>);                                                             \
  template Var<T> log(Var<T>);                                                             \
  template Var<T> sigmoid(Var<T>);                                                         \
  template Var<T> prelu(Var<T>, Var<T>);                                                   \
  template Var<T> sum(Var<T>);                                                             \
  template Var<T> mean(Var<T>);                                                            \
  template Var<T> reshape(Var<T>, Shape);                                                  \
  template Var<T> concat(const std::vector<Var<T>>&, std::size_t);                         \
  template Var<T> slice(Var<T>, std::size_t, std::size_t, std::size_t);                    \
  template std::vector<Var<T>> split(Var<T>, const std::vector<std::size_t>&, std::size_t); \
  template Var<T> conv2d(Var<T>, Var<T>, OptionalVar<T>, int, int);                 \
  template Var<T> upsample_bilinear(Var<T>, int);                                          \
  template Var<T> global_avg_pool(Var<T>);                                                 \
  template Var<T> linear(Var<T>, Var<T>, OptionalVar<T>);                         \
  template Var<T> channel_scale(Var<T>, Var<T>);                                           \
  template Var<T> radon_backproject(Var<T>, const ScanGeometry&);                          \
  template Var<T> radon_forward(Var<T>, const ScanGeometry&);                              \
  template Var<T> spectral_normalize(Var<T>, SpectralState<T>, int, bool);                 \
  template T spectral_sigma(const Tensor<T>&, const SpectralState<T>&);                    \
  template Parameter<T> make_spectral_state(const Tensor<T>&, RandomStream&, std::string);

TOMOFORGE_INSTANTIATE_OPS(float)
TOMOFORGE_INSTANTIATE_OPS(double)

}  // namespace tomoforge
