#pragma once

// Differentiable tensor operations recorded on a Tape.
//
// Feature grids are C x H x W and processed one sample at a time; token
// matrices are n x d. Every op checks its shape contract and throws
// ShapeError on violation.

#include <Eigen/Dense>

#include <cmath>
#include <numbers>
#include <vector>

#include "scannet/autograd.hpp"
#include "scannet/tensor.hpp"

namespace scannet::ops {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

namespace detail {

// Left-to-right sum. Eigen's vectorized reductions peel according to buffer alignment, which
// changes the summation order between allocations and breaks bit-for-bit reproducibility.
template <typename T, typename I>
T serial_sum(const T* p, I n) {
  T s = 0;
  for (I i = 0; i < n; ++i) s += p[i];
  return s;
}

inline void require_rank(const Shape& s, int r, const char* what) {
  if (static_cast<int>(s.size()) != r)
    throw ShapeError(std::string(what) + ": expected rank " + std::to_string(r) + ", got " + shape_str(s));
}

template <typename T>
void im2col(const T* x, int C, int H, int W, int k, int stride, int pad, int Ho, int Wo, T* cols) {
  const int n = Ho * Wo;
  for (int c = 0; c < C; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        T* row = cols + static_cast<std::size_t>((c * k + ky) * k + kx) * n;
        for (int oy = 0; oy < Ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          for (int ox = 0; ox < Wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            row[oy * Wo + ox] =
                (iy >= 0 && iy < H && ix >= 0 && ix < W) ? x[(static_cast<std::size_t>(c) * H + iy) * W + ix] : T(0);
          }
        }
      }
}

template <typename T>
void col2im_add(const T* cols, int C, int H, int W, int k, int stride, int pad, int Ho, int Wo, T* dx) {
  const int n = Ho * Wo;
  for (int c = 0; c < C; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const T* row = cols + static_cast<std::size_t>((c * k + ky) * k + kx) * n;
        for (int oy = 0; oy < Ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= H) continue;
          for (int ox = 0; ox < Wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < W) dx[(static_cast<std::size_t>(c) * H + iy) * W + ix] += row[oy * Wo + ox];
          }
        }
      }
}

// Source taps for half-pixel-centred bilinear resampling (align_corners = false).
struct Tap {
  int i0, i1;
  double w1;
};

inline std::vector<Tap> bilinear_taps(int in, int out) {
  std::vector<Tap> taps(static_cast<std::size_t>(out));
  const double scale = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    int i0 = static_cast<int>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const int i1 = std::min(i0 + 1, in - 1);
    taps[static_cast<std::size_t>(o)] = {i0, i1, src - i0};
  }
  return taps;
}

}  // namespace detail

template <typename T>
Var add(Tape<T>& tape, Var a, Var b) {
  require_shape(tape.shape(b), tape.shape(a), "add");
  Tensor<T> out = tape.value(a);
  const Tensor<T>& vb = tape.value(b);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += vb[i];
  return tape.record(std::move(out), {a, b}, [a, b](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad(self);
    for (Var p : {a, b})
      if (T* d = t.grad_ptr(p))
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
  });
}

template <typename T>
Var scale(Tape<T>& tape, Var a, T s) {
  Tensor<T> out = tape.value(a);
  for (auto& v : out.data) v *= s;
  return tape.record(std::move(out), {a}, [a, s](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad(self);
    if (T* d = t.grad_ptr(a))
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += s * g[i];
  });
}

template <typename T>
Var relu(Tape<T>& tape, Var a) {
  Tensor<T> out = tape.value(a);
  for (auto& v : out.data) v = v < T(0) ? T(0) : v;  // NaN passes through
  return tape.record(std::move(out), {a}, [a](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad(self);
    const Tensor<T>& x = t.value(a);
    if (T* d = t.grad_ptr(a))
      for (std::size_t i = 0; i < g.size(); ++i)
        if (x[i] > T(0)) d[i] += g[i];
  });
}

/// Exact (erf-based) GELU.
template <typename T>
Var gelu(Tape<T>& tape, Var a) {
  Tensor<T> out = tape.value(a);
  const T inv_sqrt2 = T(1) / std::sqrt(T(2));
  for (auto& v : out.data) v = T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2));
  return tape.record(std::move(out), {a}, [a, inv_sqrt2](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad(self);
    const Tensor<T>& x = t.value(a);
    const T inv_sqrt2pi = T(1) / std::sqrt(T(2) * std::numbers::pi_v<T>);
    if (T* d = t.grad_ptr(a))
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T cdf = T(0.5) * (T(1) + std::erf(x[i] * inv_sqrt2));
        const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * x[i] * x[i]);
        d[i] += g[i] * (cdf + x[i] * pdf);
      }
  });
}

template <typename T>
Var sigmoid(Tape<T>& tape, Var a) {
  Tensor<T> out = tape.value(a);
  for (auto& v : out.data) v = T(1) / (T(1) + std::exp(-v));
  return tape.record(std::move(out), {a}, [a](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad(self);
    const Tensor<T>& y = t.value(Var{self});
    if (T* d = t.grad_ptr(a))
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * y[i] * (T(1) - y[i]);
  });
}

/// 2-D convolution of a C x H x W grid with O x C x k x k weights (optional bias of O).
template <typename T>
Var conv2d(Tape<T>& tape, Var x, Var w, Var b, int stride, int pad) {
  const Shape& xs = tape.shape(x);
  const Shape& ws = tape.shape(w);
  detail::require_rank(xs, 3, "conv2d input");
  detail::require_rank(ws, 4, "conv2d weight");
  const int C = xs[0], H = xs[1], W = xs[2];
  const int O = ws[0], k = ws[2];
  if (ws[1] != C || ws[3] != k)
    throw ShapeError("conv2d: weight " + shape_str(ws) + " incompatible with input " + shape_str(xs));
  if (b.valid()) require_shape(tape.shape(b), Shape{O}, "conv2d bias");
  const int Ho = (H + 2 * pad - k) / stride + 1;
  const int Wo = (W + 2 * pad - k) / stride + 1;
  if (Ho <= 0 || Wo <= 0) throw ShapeError("conv2d: empty output for input " + shape_str(xs));
  const int K = C * k * k, n = Ho * Wo;
  const bool direct = (k == 1 && stride == 1 && pad == 0);

  std::vector<T> cols;
  if (!direct) {
    cols.resize(static_cast<std::size_t>(K) * n);
    detail::im2col(tape.value(x).ptr(), C, H, W, k, stride, pad, Ho, Wo, cols.data());
  }
  Tensor<T> out(Shape{O, Ho, Wo});
  {
    CMapMat<T> Wm(tape.value(w).ptr(), O, K);
    CMapMat<T> Xc(direct ? tape.value(x).ptr() : cols.data(), K, n);
    MapMat<T> Y(out.ptr(), O, n);
    Y.noalias() = Wm * Xc;
    if (b.valid()) {
      const Tensor<T>& bv = tape.value(b);
      for (int o = 0; o < O; ++o) Y.row(o).array() += bv[static_cast<std::size_t>(o)];
    }
  }
  std::vector<Var> parents{x, w};
  if (b.valid()) parents.push_back(b);
  return tape.record(std::move(out), parents,
                     [=, cols = std::move(cols)](Tape<T>& t, int self) {
                       CMapMat<T> G(t.grad(self).ptr(), O, n);
                       const T* xin = direct ? t.value(x).ptr() : cols.data();
                       CMapMat<T> Xc(xin, K, n);
                       if (T* dw = t.grad_ptr(w)) MapMat<T>(dw, O, K).noalias() += G * Xc.transpose();
                       if (b.valid())
                         if (T* db = t.grad_ptr(b))
                           for (int o = 0; o < O; ++o) db[o] += detail::serial_sum(G.data() + static_cast<std::ptrdiff_t>(o) * n, n);
                       if (T* dx = t.grad_ptr(x)) {
                         CMapMat<T> Wm(t.value(w).ptr(), O, K);
                         if (direct) {
                           MapMat<T>(dx, K, n).noalias() += Wm.transpose() * G;
                         } else {
                           RowMat<T> dcols = Wm.transpose() * G;
                           detail::col2im_add(dcols.data(), C, H, W, k, stride, pad, Ho, Wo, dx);
                         }
                       }
                     });
}

namespace detail {

// Normalizes `groups` contiguous chunks of `len` values each, with per-channel affine.
// `chan_of(i_in_chunk, group)` maps an element to its affine channel.
template <typename T>
struct NormCache {
  std::vector<T> xhat;
  std::vector<T> inv_std;
};

}  // namespace detail

/// Group normalization over a C x H x W grid (per-sample statistics, learned per-channel affine).
template <typename T>
Var group_norm(Tape<T>& tape, Var x, Var gamma, Var beta, int groups, T eps = T(1e-5)) {
  const Shape& xs = tape.shape(x);
  detail::require_rank(xs, 3, "group_norm input");
  const int C = xs[0], HW = xs[1] * xs[2];
  if (groups <= 0 || C % groups != 0)
    throw ShapeError("group_norm: " + std::to_string(C) + " channels not divisible into " + std::to_string(groups) +
                     " groups");
  require_shape(tape.shape(gamma), Shape{C}, "group_norm gamma");
  require_shape(tape.shape(beta), Shape{C}, "group_norm beta");
  const int cpg = C / groups;
  const std::size_t len = static_cast<std::size_t>(cpg) * HW;
  const Tensor<T>& xv = tape.value(x);
  const Tensor<T>& gv = tape.value(gamma);
  const Tensor<T>& bv = tape.value(beta);

  detail::NormCache<T> cache;
  cache.xhat.resize(xv.size());
  cache.inv_std.resize(static_cast<std::size_t>(groups));
  Tensor<T> out(xs);
  for (int g = 0; g < groups; ++g) {
    const T* src = xv.ptr() + g * len;
    T mean = 0;
    for (std::size_t i = 0; i < len; ++i) mean += src[i];
    mean /= static_cast<T>(len);
    T var = 0;
    for (std::size_t i = 0; i < len; ++i) var += (src[i] - mean) * (src[i] - mean);
    var /= static_cast<T>(len);
    const T is = T(1) / std::sqrt(var + eps);
    cache.inv_std[static_cast<std::size_t>(g)] = is;
    for (std::size_t i = 0; i < len; ++i) {
      const int c = g * cpg + static_cast<int>(i / HW);
      const T xh = (src[i] - mean) * is;
      cache.xhat[g * len + i] = xh;
      out[g * len + i] = gv[static_cast<std::size_t>(c)] * xh + bv[static_cast<std::size_t>(c)];
    }
  }
  return tape.record(std::move(out), {x, gamma, beta},
                     [=, cache = std::move(cache)](Tape<T>& t, int self) {
                       const Tensor<T>& gr = t.grad(self);
                       const Tensor<T>& gv = t.value(gamma);
                       T* dg = t.grad_ptr(gamma);
                       T* db = t.grad_ptr(beta);
                       T* dx = t.grad_ptr(x);
                       for (std::size_t i = 0; i < gr.size(); ++i) {
                         const int c = static_cast<int>(i / HW);
                         if (dg) dg[c] += gr[i] * cache.xhat[i];
                         if (db) db[c] += gr[i];
                       }
                       if (!dx) return;
                       for (int g = 0; g < groups; ++g) {
                         T m1 = 0, m2 = 0;
                         for (std::size_t i = g * len; i < (g + 1) * len; ++i) {
                           const T dxh = gr[i] * gv[i / HW];
                           m1 += dxh;
                           m2 += dxh * cache.xhat[i];
                         }
                         m1 /= static_cast<T>(len);
                         m2 /= static_cast<T>(len);
                         const T is = cache.inv_std[static_cast<std::size_t>(g)];
                         for (std::size_t i = g * len; i < (g + 1) * len; ++i) {
                           const T dxh = gr[i] * gv[i / HW];
                           dx[i] += is * (dxh - m1 - cache.xhat[i] * m2);
                         }
                       }
                     });
}

/// Layer normalization of each row of an n x d matrix, learned affine over d.
template <typename T>
Var layer_norm(Tape<T>& tape, Var x, Var gamma, Var beta, T eps = T(1e-5)) {
  const Shape& xs = tape.shape(x);
  detail::require_rank(xs, 2, "layer_norm input");
  const int n = xs[0], d = xs[1];
  require_shape(tape.shape(gamma), Shape{d}, "layer_norm gamma");
  require_shape(tape.shape(beta), Shape{d}, "layer_norm beta");
  const Tensor<T>& xv = tape.value(x);
  const Tensor<T>& gv = tape.value(gamma);
  const Tensor<T>& bv = tape.value(beta);
  detail::NormCache<T> cache;
  cache.xhat.resize(xv.size());
  cache.inv_std.resize(static_cast<std::size_t>(n));
  Tensor<T> out(xs);
  for (int r = 0; r < n; ++r) {
    const T* src = xv.ptr() + static_cast<std::size_t>(r) * d;
    T mean = 0;
    for (int j = 0; j < d; ++j) mean += src[j];
    mean /= d;
    T var = 0;
    for (int j = 0; j < d; ++j) var += (src[j] - mean) * (src[j] - mean);
    var /= d;
    const T is = T(1) / std::sqrt(var + eps);
    cache.inv_std[static_cast<std::size_t>(r)] = is;
    for (int j = 0; j < d; ++j) {
      const std::size_t i = static_cast<std::size_t>(r) * d + j;
      cache.xhat[i] = (src[j] - mean) * is;
      out[i] = gv[static_cast<std::size_t>(j)] * cache.xhat[i] + bv[static_cast<std::size_t>(j)];
    }
  }
  return tape.record(std::move(out), {x, gamma, beta},
                     [=, cache = std::move(cache)](Tape<T>& t, int self) {
                       const Tensor<T>& gr = t.grad(self);
                       const Tensor<T>& gv = t.value(gamma);
                       T* dg = t.grad_ptr(gamma);
                       T* db = t.grad_ptr(beta);
                       T* dx = t.grad_ptr(x);
                       for (int r = 0; r < n; ++r) {
                         T m1 = 0, m2 = 0;
                         for (int j = 0; j < d; ++j) {
                           const std::size_t i = static_cast<std::size_t>(r) * d + j;
                           if (dg) dg[j] += gr[i] * cache.xhat[i];
                           if (db) db[j] += gr[i];
                           const T dxh = gr[i] * gv[static_cast<std::size_t>(j)];
                           m1 += dxh;
                           m2 += dxh * cache.xhat[i];
                         }
                         if (!dx) continue;
                         m1 /= d;
                         m2 /= d;
                         const T is = cache.inv_std[static_cast<std::size_t>(r)];
                         for (int j = 0; j < d; ++j) {
                           const std::size_t i = static_cast<std::size_t>(r) * d + j;
                           const T dxh = gr[i] * gv[static_cast<std::size_t>(j)];
                           dx[i] += is * (dxh - m1 - cache.xhat[i] * m2);
                         }
                       }
                     });
}

/// Concatenation along the leading axis (channels for grids).
template <typename T>
Var concat0(Tape<T>& tape, const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat0: no inputs");
  Shape s = tape.shape(parts[0]);
  Shape tail(s.begin() + 1, s.end());
  int lead = 0;
  for (Var p : parts) {
    const Shape& ps = tape.shape(p);
    if (Shape(ps.begin() + 1, ps.end()) != tail)
      throw ShapeError("concat0: " + shape_str(ps) + " incompatible with " + shape_str(s));
    lead += ps[0];
  }
  s[0] = lead;
  Tensor<T> out(s);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (Var p : parts) {
    const Tensor<T>& v = tape.value(p);
    offsets.push_back(off);
    std::copy(v.data.begin(), v.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(off));
    off += v.size();
  }
  return tape.record(std::move(out), parts, [parts, offsets](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad(self);
    for (std::size_t k = 0; k < parts.size(); ++k)
      if (T* d = t.grad_ptr(parts[k])) {
        const std::size_t n = t.value(parts[k]).size();
        for (std::size_t i = 0; i < n; ++i) d[i] += g[offsets[k] + i];
      }
  });
}

/// Rows [begin, begin + count) of the leading axis.
template <typename T>
Var slice0(Tape<T>& tape, Var x, int begin, int count) {
  Shape s = tape.shape(x);
  if (s.empty() || begin < 0 || count < 0 || begin + count > s[0])
    throw ShapeError("slice0: range [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                     ") out of " + shape_str(s));
  const std::size_t inner = shape_numel(s) / static_cast<std::size_t>(s[0]);
  s[0] = count;
  const Tensor<T>& xv = tape.value(x);
  Tensor<T> out(s);
  const std::size_t off = static_cast<std::size_t>(begin) * inner;
  std::copy(xv.data.begin() + static_cast<std::ptrdiff_t>(off),
            xv.data.begin() + static_cast<std::ptrdiff_t>(off + out.size()), out.data.begin());
  return tape.record(std::move(out), {x}, [x, off](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad(self);
    if (T* d = t.grad_ptr(x))
      for (std::size_t i = 0; i < g.size(); ++i) d[off + i] += g[i];
  });
}

template <typename T>
Var reshape(Tape<T>& tape, Var x, Shape s) {
  if (shape_numel(s) != tape.value(x).size())
    throw ShapeError("reshape: " + shape_str(tape.shape(x)) + " -> " + shape_str(s));
  Tensor<T> out(std::move(s), tape.value(x).data);
  return tape.record(std::move(out), {x}, [x](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad(self);
    if (T* d = t.grad_ptr(x))
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
  });
}

template <typename T>
Var transpose2d(Tape<T>& tape, Var x) {
  const Shape& s = tape.shape(x);
  detail::require_rank(s, 2, "transpose2d");
  const int r = s[0], c = s[1];
  Tensor<T> out(Shape{c, r});
  MapMat<T>(out.ptr(), c, r) = CMapMat<T>(tape.value(x).ptr(), r, c).transpose();
  return tape.record(std::move(out), {x}, [x, r, c](Tape<T>& t, int self) {
    if (T* d = t.grad_ptr(x)) MapMat<T>(d, r, c) += CMapMat<T>(t.grad(self).ptr(), c, r).transpose();
  });
}

/// Bilinear upsampling of a C x H x W grid by an integer factor (half-pixel centres).
template <typename T>
Var upsample_bilinear(Tape<T>& tape, Var x, int factor) {
  const Shape& s = tape.shape(x);
  detail::require_rank(s, 3, "upsample_bilinear");
  if (factor < 1) throw ShapeError("upsample_bilinear: factor must be >= 1");
  const int C = s[0], H = s[1], W = s[2], Ho = H * factor, Wo = W * factor;
  const auto ty = detail::bilinear_taps(H, Ho);
  const auto tx = detail::bilinear_taps(W, Wo);
  const Tensor<T>& xv = tape.value(x);
  Tensor<T> out(Shape{C, Ho, Wo});
  for (int c = 0; c < C; ++c)
    for (int oy = 0; oy < Ho; ++oy) {
      const auto& a = ty[static_cast<std::size_t>(oy)];
      for (int ox = 0; ox < Wo; ++ox) {
        const auto& b = tx[static_cast<std::size_t>(ox)];
        const T wy = static_cast<T>(a.w1), wx = static_cast<T>(b.w1);
        out.at(c, oy, ox) = (T(1) - wy) * ((T(1) - wx) * xv.at(c, a.i0, b.i0) + wx * xv.at(c, a.i0, b.i1)) +
                            wy * ((T(1) - wx) * xv.at(c, a.i1, b.i0) + wx * xv.at(c, a.i1, b.i1));
      }
    }
  return tape.record(std::move(out), {x}, [=](Tape<T>& t, int self) {
    T* d = t.grad_ptr(x);
    if (!d) return;
    const Tensor<T>& g = t.grad(self);
    auto at = [&](int c, int y, int xx) -> T& { return d[(static_cast<std::size_t>(c) * H + y) * W + xx]; };
    for (int c = 0; c < C; ++c)
      for (int oy = 0; oy < Ho; ++oy) {
        const auto& a = ty[static_cast<std::size_t>(oy)];
        for (int ox = 0; ox < Wo; ++ox) {
          const auto& b = tx[static_cast<std::size_t>(ox)];
          const T wy = static_cast<T>(a.w1), wx = static_cast<T>(b.w1);
          const T gv = g.at(c, oy, ox);
          at(c, a.i0, b.i0) += gv * (T(1) - wy) * (T(1) - wx);
          at(c, a.i0, b.i1) += gv * (T(1) - wy) * wx;
          at(c, a.i1, b.i0) += gv * wy * (T(1) - wx);
          at(c, a.i1, b.i1) += gv * wy * wx;
        }
      }
  });
}

/// y = x W + b for x: n x din, W: din x dout, b: dout (optional).
template <typename T>
Var linear(Tape<T>& tape, Var x, Var w, Var b) {
  const Shape& xs = tape.shape(x);
  const Shape& ws = tape.shape(w);
  detail::require_rank(xs, 2, "linear input");
  detail::require_rank(ws, 2, "linear weight");
  const int n = xs[0], din = xs[1], dout = ws[1];
  if (ws[0] != din) throw ShapeError("linear: weight " + shape_str(ws) + " incompatible with input " + shape_str(xs));
  if (b.valid()) require_shape(tape.shape(b), Shape{dout}, "linear bias");
  Tensor<T> out(Shape{n, dout});
  MapMat<T> Y(out.ptr(), n, dout);
  Y.noalias() = CMapMat<T>(tape.value(x).ptr(), n, din) * CMapMat<T>(tape.value(w).ptr(), din, dout);
  if (b.valid()) {
    const Tensor<T>& bv = tape.value(b);
    Y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bv.ptr(), dout);
  }
  std::vector<Var> parents{x, w};
  if (b.valid()) parents.push_back(b);
  return tape.record(std::move(out), parents, [=](Tape<T>& t, int self) {
    CMapMat<T> G(t.grad(self).ptr(), n, dout);
    if (T* dw = t.grad_ptr(w)) MapMat<T>(dw, din, dout).noalias() += CMapMat<T>(t.value(x).ptr(), n, din).transpose() * G;
    if (b.valid())
      if (T* db = t.grad_ptr(b))
        for (int r = 0; r < n; ++r)
          for (int c = 0; c < dout; ++c) db[c] += G(r, c);
    if (T* dx = t.grad_ptr(x)) MapMat<T>(dx, n, din).noalias() += G * CMapMat<T>(t.value(w).ptr(), din, dout).transpose();
  });
}

/// Softmax across the channel axis of a C x H x W grid (per-pixel class distribution).
template <typename T>
Var softmax_channels(Tape<T>& tape, Var x) {
  const Shape& s = tape.shape(x);
  detail::require_rank(s, 3, "softmax_channels");
  const int C = s[0], HW = s[1] * s[2];
  const Tensor<T>& xv = tape.value(x);
  Tensor<T> out(s);
  for (int p = 0; p < HW; ++p) {
    T m = xv[static_cast<std::size_t>(p)];
    for (int c = 1; c < C; ++c) m = std::max(m, xv[static_cast<std::size_t>(c) * HW + p]);
    T z = 0;
    for (int c = 0; c < C; ++c) {
      const std::size_t i = static_cast<std::size_t>(c) * HW + p;
      out[i] = std::exp(xv[i] - m);
      z += out[i];
    }
    for (int c = 0; c < C; ++c) out[static_cast<std::size_t>(c) * HW + p] /= z;
  }
  return tape.record(std::move(out), {x}, [x, C, HW](Tape<T>& t, int self) {
    T* d = t.grad_ptr(x);
    if (!d) return;
    const Tensor<T>& g = t.grad(self);
    const Tensor<T>& y = t.value(Var{self});
    for (int p = 0; p < HW; ++p) {
      T dot = 0;
      for (int c = 0; c < C; ++c) {
        const std::size_t i = static_cast<std::size_t>(c) * HW + p;
        dot += g[i] * y[i];
      }
      for (int c = 0; c < C; ++c) {
        const std::size_t i = static_cast<std::size_t>(c) * HW + p;
        d[i] += y[i] * (g[i] - dot);
      }
    }
  });
}

}  // namespace scannet::ops
