#pragma once

#include <cmath>
#include <cstring>

#include "anatembed/gemm.hpp"
#include "anatembed/simd.hpp"
#include "anatembed/tensor.hpp"

namespace anatembed::diffcore {

inline int64_t floor_div(int64_t a, int64_t b) {
  return a >= 0 ? a / b : -((-a + b - 1) / b);
}
inline int64_t ceil_div(int64_t a, int64_t b) {
  return a >= 0 ? (a + b - 1) / b : -((-a) / b);
}

// Convolution geometry. Input is (C_in, S...), kernel (C_out, C_in, K...),
// output (C_out, O...) with O = floor((S + 2*pad - K) / stride) + 1 per axis.
struct ConvPlan {
  int D = 0;
  int64_t cin = 0, cout = 0;
  Shape in_spatial, k, stride, pad, out_spatial;
  int64_t ktaps = 0, kw = 0, pcols = 0;
};

inline ConvPlan plan_conv(const Shape& xs, const Shape& ws, const Shape& stride,
                          const Shape& pad) {
  ConvPlan pl;
  require(xs.size() >= 2, "conv: input rank must be >= 2, got shape ",
          shape_str(xs));
  pl.D = (int)xs.size() - 1;
  require(ws.size() == (size_t)pl.D + 2, "conv: kernel rank ", ws.size(),
          " does not match input shape ", shape_str(xs));
  require(stride.size() == (size_t)pl.D && pad.size() == (size_t)pl.D,
          "conv: stride/pad must have ", pl.D, " entries");
  pl.cin = xs[0];
  pl.cout = ws[0];
  require(ws[1] == pl.cin, "conv: kernel expects ", ws[1],
          " input channels, input has ", pl.cin);
  pl.in_spatial.assign(xs.begin() + 1, xs.end());
  pl.k.assign(ws.begin() + 2, ws.end());
  pl.stride = stride;
  pl.pad = pad;
  for (int a = 0; a < pl.D; ++a) {
    require(pl.stride[a] >= 1, "conv: stride must be >= 1, got ",
            shape_str(stride));
    require(pl.pad[a] >= 0, "conv: pad must be >= 0, got ", shape_str(pad));
    int64_t span = pl.in_spatial[a] + 2 * pl.pad[a] - pl.k[a];
    require(span >= 0, "conv: kernel axis ", a, " (", pl.k[a],
            ") exceeds padded input extent ",
            pl.in_spatial[a] + 2 * pl.pad[a]);
    pl.out_spatial.push_back(span / pl.stride[a] + 1);
  }
  pl.ktaps = numel(pl.k);
  pl.kw = pl.cin * pl.ktaps;
  pl.pcols = numel(pl.out_spatial);
  return pl;
}

namespace detail {

// Lowers one channel-and-tap row of the patch matrix: X[row, p] holds the
// input value under kernel tap `tap` at output pixel p, zero where the tap
// falls into padding. The innermost output axis is handled as contiguous or
// strided runs so stride-1 convs lower at memcpy speed.
inline void im2col_row(const float* src_c, const ConvPlan& pl, const Shape& tap,
                       const Shape& in_str, float* dst_row) {
  int D = pl.D;
  int64_t last_in = pl.in_spatial[D - 1], last_out = pl.out_spatial[D - 1];
  int64_t ls = pl.stride[D - 1], lp = pl.pad[D - 1], lt = tap[D - 1];
  int64_t outer_count = pl.pcols / last_out;
  int64_t p0 = std::max<int64_t>(0, ceil_div(lp - lt, ls));
  int64_t p1 = std::min(last_out - 1, floor_div(last_in - 1 - lt + lp, ls));
  Shape op(D > 1 ? D - 1 : 0, 0);
  for (int64_t outer = 0; outer < outer_count; ++outer) {
    bool ok = true;
    int64_t base = 0;
    for (int a = 0; a < D - 1; ++a) {
      int64_t z = op[a] * pl.stride[a] - pl.pad[a] + tap[a];
      if (z < 0 || z >= pl.in_spatial[a]) {
        ok = false;
        break;
      }
      base += z * in_str[a];
    }
    float* dst = dst_row + outer * last_out;
    if (!ok || p0 > p1) {
      std::memset(dst, 0, (size_t)last_out * sizeof(float));
    } else {
      if (p0 > 0) std::memset(dst, 0, (size_t)p0 * sizeof(float));
      int64_t off = base - lp + lt;
      if (ls == 1) {
        std::memcpy(dst + p0, src_c + off + p0,
                    (size_t)(p1 - p0 + 1) * sizeof(float));
      } else {
        for (int64_t p = p0; p <= p1; ++p) dst[p] = src_c[off + p * ls];
      }
      if (p1 + 1 < last_out)
        std::memset(dst + p1 + 1, 0, (size_t)(last_out - p1 - 1) * sizeof(float));
    }
    if (D > 1) {
      for (int a = D - 2; a >= 0; --a) {
        if (++op[a] < pl.out_spatial[a]) break;
        op[a] = 0;
      }
    }
  }
}

inline void col2im_row_add(const float* src_row, const ConvPlan& pl,
                           const Shape& tap, const Shape& in_str, float* dst_c) {
  int D = pl.D;
  int64_t last_in = pl.in_spatial[D - 1], last_out = pl.out_spatial[D - 1];
  int64_t ls = pl.stride[D - 1], lp = pl.pad[D - 1], lt = tap[D - 1];
  int64_t outer_count = pl.pcols / last_out;
  int64_t p0 = std::max<int64_t>(0, ceil_div(lp - lt, ls));
  int64_t p1 = std::min(last_out - 1, floor_div(last_in - 1 - lt + lp, ls));
  Shape op(D > 1 ? D - 1 : 0, 0);
  for (int64_t outer = 0; outer < outer_count; ++outer) {
    bool ok = true;
    int64_t base = 0;
    for (int a = 0; a < D - 1; ++a) {
      int64_t z = op[a] * pl.stride[a] - pl.pad[a] + tap[a];
      if (z < 0 || z >= pl.in_spatial[a]) {
        ok = false;
        break;
      }
      base += z * in_str[a];
    }
    if (ok && p0 <= p1) {
      const float* src = src_row + outer * last_out;
      int64_t off = base - lp + lt;
      if (ls == 1) {
        for (int64_t p = p0; p <= p1; ++p) dst_c[off + p] += src[p];
      } else {
        for (int64_t p = p0; p <= p1; ++p) dst_c[off + p * ls] += src[p];
      }
    }
    if (D > 1) {
      for (int a = D - 2; a >= 0; --a) {
        if (++op[a] < pl.out_spatial[a]) break;
        op[a] = 0;
      }
    }
  }
}

inline Shape unflatten(int64_t t, const Shape& extents) {
  Shape idx(extents.size());
  for (int a = (int)extents.size() - 1; a >= 0; --a) {
    idx[a] = t % extents[a];
    t /= extents[a];
  }
  return idx;
}

}  // namespace detail

inline void im2col(const float* x, const ConvPlan& pl, float* X) {
  Shape in_str = row_strides(pl.in_spatial);
  int64_t csize = numel(pl.in_spatial);
  int64_t rows = pl.cin * pl.ktaps;
  int64_t grain = std::max<int64_t>(1, 65536 / std::max<int64_t>(1, pl.pcols));
  parallel_for(rows, grain, [&](int64_t lo, int64_t hi) {
    for (int64_t row = lo; row < hi; ++row) {
      Shape tap = detail::unflatten(row % pl.ktaps, pl.k);
      detail::im2col_row(x + (row / pl.ktaps) * csize, pl, tap, in_str,
                         X + row * pl.pcols);
    }
  });
}

inline void col2im_add(const float* X, const ConvPlan& pl, float* gx) {
  Shape in_str = row_strides(pl.in_spatial);
  int64_t csize = numel(pl.in_spatial);
  // Taps of one input channel overlap in gx, so taps run serially per channel
  // in fixed order; distinct channels touch disjoint planes.
  parallel_for(pl.cin, 1, [&](int64_t lo, int64_t hi) {
    for (int64_t ci = lo; ci < hi; ++ci)
      for (int64_t t = 0; t < pl.ktaps; ++t) {
        Shape tap = detail::unflatten(t, pl.k);
        detail::col2im_row_add(X + (ci * pl.ktaps + t) * pl.pcols, pl, tap,
                               in_str, gx + ci * csize);
      }
  });
}

// conv(x, w): bias-free cross correlation, any spatial rank >= 1.
inline Tensor conv(const Tensor& x, const Tensor& w, const Shape& stride,
                   const Shape& pad) {
  ConvPlan pl = plan_conv(x.shape(), w.shape(), stride, pad);
  std::vector<float> X((size_t)(pl.kw * pl.pcols));
  im2col(x.data(), pl, X.data());
  Shape out_shape = {pl.cout};
  out_shape.insert(out_shape.end(), pl.out_spatial.begin(), pl.out_spatial.end());
  std::vector<float> out((size_t)(pl.cout * pl.pcols));
  gemm(w.data(), X.data(), out.data(), pl.cout, pl.kw, pl.pcols);
  Tensor xc = x, wc = w;
  return Tensor::op(
      std::move(out_shape), std::move(out), {x, w},
      [xc, wc, pl](Node& self) mutable {
        const float* gout = self.grad.data();
        std::vector<float> Xb((size_t)(pl.kw * pl.pcols));
        im2col(xc.data(), pl, Xb.data());
        if (wc.tracked()) {
          std::vector<float> Xt((size_t)(pl.pcols * pl.kw));
          transpose(Xb.data(), Xt.data(), pl.kw, pl.pcols);
          gemm(gout, Xt.data(), wc.grad(), pl.cout, pl.pcols, pl.kw, true);
        }
        if (xc.tracked()) {
          std::vector<float> Wt((size_t)(pl.kw * pl.cout));
          transpose(wc.data(), Wt.data(), pl.cout, pl.kw);
          std::vector<float>& gX = Xb;  // reuse buffer
          gemm(Wt.data(), gout, gX.data(), pl.kw, pl.cout, pl.pcols);
          col2im_add(gX.data(), pl, xc.grad());
        }
      });
}

inline Tensor relu(const Tensor& x) {
  std::vector<float> out(x.data(), x.data() + x.size());
  for (float& v : out) v = v > 0.0f ? v : 0.0f;
  Tensor xc = x;
  return Tensor::op(x.shape(), std::move(out), {x}, [xc](Node& self) mutable {
    if (!xc.tracked()) return;
    float* gx = xc.grad();
    const float* xv = xc.data();
    const float* g = self.grad.data();
    for (int64_t i = 0; i < (int64_t)self.values.size(); ++i)
      if (xv[i] > 0.0f) gx[i] += g[i];
  });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), "add: shape mismatch ", shape_str(a.shape()),
          " vs ", shape_str(b.shape()));
  std::vector<float> out(a.data(), a.data() + a.size());
  simd::axpy(out.data(), 1.0f, b.data(), (size_t)b.size());
  Tensor ac = a, bc = b;
  return Tensor::op(a.shape(), std::move(out), {a, b},
                    [ac, bc](Node& self) mutable {
                      const float* g = self.grad.data();
                      size_t n = self.values.size();
                      if (ac.tracked()) simd::axpy(ac.grad(), 1.0f, g, n);
                      if (bc.tracked()) simd::axpy(bc.grad(), 1.0f, g, n);
                    });
}

// Concatenation along the channel axis (axis 0).
inline Tensor concat_channels(const Tensor& a, const Tensor& b) {
  require(a.shape().size() == b.shape().size(),
          "concat: rank mismatch ", shape_str(a.shape()), " vs ",
          shape_str(b.shape()));
  for (size_t i = 1; i < a.shape().size(); ++i)
    require(a.shape()[i] == b.shape()[i], "concat: spatial mismatch ",
            shape_str(a.shape()), " vs ", shape_str(b.shape()));
  Shape out_shape = a.shape();
  out_shape[0] += b.shape()[0];
  std::vector<float> out((size_t)(a.size() + b.size()));
  std::memcpy(out.data(), a.data(), (size_t)a.size() * sizeof(float));
  std::memcpy(out.data() + a.size(), b.data(), (size_t)b.size() * sizeof(float));
  Tensor ac = a, bc = b;
  int64_t na = a.size();
  return Tensor::op(std::move(out_shape), std::move(out), {a, b},
                    [ac, bc, na](Node& self) mutable {
                      const float* g = self.grad.data();
                      if (ac.tracked()) simd::axpy(ac.grad(), 1.0f, g, (size_t)na);
                      if (bc.tracked())
                        simd::axpy(bc.grad(), 1.0f, g + na,
                                   self.values.size() - (size_t)na);
                    });
}

// Nearest-neighbour upsampling by integer per-axis factors; input (C, S...).
inline Tensor upsample_nearest(const Tensor& x, const Shape& factors) {
  const Shape& xs = x.shape();
  require(factors.size() == xs.size() - 1, "upsample: need ", xs.size() - 1,
          " factors, got ", factors.size());
  for (int64_t f : factors) require(f >= 1, "upsample: factors must be >= 1");
  Shape in_sp(xs.begin() + 1, xs.end());
  Shape out_sp(in_sp);
  for (size_t a = 0; a < out_sp.size(); ++a) out_sp[a] *= factors[a];
  Shape out_shape = {xs[0]};
  out_shape.insert(out_shape.end(), out_sp.begin(), out_sp.end());
  Shape in_str = row_strides(in_sp);
  int64_t c_in = numel(in_sp), c_out = numel(out_sp);
  std::vector<float> out((size_t)(xs[0] * c_out));
  int D = (int)in_sp.size();
  Shape op(D, 0);
  std::vector<int64_t> src_of((size_t)c_out);
  int64_t o = 0;
  do {
    int64_t s = 0;
    for (int a = 0; a < D; ++a) s += (op[a] / factors[a]) * in_str[a];
    src_of[(size_t)o++] = s;
  } while (next_index(op, out_sp));
  for (int64_t c = 0; c < xs[0]; ++c) {
    const float* src = x.data() + c * c_in;
    float* dst = out.data() + c * c_out;
    for (int64_t i = 0; i < c_out; ++i) dst[i] = src[src_of[(size_t)i]];
  }
  Tensor xc = x;
  return Tensor::op(std::move(out_shape), std::move(out), {x},
                    [xc, src_of, c_in, c_out](Node& self) mutable {
                      if (!xc.tracked()) return;
                      int64_t C = xc.shape()[0];
                      const float* g = self.grad.data();
                      float* gx = xc.grad();
                      for (int64_t c = 0; c < C; ++c)
                        for (int64_t i = 0; i < c_out; ++i)
                          gx[c * c_in + src_of[(size_t)i]] += g[c * c_out + i];
                    });
}

// Normalizes every spatial column of a (C, cells...) tensor to unit L2 norm.
// Columns with norm below eps are scaled by 1/eps instead (stays linear).
inline Tensor l2_normalize(const Tensor& x, double eps = 1e-12) {
  const Shape& xs = x.shape();
  require(xs.size() >= 2, "l2_normalize: need (C, cells...) input, got ",
          shape_str(xs));
  int64_t C = xs[0], cells = x.size() / C;
  std::vector<float> inv_r((size_t)cells, 0.0f);
  for (int64_t c = 0; c < C; ++c) {
    const float* row = x.data() + c * cells;
    for (int64_t j = 0; j < cells; ++j) inv_r[(size_t)j] += row[j] * row[j];
  }
  for (int64_t j = 0; j < cells; ++j)
    inv_r[(size_t)j] = 1.0f / std::max((float)eps, std::sqrt(inv_r[(size_t)j]));
  std::vector<float> out((size_t)x.size());
  for (int64_t c = 0; c < C; ++c) {
    const float* row = x.data() + c * cells;
    float* dst = out.data() + c * cells;
    for (int64_t j = 0; j < cells; ++j) dst[j] = row[j] * inv_r[(size_t)j];
  }
  Tensor xc = x;
  return Tensor::op(
      x.shape(), std::move(out), {x}, [xc, inv_r, C, cells](Node& self) mutable {
        if (!xc.tracked()) return;
        std::vector<float> dots((size_t)cells, 0.0f);
        const float* y = self.values.data();
        const float* g = self.grad.data();
        for (int64_t c = 0; c < C; ++c) {
          const float* yr = y + c * cells;
          const float* gr = g + c * cells;
          for (int64_t j = 0; j < cells; ++j) dots[(size_t)j] += yr[j] * gr[j];
        }
        float* gx = xc.grad();
        for (int64_t c = 0; c < C; ++c) {
          const float* yr = y + c * cells;
          const float* gr = g + c * cells;
          float* gxr = gx + c * cells;
          for (int64_t j = 0; j < cells; ++j)
            gxr[j] += (gr[j] - yr[j] * dots[(size_t)j]) * inv_r[(size_t)j];
        }
      });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), "mul: shape mismatch ", shape_str(a.shape()),
          " vs ", shape_str(b.shape()));
  std::vector<float> out((size_t)a.size());
  for (int64_t i = 0; i < a.size(); ++i) out[(size_t)i] = a.data()[i] * b.data()[i];
  Tensor ac = a, bc = b;
  return Tensor::op(a.shape(), std::move(out), {a, b},
                    [ac, bc](Node& self) mutable {
                      const float* g = self.grad.data();
                      int64_t n = (int64_t)self.values.size();
                      if (ac.tracked()) {
                        float* ga = ac.grad();
                        const float* bv = bc.data();
                        for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * bv[i];
                      }
                      if (bc.tracked()) {
                        float* gb = bc.grad();
                        const float* av = ac.data();
                        for (int64_t i = 0; i < n; ++i) gb[i] += g[i] * av[i];
                      }
                    });
}

// Sum of all elements, accumulated in double; result is a scalar node.
inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  const float* v = x.data();
  for (int64_t i = 0; i < x.size(); ++i) s += v[i];
  Tensor xc = x;
  return Tensor::op({1}, {(float)s}, {x}, [xc](Node& self) mutable {
    if (!xc.tracked()) return;
    float g = self.grad[0];
    float* gx = xc.grad();
    for (int64_t i = 0; i < xc.size(); ++i) gx[i] += g;
  });
}

inline Tensor mul_scalar(const Tensor& x, double s) {
  std::vector<float> out(x.data(), x.data() + x.size());
  simd::scale(out.data(), (float)s, out.size());
  Tensor xc = x;
  return Tensor::op(x.shape(), std::move(out), {x}, [xc, s](Node& self) mutable {
    if (!xc.tracked()) return;
    simd::axpy(xc.grad(), (float)s, self.grad.data(), self.values.size());
  });
}

}  // namespace anatembed::diffcore

namespace anatembed {
using diffcore::backward;
using diffcore::Tensor;
namespace ops = diffcore;
}  // namespace anatembed
