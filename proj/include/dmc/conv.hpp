#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dmc/errors.hpp"
#include "dmc/shape.hpp"
#include "dmc/tensor.hpp"

// Direct convolution kernels shared by forward and backward passes.
//
// Three primitives cover everything:
//   conv_gather      out[o] += w * in[o*s + t - p]   (standard convolution)
//   conv_scatter     out[i*s + t - p] += w * in[i]   (transposed convolution,
//                                                     also conv input-grad)
//   conv_weight_grad w[t] += sum coarse[c] * fine[c*s + t - p]
//
// Per output element the accumulation order is fixed (channel-major, then
// kernel taps in scan order), so results are bit-reproducible and match a
// naive per-element loop exactly.

namespace dmc {

struct ConvDescriptor {
  int spatial_rank = 2;  // 2 or 3
  std::vector<std::int64_t> kernel;
  std::vector<std::int64_t> stride;
  std::vector<std::int64_t> padding;
  std::vector<std::int64_t> output_padding;  // transposed conv only
  std::int64_t groups = 1;
  bool has_bias = true;
};

// stride-1 convolution preserving spatial extents (odd kernel, pad (k-1)/2).
inline ConvDescriptor same_conv(int rank, std::int64_t k, std::int64_t groups = 1) {
  ConvDescriptor d;
  d.spatial_rank = rank;
  d.kernel.assign(static_cast<std::size_t>(rank), k);
  d.stride.assign(static_cast<std::size_t>(rank), 1);
  d.padding.assign(static_cast<std::size_t>(rank), (k - 1) / 2);
  d.output_padding.assign(static_cast<std::size_t>(rank), 0);
  d.groups = groups;
  return d;
}

// Transposed conv doubling each spatial extent (k=3, s=2, p=1, op=1).
inline ConvDescriptor upscale_transposed(int rank, std::int64_t k = 3,
                                         std::int64_t s = 2) {
  ConvDescriptor d;
  d.spatial_rank = rank;
  d.kernel.assign(static_cast<std::size_t>(rank), k);
  d.stride.assign(static_cast<std::size_t>(rank), s);
  d.padding.assign(static_cast<std::size_t>(rank), (k - 1) / 2);
  d.output_padding.assign(static_cast<std::size_t>(rank), s - 1);
  d.groups = 1;
  return d;
}

namespace detail {

// Geometry normalized to three spatial axes; rank 2 gets a dummy leading
// axis of extent 1 so a single loop nest serves both ranks.
struct ConvGeom {
  std::int64_t n = 1;
  std::int64_t c_src = 1, c_dst = 1, groups = 1;
  std::array<std::int64_t, 3> in{1, 1, 1};   // source-grid spatial extents
  std::array<std::int64_t, 3> out{1, 1, 1};  // destination-grid extents
  std::array<std::int64_t, 3> k{1, 1, 1};
  std::array<std::int64_t, 3> s{1, 1, 1};
  std::array<std::int64_t, 3> p{1, 1, 1};
};

inline void pad_axes(const std::vector<std::int64_t>& v,
                     std::array<std::int64_t, 3>& out, std::int64_t fill) {
  out = {fill, fill, fill};
  const std::size_t off = 3 - v.size();
  for (std::size_t i = 0; i < v.size(); ++i) out[off + i] = v[i];
}

inline void check_desc(const ConvDescriptor& d, const char* op) {
  if (d.spatial_rank != 2 && d.spatial_rank != 3) {
    throw ConfigError(std::string(op) + ": spatial rank must be 2 or 3, got " +
                      std::to_string(d.spatial_rank));
  }
  const auto r = static_cast<std::size_t>(d.spatial_rank);
  if (d.kernel.size() != r || d.stride.size() != r || d.padding.size() != r) {
    throw ConfigError(std::string(op) +
                      ": kernel/stride/padding must have one entry per axis");
  }
  if (d.groups < 1) throw ConfigError(std::string(op) + ": groups must be >= 1");
}

// ---- standard convolution ----

inline Shape conv_output_shape(const Shape& in, const Shape& w,
                               const ConvDescriptor& d) {
  check_desc(d, "conv_nd");
  const auto r = static_cast<std::size_t>(d.spatial_rank);
  if (in.size() != r + 2) {
    throw ShapeError("conv_nd: input must be N x C x spatial(" +
                     std::to_string(r) + "), got " + shape_str(in));
  }
  if (w.size() != r + 2) {
    throw ShapeError("conv_nd: weight must be Cout x Cin/groups x kernel, got " +
                     shape_str(w));
  }
  const std::int64_t ci = in[1], co = w[0];
  if (ci % d.groups != 0 || co % d.groups != 0) {
    throw ShapeError("conv_nd: channels (in=" + std::to_string(ci) +
                     ", out=" + std::to_string(co) + ") not divisible by groups=" +
                     std::to_string(d.groups));
  }
  if (w[1] != ci / d.groups) {
    throw ShapeError("conv_nd: weight expects " + std::to_string(w[1]) +
                     " input channels per group, input has " +
                     std::to_string(ci / d.groups));
  }
  Shape out{in[0], co};
  for (std::size_t a = 0; a < r; ++a) {
    if (w[2 + a] != d.kernel[a]) {
      throw ShapeError("conv_nd: spatial axis " + std::to_string(a) +
                       ": weight kernel " + std::to_string(w[2 + a]) +
                       " vs descriptor " + std::to_string(d.kernel[a]));
    }
    const std::int64_t e =
        div_floor(in[2 + a] + 2 * d.padding[a] - d.kernel[a], d.stride[a]) + 1;
    if (e < 1) {
      throw GeometryError("conv_nd: spatial axis " + std::to_string(a) +
                          ": extent " + std::to_string(in[2 + a]) + " with kernel " +
                          std::to_string(d.kernel[a]) + ", pad " +
                          std::to_string(d.padding[a]) + ", stride " +
                          std::to_string(d.stride[a]) + " yields empty output");
    }
    out.push_back(e);
  }
  return out;
}

// out = (in - 1)*s - 2p + k + output_padding
inline Shape transposed_output_shape(const Shape& in, const Shape& w,
                                     const ConvDescriptor& d) {
  check_desc(d, "transposed_conv_nd");
  const auto r = static_cast<std::size_t>(d.spatial_rank);
  if (in.size() != r + 2) {
    throw ShapeError("transposed_conv_nd: input must be N x C x spatial, got " +
                     shape_str(in));
  }
  if (w.size() != r + 2) {
    throw ShapeError(
        "transposed_conv_nd: weight must be Cin x Cout/groups x kernel, got " +
        shape_str(w));
  }
  const std::int64_t ci = in[1];
  if (w[0] != ci) {
    throw ShapeError("transposed_conv_nd: weight expects " + std::to_string(w[0]) +
                     " input channels, input has " + std::to_string(ci));
  }
  if (ci % d.groups != 0) {
    throw ShapeError("transposed_conv_nd: input channels not divisible by groups");
  }
  const std::int64_t co = w[1] * d.groups;
  Shape out{in[0], co};
  std::vector<std::int64_t> op = d.output_padding;
  if (op.empty()) op.assign(r, 0);
  for (std::size_t a = 0; a < r; ++a) {
    if (w[2 + a] != d.kernel[a]) {
      throw ShapeError("transposed_conv_nd: spatial axis " + std::to_string(a) +
                       ": weight kernel " + std::to_string(w[2 + a]) +
                       " vs descriptor " + std::to_string(d.kernel[a]));
    }
    const std::int64_t e = (in[2 + a] - 1) * d.stride[a] - 2 * d.padding[a] +
                           d.kernel[a] + op[a];
    if (e < 1) {
      throw GeometryError("transposed_conv_nd: spatial axis " + std::to_string(a) +
                          " yields empty output");
    }
    out.push_back(e);
  }
  return out;
}

inline ConvGeom make_geom(const Shape& src, const Shape& dst,
                          const ConvDescriptor& d, std::int64_t c_src,
                          std::int64_t c_dst) {
  ConvGeom g;
  g.n = src[0];
  g.c_src = c_src;
  g.c_dst = c_dst;
  g.groups = d.groups;
  std::vector<std::int64_t> si(src.begin() + 2, src.end());
  std::vector<std::int64_t> so(dst.begin() + 2, dst.end());
  pad_axes(si, g.in, 1);
  pad_axes(so, g.out, 1);
  pad_axes(d.kernel, g.k, 1);
  pad_axes(d.stride, g.s, 1);
  pad_axes(d.padding, g.p, 0);
  return g;
}

// Fused stride-1 row kernels: all kx taps of one (channel, tz, ty) pair are
// applied in a single pass over the row, with the per-element tap order kept
// ascending so results stay bit-identical to the naive per-element loop.
// K is the compile-time kernel extent along x.

template <int K>
inline void fused_row_conv(double* acc, const double* irow, const double* wrow,
                           std::int64_t width, std::int64_t pad) {
  // border columns where some taps fall outside
  auto edge = [&](std::int64_t ox) {
    double a = acc[ox];
    for (std::int64_t tx = 0; tx < K; ++tx) {
      const std::int64_t ix = ox + tx - pad;
      if (ix >= 0 && ix < width) a += wrow[tx] * irow[ix];
    }
    acc[ox] = a;
  };
  const std::int64_t lo = pad;
  const std::int64_t hi = width - (K - 1 - pad);
  if (hi <= lo) {
    for (std::int64_t ox = 0; ox < width; ++ox) edge(ox);
    return;
  }
  for (std::int64_t ox = 0; ox < lo; ++ox) edge(ox);
  const double* base = irow - pad;
#pragma omp simd
  for (std::int64_t ox = lo; ox < hi; ++ox) {
    double a = acc[ox];
    for (int tx = 0; tx < K; ++tx) a += wrow[tx] * base[ox + tx];
    acc[ox] = a;
  }
  for (std::int64_t ox = hi; ox < width; ++ox) edge(ox);
}

inline void fused_row_conv_any(double* acc, const double* irow, const double* wrow,
                               std::int64_t width, std::int64_t pad, std::int64_t k) {
  switch (k) {
    case 1: fused_row_conv<1>(acc, irow, wrow, width, pad); return;
    case 3: fused_row_conv<3>(acc, irow, wrow, width, pad); return;
    case 5: fused_row_conv<5>(acc, irow, wrow, width, pad); return;
    case 7: fused_row_conv<7>(acc, irow, wrow, width, pad); return;
    default:
      for (std::int64_t ox = 0; ox < width; ++ox) {
        double a = acc[ox];
        for (std::int64_t tx = 0; tx < k; ++tx) {
          const std::int64_t ix = ox + tx - pad;
          if (ix >= 0 && ix < width + 0 && ix < width) a += wrow[tx] * irow[ix];
        }
        acc[ox] = a;
      }
  }
}

// correlation form used by the stride-1 scatter: in index is ox + pad - tx
template <int K>
inline void fused_row_corr(double* acc, const double* irow, const double* wrow,
                           std::int64_t out_w, std::int64_t in_w, std::int64_t pad) {
  auto edge = [&](std::int64_t ox) {
    double a = acc[ox];
    for (std::int64_t tx = 0; tx < K; ++tx) {
      const std::int64_t ix = ox + pad - tx;
      if (ix >= 0 && ix < in_w) a += wrow[tx] * irow[ix];
    }
    acc[ox] = a;
  };
  const std::int64_t lo = std::max<std::int64_t>(0, K - 1 - pad);
  const std::int64_t hi = std::min(out_w, in_w - pad);
  if (hi <= lo) {
    for (std::int64_t ox = 0; ox < out_w; ++ox) edge(ox);
    return;
  }
  for (std::int64_t ox = 0; ox < lo; ++ox) edge(ox);
  const double* base = irow + pad;
#pragma omp simd
  for (std::int64_t ox = lo; ox < hi; ++ox) {
    double a = acc[ox];
    for (int tx = 0; tx < K; ++tx) a += wrow[tx] * base[ox - tx];
    acc[ox] = a;
  }
  for (std::int64_t ox = hi; ox < out_w; ++ox) edge(ox);
}

inline void fused_row_corr_any(double* acc, const double* irow, const double* wrow,
                               std::int64_t out_w, std::int64_t in_w, std::int64_t pad,
                               std::int64_t k) {
  switch (k) {
    case 1: fused_row_corr<1>(acc, irow, wrow, out_w, in_w, pad); return;
    case 3: fused_row_corr<3>(acc, irow, wrow, out_w, in_w, pad); return;
    case 5: fused_row_corr<5>(acc, irow, wrow, out_w, in_w, pad); return;
    case 7: fused_row_corr<7>(acc, irow, wrow, out_w, in_w, pad); return;
    default:
      for (std::int64_t ox = 0; ox < out_w; ++ox) {
        double a = acc[ox];
        for (std::int64_t tx = 0; tx < k; ++tx) {
          const std::int64_t ix = ox + pad - tx;
          if (ix >= 0 && ix < in_w) a += wrow[tx] * irow[ix];
        }
        acc[ox] = a;
      }
  }
}

// weight-grad row: one pass accumulating all K tap dots of a row pair
template <int K>
inline void fused_row_wgrad(double* taps, const double* crow, const double* frow,
                            std::int64_t coarse_w, std::int64_t fine_w, std::int64_t pad) {
  double local[K] = {};
  const std::int64_t lo = pad;
  const std::int64_t hi = coarse_w - (K - 1 - pad);
  auto edge = [&](std::int64_t cx) {
    const double c = crow[cx];
    for (std::int64_t tx = 0; tx < K; ++tx) {
      const std::int64_t fx = cx + tx - pad;
      if (fx >= 0 && fx < fine_w) local[tx] += c * frow[fx];
    }
  };
  if (hi <= lo) {
    for (std::int64_t cx = 0; cx < coarse_w; ++cx) edge(cx);
  } else {
    for (std::int64_t cx = 0; cx < lo; ++cx) edge(cx);
    const double* base = frow - pad;
    for (int tx = 0; tx < K; ++tx) {
      double acc = 0.0;
#pragma omp simd reduction(+ : acc)
      for (std::int64_t cx = lo; cx < hi; ++cx) acc += crow[cx] * base[cx + tx];
      local[tx] += acc;
    }
    for (std::int64_t cx = hi; cx < coarse_w; ++cx) edge(cx);
  }
  for (int tx = 0; tx < K; ++tx) taps[tx] += local[tx];
}

inline void fused_row_wgrad_any(double* taps, const double* crow, const double* frow,
                                std::int64_t coarse_w, std::int64_t fine_w, std::int64_t pad,
                                std::int64_t k) {
  switch (k) {
    case 1: fused_row_wgrad<1>(taps, crow, frow, coarse_w, fine_w, pad); return;
    case 3: fused_row_wgrad<3>(taps, crow, frow, coarse_w, fine_w, pad); return;
    case 5: fused_row_wgrad<5>(taps, crow, frow, coarse_w, fine_w, pad); return;
    case 7: fused_row_wgrad<7>(taps, crow, frow, coarse_w, fine_w, pad); return;
    default:
      for (std::int64_t cx = 0; cx < coarse_w; ++cx) {
        const double c = crow[cx];
        for (std::int64_t tx = 0; tx < k; ++tx) {
          const std::int64_t fx = cx + tx - pad;
          if (fx >= 0 && fx < fine_w) taps[tx] += c * frow[fx];
        }
      }
  }
}

// Per-tap x-axis bounds: output positions where o*s + t - p lands inside
// the source extent.
struct TapBounds {
  std::int64_t lo = 0, hi = 0;  // half-open output range
};

inline void tap_bounds_x(const ConvGeom& g, std::vector<TapBounds>& tb) {
  tb.resize(static_cast<std::size_t>(g.k[2]));
  for (std::int64_t tx = 0; tx < g.k[2]; ++tx) {
    tb[static_cast<std::size_t>(tx)].lo = std::max<std::int64_t>(0, div_ceil(g.p[2] - tx, g.s[2]));
    tb[static_cast<std::size_t>(tx)].hi =
        std::min(g.out[2], div_floor(g.in[2] - 1 + g.p[2] - tx, g.s[2]) + 1);
  }
}

// Standard convolution. out is sized [n, c_dst, g.out]; in on g.in grid.
// Weight layout [c_dst, c_src/groups, taps]. bias may be null.
//
// One output row is accumulated at a time so it stays cache-resident; per
// output element the accumulation order is (source channel, tz, ty, tx),
// identical to a naive per-element loop.
inline void conv_gather(Tensor& out, const Tensor& in, const Tensor& w,
                        const double* bias, const ConvGeom& g) {
  const std::int64_t in_sp = g.in[0] * g.in[1] * g.in[2];
  const std::int64_t out_sp = g.out[0] * g.out[1] * g.out[2];
  const std::int64_t cpg_s = g.c_src / g.groups;
  const std::int64_t cpg_d = g.c_dst / g.groups;
  const std::int64_t ktaps = g.k[0] * g.k[1] * g.k[2];
  const double* ib = in.data();
  const double* wb = w.data();
  double* ob = out.data();
  std::vector<TapBounds> tb;
  tap_bounds_x(g, tb);
  std::vector<double> acc(static_cast<std::size_t>(g.out[2]));

  for (std::int64_t n = 0; n < g.n; ++n) {
    for (std::int64_t dc = 0; dc < g.c_dst; ++dc) {
      double* op = ob + (n * g.c_dst + dc) * out_sp;
      const std::int64_t grp = dc / cpg_d;
      const double* in_grp = ib + (n * g.c_src + grp * cpg_s) * in_sp;
      const double* w_dc = wb + dc * cpg_s * ktaps;
      const double bias_v = bias ? bias[dc] : 0.0;
      for (std::int64_t oz = 0; oz < g.out[0]; ++oz) {
        for (std::int64_t oy = 0; oy < g.out[1]; ++oy) {
          std::fill(acc.begin(), acc.end(), bias_v);
          for (std::int64_t scl = 0; scl < cpg_s; ++scl) {
            const double* ip = in_grp + scl * in_sp;
            const double* wp = w_dc + scl * ktaps;
            for (std::int64_t tz = 0; tz < g.k[0]; ++tz) {
              const std::int64_t iz = oz * g.s[0] + tz - g.p[0];
              if (iz < 0 || iz >= g.in[0]) continue;
              for (std::int64_t ty = 0; ty < g.k[1]; ++ty) {
                const std::int64_t iy = oy * g.s[1] + ty - g.p[1];
                if (iy < 0 || iy >= g.in[1]) continue;
                const double* irow = ip + (iz * g.in[1] + iy) * g.in[2];
                const double* wrow = wp + (tz * g.k[1] + ty) * g.k[2];
                if (g.s[2] == 1 && g.out[2] == g.in[2] - g.k[2] + 1 + 2 * g.p[2]) {
                  fused_row_conv_any(acc.data(), irow, wrow, g.in[2], g.p[2], g.k[2]);
                } else {
                  for (std::int64_t tx = 0; tx < g.k[2]; ++tx) {
                    const std::int64_t xlo = tb[static_cast<std::size_t>(tx)].lo;
                    const std::int64_t cnt = tb[static_cast<std::size_t>(tx)].hi - xlo;
                    if (cnt <= 0) continue;
                    const double wv = wrow[tx];
                    const double* src = irow + xlo * g.s[2] + tx - g.p[2];
                    double* dst = acc.data() + xlo;
                    if (g.s[2] == 1) {
#pragma omp simd
                      for (std::int64_t i = 0; i < cnt; ++i) dst[i] += wv * src[i];
                    } else {
                      for (std::int64_t i = 0; i < cnt; ++i) dst[i] += wv * src[i * g.s[2]];
                    }
                  }
                }
              }
            }
          }
          std::copy(acc.begin(), acc.end(), op + (oz * g.out[1] + oy) * g.out[2]);
        }
      }
    }
  }
}

// Transposed convolution / conv input-grad. Destination index is
// src_pos*s + t - p. in on g.in grid (source), out sized [n, c_dst, g.out].
// Weight layout [c_src, c_dst/groups, taps]. bias may be null.
inline void conv_scatter(Tensor& out, const Tensor& in, const Tensor& w,
                         const double* bias, const ConvGeom& g) {
  const std::int64_t in_sp = g.in[0] * g.in[1] * g.in[2];
  const std::int64_t out_sp = g.out[0] * g.out[1] * g.out[2];
  const std::int64_t cpg_s = g.c_src / g.groups;
  const std::int64_t cpg_d = g.c_dst / g.groups;
  const std::int64_t ktaps = g.k[0] * g.k[1] * g.k[2];
  const double* ib = in.data();
  const double* wb = w.data();
  double* ob = out.data();

  if (g.s[0] == 1 && g.s[1] == 1 && g.s[2] == 1) {
    // gather form: out[o] += w[t] * in[o + p - t]; same per-element
    // accumulation order (source channel, then taps) as the scatter below
    std::vector<double> acc(static_cast<std::size_t>(g.out[2]));
    for (std::int64_t n = 0; n < g.n; ++n) {
      for (std::int64_t dc = 0; dc < g.c_dst; ++dc) {
        double* op = ob + (n * g.c_dst + dc) * out_sp;
        const std::int64_t grp = dc / cpg_d;
        const std::int64_t dcl = dc - grp * cpg_d;
        const double* in_grp = ib + (n * g.c_src + grp * cpg_s) * in_sp;
        const double bias_v = bias ? bias[dc] : 0.0;
        for (std::int64_t oz = 0; oz < g.out[0]; ++oz) {
          for (std::int64_t oy = 0; oy < g.out[1]; ++oy) {
            std::fill(acc.begin(), acc.end(), bias_v);
            for (std::int64_t scl = 0; scl < cpg_s; ++scl) {
              const double* ip = in_grp + scl * in_sp;
              const double* wp = wb + ((grp * cpg_s + scl) * cpg_d + dcl) * ktaps;
              for (std::int64_t tz = 0; tz < g.k[0]; ++tz) {
                const std::int64_t iz = oz + g.p[0] - tz;
                if (iz < 0 || iz >= g.in[0]) continue;
                for (std::int64_t ty = 0; ty < g.k[1]; ++ty) {
                  const std::int64_t iy = oy + g.p[1] - ty;
                  if (iy < 0 || iy >= g.in[1]) continue;
                  const double* irow = ip + (iz * g.in[1] + iy) * g.in[2];
                  const double* wrow = wp + (tz * g.k[1] + ty) * g.k[2];
                  fused_row_corr_any(acc.data(), irow, wrow, g.out[2], g.in[2], g.p[2],
                                     g.k[2]);
                }
              }
            }
            std::copy(acc.begin(), acc.end(), op + (oz * g.out[1] + oy) * g.out[2]);
          }
        }
      }
    }
    return;
  }

  for (std::int64_t n = 0; n < g.n; ++n) {
    for (std::int64_t dc = 0; dc < g.c_dst; ++dc) {
      double* op = ob + (n * g.c_dst + dc) * out_sp;
      std::fill(op, op + out_sp, bias ? bias[dc] : 0.0);
    }
    for (std::int64_t sc = 0; sc < g.c_src; ++sc) {
      const std::int64_t grp = sc / cpg_s;
      const double* ip = ib + (n * g.c_src + sc) * in_sp;
      for (std::int64_t dcl = 0; dcl < cpg_d; ++dcl) {
        const std::int64_t dc = grp * cpg_d + dcl;
        double* op = ob + (n * g.c_dst + dc) * out_sp;
        const double* wp = wb + (sc * cpg_d + dcl) * ktaps;
        for (std::int64_t tz = 0; tz < g.k[0]; ++tz) {
          const std::int64_t zlo = std::max<std::int64_t>(0, div_ceil(g.p[0] - tz, g.s[0]));
          const std::int64_t zhi = std::min(g.in[0], div_floor(g.out[0] - 1 + g.p[0] - tz, g.s[0]) + 1);
          for (std::int64_t ty = 0; ty < g.k[1]; ++ty) {
            const std::int64_t ylo = std::max<std::int64_t>(0, div_ceil(g.p[1] - ty, g.s[1]));
            const std::int64_t yhi = std::min(g.in[1], div_floor(g.out[1] - 1 + g.p[1] - ty, g.s[1]) + 1);
            for (std::int64_t tx = 0; tx < g.k[2]; ++tx) {
              const double wv = wp[(tz * g.k[1] + ty) * g.k[2] + tx];
              const std::int64_t xlo = std::max<std::int64_t>(0, div_ceil(g.p[2] - tx, g.s[2]));
              const std::int64_t xhi = std::min(g.in[2], div_floor(g.out[2] - 1 + g.p[2] - tx, g.s[2]) + 1);
              if (xhi <= xlo) continue;
              for (std::int64_t iz = zlo; iz < zhi; ++iz) {
                const std::int64_t oz = iz * g.s[0] + tz - g.p[0];
                for (std::int64_t iy = ylo; iy < yhi; ++iy) {
                  const std::int64_t oy = iy * g.s[1] + ty - g.p[1];
                  const double* irow = ip + (iz * g.in[1] + iy) * g.in[2];
                  double* orow =
                      op + (oz * g.out[1] + oy) * g.out[2] + (xlo * g.s[2] + tx - g.p[2]);
                  const std::int64_t cnt = xhi - xlo;
                  if (g.s[2] == 1) {
#pragma omp simd
                    for (std::int64_t i = 0; i < cnt; ++i) {
                      orow[i] += wv * irow[xlo + i];
                    }
                  } else {
                    for (std::int64_t i = 0; i < cnt; ++i) {
                      orow[i * g.s[2]] += wv * irow[xlo + i];
                    }
                  }
                }
              }
            }
          }
        }
      }
    }
  }
}

// Weight gradient. coarse on g.out grid (channels c_dst role), fine on g.in
// grid (channels c_src role); wg [c_dst, c_src/groups, taps], accumulated.
// Taps are accumulated in small local buffers so each plane streams once.
inline void conv_weight_grad(Tensor& wg, const Tensor& coarse, const Tensor& fine,
                             const ConvGeom& g) {
  const std::int64_t fine_sp = g.in[0] * g.in[1] * g.in[2];
  const std::int64_t coarse_sp = g.out[0] * g.out[1] * g.out[2];
  const std::int64_t cpg_f = g.c_src / g.groups;
  const std::int64_t cpg_c = g.c_dst / g.groups;
  const std::int64_t ktaps = g.k[0] * g.k[1] * g.k[2];
  const double* cb = coarse.data();
  const double* fb = fine.data();
  double* wb = wg.data();
  std::vector<TapBounds> tb;
  tap_bounds_x(g, tb);
  std::vector<double> tap_acc(static_cast<std::size_t>(ktaps));

  for (std::int64_t n = 0; n < g.n; ++n) {
    for (std::int64_t cc = 0; cc < g.c_dst; ++cc) {
      const std::int64_t grp = cc / cpg_c;
      const double* cp = cb + (n * g.c_dst + cc) * coarse_sp;
      for (std::int64_t fcl = 0; fcl < cpg_f; ++fcl) {
        const std::int64_t fc = grp * cpg_f + fcl;
        const double* fp = fb + (n * g.c_src + fc) * fine_sp;
        std::fill(tap_acc.begin(), tap_acc.end(), 0.0);
        for (std::int64_t cz = 0; cz < g.out[0]; ++cz) {
          for (std::int64_t cy = 0; cy < g.out[1]; ++cy) {
            const double* crow = cp + (cz * g.out[1] + cy) * g.out[2];
            for (std::int64_t tz = 0; tz < g.k[0]; ++tz) {
              const std::int64_t fz = cz * g.s[0] + tz - g.p[0];
              if (fz < 0 || fz >= g.in[0]) continue;
              for (std::int64_t ty = 0; ty < g.k[1]; ++ty) {
                const std::int64_t fy = cy * g.s[1] + ty - g.p[1];
                if (fy < 0 || fy >= g.in[1]) continue;
                const double* frow = fp + (fz * g.in[1] + fy) * g.in[2];
                double* arow = tap_acc.data() + (tz * g.k[1] + ty) * g.k[2];
                if (g.s[2] == 1) {
                  fused_row_wgrad_any(arow, crow, frow, g.out[2], g.in[2], g.p[2], g.k[2]);
                } else {
                  for (std::int64_t tx = 0; tx < g.k[2]; ++tx) {
                    const std::int64_t xlo = tb[static_cast<std::size_t>(tx)].lo;
                    const std::int64_t cnt = tb[static_cast<std::size_t>(tx)].hi - xlo;
                    if (cnt <= 0) continue;
                    const double* ca = crow + xlo;
                    const double* fa = frow + xlo * g.s[2] + tx - g.p[2];
                    double acc = 0.0;
                    for (std::int64_t i = 0; i < cnt; ++i) acc += ca[i] * fa[i * g.s[2]];
                    arow[tx] += acc;
                  }
                }
              }
            }
          }
        }
        double* wrow = wb + (cc * cpg_f + fcl) * ktaps;
        for (std::int64_t t = 0; t < ktaps; ++t) wrow[t] += tap_acc[static_cast<std::size_t>(t)];
      }
    }
  }
}

// Per-destination-channel sums of a gradient tensor (bias gradient).
inline std::vector<double> channel_sums(const Tensor& t) {
  const std::int64_t n = t.dim(0), c = t.dim(1);
  const std::int64_t sp = spatial_numel(t.shape());
  std::vector<double> sums(static_cast<std::size_t>(c), 0.0);
  const double* p = t.data();
  for (std::int64_t in = 0; in < n; ++in) {
    for (std::int64_t ic = 0; ic < c; ++ic) {
      double acc = 0.0;
      const double* row = p + (in * c + ic) * sp;
      for (std::int64_t i = 0; i < sp; ++i) acc += row[i];
      sums[static_cast<std::size_t>(ic)] += acc;
    }
  }
  return sums;
}

}  // namespace detail

// ---- plain (non-recorded) forward entry points ----

inline Tensor conv_forward(const Tensor& in, const Tensor& w,
                           const Tensor* bias, const ConvDescriptor& d) {
  const Shape os = detail::conv_output_shape(in.shape(), w.shape(), d);
  if (bias && bias->size() != w.dim(0)) {
    throw ShapeError("conv_nd: bias has " + std::to_string(bias->size()) +
                     " entries, expected " + std::to_string(w.dim(0)));
  }
  Tensor out(os);
  const auto g = detail::make_geom(in.shape(), os, d, in.dim(1), w.dim(0));
  detail::conv_gather(out, in, w, bias ? bias->data() : nullptr, g);
  return out;
}

inline Tensor transposed_conv_forward(const Tensor& in, const Tensor& w,
                                      const Tensor* bias,
                                      const ConvDescriptor& d) {
  const Shape os = detail::transposed_output_shape(in.shape(), w.shape(), d);
  const std::int64_t co = os[1];
  if (bias && bias->size() != co) {
    throw ShapeError("transposed_conv_nd: bias has " + std::to_string(bias->size()) +
                     " entries, expected " + std::to_string(co));
  }
  Tensor out(os);
  // source grid = input (coarse), destination grid = output (fine)
  const auto g = detail::make_geom(in.shape(), os, d, in.dim(1), co);
  detail::conv_scatter(out, in, w, bias ? bias->data() : nullptr, g);
  return out;
}

}  // namespace dmc
