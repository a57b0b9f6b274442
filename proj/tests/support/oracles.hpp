#pragma once

// Test-side reference implementations, written independently of the library
// kernels: everything here is a direct per-element transcription of the
// operation's definition.

#include <array>
#include <cstdint>
#include <vector>

#include "dmc/conv.hpp"
#include "dmc/rng.hpp"
#include "dmc/tensor.hpp"

namespace oracle {

using dmc::ConvDescriptor;
using dmc::Rng;
using dmc::Shape;
using dmc::Tensor;

inline Tensor random_tensor(const Shape& s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(s);
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

struct Axes3 {
  std::array<std::int64_t, 3> v{1, 1, 1};
  std::int64_t operator[](int i) const { return v[static_cast<std::size_t>(i)]; }
};

inline Axes3 axes3(const std::vector<std::int64_t>& a, std::int64_t fill = 1) {
  Axes3 r;
  r.v = {fill, fill, fill};
  const std::size_t off = 3 - a.size();
  for (std::size_t i = 0; i < a.size(); ++i) r.v[off + i] = a[i];
  return r;
}

inline Axes3 spatial3(const Shape& s) {
  return axes3(std::vector<std::int64_t>(s.begin() + 2, s.end()));
}

// Standard convolution, one output element at a time.
inline Tensor naive_conv(const Tensor& in, const Tensor& w, const Tensor* bias,
                         const ConvDescriptor& d) {
  const std::int64_t N = in.dim(0), Ci = in.dim(1), Co = w.dim(0);
  const Axes3 D = spatial3(in.shape());
  const Axes3 K = axes3(d.kernel), S = axes3(d.stride);
  const Axes3 P = axes3(d.padding, 0);
  Axes3 O;
  for (int a = 0; a < 3; ++a) {
    O.v[static_cast<std::size_t>(a)] = (D[a] + 2 * P[a] - K[a]) / S[a] + 1;
  }
  const std::int64_t cpg_i = Ci / d.groups, cpg_o = Co / d.groups;
  Shape os{N, Co};
  for (std::size_t a = 3 - (in.shape().size() - 2); a < 3; ++a) os.push_back(O[static_cast<int>(a)]);
  Tensor out(os);
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t oc = 0; oc < Co; ++oc) {
      const std::int64_t grp = oc / cpg_o;
      for (std::int64_t oz = 0; oz < O[0]; ++oz)
        for (std::int64_t oy = 0; oy < O[1]; ++oy)
          for (std::int64_t ox = 0; ox < O[2]; ++ox) {
            double acc = bias ? (*bias)[oc] : 0.0;
            for (std::int64_t icl = 0; icl < cpg_i; ++icl) {
              const std::int64_t ic = grp * cpg_i + icl;
              for (std::int64_t tz = 0; tz < K[0]; ++tz)
                for (std::int64_t ty = 0; ty < K[1]; ++ty)
                  for (std::int64_t tx = 0; tx < K[2]; ++tx) {
                    const std::int64_t iz = oz * S[0] + tz - P[0];
                    const std::int64_t iy = oy * S[1] + ty - P[1];
                    const std::int64_t ix = ox * S[2] + tx - P[2];
                    if (iz < 0 || iz >= D[0] || iy < 0 || iy >= D[1] || ix < 0 || ix >= D[2])
                      continue;
                    const double wv =
                        w[((oc * cpg_i + icl) * K[0] + tz) * K[1] * K[2] + ty * K[2] + tx];
                    const double xv = in[((n * Ci + ic) * D[0] + iz) * D[1] * D[2] + iy * D[2] + ix];
                    acc += wv * xv;
                  }
            }
            out[((n * Co + oc) * O[0] + oz) * O[1] * O[2] + oy * O[2] + ox] = acc;
          }
    }
  return out;
}

// Transposed convolution, gathered at each output element: input position i
// contributes to output o when o == i*s + t - p.
inline Tensor naive_transposed_conv(const Tensor& in, const Tensor& w, const Tensor* bias,
                                    const ConvDescriptor& d) {
  const std::int64_t N = in.dim(0), Ci = in.dim(1);
  const std::int64_t Co = w.dim(1) * d.groups;
  const Axes3 D = spatial3(in.shape());
  const Axes3 K = axes3(d.kernel), S = axes3(d.stride);
  const Axes3 P = axes3(d.padding, 0);
  const Axes3 OP = axes3(d.output_padding.empty()
                             ? std::vector<std::int64_t>(d.kernel.size(), 0)
                             : d.output_padding,
                         0);
  Axes3 O;
  for (int a = 0; a < 3; ++a) {
    O.v[static_cast<std::size_t>(a)] = (D[a] - 1) * S[a] - 2 * P[a] + K[a] + OP[a];
  }
  const std::int64_t cpg_i = Ci / d.groups, cpg_o = Co / d.groups;
  Shape os{N, Co};
  for (std::size_t a = 3 - (in.shape().size() - 2); a < 3; ++a) os.push_back(O[static_cast<int>(a)]);
  Tensor out(os);
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t oc = 0; oc < Co; ++oc) {
      const std::int64_t grp = oc / cpg_o;
      const std::int64_t ocl = oc % cpg_o;
      for (std::int64_t oz = 0; oz < O[0]; ++oz)
        for (std::int64_t oy = 0; oy < O[1]; ++oy)
          for (std::int64_t ox = 0; ox < O[2]; ++ox) {
            double acc = bias ? (*bias)[oc] : 0.0;
            for (std::int64_t icl = 0; icl < cpg_i; ++icl) {
              const std::int64_t ic = grp * cpg_i + icl;
              for (std::int64_t tz = 0; tz < K[0]; ++tz)
                for (std::int64_t ty = 0; ty < K[1]; ++ty)
                  for (std::int64_t tx = 0; tx < K[2]; ++tx) {
                    const std::int64_t nz = oz + P[0] - tz;
                    const std::int64_t ny = oy + P[1] - ty;
                    const std::int64_t nx = ox + P[2] - tx;
                    if (nz % S[0] || ny % S[1] || nx % S[2]) continue;
                    if (nz < 0 || ny < 0 || nx < 0) continue;
                    const std::int64_t iz = nz / S[0], iy = ny / S[1], ix = nx / S[2];
                    if (iz >= D[0] || iy >= D[1] || ix >= D[2]) continue;
                    const double wv =
                        w[((ic * cpg_o + ocl) * K[0] + tz) * K[1] * K[2] + ty * K[2] + tx];
                    const double xv = in[((n * Ci + ic) * D[0] + iz) * D[1] * D[2] + iy * D[2] + ix];
                    acc += wv * xv;
                  }
            }
            out[((n * Co + oc) * O[0] + oz) * O[1] * O[2] + oy * O[2] + ox] = acc;
          }
    }
  return out;
}

enum class PoolKind { kAvg, kMax };

inline Tensor naive_pool(const Tensor& in, PoolKind kind,
                         const std::vector<std::int64_t>& filter,
                         const std::vector<std::int64_t>& stride) {
  const std::int64_t N = in.dim(0), C = in.dim(1);
  const Axes3 D = spatial3(in.shape());
  const Axes3 F = axes3(filter), S = axes3(stride);
  Axes3 O;
  for (int a = 0; a < 3; ++a) O.v[static_cast<std::size_t>(a)] = (D[a] - F[a]) / S[a] + 1;
  Shape os{N, C};
  for (std::size_t a = 3 - (in.shape().size() - 2); a < 3; ++a) os.push_back(O[static_cast<int>(a)]);
  Tensor out(os);
  const double wn = 1.0 / static_cast<double>(F[0] * F[1] * F[2]);
  for (std::int64_t nc = 0; nc < N * C; ++nc)
    for (std::int64_t oz = 0; oz < O[0]; ++oz)
      for (std::int64_t oy = 0; oy < O[1]; ++oy)
        for (std::int64_t ox = 0; ox < O[2]; ++ox) {
          double acc = kind == PoolKind::kAvg ? 0.0 : -1e300;
          for (std::int64_t fz = 0; fz < F[0]; ++fz)
            for (std::int64_t fy = 0; fy < F[1]; ++fy)
              for (std::int64_t fx = 0; fx < F[2]; ++fx) {
                const double v = in[(nc * D[0] + oz * S[0] + fz) * D[1] * D[2] +
                                    (oy * S[1] + fy) * D[2] + ox * S[2] + fx];
                if (kind == PoolKind::kAvg) {
                  acc += v;
                } else if (v > acc) {
                  acc = v;
                }
              }
          out[(nc * O[0] + oz) * O[1] * O[2] + oy * O[2] + ox] =
              kind == PoolKind::kAvg ? acc * wn : acc;
        }
  return out;
}

inline Tensor naive_upsample_nearest(const Tensor& in, const std::vector<std::int64_t>& factor) {
  const std::int64_t N = in.dim(0), C = in.dim(1);
  const Axes3 D = spatial3(in.shape());
  const Axes3 F = axes3(factor);
  const Axes3 O{{D[0] * F[0], D[1] * F[1], D[2] * F[2]}};
  Shape os{N, C};
  for (std::size_t a = 3 - (in.shape().size() - 2); a < 3; ++a) os.push_back(O[static_cast<int>(a)]);
  Tensor out(os);
  for (std::int64_t nc = 0; nc < N * C; ++nc)
    for (std::int64_t oz = 0; oz < O[0]; ++oz)
      for (std::int64_t oy = 0; oy < O[1]; ++oy)
        for (std::int64_t ox = 0; ox < O[2]; ++ox)
          out[(nc * O[0] + oz) * O[1] * O[2] + oy * O[2] + ox] =
              in[(nc * D[0] + oz / F[0]) * D[1] * D[2] + (oy / F[1]) * D[2] + ox / F[2]];
  return out;
}

inline Tensor naive_global_avg_pool(const Tensor& in) {
  const std::int64_t N = in.dim(0), C = in.dim(1);
  std::int64_t sp = 1;
  for (int i = 2; i < in.rank(); ++i) sp *= in.dim(i);
  Shape os{N, C};
  for (int i = 2; i < in.rank(); ++i) os.push_back(1);
  Tensor out(os);
  for (std::int64_t nc = 0; nc < N * C; ++nc) {
    double acc = 0.0;
    for (std::int64_t i = 0; i < sp; ++i) acc += in[nc * sp + i];
    out[nc] = acc / static_cast<double>(sp);
  }
  return out;
}

inline Tensor map_sigmoid(const Tensor& in) {
  Tensor out(in.shape());
  for (std::int64_t i = 0; i < in.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-in[i]));
  return out;
}

// elementwise with channel broadcast when b has all-ones spatial extents
inline Tensor ew(const Tensor& a, const Tensor& b, char op) {
  Tensor out(a.shape());
  std::int64_t sp = 1;
  for (int i = 2; i < a.rank(); ++i) sp *= a.dim(i);
  const bool bcast = b.size() == a.dim(0) * a.dim(1);
  for (std::int64_t j = 0; j < a.dim(0) * a.dim(1); ++j)
    for (std::int64_t i = 0; i < sp; ++i) {
      const double bv = bcast ? b[j] : b[j * sp + i];
      out[j * sp + i] = op == '*' ? a[j * sp + i] * bv : a[j * sp + i] + bv;
    }
  return out;
}

inline Tensor concat_ch(const Tensor& a, const Tensor& b) {
  std::int64_t sp = 1;
  for (int i = 2; i < a.rank(); ++i) sp *= a.dim(i);
  Shape os = a.shape();
  os[1] = a.dim(1) + b.dim(1);
  Tensor out(os);
  for (std::int64_t n = 0; n < a.dim(0); ++n) {
    for (std::int64_t i = 0; i < a.dim(1) * sp; ++i) out[n * os[1] * sp + i] = a[n * a.dim(1) * sp + i];
    for (std::int64_t i = 0; i < b.dim(1) * sp; ++i)
      out[n * os[1] * sp + a.dim(1) * sp + i] = b[n * b.dim(1) * sp + i];
  }
  return out;
}

}  // namespace oracle
