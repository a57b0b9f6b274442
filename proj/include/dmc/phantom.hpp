#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "dmc/rng.hpp"
#include "dmc/volume.hpp"

// Synthetic volumes standing in for abdominal CT cases: a Gaussian-noise
// background, one rotated, scaled, boundary-perturbed ellipsoid organ
// (class 1) occupying 0.5-3% of the volume, and optionally an embedded
// tumor blob (class 2) with distinct intensity. Fully determined by seed.

namespace dmc {

namespace detail {

struct Ellipsoid {
  std::array<double, 3> center;
  std::array<double, 3> semi;              // semi-axes in voxels
  std::array<std::array<double, 3>, 3> rot;  // row-major rotation
  // low-frequency radial perturbation: sum of cosine harmonics on the sphere
  struct Harmonic {
    std::array<double, 3> dir;
    double freq;
    double amp;
    double phase;
  };
  std::vector<Harmonic> harmonics;

  double radial_bump(const std::array<double, 3>& u) const {
    double b = 0.0;
    for (const Harmonic& h : harmonics) {
      const double d = h.dir[0] * u[0] + h.dir[1] * u[1] + h.dir[2] * u[2];
      b += h.amp * std::cos(h.freq * d + h.phase);
    }
    return b;
  }

  bool contains(double x0, double x1, double x2) const {
    const double d0 = x0 - center[0], d1 = x1 - center[1], d2 = x2 - center[2];
    std::array<double, 3> y;
    for (int r = 0; r < 3; ++r) y[static_cast<std::size_t>(r)] = rot[static_cast<std::size_t>(r)][0] * d0 + rot[static_cast<std::size_t>(r)][1] * d1 + rot[static_cast<std::size_t>(r)][2] * d2;
    const double n0 = y[0] / semi[0], n1 = y[1] / semi[1], n2 = y[2] / semi[2];
    const double rho = std::sqrt(n0 * n0 + n1 * n1 + n2 * n2);
    if (rho < 1e-9) return true;
    const std::array<double, 3> u{n0 / rho, n1 / rho, n2 / rho};
    return rho <= 1.0 + radial_bump(u);
  }
};

inline std::array<std::array<double, 3>, 3> random_rotation(Rng& rng) {
  const double a = rng.uniform(0.0, 3.141592653589793);
  const double b = rng.uniform(0.0, 3.141592653589793);
  const double c = rng.uniform(0.0, 3.141592653589793);
  const double ca = std::cos(a), sa = std::sin(a);
  const double cb = std::cos(b), sb = std::sin(b);
  const double cc = std::cos(c), sc = std::sin(c);
  // Rz(a) * Ry(b) * Rx(c)
  return {{{ca * cb, ca * sb * sc - sa * cc, ca * sb * cc + sa * sc},
           {sa * cb, sa * sb * sc + ca * cc, sa * sb * cc - ca * sc},
           {-sb, cb * sc, cb * cc}}};
}

inline Ellipsoid make_organ(Rng& rng, const Shape& size, double frac_lo, double frac_hi,
                            double bump_total) {
  Ellipsoid e;
  const double n = static_cast<double>(numel(size));
  const double frac = rng.uniform(frac_lo, frac_hi);
  const double u1 = rng.uniform(0.7, 1.3);
  const double u2 = rng.uniform(0.7, 1.3);
  const double u3 = rng.uniform(0.7, 1.3);
  const double r3 = 3.0 * frac * n / (4.0 * 3.141592653589793 * u1 * u2 * u3);
  const double r = std::cbrt(r3);
  e.semi = {r * u1, r * u2, r * u3};
  for (int a = 0; a < 3; ++a) {
    const double half = static_cast<double>(size[static_cast<std::size_t>(a)]) / 2.0;
    e.center[static_cast<std::size_t>(a)] = half + rng.uniform(-0.08, 0.08) * 2.0 * half;
  }
  e.rot = random_rotation(rng);
  const int k = 6;
  std::vector<double> amps;
  double total = 0.0;
  for (int i = 0; i < k; ++i) {
    amps.push_back(rng.uniform(-1.0, 1.0));
    total += std::fabs(amps.back());
  }
  for (int i = 0; i < k; ++i) {
    Ellipsoid::Harmonic h;
    double v0 = rng.normal(), v1 = rng.normal(), v2 = rng.normal();
    const double nn = std::sqrt(v0 * v0 + v1 * v1 + v2 * v2) + 1e-12;
    h.dir = {v0 / nn, v1 / nn, v2 / nn};
    h.freq = 2.0 + rng.uniform_int(3);
    h.amp = amps[static_cast<std::size_t>(i)] / total * bump_total;
    h.phase = rng.uniform(0.0, 6.283185307179586);
    e.harmonics.push_back(h);
  }
  return e;
}

}  // namespace detail

// size: three spatial extents (through-plane last), each >= 32
inline VolumeSample synth_phantom(std::uint64_t seed, const Shape& size,
                                  std::vector<double> spacing = {1.0, 1.0, 1.0},
                                  bool with_tumor = false) {
  if (size.size() != 3) throw ConfigError("synth_phantom: size must have 3 axes");
  for (auto e : size) {
    if (e < 32) throw ConfigError("synth_phantom: each axis must be >= 32");
  }
  Rng rng(seed);
  VolumeSample s;
  s.shape = size;
  s.spacing = std::move(spacing);
  const std::int64_t n = numel(size);
  s.image.resize(static_cast<std::size_t>(n));
  s.label.assign(static_cast<std::size_t>(n), 0);

  detail::Ellipsoid organ = detail::make_organ(rng, size, 0.010, 0.017, 0.10);
  detail::Ellipsoid tumor;
  if (with_tumor) {
    tumor = organ;
    for (auto& a : tumor.semi) a *= rng.uniform(0.30, 0.45);
    for (int a = 0; a < 3; ++a) {
      tumor.center[static_cast<std::size_t>(a)] +=
          rng.uniform(-0.3, 0.3) * organ.semi[static_cast<std::size_t>(a)];
    }
    tumor.rot = detail::random_rotation(rng);
    tumor.harmonics.clear();
  }

  const double organ_shift = rng.uniform(0.20, 0.30);
  const double tumor_shift = rng.uniform(0.20, 0.30);
  std::int64_t idx = 0;
  for (std::int64_t i0 = 0; i0 < size[0]; ++i0) {
    for (std::int64_t i1 = 0; i1 < size[1]; ++i1) {
      for (std::int64_t i2 = 0; i2 < size[2]; ++i2, ++idx) {
        const double x0 = static_cast<double>(i0) + 0.5;
        const double x1 = static_cast<double>(i1) + 0.5;
        const double x2 = static_cast<double>(i2) + 0.5;
        double v = 0.30 + 0.06 * rng.normal();
        std::uint8_t lab = 0;
        if (organ.contains(x0, x1, x2)) {
          lab = 1;
          v += organ_shift;
          if (with_tumor && tumor.contains(x0, x1, x2)) {
            lab = 2;
            v += tumor_shift;
          }
        }
        if (v < 0.0) v = 0.0;
        if (v > 1.0) v = 1.0;
        s.image[static_cast<std::size_t>(idx)] = static_cast<float>(v);
        s.label[static_cast<std::size_t>(idx)] = lab;
      }
    }
  }
  return s;
}

inline double foreground_fraction(const VolumeSample& s) {
  std::int64_t fg = 0;
  for (std::uint8_t v : s.label) fg += v > 0 ? 1 : 0;
  return static_cast<double>(fg) / static_cast<double>(s.voxels());
}

}  // namespace dmc
