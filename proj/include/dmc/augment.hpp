#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "dmc/preprocess.hpp"
#include "dmc/rng.hpp"
#include "dmc/volume.hpp"

// Training-time augmentation, applied in a fixed order with all randomness
// drawn from the caller's stream: combined rotation+scaling (one resample),
// per-axis mirroring, additive Gaussian noise, Gaussian blur, brightness
// shift and contrast scaling. Spatial transforms sample with clamp-to-edge
// (trilinear for the image, nearest for the label), so augmented labels can
// only contain values present in the input.

namespace dmc {

struct AugmentationConfig {
  bool enabled = true;
  double rotate_deg = 30.0;             // each angle drawn from [-30, 30]
  double scale_lo = 0.7, scale_hi = 1.4;
  double rot_scale_prob = 0.2;
  double mirror_prob = 0.5;             // per axis
  double noise_var_hi = 0.1;            // variance ~ U(0, 0.1)
  double noise_prob = 0.15;
  double blur_sigma_lo = 0.5, blur_sigma_hi = 1.5;
  double blur_prob = 0.2;
  double brightness_shift = 0.1;        // shift ~ U(-0.1, 0.1)
  double brightness_prob = 0.15;
  double contrast_lo = 0.75, contrast_hi = 1.25;
  double contrast_prob = 0.15;
};

namespace detail {

// output voxel -> input coordinates through the inverse of (rotate * scale)
inline void rotate_scale(VolumeSample& s, const std::vector<double>& angles_rad,
                         double scale) {
  const std::size_t rank = s.shape.size();
  const auto e = ext3(s.shape);
  std::array<std::array<double, 3>, 3> rot{{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}};
  if (rank == 2) {
    const double c = std::cos(angles_rad[0]), sn = std::sin(angles_rad[0]);
    rot = {{{1, 0, 0}, {0, c, -sn}, {0, sn, c}}};
  } else {
    const double c0 = std::cos(angles_rad[0]), s0 = std::sin(angles_rad[0]);
    const double c1 = std::cos(angles_rad[1]), s1 = std::sin(angles_rad[1]);
    const double c2 = std::cos(angles_rad[2]), s2 = std::sin(angles_rad[2]);
    rot = {{{c0 * c1, c0 * s1 * s2 - s0 * c2, c0 * s1 * c2 + s0 * s2},
            {s0 * c1, s0 * s1 * s2 + c0 * c2, s0 * s1 * c2 - c0 * s2},
            {-s1, c1 * s2, c1 * c2}}};
  }
  // inverse map: rot^T / scale
  const double inv = 1.0 / scale;
  GridSampler img{s.image.data(), e};
  LabelSampler lab{s.has_label() ? s.label.data() : nullptr, e};
  std::vector<float> image(s.image.size());
  std::vector<std::uint8_t> label(s.label.size());
  const std::array<double, 3> center{static_cast<double>(e[0] - 1) / 2.0,
                                     static_cast<double>(e[1] - 1) / 2.0,
                                     static_cast<double>(e[2] - 1) / 2.0};
  std::int64_t idx = 0;
  for (std::int64_t o0 = 0; o0 < e[0]; ++o0) {
    for (std::int64_t o1 = 0; o1 < e[1]; ++o1) {
      for (std::int64_t o2 = 0; o2 < e[2]; ++o2, ++idx) {
        const double d0 = static_cast<double>(o0) - center[0];
        const double d1 = static_cast<double>(o1) - center[1];
        const double d2 = static_cast<double>(o2) - center[2];
        const double x0 = center[0] + inv * (rot[0][0] * d0 + rot[1][0] * d1 + rot[2][0] * d2);
        const double x1 = center[1] + inv * (rot[0][1] * d0 + rot[1][1] * d1 + rot[2][1] * d2);
        const double x2 = center[2] + inv * (rot[0][2] * d0 + rot[1][2] * d1 + rot[2][2] * d2);
        image[static_cast<std::size_t>(idx)] = static_cast<float>(img.trilinear(x0, x1, x2));
        if (s.has_label()) label[static_cast<std::size_t>(idx)] = lab.nearest(x0, x1, x2);
      }
    }
  }
  s.image = std::move(image);
  if (s.has_label()) s.label = std::move(label);
}

inline void mirror_axis(VolumeSample& s, std::size_t axis) {
  const auto e = ext3(s.shape);
  const std::size_t off = 3 - s.shape.size();
  const std::size_t a3 = axis + off;
  std::int64_t idx = 0;
  auto flipped = [&](std::int64_t i0, std::int64_t i1, std::int64_t i2) {
    std::array<std::int64_t, 3> c{i0, i1, i2};
    c[a3] = e[a3] - 1 - c[a3];
    return (c[0] * e[1] + c[1]) * e[2] + c[2];
  };
  std::vector<float> image(s.image.size());
  std::vector<std::uint8_t> label(s.label.size());
  for (std::int64_t i0 = 0; i0 < e[0]; ++i0)
    for (std::int64_t i1 = 0; i1 < e[1]; ++i1)
      for (std::int64_t i2 = 0; i2 < e[2]; ++i2, ++idx) {
        const std::int64_t src = flipped(i0, i1, i2);
        image[static_cast<std::size_t>(idx)] = s.image[static_cast<std::size_t>(src)];
        if (s.has_label())
          label[static_cast<std::size_t>(idx)] = s.label[static_cast<std::size_t>(src)];
      }
  s.image = std::move(image);
  if (s.has_label()) s.label = std::move(label);
}

inline void gaussian_blur(VolumeSample& s, double sigma) {
  const auto e = ext3(s.shape);
  const std::int64_t radius = std::max<std::int64_t>(1, static_cast<std::int64_t>(std::ceil(3.0 * sigma)));
  std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
  double sum = 0.0;
  for (std::int64_t i = -radius; i <= radius; ++i) {
    const double w = std::exp(-0.5 * (static_cast<double>(i) / sigma) * (static_cast<double>(i) / sigma));
    kernel[static_cast<std::size_t>(i + radius)] = w;
    sum += w;
  }
  for (double& w : kernel) w /= sum;

  const std::size_t off = 3 - s.shape.size();
  std::vector<float> tmp(s.image.size());
  for (std::size_t axis = off; axis < 3; ++axis) {
    std::array<std::int64_t, 3> stride{e[1] * e[2], e[2], 1};
    std::int64_t idx = 0;
    for (std::int64_t i0 = 0; i0 < e[0]; ++i0)
      for (std::int64_t i1 = 0; i1 < e[1]; ++i1)
        for (std::int64_t i2 = 0; i2 < e[2]; ++i2, ++idx) {
          const std::array<std::int64_t, 3> c{i0, i1, i2};
          double acc = 0.0;
          for (std::int64_t k = -radius; k <= radius; ++k) {
            const std::int64_t p = std::clamp<std::int64_t>(c[axis] + k, 0, e[axis] - 1);
            const std::int64_t src = idx + (p - c[axis]) * stride[axis];
            acc += kernel[static_cast<std::size_t>(k + radius)] *
                   static_cast<double>(s.image[static_cast<std::size_t>(src)]);
          }
          tmp[static_cast<std::size_t>(idx)] = static_cast<float>(acc);
        }
    s.image.swap(tmp);
  }
}

}  // namespace detail

inline VolumeSample augment_sample(const VolumeSample& in, const AugmentationConfig& cfg,
                                   Rng& rng) {
  VolumeSample s = in;
  if (!cfg.enabled) return s;
  const std::size_t rank = s.shape.size();

  if (rng.bernoulli(cfg.rot_scale_prob)) {
    std::vector<double> angles;
    const std::size_t n_angles = rank == 2 ? 1 : 3;
    for (std::size_t i = 0; i < n_angles; ++i) {
      angles.push_back(rng.uniform(-cfg.rotate_deg, cfg.rotate_deg) * 3.141592653589793 / 180.0);
    }
    const double scale = rng.uniform(cfg.scale_lo, cfg.scale_hi);
    detail::rotate_scale(s, angles, scale);
  }
  for (std::size_t axis = 0; axis < rank; ++axis) {
    if (rng.bernoulli(cfg.mirror_prob)) detail::mirror_axis(s, axis);
  }
  if (rng.bernoulli(cfg.noise_prob)) {
    const double stddev = std::sqrt(rng.uniform(0.0, cfg.noise_var_hi));
    for (float& v : s.image) v = static_cast<float>(v + rng.normal(0.0, stddev));
  }
  if (rng.bernoulli(cfg.blur_prob)) {
    detail::gaussian_blur(s, rng.uniform(cfg.blur_sigma_lo, cfg.blur_sigma_hi));
  }
  if (rng.bernoulli(cfg.brightness_prob)) {
    const double shift = rng.uniform(-cfg.brightness_shift, cfg.brightness_shift);
    for (float& v : s.image) v = static_cast<float>(v + shift);
  }
  if (rng.bernoulli(cfg.contrast_prob)) {
    const double factor = rng.uniform(cfg.contrast_lo, cfg.contrast_hi);
    double mean = 0.0;
    for (float v : s.image) mean += v;
    mean /= static_cast<double>(s.image.size());
    for (float& v : s.image) v = static_cast<float>(mean + factor * (v - mean));
  }
  return s;
}

}  // namespace dmc
