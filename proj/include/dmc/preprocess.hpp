#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "dmc/rng.hpp"
#include "dmc/tensor.hpp"
#include "dmc/volume.hpp"

// Case preparation: resampling to a target spacing (trilinear image, nearest
// label), min-max intensity normalization over the whole volume, and patch
// extraction with optional foreground-biased sampling.

namespace dmc {

namespace detail {

// clamp-to-edge trilinear sample of a float volume (2D uses a dummy axis)
struct GridSampler {
  const float* data;
  std::array<std::int64_t, 3> ext{1, 1, 1};

  double at(std::int64_t i0, std::int64_t i1, std::int64_t i2) const {
    i0 = std::clamp<std::int64_t>(i0, 0, ext[0] - 1);
    i1 = std::clamp<std::int64_t>(i1, 0, ext[1] - 1);
    i2 = std::clamp<std::int64_t>(i2, 0, ext[2] - 1);
    return static_cast<double>(data[(i0 * ext[1] + i1) * ext[2] + i2]);
  }

  double trilinear(double x0, double x1, double x2) const {
    const double f0 = std::floor(x0), f1 = std::floor(x1), f2 = std::floor(x2);
    const double t0 = x0 - f0, t1 = x1 - f1, t2 = x2 - f2;
    const auto i0 = static_cast<std::int64_t>(f0);
    const auto i1 = static_cast<std::int64_t>(f1);
    const auto i2 = static_cast<std::int64_t>(f2);
    double acc = 0.0;
    for (int d0 = 0; d0 <= 1; ++d0)
      for (int d1 = 0; d1 <= 1; ++d1)
        for (int d2 = 0; d2 <= 1; ++d2) {
          const double w = (d0 ? t0 : 1.0 - t0) * (d1 ? t1 : 1.0 - t1) * (d2 ? t2 : 1.0 - t2);
          acc += w * at(i0 + d0, i1 + d1, i2 + d2);
        }
    return acc;
  }
};

struct LabelSampler {
  const std::uint8_t* data;
  std::array<std::int64_t, 3> ext{1, 1, 1};

  std::uint8_t nearest(double x0, double x1, double x2) const {
    const auto i0 = std::clamp<std::int64_t>(std::llround(x0), 0, ext[0] - 1);
    const auto i1 = std::clamp<std::int64_t>(std::llround(x1), 0, ext[1] - 1);
    const auto i2 = std::clamp<std::int64_t>(std::llround(x2), 0, ext[2] - 1);
    return data[(i0 * ext[1] + i1) * ext[2] + i2];
  }
};

inline std::array<std::int64_t, 3> ext3(const Shape& s) {
  std::array<std::int64_t, 3> e{1, 1, 1};
  const std::size_t off = 3 - s.size();
  for (std::size_t i = 0; i < s.size(); ++i) e[off + i] = s[i];
  return e;
}

}  // namespace detail

inline VolumeSample resample_to_spacing(const VolumeSample& in,
                                        const std::vector<double>& target) {
  if (target.size() != in.spacing.size()) {
    throw DataError("resample: target spacing rank mismatch");
  }
  for (double s : target) {
    if (!(s > 0.0)) throw DataError("resample: target spacing must be positive");
  }
  Shape out_shape(in.shape.size());
  bool identity = true;
  for (std::size_t a = 0; a < in.shape.size(); ++a) {
    out_shape[a] = std::max<std::int64_t>(
        1, std::llround(static_cast<double>(in.shape[a]) * in.spacing[a] / target[a]));
    identity = identity && out_shape[a] == in.shape[a] && in.spacing[a] == target[a];
  }
  if (identity) return in;

  VolumeSample out;
  out.id = in.id;
  out.shape = out_shape;
  out.spacing = target;
  out.image.resize(static_cast<std::size_t>(numel(out_shape)));
  if (in.has_label()) out.label.resize(out.image.size());

  const auto ie = detail::ext3(in.shape);
  const auto oe = detail::ext3(out_shape);
  detail::GridSampler img{in.image.data(), ie};
  detail::LabelSampler lab{in.has_label() ? in.label.data() : nullptr, ie};
  std::array<double, 3> scale{1.0, 1.0, 1.0};
  for (int a = 0; a < 3; ++a) {
    scale[static_cast<std::size_t>(a)] = static_cast<double>(ie[static_cast<std::size_t>(a)]) /
                                         static_cast<double>(oe[static_cast<std::size_t>(a)]);
  }
  std::int64_t idx = 0;
  for (std::int64_t o0 = 0; o0 < oe[0]; ++o0) {
    const double x0 = (static_cast<double>(o0) + 0.5) * scale[0] - 0.5;
    for (std::int64_t o1 = 0; o1 < oe[1]; ++o1) {
      const double x1 = (static_cast<double>(o1) + 0.5) * scale[1] - 0.5;
      for (std::int64_t o2 = 0; o2 < oe[2]; ++o2, ++idx) {
        const double x2 = (static_cast<double>(o2) + 0.5) * scale[2] - 0.5;
        out.image[static_cast<std::size_t>(idx)] = static_cast<float>(img.trilinear(x0, x1, x2));
        if (in.has_label()) {
          out.label[static_cast<std::size_t>(idx)] = lab.nearest(x0, x1, x2);
        }
      }
    }
  }
  return out;
}

// (x - min) / (max - min) over the whole volume; constant volumes map to 0.
inline void minmax_normalize(VolumeSample& s) {
  if (s.image.empty()) return;
  float lo = s.image[0], hi = s.image[0];
  for (float v : s.image) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  if (hi <= lo) {
    std::fill(s.image.begin(), s.image.end(), 0.0f);
    return;
  }
  const float span = hi - lo;
  for (float& v : s.image) v = (v - lo) / span;
}

struct PreprocessConfig {
  std::vector<double> target_spacing;  // empty = keep native spacing
  std::vector<std::int64_t> patch_size;
};

inline VolumeSample preprocess_case(const VolumeSample& raw, const PreprocessConfig& cfg) {
  for (double s : raw.spacing) {
    if (!(s > 0.0)) throw DataError("preprocess: case spacing must be positive");
  }
  VolumeSample s = cfg.target_spacing.empty() ? raw : resample_to_spacing(raw, cfg.target_spacing);
  minmax_normalize(s);
  return s;
}

enum class PatchPolicy { kRandom, kCenter, kForegroundBiased };

namespace detail {

// corner selection over one axis given padded extent
inline std::int64_t uniform_corner(std::int64_t padded, std::int64_t patch, Rng& rng) {
  return rng.uniform_int(padded - patch + 1);
}

}  // namespace detail

// Cuts a patch from the (preprocessed) sample. A rank-2 patch from a rank-3
// volume takes an in-plane slice at a chosen through-plane position. Volumes
// smaller than the patch are zero-padded symmetrically. Foreground-biased
// sampling centers the patch on a uniformly chosen foreground voxel with
// probability fg_prob, falling back to uniform corners when the label has no
// foreground at all.
inline VolumeSample extract_patch(const VolumeSample& in,
                                  const std::vector<std::int64_t>& patch_size,
                                  PatchPolicy policy, Rng& rng, double fg_prob = 1.0 / 3.0) {
  const std::size_t vrank = in.shape.size();
  const std::size_t prank = patch_size.size();
  if (prank != vrank && !(prank == 2 && vrank == 3)) {
    throw ConfigError("extract_patch: patch rank " + std::to_string(prank) +
                      " incompatible with volume rank " + std::to_string(vrank));
  }
  for (auto p : patch_size) {
    if (p < 1) throw ConfigError("extract_patch: patch extents must be >= 1");
  }

  // foreground voxel list (flat indices), used by the biased policy
  std::vector<std::int64_t> fg;
  bool use_fg = false;
  if (policy == PatchPolicy::kForegroundBiased && in.has_label()) {
    const bool roll = rng.bernoulli(fg_prob);
    for (std::size_t i = 0; i < in.label.size(); ++i) {
      if (in.label[i] > 0) fg.push_back(static_cast<std::int64_t>(i));
    }
    use_fg = roll && !fg.empty();
  }
  std::array<std::int64_t, 3> fg_coord{0, 0, 0};
  if (use_fg) {
    std::int64_t flat = fg[static_cast<std::size_t>(rng.uniform_int(
        static_cast<std::int64_t>(fg.size())))];
    for (std::size_t a = vrank; a-- > 0;) {
      fg_coord[a] = flat % in.shape[a];
      flat /= in.shape[a];
    }
  }

  // slice selection for 2D-from-3D
  std::int64_t slice = -1;
  Shape src_shape = in.shape;
  if (prank == 2 && vrank == 3) {
    slice = use_fg ? fg_coord[2] : rng.uniform_int(in.shape[2]);
    src_shape = {in.shape[0], in.shape[1]};
  }

  Shape padded(prank);
  std::vector<std::int64_t> pad_lo(prank);
  for (std::size_t a = 0; a < prank; ++a) {
    padded[a] = std::max(src_shape[a], patch_size[a]);
    pad_lo[a] = (padded[a] - src_shape[a]) / 2;
  }
  std::vector<std::int64_t> corner(prank);
  for (std::size_t a = 0; a < prank; ++a) {
    switch (policy) {
      case PatchPolicy::kCenter:
        corner[a] = (padded[a] - patch_size[a]) / 2;
        break;
      case PatchPolicy::kRandom:
        corner[a] = detail::uniform_corner(padded[a], patch_size[a], rng);
        break;
      case PatchPolicy::kForegroundBiased:
        if (use_fg) {
          corner[a] = std::clamp<std::int64_t>(fg_coord[a] + pad_lo[a] - patch_size[a] / 2, 0,
                                               padded[a] - patch_size[a]);
        } else {
          corner[a] = detail::uniform_corner(padded[a], patch_size[a], rng);
        }
        break;
    }
  }

  VolumeSample out;
  out.id = in.id;
  out.shape = Shape(patch_size.begin(), patch_size.end());
  out.spacing.assign(in.spacing.begin(), in.spacing.begin() + static_cast<std::ptrdiff_t>(prank));
  out.image.assign(static_cast<std::size_t>(numel(out.shape)), 0.0f);
  if (in.has_label()) out.label.assign(out.image.size(), 0);

  const auto se = detail::ext3(src_shape);
  const auto pe = detail::ext3(out.shape);
  std::array<std::int64_t, 3> c3{0, 0, 0}, pl3{0, 0, 0};
  {
    const std::size_t off = 3 - prank;
    for (std::size_t a = 0; a < prank; ++a) {
      c3[off + a] = corner[a];
      pl3[off + a] = pad_lo[a];
    }
  }
  const std::int64_t slice_off = slice >= 0 ? slice : 0;
  const std::int64_t slice_stride = prank == 2 && vrank == 3 ? in.shape[2] : 1;
  std::int64_t idx = 0;
  for (std::int64_t p0 = 0; p0 < pe[0]; ++p0) {
    for (std::int64_t p1 = 0; p1 < pe[1]; ++p1) {
      for (std::int64_t p2 = 0; p2 < pe[2]; ++p2, ++idx) {
        const std::int64_t s0 = p0 + c3[0] - pl3[0];
        const std::int64_t s1 = p1 + c3[1] - pl3[1];
        const std::int64_t s2 = p2 + c3[2] - pl3[2];
        if (s0 < 0 || s0 >= se[0] || s1 < 0 || s1 >= se[1] || s2 < 0 || s2 >= se[2]) continue;
        const std::int64_t src = ((s0 * se[1] + s1) * se[2] + s2) * slice_stride + slice_off;
        out.image[static_cast<std::size_t>(idx)] = in.image[static_cast<std::size_t>(src)];
        if (in.has_label()) {
          out.label[static_cast<std::size_t>(idx)] = in.label[static_cast<std::size_t>(src)];
        }
      }
    }
  }
  return out;
}

// Stacks patches into network inputs: images N x 1 x spatial, labels N x spatial.
inline std::pair<Tensor, LabelMap> to_batch(const std::vector<VolumeSample>& patches) {
  if (patches.empty()) throw ContractError("to_batch: empty batch");
  const Shape& sp = patches[0].shape;
  Shape xs{static_cast<std::int64_t>(patches.size()), 1};
  for (auto e : sp) xs.push_back(e);
  Tensor x(xs);
  LabelMap y;
  y.shape = Shape{static_cast<std::int64_t>(patches.size())};
  for (auto e : sp) y.shape.push_back(e);
  y.ids.resize(static_cast<std::size_t>(numel(y.shape)));
  const std::int64_t vox = numel(sp);
  for (std::size_t i = 0; i < patches.size(); ++i) {
    if (patches[i].shape != sp) throw ShapeError("to_batch: mixed patch shapes");
    for (std::int64_t v = 0; v < vox; ++v) {
      x[static_cast<std::int64_t>(i) * vox + v] =
          static_cast<double>(patches[i].image[static_cast<std::size_t>(v)]);
      y.ids[i * static_cast<std::size_t>(vox) + static_cast<std::size_t>(v)] =
          patches[i].has_label() ? patches[i].label[static_cast<std::size_t>(v)] : 0;
    }
  }
  return {std::move(x), std::move(y)};
}

}  // namespace dmc
