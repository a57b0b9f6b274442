#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

#include "dmc/metrics.hpp"
#include "dmc/network.hpp"
#include "dmc/preprocess.hpp"
#include "dmc/volume.hpp"

// Sliding-window inference: windows of the patch size with 50% overlap,
// uniform averaging of logits where windows overlap, argmax to labels.
// Windows are visited in a canonical grid order so results do not depend on
// caller ordering.

namespace dmc {

using Predictor = std::function<Tensor(const Tensor& patch)>;  // 1xCxsp -> 1xCxsp logits

namespace detail {

inline std::vector<std::int64_t> window_starts(std::int64_t extent, std::int64_t patch) {
  if (extent <= patch) return {0};
  const std::int64_t stride = std::max<std::int64_t>(1, patch / 2);
  std::vector<std::int64_t> starts;
  for (std::int64_t s = 0; s + patch < extent; s += stride) starts.push_back(s);
  starts.push_back(extent - patch);
  return starts;
}

}  // namespace detail

// Averaged logits over the whole (preprocessed) volume: shape C x spatial.
inline Tensor sliding_window_logits(const Predictor& predict, const VolumeSample& sample,
                                    const std::vector<std::int64_t>& patch_size,
                                    std::int64_t num_classes) {
  const std::size_t rank = sample.shape.size();
  if (patch_size.size() != rank) {
    throw ConfigError("sliding_window: patch rank does not match volume rank");
  }
  // pad up to the patch size so every axis fits at least one window
  Shape padded(rank);
  std::vector<std::int64_t> pad_lo(rank);
  for (std::size_t a = 0; a < rank; ++a) {
    padded[a] = std::max(sample.shape[a], patch_size[a]);
    pad_lo[a] = (padded[a] - sample.shape[a]) / 2;
  }
  const auto pe = detail::ext3(padded);
  const auto se = detail::ext3(sample.shape);
  const auto ke = detail::ext3(Shape(patch_size.begin(), patch_size.end()));
  std::array<std::int64_t, 3> pl3{0, 0, 0};
  {
    const std::size_t off = 3 - rank;
    for (std::size_t a = 0; a < rank; ++a) pl3[off + a] = pad_lo[a];
  }

  std::vector<double> padded_img(static_cast<std::size_t>(numel(padded)), 0.0);
  for (std::int64_t s0 = 0; s0 < se[0]; ++s0)
    for (std::int64_t s1 = 0; s1 < se[1]; ++s1)
      for (std::int64_t s2 = 0; s2 < se[2]; ++s2) {
        padded_img[static_cast<std::size_t>(((s0 + pl3[0]) * pe[1] + s1 + pl3[1]) * pe[2] + s2 +
                                            pl3[2])] =
            static_cast<double>(
                sample.image[static_cast<std::size_t>((s0 * se[1] + s1) * se[2] + s2)]);
      }

  const std::int64_t padded_vox = numel(padded);
  std::vector<double> sum(static_cast<std::size_t>(num_classes * padded_vox), 0.0);
  std::vector<std::int32_t> hits(static_cast<std::size_t>(padded_vox), 0);

  std::array<std::vector<std::int64_t>, 3> starts{
      detail::window_starts(pe[0], ke[0]), detail::window_starts(pe[1], ke[1]),
      detail::window_starts(pe[2], ke[2])};

  Shape patch_shape{1, 1};
  for (auto e : patch_size) patch_shape.push_back(e);
  const std::int64_t patch_vox = ke[0] * ke[1] * ke[2];

  for (std::int64_t w0 : starts[0]) {
    for (std::int64_t w1 : starts[1]) {
      for (std::int64_t w2 : starts[2]) {
        Tensor patch(patch_shape);
        for (std::int64_t k0 = 0; k0 < ke[0]; ++k0)
          for (std::int64_t k1 = 0; k1 < ke[1]; ++k1)
            for (std::int64_t k2 = 0; k2 < ke[2]; ++k2) {
              patch[(k0 * ke[1] + k1) * ke[2] + k2] =
                  padded_img[static_cast<std::size_t>(((w0 + k0) * pe[1] + w1 + k1) * pe[2] +
                                                      w2 + k2)];
            }
        Tensor logits = predict(patch);
        if (logits.dim(1) != num_classes || spatial_numel(logits.shape()) != patch_vox) {
          throw ShapeError("sliding_window: predictor returned " + shape_str(logits.shape()));
        }
        for (std::int64_t c = 0; c < num_classes; ++c) {
          for (std::int64_t k0 = 0; k0 < ke[0]; ++k0)
            for (std::int64_t k1 = 0; k1 < ke[1]; ++k1)
              for (std::int64_t k2 = 0; k2 < ke[2]; ++k2) {
                const std::int64_t dst = ((w0 + k0) * pe[1] + w1 + k1) * pe[2] + w2 + k2;
                sum[static_cast<std::size_t>(c * padded_vox + dst)] +=
                    logits[c * patch_vox + (k0 * ke[1] + k1) * ke[2] + k2];
              }
        }
        for (std::int64_t k0 = 0; k0 < ke[0]; ++k0)
          for (std::int64_t k1 = 0; k1 < ke[1]; ++k1)
            for (std::int64_t k2 = 0; k2 < ke[2]; ++k2) {
              ++hits[static_cast<std::size_t>(((w0 + k0) * pe[1] + w1 + k1) * pe[2] + w2 + k2)];
            }
      }
    }
  }

  // crop back and average
  Shape out_shape{num_classes};
  for (auto e : sample.shape) out_shape.push_back(e);
  Tensor out(out_shape);
  const std::int64_t vox = numel(sample.shape);
  for (std::int64_t c = 0; c < num_classes; ++c) {
    for (std::int64_t s0 = 0; s0 < se[0]; ++s0)
      for (std::int64_t s1 = 0; s1 < se[1]; ++s1)
        for (std::int64_t s2 = 0; s2 < se[2]; ++s2) {
          const std::int64_t src =
              ((s0 + pl3[0]) * pe[1] + s1 + pl3[1]) * pe[2] + s2 + pl3[2];
          out[c * vox + (s0 * se[1] + s1) * se[2] + s2] =
              sum[static_cast<std::size_t>(c * padded_vox + src)] /
              static_cast<double>(hits[static_cast<std::size_t>(src)]);
        }
  }
  return out;
}

inline std::vector<std::uint8_t> argmax_labels(const Tensor& logits_cs) {
  const std::int64_t c = logits_cs.dim(0);
  std::int64_t vox = 1;
  for (int i = 1; i < logits_cs.rank(); ++i) vox *= logits_cs.dim(i);
  std::vector<std::uint8_t> out(static_cast<std::size_t>(vox));
  for (std::int64_t v = 0; v < vox; ++v) {
    std::int64_t best = 0;
    double bv = logits_cs[v];
    for (std::int64_t k = 1; k < c; ++k) {
      if (logits_cs[k * vox + v] > bv) {
        bv = logits_cs[k * vox + v];
        best = k;
      }
    }
    out[static_cast<std::size_t>(v)] = static_cast<std::uint8_t>(best);
  }
  return out;
}

// 2D models segment 3D volumes slice by slice along the through-plane
// (last) axis; per-slice logits are stacked back into a volume.
inline Tensor slicewise_logits(const Predictor& predict, const VolumeSample& sample,
                               const std::vector<std::int64_t>& patch_size,
                               std::int64_t num_classes) {
  const std::int64_t slices = sample.shape[2];
  const std::int64_t plane = sample.shape[0] * sample.shape[1];
  Shape out_shape{num_classes, sample.shape[0], sample.shape[1], sample.shape[2]};
  Tensor out(out_shape);
  for (std::int64_t z = 0; z < slices; ++z) {
    VolumeSample slice;
    slice.id = sample.id;
    slice.shape = {sample.shape[0], sample.shape[1]};
    slice.spacing = {sample.spacing[0], sample.spacing[1]};
    slice.image.resize(static_cast<std::size_t>(plane));
    for (std::int64_t p = 0; p < plane; ++p) {
      slice.image[static_cast<std::size_t>(p)] =
          sample.image[static_cast<std::size_t>(p * slices + z)];
    }
    Tensor sl = sliding_window_logits(predict, slice, patch_size, num_classes);
    for (std::int64_t c = 0; c < num_classes; ++c) {
      for (std::int64_t p = 0; p < plane; ++p) {
        out[(c * plane + p) * slices + z] = sl[c * plane + p];
      }
    }
  }
  return out;
}

inline MetricsRecord evaluate_case(const Predictor& predict, const VolumeSample& sample,
                                   std::int64_t num_classes,
                                   const std::vector<std::int64_t>& patch_size) {
  if (!sample.has_label()) throw DataError("evaluate: case " + sample.id + " has no labels");
  const bool slicewise = patch_size.size() == 2 && sample.shape.size() == 3;
  Tensor logits = slicewise
                      ? slicewise_logits(predict, sample, patch_size, num_classes)
                      : sliding_window_logits(predict, sample, patch_size, num_classes);
  const std::vector<std::uint8_t> pred = argmax_labels(logits);
  MetricsRecord rec;
  rec.case_id = sample.id;
  const std::size_t vox = pred.size();
  for (std::int64_t cls = 1; cls < num_classes; ++cls) {
    std::vector<std::uint8_t> pm(vox), gm(vox);
    for (std::size_t i = 0; i < vox; ++i) {
      pm[i] = pred[i] == cls;
      gm[i] = sample.label[i] == cls;
    }
    rec.dsc[static_cast<int>(cls)] = dsc(pm, gm);
    rec.hd95[static_cast<int>(cls)] = hd95(pm, gm, sample.shape, sample.spacing);
  }
  return rec;
}

inline Predictor model_predictor(const Model& m) {
  const Model* mp = &m;
  return [mp](const Tensor& patch) {
    auto r = model_forward(*mp, patch, /*training=*/false);
    return r.tape->value(r.logits);
  };
}

inline std::vector<MetricsRecord> evaluate(const Model& m,
                                           const std::vector<VolumeSample>& cases,
                                           const std::vector<std::int64_t>& patch_size) {
  std::vector<MetricsRecord> out;
  Predictor p = model_predictor(m);
  for (const VolumeSample& s : cases) {
    out.push_back(evaluate_case(p, s, m.spec.num_classes, patch_size));
  }
  return out;
}

}  // namespace dmc
