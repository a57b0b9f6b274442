#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dmc/errors.hpp"
#include "dmc/ops.hpp"
#include "dmc/tape.hpp"
#include "dmc/tensor.hpp"

namespace dmc {

namespace detail {

inline void check_logits_labels(const Tensor& logits, const LabelMap& labels,
                                const char* op) {
  if (logits.rank() < 3) {
    throw ShapeError(std::string(op) + ": logits must be N x C x spatial");
  }
  Shape want{logits.dim(0)};
  for (int i = 2; i < logits.rank(); ++i) want.push_back(logits.dim(i));
  if (labels.shape != want) {
    throw ShapeError(std::string(op) + ": labels shape " + shape_str(labels.shape) +
                     " does not match logits " + shape_str(logits.shape()));
  }
  const std::int64_t c = logits.dim(1);
  for (std::int64_t i = 0; i < labels.size(); ++i) {
    const std::int32_t id = labels.ids[static_cast<std::size_t>(i)];
    if (id < 0 || id >= c) {
      throw DataError(std::string(op) + ": class id " + std::to_string(id) +
                      " at voxel " + std::to_string(i) + " out of range [0, " +
                      std::to_string(c) + ")");
    }
  }
}

// softmax over the channel axis, one voxel at a time (stable via max shift)
inline Tensor softmax_channels(const Tensor& logits) {
  const std::int64_t n = logits.dim(0), c = logits.dim(1);
  const std::int64_t sp = spatial_numel(logits.shape());
  Tensor p(logits.shape());
  for (std::int64_t in = 0; in < n; ++in) {
    const double* zb = logits.data() + in * c * sp;
    double* pb = p.data() + in * c * sp;
    for (std::int64_t v = 0; v < sp; ++v) {
      double m = zb[v];
      for (std::int64_t k = 1; k < c; ++k) m = std::max(m, zb[k * sp + v]);
      double s = 0.0;
      for (std::int64_t k = 0; k < c; ++k) {
        const double e = std::exp(zb[k * sp + v] - m);
        pb[k * sp + v] = e;
        s += e;
      }
      for (std::int64_t k = 0; k < c; ++k) pb[k * sp + v] /= s;
    }
  }
  return p;
}

}  // namespace detail

// Mean over voxels of -log softmax at the target class.
inline Var cross_entropy_loss(Var logits, const LabelMap& labels, std::string label = {}) {
  Tape& t = *logits.tape;
  const Tensor& zv = t.value(logits);
  detail::check_logits_labels(zv, labels, "cross_entropy_loss");
  const std::int64_t n = zv.dim(0), c = zv.dim(1);
  const std::int64_t sp = spatial_numel(zv.shape());
  const double count = static_cast<double>(n * sp);
  double loss = 0.0;
  for (std::int64_t in = 0; in < n; ++in) {
    const double* zb = zv.data() + in * c * sp;
    const std::int32_t* yb = labels.ids.data() + in * sp;
    for (std::int64_t v = 0; v < sp; ++v) {
      double m = zb[v];
      for (std::int64_t k = 1; k < c; ++k) m = std::max(m, zb[k * sp + v]);
      double s = 0.0;
      for (std::int64_t k = 0; k < c; ++k) s += std::exp(zb[k * sp + v] - m);
      loss += (m + std::log(s)) - zb[yb[v] * sp + v];
    }
  }
  Tensor y(Shape{1});
  y[0] = loss / count;

  const std::int32_t zid = logits.id;
  auto backward = [zid, labels, n, c, sp, count](Tape& tp, std::int32_t self) {
    if (!tp.wants_grad(zid)) return;
    const double g = tp.node(self).grad[0];
    const Tensor& zval = tp.value(zid);
    Tensor dz = detail::softmax_channels(zval);
    for (std::int64_t in = 0; in < n; ++in) {
      double* db = dz.data() + in * c * sp;
      const std::int32_t* yb = labels.ids.data() + in * sp;
      for (std::int64_t v = 0; v < sp; ++v) db[yb[v] * sp + v] -= 1.0;
    }
    const double scale = g / count;
    for (std::int64_t i = 0; i < dz.size(); ++i) dz[i] *= scale;
    tp.add_to_grad(zid, dz);
  };
  return t.record(std::move(y), {logits.id}, std::move(backward), std::move(label));
}

struct DiceConfig {
  double eps = 1e-5;
  // classes the Dice term averages over; empty = all classes except 0
  std::vector<std::int64_t> foreground;
};

// Soft Dice over foreground classes with batch-aggregated numerator and
// denominator: per class, 1 - (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps),
// averaged over the configured classes.
inline Var soft_dice_loss(Var logits, const LabelMap& labels, DiceConfig cfg = {},
                          std::string label = {}) {
  Tape& t = *logits.tape;
  const Tensor& zv = t.value(logits);
  detail::check_logits_labels(zv, labels, "soft_dice_loss");
  const std::int64_t n = zv.dim(0), c = zv.dim(1);
  const std::int64_t sp = spatial_numel(zv.shape());
  if (cfg.foreground.empty()) {
    for (std::int64_t k = 1; k < c; ++k) cfg.foreground.push_back(k);
  }
  if (cfg.foreground.empty()) {
    throw ConfigError("soft_dice_loss: no foreground classes (need num_classes >= 2)");
  }

  const Tensor probs = detail::softmax_channels(zv);
  std::vector<double> num(static_cast<std::size_t>(c), 0.0);
  std::vector<double> den(static_cast<std::size_t>(c), 0.0);
  for (std::int64_t in = 0; in < n; ++in) {
    const double* pb = probs.data() + in * c * sp;
    const std::int32_t* yb = labels.ids.data() + in * sp;
    for (std::int64_t k = 0; k < c; ++k) {
      double sum_p = 0.0, sum_pg = 0.0;
      std::int64_t sum_g = 0;
      const double* pk = pb + k * sp;
      for (std::int64_t v = 0; v < sp; ++v) {
        sum_p += pk[v];
        if (yb[v] == k) {
          sum_pg += pk[v];
          ++sum_g;
        }
      }
      num[static_cast<std::size_t>(k)] += 2.0 * sum_pg;
      den[static_cast<std::size_t>(k)] += sum_p + static_cast<double>(sum_g);
    }
  }
  double loss = 0.0;
  for (std::int64_t k : cfg.foreground) {
    if (k < 0 || k >= c) throw ConfigError("soft_dice_loss: foreground class out of range");
    loss += 1.0 - (num[static_cast<std::size_t>(k)] + cfg.eps) /
                      (den[static_cast<std::size_t>(k)] + cfg.eps);
  }
  loss /= static_cast<double>(cfg.foreground.size());
  Tensor y(Shape{1});
  y[0] = loss;

  const std::int32_t zid = logits.id;
  auto backward = [zid, labels, cfg, n, c, sp, num, den](Tape& tp, std::int32_t self) {
    if (!tp.wants_grad(zid)) return;
    const double g = tp.node(self).grad[0];
    const Tensor& zval = tp.value(zid);
    const Tensor probs = detail::softmax_channels(zval);
    // dL/dp_k(v) for foreground k:  -(2*g_k(v)*den_k - (num_k+eps)) / (den_k+eps)^2 / |F|
    std::vector<double> q(static_cast<std::size_t>(c), 0.0);  // per-class constants
    std::vector<double> r(static_cast<std::size_t>(c), 0.0);
    std::vector<bool> fg(static_cast<std::size_t>(c), false);
    const double inv_f = 1.0 / static_cast<double>(cfg.foreground.size());
    for (std::int64_t k : cfg.foreground) {
      const double dk = den[static_cast<std::size_t>(k)] + cfg.eps;
      const double nk = num[static_cast<std::size_t>(k)] + cfg.eps;
      // dL/dp = r_k when g_k(v)=0, q_k when g_k(v)=1
      r[static_cast<std::size_t>(k)] = inv_f * nk / (dk * dk);
      q[static_cast<std::size_t>(k)] = inv_f * (nk - 2.0 * dk) / (dk * dk);
      fg[static_cast<std::size_t>(k)] = true;
    }
    Tensor dz(zval.shape());
    for (std::int64_t in = 0; in < n; ++in) {
      const double* pb = probs.data() + in * c * sp;
      const std::int32_t* yb = labels.ids.data() + in * sp;
      double* db = dz.data() + in * c * sp;
      for (std::int64_t v = 0; v < sp; ++v) {
        double mix = 0.0;  // sum_k p_k * dL/dp_k
        for (std::int64_t k = 0; k < c; ++k) {
          if (!fg[static_cast<std::size_t>(k)]) continue;
          const double dldp = (yb[v] == k) ? q[static_cast<std::size_t>(k)]
                                           : r[static_cast<std::size_t>(k)];
          mix += pb[k * sp + v] * dldp;
        }
        for (std::int64_t k = 0; k < c; ++k) {
          const double dldp = fg[static_cast<std::size_t>(k)]
                                  ? ((yb[v] == k) ? q[static_cast<std::size_t>(k)]
                                                  : r[static_cast<std::size_t>(k)])
                                  : 0.0;
          db[k * sp + v] = g * pb[k * sp + v] * (dldp - mix);
        }
      }
    }
    tp.add_to_grad(zid, dz);
  };
  return t.record(std::move(y), {logits.id}, std::move(backward), std::move(label));
}

// L = L_CE + L_Dice
inline Var combined_loss(Var logits, const LabelMap& labels, DiceConfig cfg = {},
                         std::string label = {}) {
  Var ce = cross_entropy_loss(logits, labels, label.empty() ? "" : label + ".ce");
  Var dice = soft_dice_loss(logits, labels, std::move(cfg),
                            label.empty() ? "" : label + ".dice");
  return add(ce, dice, std::move(label));
}

}  // namespace dmc
