#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dmc/errors.hpp"
#include "dmc/rng.hpp"
#include "dmc/shape.hpp"

namespace dmc {

// Dice similarity 2|P∩G| / (|P|+|G|); two empty masks count as perfect
// agreement (1.0).
inline double dsc(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& gt) {
  if (pred.size() != gt.size()) throw ShapeError("dsc: mask sizes differ");
  std::int64_t p = 0, g = 0, pg = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool a = pred[i] != 0, b = gt[i] != 0;
    p += a;
    g += b;
    pg += a && b;
  }
  if (p + g == 0) return 1.0;
  return 2.0 * static_cast<double>(pg) / static_cast<double>(p + g);
}

// linear interpolation between order statistics (values must be sorted)
inline double percentile_sorted(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) throw ContractError("percentile of empty sample");
  if (sorted.size() == 1) return sorted[0];
  const double rank = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(rank));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  const double t = rank - std::floor(rank);
  return sorted[lo] * (1.0 - t) + sorted[hi] * t;
}

namespace detail {

// boundary voxels: foreground with at least one face-adjacent background
// neighbour; outside the volume counts as background
inline std::vector<std::array<std::int64_t, 3>> boundary_voxels(
    const std::vector<std::uint8_t>& mask, const Shape& shape) {
  std::array<std::int64_t, 3> e{1, 1, 1};
  const std::size_t off = 3 - shape.size();
  for (std::size_t i = 0; i < shape.size(); ++i) e[off + i] = shape[i];
  auto at = [&](std::int64_t i0, std::int64_t i1, std::int64_t i2) -> bool {
    if (i0 < 0 || i0 >= e[0] || i1 < 0 || i1 >= e[1] || i2 < 0 || i2 >= e[2]) return false;
    return mask[static_cast<std::size_t>((i0 * e[1] + i1) * e[2] + i2)] != 0;
  };
  std::vector<std::array<std::int64_t, 3>> out;
  for (std::int64_t i0 = 0; i0 < e[0]; ++i0)
    for (std::int64_t i1 = 0; i1 < e[1]; ++i1)
      for (std::int64_t i2 = 0; i2 < e[2]; ++i2) {
        if (!at(i0, i1, i2)) continue;
        const bool interior = (e[0] == 1 || (at(i0 - 1, i1, i2) && at(i0 + 1, i1, i2))) &&
                              at(i0, i1 - 1, i2) && at(i0, i1 + 1, i2) &&
                              at(i0, i1, i2 - 1) && at(i0, i1, i2 + 1);
        if (!interior) out.push_back({i0, i1, i2});
      }
  return out;
}

}  // namespace detail

// 95th percentile of the pooled symmetric surface-to-surface distances in
// mm. Undefined (nullopt) when either mask is empty; callers must keep the
// sentinel distinct from 0.
inline std::optional<double> hd95(const std::vector<std::uint8_t>& pred,
                                  const std::vector<std::uint8_t>& gt, const Shape& shape,
                                  const std::vector<double>& spacing) {
  if (pred.size() != gt.size() || pred.size() != static_cast<std::size_t>(numel(shape))) {
    throw ShapeError("hd95: mask sizes do not match shape");
  }
  if (spacing.size() != shape.size()) throw ShapeError("hd95: spacing rank mismatch");
  for (double s : spacing) {
    if (!(s > 0.0)) throw DataError("hd95: spacing must be positive");
  }
  const auto bp = detail::boundary_voxels(pred, shape);
  const auto bg = detail::boundary_voxels(gt, shape);
  if (bp.empty() || bg.empty()) return std::nullopt;

  std::array<double, 3> sp{1.0, 1.0, 1.0};
  const std::size_t off = 3 - shape.size();
  for (std::size_t i = 0; i < spacing.size(); ++i) sp[off + i] = spacing[i];

  auto directed = [&](const std::vector<std::array<std::int64_t, 3>>& from,
                      const std::vector<std::array<std::int64_t, 3>>& to,
                      std::vector<double>& out) {
    for (const auto& a : from) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& b : to) {
        const double d0 = static_cast<double>(a[0] - b[0]) * sp[0];
        const double d1 = static_cast<double>(a[1] - b[1]) * sp[1];
        const double d2 = static_cast<double>(a[2] - b[2]) * sp[2];
        const double d = d0 * d0 + d1 * d1 + d2 * d2;
        best = std::min(best, d);
      }
      out.push_back(std::sqrt(best));
    }
  };
  std::vector<double> pooled;
  pooled.reserve(bp.size() + bg.size());
  directed(bp, bg, pooled);
  directed(bg, bp, pooled);
  std::sort(pooled.begin(), pooled.end());
  return percentile_sorted(pooled, 0.95);
}

// ---- Wilcoxon signed-rank test ----

struct WilcoxonResult {
  int n = 0;                      // pairs with nonzero difference
  double statistic = 0.0;         // W = min(W+, W-)
  std::optional<double> p_value;  // two-sided
  bool degenerate = false;        // every difference was zero
  std::string method;             // "exact" or "normal"
};

// Two-sided signed-rank test. Ties get average ranks. Exact null
// distribution (conditional on the observed rank multiset) for n <= 25 with
// p = min(1, 2 P(W+ <= w)); normal approximation with tie correction and a
// 0.5 continuity correction beyond that.
inline WilcoxonResult wilcoxon_signed_rank(const std::vector<double>& a,
                                           const std::vector<double>& b) {
  if (a.size() != b.size()) throw ShapeError("wilcoxon: samples must be paired");
  std::vector<double> diff;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    if (d != 0.0) diff.push_back(d);
  }
  WilcoxonResult res;
  if (diff.empty()) {
    res.degenerate = true;
    res.method = "degenerate";
    return res;
  }
  if (diff.size() < 5) {
    throw ContractError("wilcoxon: need >= 5 nonzero differences, got " +
                        std::to_string(diff.size()));
  }
  const int n = static_cast<int>(diff.size());
  res.n = n;

  std::vector<std::size_t> order(diff.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
    return std::fabs(diff[x]) < std::fabs(diff[y]);
  });
  std::vector<double> rank(diff.size());
  std::vector<std::int64_t> tie_sizes;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && std::fabs(diff[order[j]]) == std::fabs(diff[order[i]])) ++j;
    const double avg = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t k = i; k < j; ++k) rank[order[k]] = avg;
    tie_sizes.push_back(static_cast<std::int64_t>(j - i));
    i = j;
  }

  double w_plus = 0.0;
  for (std::size_t i = 0; i < diff.size(); ++i) {
    if (diff[i] > 0.0) w_plus += rank[i];
  }
  const double w_total = static_cast<double>(n) * (n + 1) / 2.0;
  const double w_minus = w_total - w_plus;
  res.statistic = std::min(w_plus, w_minus);

  if (n <= 25) {
    res.method = "exact";
    // DP over doubled ranks so average ranks become integers
    std::vector<std::int64_t> r2;
    std::int64_t total2 = 0;
    for (double r : rank) {
      r2.push_back(static_cast<std::int64_t>(std::llround(2.0 * r)));
      total2 += r2.back();
    }
    std::vector<double> ways(static_cast<std::size_t>(total2 + 1), 0.0);
    ways[0] = 1.0;
    for (std::int64_t r : r2) {
      for (std::int64_t s = total2 - r; s >= 0; --s) {
        ways[static_cast<std::size_t>(s + r)] += ways[static_cast<std::size_t>(s)];
      }
    }
    const auto w2 = static_cast<std::int64_t>(std::llround(2.0 * res.statistic));
    double below = 0.0;
    for (std::int64_t s = 0; s <= w2 && s <= total2; ++s) below += ways[static_cast<std::size_t>(s)];
    const double p = 2.0 * below / std::pow(2.0, n);
    res.p_value = std::min(1.0, p);
  } else {
    res.method = "normal";
    const double mean = static_cast<double>(n) * (n + 1) / 4.0;
    double tie_corr = 0.0;
    for (std::int64_t t : tie_sizes) {
      tie_corr += static_cast<double>(t) * t * t - static_cast<double>(t);
    }
    const double var =
        static_cast<double>(n) * (n + 1) * (2 * n + 1) / 24.0 - tie_corr / 48.0;
    const double z = (res.statistic - mean + 0.5) / std::sqrt(var);
    const double p = 2.0 * 0.5 * std::erfc(-z / std::sqrt(2.0));
    res.p_value = std::min(1.0, p);
  }
  return res;
}

// ---- cross-validation bookkeeping ----

// Deterministic shuffle then contiguous partition; fold sizes differ by at
// most one. Returns the fold id of each case, aligned with the input order.
inline std::vector<int> kfold_split(const std::vector<std::string>& case_ids, int k,
                                    std::uint64_t seed) {
  if (k < 1) throw ConfigError("kfold_split: k must be >= 1");
  const std::int64_t n = static_cast<std::int64_t>(case_ids.size());
  if (n < k) {
    throw DataError("kfold_split: " + std::to_string(n) + " cases cannot fill " +
                    std::to_string(k) + " folds");
  }
  std::vector<std::int64_t> idx(case_ids.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<std::int64_t>(i);
  Rng rng(seed);
  for (std::int64_t i = n - 1; i > 0; --i) {
    const std::int64_t j = rng.uniform_int(i + 1);
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
  }
  std::vector<int> fold(case_ids.size(), -1);
  const std::int64_t base = n / k, extra = n % k;
  std::int64_t pos = 0;
  for (int f = 0; f < k; ++f) {
    const std::int64_t size = base + (f < extra ? 1 : 0);
    for (std::int64_t i = 0; i < size; ++i, ++pos) {
      fold[static_cast<std::size_t>(idx[static_cast<std::size_t>(pos)])] = f;
    }
  }
  return fold;
}

// ---- per-case records and aggregation ----

struct MetricsRecord {
  std::string case_id;
  int fold = -1;
  std::map<int, double> dsc;                    // class -> value
  std::map<int, std::optional<double>> hd95;    // class -> mm or undefined
};

struct ClassSummary {
  double dsc_mean = 0.0;
  double dsc_std = 0.0;
  double hd95_median = 0.0;
  double hd95_q1 = 0.0;
  double hd95_q3 = 0.0;
  int hd95_undefined = 0;  // sentinel count excluded from the quantiles
  int n = 0;
};

inline std::map<int, ClassSummary> summarize(const std::vector<MetricsRecord>& records) {
  std::map<int, ClassSummary> out;
  std::map<int, std::vector<double>> dsc_vals;
  std::map<int, std::vector<double>> hd_vals;
  for (const MetricsRecord& r : records) {
    for (const auto& [cls, v] : r.dsc) dsc_vals[cls].push_back(v);
    for (const auto& [cls, v] : r.hd95) {
      if (v.has_value()) {
        hd_vals[cls].push_back(*v);
      } else {
        out[cls].hd95_undefined += 1;
      }
    }
  }
  for (auto& [cls, vals] : dsc_vals) {
    ClassSummary& s = out[cls];
    s.n = static_cast<int>(vals.size());
    double mean = 0.0;
    for (double v : vals) mean += v;
    mean /= static_cast<double>(vals.size());
    double var = 0.0;
    for (double v : vals) var += (v - mean) * (v - mean);
    var /= static_cast<double>(vals.size());
    s.dsc_mean = mean;
    s.dsc_std = std::sqrt(var);
    auto& hv = hd_vals[cls];
    if (!hv.empty()) {
      std::sort(hv.begin(), hv.end());
      s.hd95_median = percentile_sorted(hv, 0.5);
      s.hd95_q1 = percentile_sorted(hv, 0.25);
      s.hd95_q3 = percentile_sorted(hv, 0.75);
    }
  }
  return out;
}

}  // namespace dmc
