#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

#include "dmc/rng.hpp"
#include "dmc/tape.hpp"
#include "dmc/tensor.hpp"

namespace dmc {

// Builds a scalar loss from leaf Vars created for each input tensor.
using TapeFn = std::function<Var(Tape&, const std::vector<Var>&)>;

// Central finite differences against the tape's analytic gradient.
// Relative error per coordinate uses max(|analytic|, |numeric|, 1e-8) as the
// denominator; the max over all checked coordinates is returned. If
// max_coords is positive and the total coordinate count exceeds it, a random
// subset (drawn from rng) is checked instead.
inline double finite_diff_gradcheck(const TapeFn& f, const std::vector<Tensor>& inputs,
                                    double h = 1e-5, std::int64_t max_coords = -1,
                                    Rng* rng = nullptr) {
  // analytic gradients at the base point
  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Var> leaves;
    leaves.reserve(inputs.size());
    for (const Tensor& in : inputs) leaves.push_back(tape.leaf(in, /*requires_grad=*/true));
    Var loss = f(tape, leaves);
    tape.backward(loss);
    for (const Var& v : leaves) {
      analytic.push_back(tape.has_grad(v) ? tape.grad(v) : Tensor(tape.value(v).shape()));
    }
  }

  auto eval = [&f](const std::vector<Tensor>& pts) {
    Tape tape;
    std::vector<Var> leaves;
    leaves.reserve(pts.size());
    for (const Tensor& in : pts) leaves.push_back(tape.leaf(in, /*requires_grad=*/false));
    Var loss = f(tape, leaves);
    return tape.value(loss)[0];
  };

  std::int64_t total = 0;
  for (const Tensor& in : inputs) total += in.size();

  std::vector<std::int64_t> coords;
  if (max_coords > 0 && total > max_coords && rng != nullptr) {
    std::vector<std::int64_t> all(static_cast<std::size_t>(total));
    for (std::int64_t i = 0; i < total; ++i) all[static_cast<std::size_t>(i)] = i;
    for (std::int64_t i = 0; i < max_coords; ++i) {
      const std::int64_t j = i + rng->uniform_int(total - i);
      std::swap(all[static_cast<std::size_t>(i)], all[static_cast<std::size_t>(j)]);
    }
    coords.assign(all.begin(), all.begin() + max_coords);
    std::sort(coords.begin(), coords.end());
  } else {
    coords.resize(static_cast<std::size_t>(total));
    for (std::int64_t i = 0; i < total; ++i) coords[static_cast<std::size_t>(i)] = i;
  }

  std::vector<Tensor> pts = inputs;
  double max_rel = 0.0;
  for (std::int64_t flat : coords) {
    std::size_t ti = 0;
    std::int64_t off = flat;
    while (off >= pts[ti].size()) {
      off -= pts[ti].size();
      ++ti;
    }
    const double saved = pts[ti][off];
    pts[ti][off] = saved + h;
    const double fp = eval(pts);
    pts[ti][off] = saved - h;
    const double fm = eval(pts);
    pts[ti][off] = saved;
    const double numeric = (fp - fm) / (2.0 * h);
    const double a = analytic[ti][off];
    const double rel = std::fabs(a - numeric) / std::max({std::fabs(a), std::fabs(numeric), 1e-8});
    max_rel = std::max(max_rel, rel);
  }
  return max_rel;
}

}  // namespace dmc
