#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dmc/blocks.hpp"
#include "dmc/gradcheck.hpp"
#include "dmc/loss.hpp"
#include "dmc/network.hpp"
#include "dmc/ops.hpp"

// The finite-difference suite behind `gradcheck` and the acceptance gate:
// every primitive op (all inputs, including weights and biases), both block
// families (gradient w.r.t. the block input, plain and normed), and a tiny
// end-to-end network under the combined loss. Seeds are fixed and chosen so
// no pre-activation sits within the stencil's +-h band of a kink.

namespace dmc {

struct GradcheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool pass = false;
};

namespace detail {

inline Tensor gc_random(const Shape& s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(s);
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

inline Tensor gc_probe(const Shape& s) {
  Rng rng(987654321);
  return gc_random(s, rng);
}

// values in +-[margin, 1]: keeps kinked activations differentiable at x+-h
inline Tensor gc_random_off_zero(const Shape& s, Rng& rng, double margin = 0.05) {
  Tensor t(s);
  for (std::int64_t i = 0; i < t.size(); ++i) {
    const double u = rng.uniform(-1.0, 1.0);
    t[i] = u >= 0.0 ? margin + (1.0 - margin) * u : -margin + (1.0 - margin) * u;
  }
  return t;
}

}  // namespace detail

inline std::vector<GradcheckEntry> run_gradcheck_suite() {
  std::vector<GradcheckEntry> out;
  auto check = [&out](const std::string& name, double tol, const TapeFn& fn,
                      const std::vector<Tensor>& inputs, std::int64_t max_coords = -1,
                      Rng* pick = nullptr) {
    GradcheckEntry e;
    e.name = name;
    e.tolerance = tol;
    e.max_rel_error = finite_diff_gradcheck(fn, inputs, 1e-5, max_coords, pick);
    e.pass = e.max_rel_error < tol;
    out.push_back(e);
  };

  // ---- primitives ----
  {
    Rng rng(101);
    check("conv2d (x, w, b)", 1e-6,
          [](Tape&, const std::vector<Var>& v) {
            Var y = conv_nd(v[0], v[1], v[2], same_conv(2, 3));
            return sum_all(mul(y, y));
          },
          {detail::gc_random(Shape{2, 3, 6, 6}, rng), detail::gc_random(Shape{4, 3, 3, 3}, rng),
           detail::gc_random(Shape{4}, rng)});
  }
  {
    Rng rng(102);
    check("conv3d grouped (x, w, b)", 1e-6,
          [](Tape&, const std::vector<Var>& v) {
            Var y = conv_nd(v[0], v[1], v[2], same_conv(3, 3, 2));
            return sum_all(mul(y, y));
          },
          {detail::gc_random(Shape{1, 4, 4, 5, 5}, rng),
           detail::gc_random(Shape{4, 2, 3, 3, 3}, rng), detail::gc_random(Shape{4}, rng)});
  }
  {
    Rng rng(103);
    check("conv2d strided", 1e-6,
          [](Tape&, const std::vector<Var>& v) {
            ConvDescriptor d = same_conv(2, 3);
            d.stride = {2, 2};
            Var y = conv_nd(v[0], v[1], std::nullopt, d);
            return sum_all(mul(y, y));
          },
          {detail::gc_random(Shape{1, 2, 7, 7}, rng), detail::gc_random(Shape{3, 2, 3, 3}, rng)});
  }
  {
    Rng rng(104);
    check("transposed conv2d (x, w, b)", 1e-6,
          [](Tape&, const std::vector<Var>& v) {
            Var y = transposed_conv_nd(v[0], v[1], v[2], upscale_transposed(2));
            return sum_all(mul(y, y));
          },
          {detail::gc_random(Shape{1, 3, 4, 4}, rng), detail::gc_random(Shape{3, 2, 3, 3}, rng),
           detail::gc_random(Shape{2}, rng)});
  }
  {
    Rng rng(105);
    check("transposed conv3d", 1e-6,
          [](Tape&, const std::vector<Var>& v) {
            Var y = transposed_conv_nd(v[0], v[1], std::nullopt, upscale_transposed(3));
            return sum_all(mul(y, y));
          },
          {detail::gc_random(Shape{1, 2, 3, 3, 3}, rng),
           detail::gc_random(Shape{2, 2, 3, 3, 3}, rng)});
  }
  {
    Rng rng(106);
    check("avg pool 4x4", 1e-6,
          [](Tape&, const std::vector<Var>& v) {
            Var y = avg_pool_nd(v[0], {4, 4}, {4, 4});
            return sum_all(mul(y, y));
          },
          {detail::gc_random(Shape{1, 2, 8, 8}, rng)});
    check("avg pool 1x4x4", 1e-6,
          [](Tape&, const std::vector<Var>& v) {
            Var y = avg_pool_nd(v[0], {4, 4, 1}, {4, 4, 1});
            return sum_all(mul(y, y));
          },
          {detail::gc_random(Shape{1, 2, 4, 4, 3}, rng)});
  }
  {
    Rng rng(107);
    check("max pool 2x2", 1e-6,
          [](Tape&, const std::vector<Var>& v) {
            Var y = max_pool_nd(v[0], {2, 2}, {2, 2});
            return sum_all(mul(y, y));
          },
          {detail::gc_random(Shape{1, 3, 6, 6}, rng)});
  }
  {
    Rng rng(108);
    check("nearest upsample", 1e-6,
          [](Tape&, const std::vector<Var>& v) {
            Var y = upsample_nearest_nd(v[0], {4, 4});
            return sum_all(mul(y, y));
          },
          {detail::gc_random(Shape{1, 2, 3, 3}, rng)});
  }
  {
    Rng rng(109);
    check("sigmoid", 1e-6,
          [](Tape&, const std::vector<Var>& v) { return sum_all(sigmoid(v[0])); },
          {detail::gc_random(Shape{1, 2, 4, 4}, rng, -3.0, 3.0)});
    const Tensor lr_probe = detail::gc_probe(Shape{1, 2, 5, 5});
    check("leaky relu", 1e-6,
          [lr_probe](Tape& t, const std::vector<Var>& v) {
            Var y = leaky_relu(v[0], 0.01);
            return sum_all(mul(y, t.leaf(lr_probe)));
          },
          {detail::gc_random_off_zero(Shape{1, 2, 5, 5}, rng)});
  }
  {
    Rng rng(110);
    check("channel-broadcast gate mul", 1e-6,
          [](Tape&, const std::vector<Var>& v) {
            return sum_all(mul(v[0], sigmoid(v[1])));
          },
          {detail::gc_random(Shape{2, 3, 4, 4}, rng), detail::gc_random(Shape{2, 3, 1, 1}, rng)});
    check("concat channels", 1e-6,
          [](Tape&, const std::vector<Var>& v) {
            Var y = concat_channels(v[0], v[1]);
            return sum_all(mul(y, y));
          },
          {detail::gc_random(Shape{1, 2, 4, 4}, rng), detail::gc_random(Shape{1, 3, 4, 4}, rng)});
    check("global average pool", 1e-6,
          [](Tape&, const std::vector<Var>& v) {
            Var y = global_avg_pool(v[0]);
            return sum_all(mul(y, y));
          },
          {detail::gc_random(Shape{2, 3, 4, 4}, rng)});
  }
  {
    Rng rng(111);
    const Tensor probe = detail::gc_probe(Shape{2, 3, 4, 4});
    check("instance norm (x, gamma, beta)", 1e-6,
          [probe](Tape& t, const std::vector<Var>& v) {
            Var y = instance_norm(v[0], v[1], v[2]);
            return sum_all(mul(sigmoid(y), t.leaf(probe)));
          },
          {detail::gc_random(Shape{2, 3, 4, 4}, rng),
           detail::gc_random(Shape{3}, rng, 0.5, 1.5), detail::gc_random(Shape{3}, rng)});
  }
  {
    Rng rng(112);
    LabelMap y;
    y.shape = {2, 3, 3};
    for (int i = 0; i < 18; ++i) y.ids.push_back(static_cast<std::int32_t>(rng.uniform_int(3)));
    const std::vector<Tensor> logits{detail::gc_random(Shape{2, 3, 3, 3}, rng, -2.0, 2.0)};
    check("cross entropy", 1e-6,
          [y](Tape&, const std::vector<Var>& v) { return cross_entropy_loss(v[0], y); },
          logits);
    check("soft dice", 1e-6,
          [y](Tape&, const std::vector<Var>& v) { return soft_dice_loss(v[0], y); }, logits);
    check("combined loss", 1e-6,
          [y](Tape&, const std::vector<Var>& v) { return combined_loss(v[0], y); }, logits);
  }

  // ---- blocks: gradient w.r.t. the input, which backpropagates through
  // every layer of the block ----
  auto block_check = [&check](const std::string& name, BlockKind kind, int rank, bool lw,
                              bool plain, std::uint64_t seed, const Shape& xs) {
    BuiltBlock bb = build_block(kind, rank, 2, 2, lw, seed, plain);
    Rng rng(seed * 13 + 1);
    Tensor x = detail::gc_random(xs, rng);
    const Tensor probe = detail::gc_probe(xs);
    // shared store copy keeps the closure self-contained
    auto fn = [bb = std::move(bb), probe](Tape& t, const std::vector<Var>& v) {
      std::vector<Var> params;
      for (const auto& e : bb.store.entries()) params.push_back(t.leaf(e.value));
      Var out = block_forward(bb.block, t, params, v[0]);
      return sum_all(mul(out, t.leaf(probe)));
    };
    check(name, 1e-6, fn, {x});
  };
  block_check("dmrc 2d plain", BlockKind::kDmrc, 2, false, true, 301, Shape{1, 2, 8, 8});
  block_check("dmrc 2d normed", BlockKind::kDmrc, 2, false, false, 302, Shape{1, 2, 8, 8});
  block_check("dmrc 3d plain", BlockKind::kDmrc, 3, false, true, 303, Shape{1, 2, 8, 8, 2});
  block_check("dmrc 3d normed", BlockKind::kDmrc, 3, false, false, 304, Shape{1, 2, 8, 8, 2});
  block_check("dmsc 2d standard", BlockKind::kDmsc, 2, false, false, 305, Shape{1, 2, 8, 8});
  block_check("dmsc 2d lightweight", BlockKind::kDmsc, 2, true, false, 306, Shape{1, 2, 8, 8});
  block_check("dmsc 3d standard", BlockKind::kDmsc, 3, false, false, 307, Shape{1, 2, 4, 4, 4});
  block_check("dmsc 3d lightweight", BlockKind::kDmsc, 3, true, false, 308, Shape{1, 2, 4, 4, 4});
  block_check("dmsc 2d standard plain", BlockKind::kDmsc, 2, false, true, 309, Shape{1, 2, 8, 8});
  block_check("dmsc 3d lightweight plain", BlockKind::kDmsc, 3, true, true, 310,
              Shape{1, 2, 4, 4, 4});

  // ---- tiny end-to-end network + combined loss ----
  {
    NetworkSpec s;
    s.spatial_rank = 2;
    s.variant = Variant::kDmc;
    s.stage_channels = {4, 8};
    s.num_classes = 2;
    s.seed = 21;
    Model m = build_network(s);
    LabelMap y;
    y.shape = {1, 16, 16};
    Rng rng(31);
    for (int i = 0; i < 256; ++i) y.ids.push_back(static_cast<std::int32_t>(rng.uniform_int(2)));
    Tensor x = detail::gc_random(Shape{1, 1, 16, 16}, rng);

    std::vector<Tensor> params;
    for (const auto& e : m.params.entries()) params.push_back(e.value);
    auto input_fn = [&m, y](Tape& t, const std::vector<Var>& v) {
      std::vector<Var> pv;
      for (const auto& e : m.params.entries()) pv.push_back(t.leaf(e.value));
      Var logits = network_apply(m, t, pv, v[0]);
      return combined_loss(logits, y);
    };
    check("end-to-end dmc net: input gradient", 1e-5, input_fn, {x});

    Rng pick(29);
    auto param_fn = [&m, y, x](Tape& t, const std::vector<Var>& v) {
      Var logits = network_apply(m, t, v, t.leaf(x));
      return combined_loss(logits, y);
    };
    check("end-to-end dmc net: sampled parameter gradients", 1e-5, param_fn, params, 160, &pick);
  }
  return out;
}

}  // namespace dmc
