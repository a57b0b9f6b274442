#pragma once

#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "dmc/layers.hpp"
#include "dmc/ops.hpp"
#include "dmc/params.hpp"
#include "dmc/tape.hpp"

// The two drop-in convolution blocks plus the plain conv they replace.
//
// DMRC fuses three parallel views of the input: a full-resolution 3-kernel
// path, a pooled+upsampled 3-kernel path carrying neighbourhood context, and
// a 1-kernel pixel path. The pooled and pixel paths gate the main path
// spatially through a sigmoid, a post conv mixes the result, and a channel
// gate (GAP -> linear -> sigmoid) recalibrates the output.
//
// DMSC runs two depth-2 paths with kernel 3 and kernel 5 (the 5-kernel path
// optionally depthwise), concatenates them, applies the same channel gate on
// the doubled channels, and reduces back with a 1-kernel conv.

namespace dmc {

enum class BlockKind { kPlainConv, kDmrc, kDmsc };

struct BlockConfig {
  BlockKind kind = BlockKind::kPlainConv;
  int rank = 2;
  std::int64_t c_in = 0;
  std::int64_t c_out = 0;
  bool lightweight = false;     // DMSC: depthwise 5-kernel path
  std::int64_t dmsc_kernel = 5; // DMSC: kernel of the wide path (5 or 7)
  std::int64_t dmrc_pool = 4;   // DMRC: pool factor on H and W
  bool plain = false;           // bare convs: no norms, no leaky relus
};

struct PlainConvBlock {
  ConvUnit conv;
};

struct DmrcBlock {
  ConvUnit conv_main, conv_low, conv_pix, conv_post, gate_linear;
  std::vector<std::int64_t> pool;  // filter == stride, z axis never pooled in 3D
};

struct DmscBlock {
  ConvUnit path_a1, path_a2;
  std::optional<ConvUnit> path_b_proj;  // depthwise path cannot change width
  ConvUnit path_b1, path_b2, gate_linear, reduce;
};

using Block = std::variant<PlainConvBlock, DmrcBlock, DmscBlock>;

inline Block build_block_in(ParamStore& store, Rng& rng, const std::string& name,
                            const BlockConfig& cfg) {
  if (cfg.rank != 2 && cfg.rank != 3) {
    throw ConfigError("build_block: spatial rank must be 2 or 3, got " +
                      std::to_string(cfg.rank));
  }
  if (cfg.c_in < 1 || cfg.c_out < 1) {
    throw ConfigError("build_block: channel counts must be >= 1");
  }
  const bool plain = cfg.plain;
  ConvUnit::Options path;
  path.norm = !plain;
  path.act = plain ? Act::kNone : Act::kLeakyRelu;
  ConvUnit::Options gate;
  gate.act = Act::kSigmoid;
  gate.init_scale = 0.1;  // gates start near 0.5 so both paths see signal early

  switch (cfg.kind) {
    case BlockKind::kPlainConv: {
      PlainConvBlock b;
      b.conv = ConvUnit::build(store, rng, name + ".conv", cfg.rank, cfg.c_in, cfg.c_out,
                               3, path);
      return b;
    }
    case BlockKind::kDmrc: {
      DmrcBlock b;
      b.pool.assign(static_cast<std::size_t>(cfg.rank), cfg.dmrc_pool);
      if (cfg.rank == 3) b.pool[2] = 1;  // through-plane axis (last) is never pooled
      b.conv_main = ConvUnit::build(store, rng, name + ".main", cfg.rank, cfg.c_in,
                                    cfg.c_out, 3, path);
      b.conv_low = ConvUnit::build(store, rng, name + ".low", cfg.rank, cfg.c_in,
                                   cfg.c_out, 3, path);
      ConvUnit::Options pix = path;
      pix.act = Act::kNone;  // feeds the additive fusion
      b.conv_pix = ConvUnit::build(store, rng, name + ".pix", cfg.rank, cfg.c_in,
                                   cfg.c_out, 1, pix);
      b.conv_post = ConvUnit::build(store, rng, name + ".post", cfg.rank, cfg.c_out,
                                    cfg.c_out, 3, path);
      b.gate_linear = ConvUnit::build(store, rng, name + ".gate", cfg.rank, cfg.c_out,
                                      cfg.c_out, 1, gate);
      return b;
    }
    case BlockKind::kDmsc: {
      DmscBlock b;
      b.path_a1 = ConvUnit::build(store, rng, name + ".a1", cfg.rank, cfg.c_in,
                                  cfg.c_out, 3, path);
      if (cfg.lightweight) {
        if (cfg.c_in != cfg.c_out) {
          b.path_b_proj = ConvUnit::build(store, rng, name + ".b_proj", cfg.rank,
                                          cfg.c_in, cfg.c_out, 1, path);
        }
        ConvUnit::Options dw = path;
        dw.groups = cfg.c_out;
        b.path_b1 = ConvUnit::build(store, rng, name + ".b1", cfg.rank, cfg.c_out,
                                    cfg.c_out, cfg.dmsc_kernel, dw);
        b.path_b2 = ConvUnit::build(store, rng, name + ".b2", cfg.rank, cfg.c_out,
                                    cfg.c_out, cfg.dmsc_kernel, dw);
      } else {
        b.path_b1 = ConvUnit::build(store, rng, name + ".b1", cfg.rank, cfg.c_in,
                                    cfg.c_out, cfg.dmsc_kernel, path);
        b.path_b2 = ConvUnit::build(store, rng, name + ".b2", cfg.rank, cfg.c_out,
                                    cfg.c_out, cfg.dmsc_kernel, path);
      }
      b.path_a2 = ConvUnit::build(store, rng, name + ".a2", cfg.rank, cfg.c_out,
                                  cfg.c_out, 3, path);
      b.gate_linear = ConvUnit::build(store, rng, name + ".gate", cfg.rank,
                                      2 * cfg.c_out, 2 * cfg.c_out, 1, gate);
      ConvUnit::Options bare;
      b.reduce = ConvUnit::build(store, rng, name + ".reduce", cfg.rank, 2 * cfg.c_out,
                                 cfg.c_out, 1, bare);
      return b;
    }
  }
  throw ConfigError("build_block: unknown block kind");
}

// GAP -> 1-kernel linear -> sigmoid; every entry strictly in (0, 1).
inline Var channel_gate(Tape&, const std::vector<Var>& params,
                        const ConvUnit& gate_linear, Var f) {
  return gate_linear.forward(params, global_avg_pool(f, gate_linear.name + ".gap"));
}

inline Var dmrc_forward(const DmrcBlock& b, Tape& t, const std::vector<Var>& params,
                        Var x) {
  Var f1 = b.conv_main.forward(params, x);
  Var pooled = avg_pool_nd(x, b.pool, b.pool, b.conv_low.name + ".pool");
  Var f2 = upsample_nearest_nd(b.conv_low.forward(params, pooled), b.pool,
                               b.conv_low.name + ".up");
  Var f3 = b.conv_pix.forward(params, x);
  Var fs = add(f2, f3, b.conv_pix.name + ".fuse");
  Var f = mul(f1, sigmoid(fs, b.conv_main.name + ".spatial_gate"),
              b.conv_main.name + ".gated");
  Var fp = b.conv_post.forward(params, f);
  Var g = channel_gate(t, params, b.gate_linear, fp);
  return mul(fp, g, b.conv_post.name + ".calibrated");
}

inline Var dmsc_forward(const DmscBlock& b, Tape& t, const std::vector<Var>& params,
                        Var x) {
  Var f1 = b.path_a1.forward(params, x);
  Var xb = b.path_b_proj ? b.path_b_proj->forward(params, x) : x;
  Var f2 = b.path_b1.forward(params, xb);
  Var f1p = b.path_a2.forward(params, f1);
  Var f2p = b.path_b2.forward(params, f2);
  Var f = concat_channels(f1p, f2p, b.reduce.name + ".concat");
  Var g = channel_gate(t, params, b.gate_linear, f);
  Var fp = mul(f, g, b.reduce.name + ".calibrated");
  return b.reduce.forward(params, fp);
}

inline Var block_forward(const Block& blk, Tape& t, const std::vector<Var>& params,
                         Var x) {
  if (const auto* p = std::get_if<PlainConvBlock>(&blk)) return p->conv.forward(params, x);
  if (const auto* d = std::get_if<DmrcBlock>(&blk)) return dmrc_forward(*d, t, params, x);
  return dmsc_forward(std::get<DmscBlock>(blk), t, params, x);
}

// ---- analytic cost ----

namespace detail {

inline std::int64_t prod(const std::vector<std::int64_t>& v) {
  return std::accumulate(v.begin(), v.end(), std::int64_t{1}, std::multiplies<>());
}

}  // namespace detail

inline void block_costs(const Block& blk, const std::vector<std::int64_t>& in_sp,
                        std::vector<LayerCost>& out) {
  const std::vector<std::int64_t> ones(in_sp.size(), 1);
  if (const auto* p = std::get_if<PlainConvBlock>(&blk)) {
    out.push_back(p->conv.cost(in_sp));
    return;
  }
  if (const auto* d = std::get_if<DmrcBlock>(&blk)) {
    const std::int64_t sp = detail::prod(in_sp);
    std::vector<std::int64_t> pooled_sp;
    for (std::size_t a = 0; a < in_sp.size(); ++a) pooled_sp.push_back(in_sp[a] / d->pool[a]);
    const std::int64_t psp = detail::prod(pooled_sp);
    out.push_back(d->conv_main.cost(in_sp));
    out.push_back(d->conv_low.cost(pooled_sp));
    out.push_back(d->conv_pix.cost(in_sp));
    out.push_back(d->conv_post.cost(in_sp));
    out.push_back(d->gate_linear.cost(ones));
    LayerCost ops;
    ops.name = d->conv_main.name.substr(0, d->conv_main.name.rfind('.')) + ".ops";
    ops.kind = "ops";
    const std::int64_t c = d->conv_main.c_out;
    ops.aux_ops = d->conv_low.c_in * psp  // avg pool
                  + c * sp                // upsample
                  + c * sp                // additive fusion
                  + c * sp                // spatial sigmoid
                  + c * sp                // spatial gating mul
                  + c                     // global average pool
                  + c * sp;               // channel gating mul
    out.push_back(ops);
    return;
  }
  const auto& m = std::get<DmscBlock>(blk);
  out.push_back(m.path_a1.cost(in_sp));
  if (m.path_b_proj) out.push_back(m.path_b_proj->cost(in_sp));
  out.push_back(m.path_b1.cost(in_sp));
  out.push_back(m.path_a2.cost(in_sp));
  out.push_back(m.path_b2.cost(in_sp));
  out.push_back(m.gate_linear.cost(ones));
  out.push_back(m.reduce.cost(in_sp));
  LayerCost ops;
  ops.name = m.reduce.name.substr(0, m.reduce.name.rfind('.')) + ".ops";
  ops.kind = "ops";
  const std::int64_t sp = detail::prod(in_sp);
  const std::int64_t c2 = m.gate_linear.c_out;
  ops.aux_ops = c2            // global average pool
                + c2 * sp;    // channel gating mul
  out.push_back(ops);
}

// Standalone build for desk checks: the block plus its own store.
struct BuiltBlock {
  ParamStore store;
  Block block;

  // Runs the block on x with every parameter entered as a tape leaf.
  Var apply(Tape& t, Var x, bool params_require_grad = false) const {
    std::vector<Var> pv;
    pv.reserve(store.count());
    for (const auto& e : store.entries()) {
      pv.push_back(t.leaf(e.value, params_require_grad, e.name));
    }
    return block_forward(block, t, pv, x);
  }
};

inline BuiltBlock build_block(BlockKind kind, int rank, std::int64_t c_in,
                              std::int64_t c_out, bool lightweight, std::uint64_t seed,
                              bool plain = false, std::int64_t dmsc_kernel = 5,
                              std::int64_t dmrc_pool = 4) {
  BuiltBlock built;
  Rng rng(seed);
  BlockConfig cfg;
  cfg.kind = kind;
  cfg.rank = rank;
  cfg.c_in = c_in;
  cfg.c_out = c_out;
  cfg.lightweight = lightweight;
  cfg.dmsc_kernel = dmsc_kernel;
  cfg.dmrc_pool = dmrc_pool;
  cfg.plain = plain;
  built.block = build_block_in(built.store, rng, "block", cfg);
  return built;
}

}  // namespace dmc
