#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdint>
#include <vector>

#include "dmc/blocks.hpp"
#include "dmc/gradcheck.hpp"
#include "dmc/ops.hpp"
#include "dmc/rng.hpp"
#include "support/oracles.hpp"

using namespace dmc;

namespace {

const Tensor& P(const ParamStore& s, const std::string& n) {
  const int i = s.find(n);
  REQUIRE(i >= 0);
  return s.value(i);
}

void set_param(ParamStore& s, const std::string& n, const Tensor& v) {
  const int i = s.find(n);
  REQUIRE(i >= 0);
  s.value(i) = v;
}

std::int64_t unit_params(const ConvUnit& u) {
  std::vector<std::int64_t> ones(static_cast<std::size_t>(u.desc.spatial_rank), 1);
  return u.cost(ones).params;
}

// independent scalar pipeline for the three-path block, plain mode
Tensor dmrc_reference(const BuiltBlock& bb, const Tensor& x, int rank) {
  const auto& blk = std::get<DmrcBlock>(bb.block);
  const ConvDescriptor c3 = same_conv(rank, 3);
  const ConvDescriptor c1 = same_conv(rank, 1);
  const auto& st = bb.store;
  const Tensor bm = P(st, "block.main.bias"), bl = P(st, "block.low.bias");
  const Tensor bp = P(st, "block.pix.bias"), bo = P(st, "block.post.bias");
  const Tensor bg = P(st, "block.gate.bias");
  Tensor f1 = oracle::naive_conv(x, P(st, "block.main.weight"), &bm, c3);
  Tensor pooled = oracle::naive_pool(x, oracle::PoolKind::kAvg, blk.pool, blk.pool);
  Tensor f2 = oracle::naive_upsample_nearest(
      oracle::naive_conv(pooled, P(st, "block.low.weight"), &bl, c3), blk.pool);
  Tensor f3 = oracle::naive_conv(x, P(st, "block.pix.weight"), &bp, c1);
  Tensor fs = oracle::ew(f2, f3, '+');
  Tensor f = oracle::ew(f1, oracle::map_sigmoid(fs), '*');
  Tensor fp = oracle::naive_conv(f, P(st, "block.post.weight"), &bo, c3);
  Tensor gap = oracle::naive_global_avg_pool(fp);
  Tensor g = oracle::map_sigmoid(oracle::naive_conv(gap, P(st, "block.gate.weight"), &bg, c1));
  return oracle::ew(fp, g, '*');
}

// independent scalar pipeline for the two-scale block, plain mode
Tensor dmsc_reference(const BuiltBlock& bb, const Tensor& x, int rank, bool lightweight,
                      std::int64_t kb) {
  const auto& st = bb.store;
  const ConvDescriptor c3 = same_conv(rank, 3);
  const ConvDescriptor c1 = same_conv(rank, 1);
  const Tensor ba1 = P(st, "block.a1.bias"), ba2 = P(st, "block.a2.bias");
  const Tensor bb1 = P(st, "block.b1.bias"), bb2 = P(st, "block.b2.bias");
  const Tensor bg = P(st, "block.gate.bias"), br = P(st, "block.reduce.bias");
  Tensor f1 = oracle::naive_conv(x, P(st, "block.a1.weight"), &ba1, c3);
  Tensor xb = x;
  if (lightweight && st.find("block.b_proj.weight") >= 0) {
    const Tensor bpj = P(st, "block.b_proj.bias");
    xb = oracle::naive_conv(x, P(st, "block.b_proj.weight"), &bpj, c1);
  }
  const std::int64_t cb = xb.dim(1);
  ConvDescriptor ck = same_conv(rank, kb, lightweight ? cb : 1);
  Tensor f2 = oracle::naive_conv(xb, P(st, "block.b1.weight"), &bb1, ck);
  Tensor f1p = oracle::naive_conv(f1, P(st, "block.a2.weight"), &ba2, c3);
  ConvDescriptor ck2 = same_conv(rank, kb, lightweight ? f2.dim(1) : 1);
  Tensor f2p = oracle::naive_conv(f2, P(st, "block.b2.weight"), &bb2, ck2);
  Tensor f = oracle::concat_ch(f1p, f2p);
  Tensor gap = oracle::naive_global_avg_pool(f);
  Tensor g = oracle::map_sigmoid(oracle::naive_conv(gap, P(st, "block.gate.weight"), &bg, c1));
  Tensor fp = oracle::ew(f, g, '*');
  return oracle::naive_conv(fp, P(st, "block.reduce.weight"), &br, c1);
}

// derivative w.r.t. the block input: backpropagates through every layer
double block_input_gradcheck(const BuiltBlock& bb, const Tensor& x) {
  const BuiltBlock* b = &bb;
  return finite_diff_gradcheck(
      [b](Tape& t, const std::vector<Var>& v) {
        std::vector<Var> params;
        for (const auto& e : b->store.entries()) params.push_back(t.leaf(e.value));
        Var out = block_forward(b->block, t, params, v[0]);
        Tensor probe(t.value(out).shape());
        Rng local(12345);
        for (std::int64_t i = 0; i < probe.size(); ++i) probe[i] = local.uniform(-1.0, 1.0);
        return sum_all(mul(out, t.leaf(probe)));
      },
      {x});
}

// derivative w.r.t. all parameters; true gradients of deep gate/norm
// coordinates sit near the central-difference noise floor, so this is
// asserted at the fd-certifiable tolerance rather than 1e-6
double block_param_gradcheck(const BuiltBlock& bb, const Tensor& x) {
  std::vector<Tensor> inputs;
  for (const auto& e : bb.store.entries()) inputs.push_back(e.value);
  const BuiltBlock* b = &bb;
  const Tensor* xp = &x;
  return finite_diff_gradcheck(
      [b, xp](Tape& t, const std::vector<Var>& v) {
        Var out = block_forward(b->block, t, v, t.leaf(*xp));
        Tensor probe(t.value(out).shape());
        Rng local(12345);
        for (std::int64_t i = 0; i < probe.size(); ++i) probe[i] = local.uniform(-1.0, 1.0);
        return sum_all(mul(out, t.leaf(probe)));
      },
      inputs);
}

}  // namespace

TEST_CASE("channel gate examples") {
  SECTION("zero weights and bias give 0.5 everywhere") {
    BuiltBlock bb = build_block(BlockKind::kDmrc, 2, 2, 2, false, 5, /*plain=*/true);
    set_param(bb.store, "block.gate.weight", Tensor(Shape{2, 2, 1, 1}, 0.0));
    Rng rng(3);
    Tape t;
    std::vector<Var> pv;
    for (const auto& e : bb.store.entries()) pv.push_back(t.leaf(e.value));
    Var f = t.leaf(oracle::random_tensor(Shape{1, 2, 4, 4}, rng));
    Var g = channel_gate(t, pv, std::get<DmrcBlock>(bb.block).gate_linear, f);
    REQUIRE(t.value(g).shape() == Shape{1, 2, 1, 1});
    REQUIRE(t.value(g)[0] == 0.5);
    REQUIRE(t.value(g)[1] == 0.5);
  }
  SECTION("two-channel toy with identity linear") {
    BuiltBlock bb = build_block(BlockKind::kDmrc, 2, 2, 2, false, 5, true);
    Tensor eye(Shape{2, 2, 1, 1});
    eye[0] = 1.0;  // [oc=0][ic=0]
    eye[3] = 1.0;  // [oc=1][ic=1]
    set_param(bb.store, "block.gate.weight", eye);
    Tape t;
    std::vector<Var> pv;
    for (const auto& e : bb.store.entries()) pv.push_back(t.leaf(e.value));
    // GAP of f must be [1, -1]
    Tensor f(Shape{1, 2, 2, 2});
    for (int i = 0; i < 4; ++i) f[i] = 1.0;
    for (int i = 4; i < 8; ++i) f[i] = -1.0;
    Var g = channel_gate(t, pv, std::get<DmrcBlock>(bb.block).gate_linear, t.leaf(f));
    REQUIRE(t.value(g)[0] == Catch::Approx(0.7310585786300049).epsilon(1e-12));
    REQUIRE(t.value(g)[1] == Catch::Approx(0.2689414213699951).epsilon(1e-12));
  }
  SECTION("saturated positive bias makes the gate transparent") {
    BuiltBlock bb = build_block(BlockKind::kDmrc, 2, 2, 2, false, 5, true);
    set_param(bb.store, "block.gate.weight", Tensor(Shape{2, 2, 1, 1}, 0.0));
    set_param(bb.store, "block.gate.bias", Tensor(Shape{2}, 20.0));
    Rng rng(5);
    Tensor x = oracle::random_tensor(Shape{1, 2, 8, 8}, rng);
    Tape t;
    std::vector<Var> pv;
    for (const auto& e : bb.store.entries()) pv.push_back(t.leaf(e.value));
    Var xv = t.leaf(x);
    Var out = block_forward(bb.block, t, pv, xv);
    // gated output ~= ungated: the final node is mul(fp, g); compare against fp
    const auto& node = t.node(out.id);
    const Tensor& fp = t.value(node.parents[0]);
    REQUIRE(max_abs_diff(t.value(out), fp) < 1e-6);
  }
}

TEST_CASE("dmrc forward contract and oracle equivalence") {
  SECTION("shape preservation 1x4x16x16 -> 1x4x16x16") {
    BuiltBlock bb = build_block(BlockKind::kDmrc, 2, 4, 4, false, 7, true);
    Rng rng(11);
    Tape t;
    Var out = bb.apply(t, t.leaf(oracle::random_tensor(Shape{1, 4, 16, 16}, rng)));
    REQUIRE(t.value(out).shape() == Shape{1, 4, 16, 16});
  }
  SECTION("channel transition at path entry") {
    BuiltBlock bb = build_block(BlockKind::kDmrc, 2, 3, 6, false, 7, true);
    Rng rng(12);
    Tape t;
    Var out = bb.apply(t, t.leaf(oracle::random_tensor(Shape{2, 3, 8, 8}, rng)));
    REQUIRE(t.value(out).shape() == Shape{2, 6, 8, 8});
  }
  SECTION("all-zero conv weights annihilate the output") {
    BuiltBlock bb = build_block(BlockKind::kDmrc, 2, 2, 2, false, 13, true);
    for (auto& e : bb.store.entries()) e.value.fill(0.0);
    Rng rng(13);
    Tape t;
    Var out = bb.apply(t, t.leaf(oracle::random_tensor(Shape{1, 2, 8, 8}, rng)));
    for (std::int64_t i = 0; i < t.value(out).size(); ++i) REQUIRE(t.value(out)[i] == 0.0);
  }
  SECTION("indivisible pooled extent is a geometry error") {
    BuiltBlock bb = build_block(BlockKind::kDmrc, 2, 2, 2, false, 13, true);
    Tape t;
    REQUIRE_THROWS_AS(bb.apply(t, t.leaf(Tensor(Shape{1, 2, 6, 6}))), GeometryError);
  }
  SECTION("matches the scalar step-by-step pipeline") {
    for (int rank = 2; rank <= 3; ++rank) {
      BuiltBlock bb = build_block(BlockKind::kDmrc, rank, 2, 2, false,
                                  100 + static_cast<std::uint64_t>(rank), true);
      Rng rng(17);
      const Shape xs = rank == 2 ? Shape{1, 2, 8, 8} : Shape{1, 2, 8, 8, 2};
      Tensor x = oracle::random_tensor(xs, rng);
      Tape t;
      Var out = bb.apply(t, t.leaf(x));
      Tensor want = dmrc_reference(bb, x, rank);
      REQUIRE(max_abs_diff(t.value(out), want) < 1e-12);
    }
  }
  SECTION("single-channel 4x4 with hand-set weights matches the transcription") {
    BuiltBlock bb = build_block(BlockKind::kDmrc, 2, 1, 1, false, 1, true);
    Tensor w3(Shape{1, 1, 3, 3});
    for (int i = 0; i < 9; ++i) w3[i] = 0.05 * (i - 4);
    set_param(bb.store, "block.main.weight", w3);
    set_param(bb.store, "block.low.weight", Tensor(Shape{1, 1, 3, 3}, 0.1));
    Tensor w1(Shape{1, 1, 1, 1});
    w1[0] = -0.3;
    set_param(bb.store, "block.pix.weight", w1);
    set_param(bb.store, "block.post.weight", w3);
    Tensor wg(Shape{1, 1, 1, 1});
    wg[0] = 0.7;
    set_param(bb.store, "block.gate.weight", wg);
    set_param(bb.store, "block.main.bias", Tensor(Shape{1}, 0.02));
    Tensor x(Shape{1, 1, 4, 4});
    for (int i = 0; i < 16; ++i) x[i] = 0.1 * i - 0.8;
    Tape t;
    Var out = bb.apply(t, t.leaf(x));
    REQUIRE(max_abs_diff(t.value(out), dmrc_reference(bb, x, 2)) < 1e-12);
  }
}

TEST_CASE("dmsc forward contract and oracle equivalence") {
  SECTION("shape preservation 1x8x12x12 -> 1x8x12x12") {
    BuiltBlock bb = build_block(BlockKind::kDmsc, 2, 8, 8, false, 19, true);
    Rng rng(19);
    Tape t;
    Var out = bb.apply(t, t.leaf(oracle::random_tensor(Shape{1, 8, 12, 12}, rng)));
    REQUIRE(t.value(out).shape() == Shape{1, 8, 12, 12});
  }
  SECTION("selector reduce with transparent gate passes path A through") {
    const std::int64_t c = 3;
    BuiltBlock bb = build_block(BlockKind::kDmsc, 2, c, c, false, 23, true);
    Tensor sel(Shape{c, 2 * c, 1, 1}, 0.0);
    for (std::int64_t i = 0; i < c; ++i) sel[i * 2 * c + i] = 1.0;
    set_param(bb.store, "block.reduce.weight", sel);
    set_param(bb.store, "block.gate.weight", Tensor(Shape{2 * c, 2 * c, 1, 1}, 0.0));
    set_param(bb.store, "block.gate.bias", Tensor(Shape{2 * c}, 20.0));
    Rng rng(23);
    Tensor x = oracle::random_tensor(Shape{1, c, 6, 6}, rng);
    Tape t;
    Var out = bb.apply(t, t.leaf(x));
    // path A alone: a2(a1(x))
    const Tensor ba1 = P(bb.store, "block.a1.bias"), ba2 = P(bb.store, "block.a2.bias");
    Tensor f1 = oracle::naive_conv(x, P(bb.store, "block.a1.weight"), &ba1, same_conv(2, 3));
    Tensor f1p = oracle::naive_conv(f1, P(bb.store, "block.a2.weight"), &ba2, same_conv(2, 3));
    REQUIRE(max_abs_diff(t.value(out), f1p) < 1e-6);
  }
  SECTION("matches the scalar pipeline, standard and lightweight, both ranks") {
    for (int rank = 2; rank <= 3; ++rank) {
      for (bool lw : {false, true}) {
        for (std::int64_t kb : {5, 7}) {
          BuiltBlock bb = build_block(BlockKind::kDmsc, rank, 2, 2, lw,
                                      200 + static_cast<std::uint64_t>(rank) + (lw ? 10 : 0) +
                                          static_cast<std::uint64_t>(kb),
                                      true, kb);
          Rng rng(29);
          const Shape xs = rank == 2 ? Shape{1, 2, 7, 7} : Shape{1, 2, 5, 5, 5};
          Tensor x = oracle::random_tensor(xs, rng);
          Tape t;
          Var out = bb.apply(t, t.leaf(x));
          Tensor want = dmsc_reference(bb, x, rank, lw, kb);
          REQUIRE(max_abs_diff(t.value(out), want) < 1e-12);
        }
      }
    }
  }
  SECTION("lightweight with changing width inserts a counted projection") {
    BuiltBlock bb = build_block(BlockKind::kDmsc, 2, 3, 5, true, 31, true);
    REQUIRE(bb.store.find("block.b_proj.weight") >= 0);
    Rng rng(31);
    Tensor x = oracle::random_tensor(Shape{1, 3, 6, 6}, rng);
    Tape t;
    Var out = bb.apply(t, t.leaf(x));
    REQUIRE(t.value(out).shape() == Shape{1, 5, 6, 6});
    REQUIRE(max_abs_diff(t.value(out), dmsc_reference(bb, x, 2, true, 5)) < 1e-12);
  }
}

TEST_CASE("parameter count formulas") {
  SECTION("plain conv 2->4, rank 2: 76 params") {
    BuiltBlock bb = build_block(BlockKind::kPlainConv, 2, 2, 4, false, 1, true);
    REQUIRE(bb.store.total_elements() == 76);
  }
  SECTION("standard 5x5 path conv 4->4 contributes 404 per conv") {
    BuiltBlock bb = build_block(BlockKind::kDmsc, 2, 4, 4, false, 1, true);
    const auto& blk = std::get<DmscBlock>(bb.block);
    REQUIRE(unit_params(blk.path_b1) == 404);
    REQUIRE(unit_params(blk.path_b2) == 404);
  }
  SECTION("depthwise 5^3 conv with 4 channels contributes 504") {
    BuiltBlock bb = build_block(BlockKind::kDmsc, 3, 4, 4, true, 1, true);
    const auto& blk = std::get<DmscBlock>(bb.block);
    REQUIRE(unit_params(blk.path_b1) == 504);
    REQUIRE(bb.store.find("block.b_proj.weight") < 0);
  }
  SECTION("depthwise beats standard for every width >= 2") {
    for (std::int64_t c : {2, 4, 8, 32}) {
      const std::int64_t dw = c * 125 + c;
      const std::int64_t full = c * (c * 125 + 1);
      REQUIRE(dw < full);
    }
  }
  SECTION("deterministic under seed, different across seeds") {
    BuiltBlock a = build_block(BlockKind::kDmsc, 2, 4, 4, false, 77, false);
    BuiltBlock b = build_block(BlockKind::kDmsc, 2, 4, 4, false, 77, false);
    BuiltBlock c = build_block(BlockKind::kDmsc, 2, 4, 4, false, 78, false);
    REQUIRE(a.store.count() == b.store.count());
    double diff_same = 0.0, diff_other = 0.0;
    for (std::size_t i = 0; i < a.store.count(); ++i) {
      diff_same += max_abs_diff(a.store.value(static_cast<int>(i)),
                                b.store.value(static_cast<int>(i)));
      diff_other += max_abs_diff(a.store.value(static_cast<int>(i)),
                                 c.store.value(static_cast<int>(i)));
    }
    REQUIRE(diff_same == 0.0);
    REQUIRE(diff_other > 0.0);
  }
}

TEST_CASE("gate attenuation properties") {
  Rng rng(37);
  SECTION("dmrc: |output| <= |pre-gate features| elementwise") {
    BuiltBlock bb = build_block(BlockKind::kDmrc, 2, 3, 3, false, 41, false);
    Tape t;
    Var out = bb.apply(t, t.leaf(oracle::random_tensor(Shape{2, 3, 8, 8}, rng)));
    const Tensor& fp = t.value(t.node(out.id).parents[0]);
    const Tensor& o = t.value(out);
    for (std::int64_t i = 0; i < o.size(); ++i) REQUIRE(std::fabs(o[i]) <= std::fabs(fp[i]));
  }
  SECTION("dmsc: |gated concat| <= |concat| elementwise") {
    BuiltBlock bb = build_block(BlockKind::kDmsc, 2, 3, 3, false, 43, false);
    Tape t;
    Var out = bb.apply(t, t.leaf(oracle::random_tensor(Shape{1, 3, 8, 8}, rng)));
    // out = reduce(mul(concat, gate)): walk back two nodes
    const auto& reduce_node = t.node(out.id);
    std::int32_t mul_id = -1;
    for (std::int32_t pid : reduce_node.parents) {
      if (t.node(pid).label.find("calibrated") != std::string::npos) mul_id = pid;
    }
    // the reduce is conv(mul(...)); conv's first parent is the mul node
    if (mul_id < 0) mul_id = reduce_node.parents[0];
    const auto& mul_node = t.node(mul_id);
    const Tensor& gated = mul_node.value;
    const Tensor& concat = t.value(mul_node.parents[0]);
    for (std::int64_t i = 0; i < gated.size(); ++i)
      REQUIRE(std::fabs(gated[i]) <= std::fabs(concat[i]));
  }
}

TEST_CASE("block gradchecks") {
  SECTION("input gradient under 1e-6, dmrc 2d and 3d, plain and normed") {
    for (int rank = 2; rank <= 3; ++rank) {
      for (bool plain : {true, false}) {
        BuiltBlock bb = build_block(BlockKind::kDmrc, rank, 2, 2, false,
                                    300 + static_cast<std::uint64_t>(rank), plain);
        Rng rng(47);
        const Shape xs = rank == 2 ? Shape{1, 2, 8, 8} : Shape{1, 2, 8, 8, 2};
        REQUIRE(block_input_gradcheck(bb, oracle::random_tensor(xs, rng)) < 1e-6);
      }
    }
  }
  SECTION("input gradient under 1e-6, dmsc standard and lightweight, 2d and 3d") {
    for (int rank = 2; rank <= 3; ++rank) {
      for (bool lw : {false, true}) {
        for (bool plain : {true, false}) {
          BuiltBlock bb = build_block(BlockKind::kDmsc, rank, 2, 2, lw,
                                      400 + static_cast<std::uint64_t>(rank) + (lw ? 7 : 0),
                                      plain);
          Rng rng(53);
          const Shape xs = rank == 2 ? Shape{1, 2, 8, 8} : Shape{1, 2, 4, 4, 4};
          REQUIRE(block_input_gradcheck(bb, oracle::random_tensor(xs, rng)) < 1e-6);
        }
      }
    }
  }
  SECTION("parameter gradients at the fd noise floor") {
    for (int rank = 2; rank <= 3; ++rank) {
      BuiltBlock bd = build_block(BlockKind::kDmrc, rank, 2, 2, false,
                                  500 + static_cast<std::uint64_t>(rank), false);
      BuiltBlock bm = build_block(BlockKind::kDmsc, rank, 2, 2, rank == 3,
                                  510 + static_cast<std::uint64_t>(rank), false);
      Rng rng(57);
      const Shape xs = rank == 2 ? Shape{1, 2, 8, 8} : Shape{1, 2, 8, 8, 2};
      Tensor x = oracle::random_tensor(xs, rng);
      REQUIRE(block_param_gradcheck(bd, x) < 1e-4);
      REQUIRE(block_param_gradcheck(bm, x) < 1e-4);
    }
  }
}

TEST_CASE("spatial preservation across random valid geometries") {
  Rng rng(59);
  for (int it = 0; it < 10; ++it) {
    const int rank = rng.bernoulli(0.5) ? 2 : 3;
    const std::int64_t ci = 1 + rng.uniform_int(3);
    const std::int64_t co = 1 + rng.uniform_int(3);
    Shape xs{1, ci};
    for (int a = 0; a < rank; ++a) {
      const bool pooled_axis = !(rank == 3 && a == 2);
      xs.push_back(pooled_axis ? 4 * (1 + rng.uniform_int(3)) : 1 + rng.uniform_int(6));
    }
    Tensor x = oracle::random_tensor(xs, rng);
    BuiltBlock dmrc = build_block(BlockKind::kDmrc, rank, ci, co, false,
                                  static_cast<std::uint64_t>(600 + it), true);
    BuiltBlock dmsc = build_block(BlockKind::kDmsc, rank, ci, co, rng.bernoulli(0.5),
                                  static_cast<std::uint64_t>(700 + it), true);
    Tape t;
    Shape want = xs;
    want[1] = co;
    REQUIRE(t.value(dmrc.apply(t, t.leaf(x))).shape() == want);
    REQUIRE(t.value(dmsc.apply(t, t.leaf(x))).shape() == want);
  }
}
