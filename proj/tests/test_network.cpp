#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdint>
#include <vector>

#include "dmc/gradcheck.hpp"
#include "dmc/loss.hpp"
#include "dmc/network.hpp"
#include "support/oracles.hpp"

using namespace dmc;

namespace {

NetworkSpec tiny_spec(int rank, Variant v, std::vector<std::int64_t> ch = {4, 8},
                      bool plain = false) {
  NetworkSpec s;
  s.spatial_rank = rank;
  s.variant = v;
  s.stage_channels = std::move(ch);
  s.num_classes = 2;
  s.input_channels = 1;
  s.plain_convs = plain;
  s.seed = 7;
  return s;
}

}  // namespace

TEST_CASE("logit shape contracts") {
  SECTION("default 2d network maps 1x1x512x512 to 1x2x512x512") {
    NetworkSpec s;
    s.spatial_rank = 2;
    s.variant = Variant::kDmc;
    REQUIRE(infer_logits_shape(s, Shape{1, 1, 512, 512}) == Shape{1, 2, 512, 512});
  }
  SECTION("default 3d network maps 1x1x192x192x96 to 1x3x192x192x96") {
    NetworkSpec s;
    s.spatial_rank = 3;
    s.variant = Variant::kDmc;
    s.num_classes = 3;
    REQUIRE(infer_logits_shape(s, Shape{1, 1, 192, 192, 96}) == Shape{1, 3, 192, 192, 96});
  }
  SECTION("tiny 3-stage network, real forward on 1x1x32x32") {
    NetworkSpec s = tiny_spec(2, Variant::kDmc, {8, 16, 32});
    Model m = build_network(s);
    Rng rng(3);
    auto r = model_forward(m, oracle::random_tensor(Shape{1, 1, 32, 32}, rng), false);
    REQUIRE(r.tape->value(r.logits).shape() == Shape{1, 2, 32, 32});
  }
  SECTION("indivisible geometry raises with the required divisor") {
    NetworkSpec s = tiny_spec(2, Variant::kDmc, {8, 16, 32});
    Model m = build_network(s);
    try {
      (void)model_forward(m, Tensor(Shape{1, 1, 36, 36}), false);
      FAIL("expected GeometryError");
    } catch (const GeometryError& e) {
      REQUIRE(std::string(e.what()).find("divisible") != std::string::npos);
    }
  }
  SECTION("all variants preserve spatial extents across ranks") {
    for (Variant v : {Variant::kUnet, Variant::kDmrc, Variant::kDmsc, Variant::kDmc}) {
      for (int rank = 2; rank <= 3; ++rank) {
        NetworkSpec s = tiny_spec(rank, v);
        Model m = build_network(s);
        Rng rng(5);
        const Shape in = rank == 2 ? Shape{2, 1, 16, 16} : Shape{1, 1, 8, 16, 16};
        auto r = model_forward(m, oracle::random_tensor(in, rng), false);
        Shape want = in;
        want[1] = 2;
        REQUIRE(r.tape->value(r.logits).shape() == want);
      }
    }
  }
}

TEST_CASE("forward determinism and annihilation") {
  NetworkSpec s = tiny_spec(2, Variant::kDmc);
  Model m = build_network(s);
  Rng rng(11);
  Tensor x = oracle::random_tensor(Shape{1, 1, 16, 16}, rng);
  SECTION("same input twice gives bit-identical logits") {
    auto a = model_forward(m, x, false);
    auto b = model_forward(m, x, false);
    REQUIRE(max_abs_diff(a.tape->value(a.logits), b.tape->value(b.logits)) == 0.0);
  }
  SECTION("all-zero parameters give all-zero logits") {
    for (auto& e : m.params.entries()) e.value.fill(0.0);
    auto r = model_forward(m, x, false);
    const Tensor& y = r.tape->value(r.logits);
    for (std::int64_t i = 0; i < y.size(); ++i) REQUIRE(y[i] == 0.0);
  }
}

TEST_CASE("parameter initialization") {
  SECTION("same seed reproduces bytes, different seed differs") {
    NetworkSpec s = tiny_spec(3, Variant::kDmc);
    Model a = build_network(s);
    Model b = build_network(s);
    REQUIRE(a.params.count() == b.params.count());
    for (std::size_t i = 0; i < a.params.count(); ++i) {
      REQUIRE(max_abs_diff(a.params.value(static_cast<int>(i)),
                           b.params.value(static_cast<int>(i))) == 0.0);
    }
    init_params(b, 1234);
    bool any_diff = false;
    for (std::size_t i = 0; i < a.params.count(); ++i) {
      if (max_abs_diff(a.params.value(static_cast<int>(i)),
                       b.params.value(static_cast<int>(i))) > 0.0)
        any_diff = true;
    }
    REQUIRE(any_diff);
    init_params(b, s.seed);
    for (std::size_t i = 0; i < a.params.count(); ++i) {
      REQUIRE(max_abs_diff(a.params.value(static_cast<int>(i)),
                           b.params.value(static_cast<int>(i))) == 0.0);
    }
  }
  SECTION("empirical weight variance sits within 3x of the He target") {
    NetworkSpec s = tiny_spec(2, Variant::kUnet, {16, 32});
    Model m = build_network(s);
    // enc1.b0 conv: 16 -> 32, 3x3 kernel: 4608 elements, fan_in 144
    const int id = m.params.find("enc1.b0.conv.weight");
    REQUIRE(id >= 0);
    const Tensor& w = m.params.value(id);
    REQUIRE(w.size() >= 1000);
    double mean = 0.0;
    for (std::int64_t i = 0; i < w.size(); ++i) mean += w[i];
    mean /= static_cast<double>(w.size());
    double var = 0.0;
    for (std::int64_t i = 0; i < w.size(); ++i) var += (w[i] - mean) * (w[i] - mean);
    var /= static_cast<double>(w.size());
    const double target = 2.0 / 144.0;
    REQUIRE(var > target / 3.0);
    REQUIRE(var < target * 3.0);
  }
}

TEST_CASE("parameter names are stable and unique") {
  NetworkSpec s = tiny_spec(2, Variant::kDmc);
  Model a = build_network(s);
  Model b = build_network(s);
  REQUIRE(a.params.count() == b.params.count());
  for (std::size_t i = 0; i < a.params.count(); ++i) {
    REQUIRE(a.params.entry(static_cast<int>(i)).name == b.params.entry(static_cast<int>(i)).name);
    REQUIRE(a.params.find(a.params.entry(static_cast<int>(i)).name) == static_cast<int>(i));
  }
}

TEST_CASE("end-to-end gradcheck on the tiny config") {
  // input gradient through the full network + combined loss; the seeds keep
  // every leaky-relu pre-activation and max-pool margin outside the +-h band
  // where central differences straddle a kink
  NetworkSpec s = tiny_spec(2, Variant::kDmc);
  s.seed = 21;
  Model m = build_network(s);
  LabelMap y;
  y.shape = {1, 16, 16};
  Rng rng(31);
  for (int i = 0; i < 256; ++i) y.ids.push_back(static_cast<std::int32_t>(rng.uniform_int(2)));
  Tensor x = oracle::random_tensor(Shape{1, 1, 16, 16}, rng);
  const Model* mp = &m;
  const double err = finite_diff_gradcheck(
      [mp, &y](Tape& t, const std::vector<Var>& v) {
        std::vector<Var> pv;
        for (const auto& e : mp->params.entries()) pv.push_back(t.leaf(e.value));
        Var logits = network_apply(*mp, t, pv, v[0]);
        return combined_loss(logits, y);
      },
      {x});
  REQUIRE(err < 1e-5);

  // sampled parameter coordinates through the same loss
  std::vector<Tensor> params;
  for (const auto& e : m.params.entries()) params.push_back(e.value);
  Rng pick(29);
  const Tensor* xp = &x;
  const double perr = finite_diff_gradcheck(
      [mp, &y, xp](Tape& t, const std::vector<Var>& v) {
        Var logits = network_apply(*mp, t, v, t.leaf(*xp));
        return combined_loss(logits, y);
      },
      params, 1e-5, /*max_coords=*/160, &pick);
  REQUIRE(perr < 1e-5);
}

TEST_CASE("training-mode forward populates parameter gradients") {
  NetworkSpec s = tiny_spec(3, Variant::kDmc);
  Model m = build_network(s);
  Rng rng(31);
  Tensor x = oracle::random_tensor(Shape{1, 1, 8, 16, 16}, rng);
  LabelMap y;
  y.shape = {1, 8, 16, 16};
  for (int i = 0; i < 8 * 16 * 16; ++i)
    y.ids.push_back(static_cast<std::int32_t>(rng.uniform_int(2)));
  auto r = model_forward(m, x, true);
  Var loss = combined_loss(r.logits, y);
  r.tape->backward(loss);
  std::size_t with_grad = 0;
  for (const Var& pv : r.param_vars) {
    if (r.tape->has_grad(pv)) ++with_grad;
  }
  REQUIRE(with_grad == m.params.count());
}
