#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdint>
#include <vector>

#include "dmc/gradcheck.hpp"
#include "dmc/loss.hpp"
#include "dmc/ops.hpp"
#include "dmc/rng.hpp"
#include "dmc/tape.hpp"
#include "support/oracles.hpp"

using namespace dmc;

TEST_CASE("activation values") {
  Tape t;
  Tensor x(Shape{1, 1, 1, 3}, std::vector<double>{-3.0, 0.0, 3.0});
  Var xv = t.leaf(x, true);
  Var s = sigmoid(xv);
  REQUIRE(t.value(s)[1] == Catch::Approx(0.5).margin(1e-15));
  Var r = relu(t.leaf(x));
  REQUIRE(t.value(r)[0] == 0.0);
  REQUIRE(t.value(r)[2] == 3.0);
  Var l = leaky_relu(t.leaf(x), 0.01);
  REQUIRE(t.value(l)[0] == Catch::Approx(-0.03).margin(1e-15));

  t.backward(sum_all(s));
  REQUIRE(t.grad(xv)[1] == Catch::Approx(0.25).margin(1e-15));
}

TEST_CASE("sigmoid stays strictly inside (0,1)") {
  Rng rng(5);
  Tape t;
  Tensor x(Shape{1, 1, 1, 200});
  for (std::int64_t i = 0; i < x.size(); ++i) x[i] = rng.uniform(-30.0, 30.0);
  const Tensor& y = t.value(sigmoid(t.leaf(x)));
  for (std::int64_t i = 0; i < y.size(); ++i) {
    REQUIRE(y[i] > 0.0);
    REQUIRE(y[i] < 1.0);
  }
}

TEST_CASE("elementwise identities and channel broadcast") {
  Rng rng(7);
  Tape t;
  Tensor a = oracle::random_tensor(Shape{1, 2, 2, 2}, rng);
  Var av = t.leaf(a);
  SECTION("multiplicative identity") {
    Var y = mul(av, t.leaf(Tensor(Shape{1, 2, 1, 1}, 1.0)));
    REQUIRE(max_abs_diff(t.value(y), a) == 0.0);
  }
  SECTION("additive identity") {
    Var y = add(av, t.leaf(Tensor(Shape{1, 2, 2, 2}, 0.0)));
    REQUIRE(max_abs_diff(t.value(y), a) == 0.0);
  }
  SECTION("per-channel gate scales each channel") {
    Tensor g(Shape{1, 2, 1, 1}, std::vector<double>{2.0, 3.0});
    Var y = mul(av, t.leaf(g));
    for (int i = 0; i < 4; ++i) {
      REQUIRE(t.value(y)[i] == 2.0 * a[i]);
      REQUIRE(t.value(y)[4 + i] == 3.0 * a[4 + i]);
    }
  }
  SECTION("incompatible shapes raise") {
    REQUIRE_THROWS_AS(add(av, t.leaf(Tensor(Shape{1, 3, 2, 2}))), ShapeError);
  }
}

TEST_CASE("concat and slice") {
  Rng rng(9);
  Tape t;
  Tensor a = oracle::random_tensor(Shape{2, 3, 4, 4}, rng);
  Tensor b = oracle::random_tensor(Shape{2, 5, 4, 4}, rng);
  Var av = t.leaf(a, true);
  Var bv = t.leaf(b, true);
  Var c = concat_channels(av, bv);
  REQUIRE(t.value(c).shape() == Shape{2, 8, 4, 4});
  // a occupies channels 0..2
  Var back = slice_channels(c, 0, 3);
  REQUIRE(max_abs_diff(t.value(back), a) == 0.0);

  t.backward(sum_all(c));
  for (std::int64_t i = 0; i < a.size(); ++i) REQUIRE(t.grad(av)[i] == 1.0);
  for (std::int64_t i = 0; i < b.size(); ++i) REQUIRE(t.grad(bv)[i] == 1.0);

  Tape t2;
  Var mismatched = t2.leaf(Tensor(Shape{2, 3, 5, 4}));
  REQUIRE_THROWS_AS(concat_channels(t2.leaf(a), mismatched), ShapeError);
}

TEST_CASE("global average pooling") {
  Tape t;
  SECTION("constant channel") {
    Var y = global_avg_pool(t.leaf(Tensor(Shape{1, 2, 3, 3}, 4.25)));
    REQUIRE(t.value(y).shape() == Shape{1, 2, 1, 1});
    REQUIRE(t.value(y)[0] == 4.25);
  }
  SECTION("mean of 1..4 and backward") {
    Tensor x(Shape{1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4});
    Var xv = t.leaf(x, true);
    Var y = global_avg_pool(xv);
    REQUIRE(t.value(y)[0] == 2.5);
    t.backward(sum_all(y));
    for (int i = 0; i < 4; ++i) REQUIRE(t.grad(xv)[i] == 0.25);
  }
}

TEST_CASE("instance norm behaviour") {
  Tape t;
  SECTION("constant channel maps to beta") {
    Var y = instance_norm(t.leaf(Tensor(Shape{1, 1, 2, 2}, 7.0)),
                          t.leaf(Tensor(Shape{1}, 1.0)), t.leaf(Tensor(Shape{1}, 0.0)));
    for (int i = 0; i < 4; ++i) REQUIRE(t.value(y)[i] == Catch::Approx(0.0).margin(1e-12));
  }
  SECTION("already standardized data passes through as eps -> 0") {
    Tensor x(Shape{1, 1, 1, 2}, std::vector<double>{-1.0, 1.0});
    Var y = instance_norm(t.leaf(x), t.leaf(Tensor(Shape{1}, 1.0)),
                          t.leaf(Tensor(Shape{1}, 0.0)), 1e-14);
    REQUIRE(t.value(y)[0] == Catch::Approx(-1.0).margin(1e-9));
    REQUIRE(t.value(y)[1] == Catch::Approx(1.0).margin(1e-9));
  }
  SECTION("gamma 0 gives constant beta") {
    Rng rng(3);
    Var y = instance_norm(t.leaf(oracle::random_tensor(Shape{1, 1, 3, 3}, rng)),
                          t.leaf(Tensor(Shape{1}, 0.0)), t.leaf(Tensor(Shape{1}, 5.0)));
    for (int i = 0; i < 9; ++i) REQUIRE(t.value(y)[i] == 5.0);
  }
}

TEST_CASE("backward basics") {
  Rng rng(13);
  SECTION("sum gives ones") {
    Tape t;
    Var x = t.leaf(oracle::random_tensor(Shape{2, 3, 2, 2}, rng), true);
    t.backward(sum_all(x));
    for (std::int64_t i = 0; i < t.value(x).size(); ++i) REQUIRE(t.grad(x)[i] == 1.0);
  }
  SECTION("sum of x*x gives 2x via fan-out accumulation") {
    Tape t;
    Tensor x = oracle::random_tensor(Shape{1, 1, 3, 3}, rng);
    Var xv = t.leaf(x, true);
    t.backward(sum_all(mul(xv, xv)));
    for (std::int64_t i = 0; i < x.size(); ++i)
      REQUIRE(t.grad(xv)[i] == Catch::Approx(2.0 * x[i]).margin(1e-15));
  }
  SECTION("non-scalar loss is rejected") {
    Tape t;
    Var x = t.leaf(Tensor(Shape{1, 1, 2, 2}), true);
    REQUIRE_THROWS_AS(t.backward(x), ContractError);
  }
  SECTION("backward determinism is bit-exact") {
    auto run = [&](std::uint64_t seed) {
      Rng r2(seed);
      Tape t;
      Var x = t.leaf(oracle::random_tensor(Shape{1, 2, 6, 6}, r2), true);
      Var w = t.leaf(oracle::random_tensor(Shape{2, 2, 3, 3}, r2), true);
      Var y = conv_nd(x, w, std::nullopt, same_conv(2, 3));
      t.backward(sum_all(mul(y, y)));
      return std::make_pair(t.grad(x), t.grad(w));
    };
    auto [gx1, gw1] = run(42);
    auto [gx2, gw2] = run(42);
    REQUIRE(max_abs_diff(gx1, gx2) == 0.0);
    REQUIRE(max_abs_diff(gw1, gw2) == 0.0);
  }
}

// gradcheck helpers ----------------------------------------------------------

static double check_unary(const std::function<Var(Tape&, Var)>& op, const Shape& xs,
                          std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  std::vector<Tensor> inputs{oracle::random_tensor(xs, rng, lo, hi)};
  return finite_diff_gradcheck(
      [&op](Tape& t, const std::vector<Var>& v) { return sum_all(op(t, v[0])); }, inputs);
}

TEST_CASE("finite difference gradchecks for primitives") {
  SECTION("spec-named cases") {
    // f = sum(sigmoid(x)) on a random 2x3
    REQUIRE(check_unary([](Tape&, Var x) { return sigmoid(x); }, Shape{1, 1, 2, 3}, 1) < 1e-7);
    // linear f: central differences are exact up to roundoff
    REQUIRE(check_unary([](Tape&, Var x) { return x; }, Shape{1, 1, 2, 3}, 2) < 1e-9);
    // f = sum(conv(x, w)) w.r.t. w
    Rng rng(3);
    std::vector<Tensor> inputs{oracle::random_tensor(Shape{2, 2, 3, 3}, rng)};
    Tensor x = oracle::random_tensor(Shape{1, 2, 5, 5}, rng);
    REQUIRE(finite_diff_gradcheck(
                [&x](Tape& t, const std::vector<Var>& v) {
                  Var xl = t.leaf(x);
                  return sum_all(conv_nd(xl, v[0], std::nullopt, same_conv(2, 3)));
                },
                inputs) < 1e-7);
  }
  SECTION("conv 2d/3d with bias and groups") {
    for (int rank = 2; rank <= 3; ++rank) {
      Rng rng(17 + static_cast<std::uint64_t>(rank));
      Shape xs = rank == 2 ? Shape{2, 4, 5, 5} : Shape{1, 4, 3, 5, 5};
      Shape ws = rank == 2 ? Shape{4, 2, 3, 3} : Shape{4, 2, 3, 3, 3};
      std::vector<Tensor> inputs{oracle::random_tensor(xs, rng),
                                 oracle::random_tensor(ws, rng),
                                 oracle::random_tensor(Shape{4}, rng)};
      ConvDescriptor d = same_conv(rank, 3, /*groups=*/2);
      const double err = finite_diff_gradcheck(
          [d](Tape&, const std::vector<Var>& v) {
            Var y = conv_nd(v[0], v[1], v[2], d);
            return sum_all(mul(y, y));
          },
          inputs);
      REQUIRE(err < 1e-6);
    }
  }
  SECTION("transposed conv") {
    Rng rng(29);
    std::vector<Tensor> inputs{oracle::random_tensor(Shape{1, 3, 4, 4}, rng),
                               oracle::random_tensor(Shape{3, 2, 3, 3}, rng),
                               oracle::random_tensor(Shape{2}, rng)};
    const double err = finite_diff_gradcheck(
        [](Tape&, const std::vector<Var>& v) {
          Var y = transposed_conv_nd(v[0], v[1], v[2], upscale_transposed(2));
          return sum_all(mul(y, y));
        },
        inputs);
    REQUIRE(err < 1e-6);
  }
  SECTION("pools and upsample") {
    REQUIRE(check_unary([](Tape&, Var x) { return avg_pool_nd(x, {4, 4}, {4, 4}); },
                        Shape{1, 2, 8, 8}, 31) < 1e-6);
    REQUIRE(check_unary(
                [](Tape&, Var x) {
                  Var y = max_pool_nd(x, {2, 2}, {2, 2});
                  return mul(y, y);
                },
                Shape{1, 2, 6, 6}, 37) < 1e-6);
    REQUIRE(check_unary([](Tape&, Var x) { return upsample_nearest_nd(x, {1, 4, 4}); },
                        Shape{1, 2, 2, 4, 4}, 41) < 1e-6);
  }
  SECTION("activations, gates, norm") {
    REQUIRE(check_unary([](Tape&, Var x) { return leaky_relu(x, 0.01); },
                        Shape{1, 2, 5, 5}, 43) < 1e-6);
    Rng rng(47);
    std::vector<Tensor> inputs{oracle::random_tensor(Shape{1, 3, 4, 4}, rng),
                               oracle::random_tensor(Shape{1, 3, 1, 1}, rng)};
    REQUIRE(finite_diff_gradcheck(
                [](Tape&, const std::vector<Var>& v) {
                  return sum_all(mul(v[0], sigmoid(v[1])));
                },
                inputs) < 1e-6);
    // a plain sum over the normalized output is invariant to the input's
    // per-channel mean/scale, so weight the output to keep gradients O(1)
    Tensor probe = oracle::random_tensor(Shape{2, 3, 4, 4}, rng);
    std::vector<Tensor> in2{oracle::random_tensor(Shape{2, 3, 4, 4}, rng),
                            oracle::random_tensor(Shape{3}, rng, 0.5, 1.5),
                            oracle::random_tensor(Shape{3}, rng)};
    REQUIRE(finite_diff_gradcheck(
                [&probe](Tape& t, const std::vector<Var>& v) {
                  Var y = instance_norm(v[0], v[1], v[2]);
                  return sum_all(mul(sigmoid(y), t.leaf(probe)));
                },
                in2) < 1e-6);
    std::vector<Tensor> in3{oracle::random_tensor(Shape{1, 2, 4, 4}, rng),
                            oracle::random_tensor(Shape{1, 3, 4, 4}, rng)};
    REQUIRE(finite_diff_gradcheck(
                [](Tape&, const std::vector<Var>& v) {
                  Var y = concat_channels(v[0], v[1]);
                  return sum_all(mul(y, y));
                },
                in3) < 1e-6);
    REQUIRE(check_unary([](Tape&, Var x) { return global_avg_pool(x); },
                        Shape{2, 3, 4, 4}, 53) < 1e-6);
  }
}

// loss ------------------------------------------------------------------------

static LabelMap checkerboard_labels(std::int64_t n, std::int64_t sp_side) {
  LabelMap l;
  l.shape = {n, sp_side, sp_side};
  l.ids.resize(static_cast<std::size_t>(n * sp_side * sp_side));
  for (std::size_t i = 0; i < l.ids.size(); ++i) l.ids[i] = static_cast<std::int32_t>(i % 2);
  return l;
}

TEST_CASE("cross entropy and dice values") {
  SECTION("uniform binary logits on a balanced target give ln 2") {
    Tape t;
    Var z = t.leaf(Tensor(Shape{1, 2, 2, 2}, 0.0));
    LabelMap y = checkerboard_labels(1, 2);
    Var ce = cross_entropy_loss(z, y);
    REQUIRE(t.value(ce)[0] == Catch::Approx(std::log(2.0)).margin(1e-12));
  }
  SECTION("4-voxel dice toy: p = 0.5 everywhere, two fg voxels") {
    Tape t;
    Var z = t.leaf(Tensor(Shape{1, 2, 2, 2}, 0.0));
    LabelMap y = checkerboard_labels(1, 2);  // two voxels of class 1
    Var dl = soft_dice_loss(z, y);
    REQUIRE(t.value(dl)[0] == Catch::Approx(0.5).margin(1e-5));
  }
  SECTION("perfect prediction drives the combined loss to zero") {
    Tape t;
    LabelMap y = checkerboard_labels(1, 2);
    Tensor z(Shape{1, 2, 2, 2});
    for (int v = 0; v < 4; ++v) {
      const std::int32_t cls = y.ids[static_cast<std::size_t>(v)];
      z[cls * 4 + v] = 25.0;
    }
    Var loss = combined_loss(t.leaf(z), y);
    REQUIRE(t.value(loss)[0] == Catch::Approx(0.0).margin(1e-6));
  }
  SECTION("out-of-range class id raises") {
    Tape t;
    Var z = t.leaf(Tensor(Shape{1, 2, 2, 2}, 0.0));
    LabelMap y = checkerboard_labels(1, 2);
    y.ids[1] = 5;
    REQUIRE_THROWS_AS(cross_entropy_loss(z, y), DataError);
  }
  SECTION("loss bounds on random inputs") {
    Rng rng(61);
    for (int it = 0; it < 20; ++it) {
      Tape t;
      Tensor z = oracle::random_tensor(Shape{1, 3, 4, 4}, rng, -5.0, 5.0);
      LabelMap y;
      y.shape = {1, 4, 4};
      for (int i = 0; i < 16; ++i)
        y.ids.push_back(static_cast<std::int32_t>(rng.uniform_int(3)));
      Var ce = cross_entropy_loss(t.leaf(z), y);
      Var dl = soft_dice_loss(t.leaf(z), y);
      REQUIRE(t.value(ce)[0] >= 0.0);
      REQUIRE(t.value(dl)[0] >= -1e-5);
      REQUIRE(t.value(dl)[0] <= 1.0 + 1e-12);
      REQUIRE(std::isfinite(t.value(ce)[0]));
      REQUIRE(std::isfinite(t.value(dl)[0]));
    }
  }
}

TEST_CASE("loss gradchecks") {
  Rng rng(71);
  LabelMap y;
  y.shape = {2, 3, 3};
  for (int i = 0; i < 18; ++i) y.ids.push_back(static_cast<std::int32_t>(rng.uniform_int(3)));
  std::vector<Tensor> inputs{oracle::random_tensor(Shape{2, 3, 3, 3}, rng, -2.0, 2.0)};
  REQUIRE(finite_diff_gradcheck(
              [&y](Tape&, const std::vector<Var>& v) { return cross_entropy_loss(v[0], y); },
              inputs) < 1e-6);
  REQUIRE(finite_diff_gradcheck(
              [&y](Tape&, const std::vector<Var>& v) { return soft_dice_loss(v[0], y); },
              inputs) < 1e-6);
  REQUIRE(finite_diff_gradcheck(
              [&y](Tape&, const std::vector<Var>& v) { return combined_loss(v[0], y); },
              inputs) < 1e-6);
}
