#pragma once

#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dmc/conv.hpp"
#include "dmc/ops.hpp"
#include "dmc/params.hpp"
#include "dmc/tape.hpp"

namespace dmc {

enum class Act { kNone, kLeakyRelu, kSigmoid };

// One analytic cost row of a built model.
struct LayerCost {
  std::string name;
  std::string kind;        // conv | conv_dw | conv_transposed | linear | norm | ops
  std::int64_t params = 0;
  std::int64_t macs = 0;     // exact multiply-accumulate count
  std::int64_t aux_ops = 0;  // non-MAC element ops (norm, activations, pooling, ...)
};

// Convolution (or transposed convolution) with optional instance norm and
// activation. Parameters live in a ParamStore; the unit keeps indices only.
struct ConvUnit {
  ConvDescriptor desc;
  std::int64_t c_in = 0, c_out = 0;
  bool transposed = false;
  bool norm = false;
  Act act = Act::kNone;
  double lrelu_slope = 0.01;
  double norm_eps = 1e-5;
  std::string name;
  int w = -1, b = -1, gamma = -1, beta = -1;

  struct Options {
    bool transposed = false;
    std::int64_t groups = 1;
    bool norm = false;
    Act act = Act::kNone;
    double init_scale = 1.0;  // gate linears use 0.1
  };

  static ConvUnit build(ParamStore& store, Rng& rng, std::string name, int rank,
                        std::int64_t c_in, std::int64_t c_out, std::int64_t kernel,
                        const Options& opt) {
    ConvUnit u;
    u.name = std::move(name);
    u.c_in = c_in;
    u.c_out = c_out;
    u.transposed = opt.transposed;
    u.norm = opt.norm;
    u.act = opt.act;
    u.desc = opt.transposed ? upscale_transposed(rank, kernel)
                            : same_conv(rank, kernel, opt.groups);
    Shape ws = opt.transposed ? Shape{c_in, c_out / opt.groups}
                              : Shape{c_out, c_in / opt.groups};
    if (opt.transposed) u.desc.groups = opt.groups;
    for (int a = 0; a < rank; ++a) ws.push_back(kernel);
    std::int64_t kprod = 1;
    for (int a = 0; a < rank; ++a) kprod *= kernel;
    const std::int64_t fan_in = (c_in / opt.groups) * kprod;
    const double scale = opt.init_scale;
    u.w = store.add_deferred(u.name + ".weight", ws, [&ws, fan_in, &rng, scale] {
      return he_uniform(ws, fan_in, rng, scale);
    });
    if (!opt.norm) {
      // a bias feeding an instance norm is cancelled by the mean subtraction
      u.b = store.add_deferred(u.name + ".bias", Shape{c_out},
                               [c_out] { return Tensor(Shape{c_out}); });
    } else {
      u.gamma = store.add_deferred(u.name + ".norm.gamma", Shape{c_out},
                                   [c_out] { return Tensor(Shape{c_out}, 1.0); });
      u.beta = store.add_deferred(u.name + ".norm.beta", Shape{c_out},
                                  [c_out] { return Tensor(Shape{c_out}); });
    }
    return u;
  }

  Var forward(const std::vector<Var>& params, Var x) const {
    std::optional<Var> bias;
    if (b >= 0) bias = params[static_cast<std::size_t>(b)];
    Var y = transposed
                ? transposed_conv_nd(x, params[static_cast<std::size_t>(w)], bias, desc, name)
                : conv_nd(x, params[static_cast<std::size_t>(w)], bias, desc, name);
    if (norm) {
      y = instance_norm(y, params[static_cast<std::size_t>(gamma)],
                        params[static_cast<std::size_t>(beta)], norm_eps, name + ".norm");
    }
    switch (act) {
      case Act::kNone:
        break;
      case Act::kLeakyRelu:
        y = leaky_relu(y, lrelu_slope, name + ".act");
        break;
      case Act::kSigmoid:
        y = sigmoid(y, name + ".act");
        break;
    }
    return y;
  }

  std::vector<std::int64_t> out_spatial(const std::vector<std::int64_t>& in_sp) const {
    std::vector<std::int64_t> out;
    for (std::size_t a = 0; a < in_sp.size(); ++a) {
      if (transposed) {
        out.push_back((in_sp[a] - 1) * desc.stride[a] - 2 * desc.padding[a] +
                      desc.kernel[a] + desc.output_padding[a]);
      } else {
        out.push_back((in_sp[a] + 2 * desc.padding[a] - desc.kernel[a]) / desc.stride[a] + 1);
      }
    }
    return out;
  }

  LayerCost cost(const std::vector<std::int64_t>& in_sp) const {
    LayerCost c;
    c.name = name;
    std::int64_t kprod = 1;
    for (auto k : desc.kernel) kprod *= k;
    const bool depthwise = desc.groups == c_in && desc.groups == c_out && desc.groups > 1;
    const bool pointwise = kprod == 1;
    c.kind = transposed ? "conv_transposed" : (depthwise ? "conv_dw" : (pointwise ? "linear" : "conv"));
    c.params = (transposed ? c_in * (c_out / desc.groups) : c_out * (c_in / desc.groups)) * kprod +
               (b >= 0 ? c_out : 0) + (norm ? 2 * c_out : 0);
    const auto out_sp = out_spatial(in_sp);
    const std::int64_t in_n = std::accumulate(in_sp.begin(), in_sp.end(), std::int64_t{1},
                                              std::multiplies<>());
    const std::int64_t out_n = std::accumulate(out_sp.begin(), out_sp.end(), std::int64_t{1},
                                               std::multiplies<>());
    c.macs = transposed ? in_n * c_in * (c_out / desc.groups) * kprod
                        : out_n * c_out * (c_in / desc.groups) * kprod;
    c.aux_ops = (norm ? 4 * out_n * c_out : 0) + (act != Act::kNone ? out_n * c_out : 0);
    return c;
  }
};

}  // namespace dmc
