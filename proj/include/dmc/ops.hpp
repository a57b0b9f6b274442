#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dmc/conv.hpp"
#include "dmc/errors.hpp"
#include "dmc/shape.hpp"
#include "dmc/tape.hpp"
#include "dmc/tensor.hpp"

// Recorded primitives. Each op computes its forward value eagerly and records
// a node whose backward closure reads parent values straight from the tape.

namespace dmc {

namespace detail {

inline void check_same_tape(const Var& a, const Var& b, const char* op) {
  if (a.tape != b.tape) throw ContractError(std::string(op) + ": operands on different tapes");
}

// b may broadcast over spatial axes: shape [N, C, 1, ...] against a's [N, C, sp].
enum class BroadcastKind { kNone, kChannel };

inline BroadcastKind broadcast_kind(const Shape& a, const Shape& b, const char* op) {
  if (a == b) return BroadcastKind::kNone;
  if (a.size() == b.size() && a.size() >= 2 && a[0] == b[0] && a[1] == b[1]) {
    bool ones = true;
    for (std::size_t i = 2; i < b.size(); ++i) ones = ones && b[i] == 1;
    if (ones) return BroadcastKind::kChannel;
  }
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) +
                   " vs " + shape_str(b));
}

}  // namespace detail

// ---- convolution ----

inline Var conv_nd(Var x, Var w, std::optional<Var> b, const ConvDescriptor& d,
                   std::string label = {}) {
  detail::check_same_tape(x, w, "conv_nd");
  Tape& t = *x.tape;
  const Tensor& xv = t.value(x);
  const Tensor& wv = t.value(w);
  const Tensor* bv = b ? &t.value(*b) : nullptr;
  Tensor y = conv_forward(xv, wv, bv, d);
  const Shape ys = y.shape();

  std::vector<std::int32_t> parents{x.id, w.id};
  if (b) parents.push_back(b->id);
  const std::int32_t xid = x.id, wid = w.id, bid = b ? b->id : -1;
  auto backward = [xid, wid, bid, d](Tape& tp, std::int32_t self) {
    const Tensor& g = tp.node(self).grad;
    const Tensor& xval = tp.value(xid);
    const Tensor& wval = tp.value(wid);
    const std::int64_t ci = xval.dim(1), co = wval.dim(0);
    if (tp.wants_grad(xid)) {
      Tensor dx(xval.shape());
      const auto geom = detail::make_geom(g.shape(), xval.shape(), d, co, ci);
      detail::conv_scatter(dx, g, wval, nullptr, geom);
      tp.add_to_grad(xid, dx);
    }
    if (tp.wants_grad(wid)) {
      Tensor dw(wval.shape());
      const auto geom = detail::make_geom(xval.shape(), g.shape(), d, ci, co);
      detail::conv_weight_grad(dw, g, xval, geom);
      tp.add_to_grad(wid, dw);
    }
    if (bid >= 0 && tp.wants_grad(bid)) {
      tp.add_to_grad(bid, Tensor(tp.value(bid).shape(), detail::channel_sums(g)));
    }
  };
  return t.record(std::move(y), std::move(parents), std::move(backward), std::move(label));
}

inline Var transposed_conv_nd(Var x, Var w, std::optional<Var> b,
                              const ConvDescriptor& d, std::string label = {}) {
  detail::check_same_tape(x, w, "transposed_conv_nd");
  Tape& t = *x.tape;
  const Tensor& xv = t.value(x);
  const Tensor& wv = t.value(w);
  const Tensor* bv = b ? &t.value(*b) : nullptr;
  Tensor y = transposed_conv_forward(xv, wv, bv, d);

  std::vector<std::int32_t> parents{x.id, w.id};
  if (b) parents.push_back(b->id);
  const std::int32_t xid = x.id, wid = w.id, bid = b ? b->id : -1;
  auto backward = [xid, wid, bid, d](Tape& tp, std::int32_t self) {
    const Tensor& g = tp.node(self).grad;
    const Tensor& xval = tp.value(xid);
    const Tensor& wval = tp.value(wid);
    const std::int64_t ci = xval.dim(1);
    const std::int64_t co = g.dim(1);
    // adjoint of scatter is gather with the same index relation
    const auto geom = detail::make_geom(g.shape(), xval.shape(), d, co, ci);
    if (tp.wants_grad(xid)) {
      Tensor dx(xval.shape());
      detail::conv_gather(dx, g, wval, nullptr, geom);
      tp.add_to_grad(xid, dx);
    }
    if (tp.wants_grad(wid)) {
      Tensor dw(wval.shape());
      detail::conv_weight_grad(dw, xval, g, geom);
      tp.add_to_grad(wid, dw);
    }
    if (bid >= 0 && tp.wants_grad(bid)) {
      tp.add_to_grad(bid, Tensor(tp.value(bid).shape(), detail::channel_sums(g)));
    }
  };
  return t.record(std::move(y), std::move(parents), std::move(backward), std::move(label));
}

// ---- pooling ----

namespace detail {

struct PoolGeom {
  std::array<std::int64_t, 3> in{1, 1, 1}, out{1, 1, 1}, f{1, 1, 1}, s{1, 1, 1};
  std::int64_t n = 1, c = 1;
};

inline PoolGeom pool_geom(const Shape& in, const std::vector<std::int64_t>& filter,
                          const std::vector<std::int64_t>& stride, const char* op) {
  const int rank = spatial_rank(in);
  if (rank != 2 && rank != 3) {
    throw ShapeError(std::string(op) + ": input must be N x C x spatial, got " + shape_str(in));
  }
  if (filter.size() != static_cast<std::size_t>(rank) ||
      stride.size() != static_cast<std::size_t>(rank)) {
    throw ConfigError(std::string(op) + ": filter/stride must have one entry per axis");
  }
  PoolGeom g;
  g.n = in[0];
  g.c = in[1];
  std::vector<std::int64_t> sp(in.begin() + 2, in.end());
  pad_axes(sp, g.in, 1);
  pad_axes(filter, g.f, 1);
  pad_axes(stride, g.s, 1);
  for (int a = 0; a < 3; ++a) {
    if (g.f[a] < 1 || g.s[a] < 1) throw ConfigError(std::string(op) + ": filter/stride must be >= 1");
    if (g.in[a] < g.f[a] || (g.in[a] - g.f[a]) % g.s[a] != 0) {
      throw GeometryError(std::string(op) + ": spatial axis " + std::to_string(a) +
                          ": extent " + std::to_string(g.in[a]) +
                          " not tileable by filter " + std::to_string(g.f[a]) +
                          " stride " + std::to_string(g.s[a]));
    }
    g.out[a] = (g.in[a] - g.f[a]) / g.s[a] + 1;
  }
  return g;
}

inline Shape pool_out_shape(const Shape& in, const PoolGeom& g) {
  Shape out{in[0], in[1]};
  const std::size_t off = 5 - in.size();
  for (std::size_t a = off; a < 3; ++a) out.push_back(g.out[a]);
  return out;
}

}  // namespace detail

inline Var avg_pool_nd(Var x, const std::vector<std::int64_t>& filter,
                       const std::vector<std::int64_t>& stride, std::string label = {}) {
  Tape& t = *x.tape;
  const Tensor& xv = t.value(x);
  const auto g = detail::pool_geom(xv.shape(), filter, stride, "avg_pool");
  Tensor y(detail::pool_out_shape(xv.shape(), g));
  const std::int64_t in_sp = g.in[0] * g.in[1] * g.in[2];
  const std::int64_t out_sp = g.out[0] * g.out[1] * g.out[2];
  const double wnorm = 1.0 / static_cast<double>(g.f[0] * g.f[1] * g.f[2]);
  for (std::int64_t nc = 0; nc < g.n * g.c; ++nc) {
    const double* ip = xv.data() + nc * in_sp;
    double* op = y.data() + nc * out_sp;
    for (std::int64_t oz = 0; oz < g.out[0]; ++oz)
      for (std::int64_t oy = 0; oy < g.out[1]; ++oy)
        for (std::int64_t ox = 0; ox < g.out[2]; ++ox) {
          double acc = 0.0;
          for (std::int64_t fz = 0; fz < g.f[0]; ++fz)
            for (std::int64_t fy = 0; fy < g.f[1]; ++fy) {
              const double* row = ip + ((oz * g.s[0] + fz) * g.in[1] + oy * g.s[1] + fy) * g.in[2] +
                                  ox * g.s[2];
              for (std::int64_t fx = 0; fx < g.f[2]; ++fx) acc += row[fx];
            }
          op[(oz * g.out[1] + oy) * g.out[2] + ox] = acc * wnorm;
        }
  }
  const std::int32_t xid = x.id;
  auto backward = [xid, g, wnorm, in_sp, out_sp](Tape& tp, std::int32_t self) {
    if (!tp.wants_grad(xid)) return;
    const Tensor& gr = tp.node(self).grad;
    Tensor dx(tp.value(xid).shape());
    for (std::int64_t nc = 0; nc < g.n * g.c; ++nc) {
      double* ip = dx.data() + nc * in_sp;
      const double* op = gr.data() + nc * out_sp;
      for (std::int64_t oz = 0; oz < g.out[0]; ++oz)
        for (std::int64_t oy = 0; oy < g.out[1]; ++oy)
          for (std::int64_t ox = 0; ox < g.out[2]; ++ox) {
            const double gv = op[(oz * g.out[1] + oy) * g.out[2] + ox] * wnorm;
            for (std::int64_t fz = 0; fz < g.f[0]; ++fz)
              for (std::int64_t fy = 0; fy < g.f[1]; ++fy) {
                double* row = ip + ((oz * g.s[0] + fz) * g.in[1] + oy * g.s[1] + fy) * g.in[2] +
                              ox * g.s[2];
                for (std::int64_t fx = 0; fx < g.f[2]; ++fx) row[fx] += gv;
              }
          }
    }
    tp.add_to_grad(xid, dx);
  };
  return t.record(std::move(y), {x.id}, std::move(backward), std::move(label));
}

inline Var max_pool_nd(Var x, const std::vector<std::int64_t>& filter,
                       const std::vector<std::int64_t>& stride, std::string label = {}) {
  Tape& t = *x.tape;
  const Tensor& xv = t.value(x);
  const auto g = detail::pool_geom(xv.shape(), filter, stride, "max_pool");
  Tensor y(detail::pool_out_shape(xv.shape(), g));
  const std::int64_t in_sp = g.in[0] * g.in[1] * g.in[2];
  const std::int64_t out_sp = g.out[0] * g.out[1] * g.out[2];
  // flat input index of each window's max; ties resolve to the first element
  // in window scan order so backward routing is deterministic
  std::vector<std::int64_t> argmax(static_cast<std::size_t>(y.size()));
  for (std::int64_t nc = 0; nc < g.n * g.c; ++nc) {
    const double* ip = xv.data() + nc * in_sp;
    double* op = y.data() + nc * out_sp;
    for (std::int64_t oz = 0; oz < g.out[0]; ++oz)
      for (std::int64_t oy = 0; oy < g.out[1]; ++oy)
        for (std::int64_t ox = 0; ox < g.out[2]; ++ox) {
          double best = -std::numeric_limits<double>::infinity();
          std::int64_t best_i = -1;
          for (std::int64_t fz = 0; fz < g.f[0]; ++fz)
            for (std::int64_t fy = 0; fy < g.f[1]; ++fy)
              for (std::int64_t fx = 0; fx < g.f[2]; ++fx) {
                const std::int64_t ii =
                    ((oz * g.s[0] + fz) * g.in[1] + oy * g.s[1] + fy) * g.in[2] + ox * g.s[2] + fx;
                if (ip[ii] > best) {
                  best = ip[ii];
                  best_i = ii;
                }
              }
          const std::int64_t oo = (oz * g.out[1] + oy) * g.out[2] + ox;
          op[oo] = best;
          argmax[static_cast<std::size_t>(nc * out_sp + oo)] = nc * in_sp + best_i;
        }
  }
  const std::int32_t xid = x.id;
  auto backward = [xid, argmax = std::move(argmax)](Tape& tp, std::int32_t self) {
    if (!tp.wants_grad(xid)) return;
    const Tensor& gr = tp.node(self).grad;
    Tensor dx(tp.value(xid).shape());
    for (std::int64_t i = 0; i < gr.size(); ++i) {
      dx[argmax[static_cast<std::size_t>(i)]] += gr[i];
    }
    tp.add_to_grad(xid, dx);
  };
  return t.record(std::move(y), {x.id}, std::move(backward), std::move(label));
}

// ---- nearest-neighbour upsampling ----

inline Var upsample_nearest_nd(Var x, const std::vector<std::int64_t>& factor,
                               std::string label = {}) {
  Tape& t = *x.tape;
  const Tensor& xv = t.value(x);
  const int rank = spatial_rank(xv.shape());
  if (factor.size() != static_cast<std::size_t>(rank)) {
    throw ConfigError("upsample_nearest: factor must have one entry per axis");
  }
  for (auto f : factor) {
    if (f < 1) throw ConfigError("upsample_nearest: factors must be >= 1");
  }
  std::array<std::int64_t, 3> fi{1, 1, 1}, di{1, 1, 1};
  {
    std::vector<std::int64_t> sp(xv.shape().begin() + 2, xv.shape().end());
    detail::pad_axes(sp, di, 1);
    detail::pad_axes(factor, fi, 1);
  }
  Shape os{xv.dim(0), xv.dim(1)};
  for (int a = 0; a < rank; ++a) os.push_back(xv.shape()[static_cast<std::size_t>(a) + 2] * factor[static_cast<std::size_t>(a)]);
  Tensor y(os);
  const std::array<std::int64_t, 3> oi{di[0] * fi[0], di[1] * fi[1], di[2] * fi[2]};
  const std::int64_t in_sp = di[0] * di[1] * di[2];
  const std::int64_t out_sp = oi[0] * oi[1] * oi[2];
  const std::int64_t nc_total = xv.dim(0) * xv.dim(1);
  for (std::int64_t nc = 0; nc < nc_total; ++nc) {
    const double* ip = xv.data() + nc * in_sp;
    double* op = y.data() + nc * out_sp;
    for (std::int64_t oz = 0; oz < oi[0]; ++oz)
      for (std::int64_t oy = 0; oy < oi[1]; ++oy) {
        const double* irow = ip + ((oz / fi[0]) * di[1] + oy / fi[1]) * di[2];
        double* orow = op + (oz * oi[1] + oy) * oi[2];
        for (std::int64_t ox = 0; ox < oi[2]; ++ox) orow[ox] = irow[ox / fi[2]];
      }
  }
  const std::int32_t xid = x.id;
  auto backward = [xid, fi, di, oi, in_sp, out_sp, nc_total](Tape& tp, std::int32_t self) {
    if (!tp.wants_grad(xid)) return;
    const Tensor& gr = tp.node(self).grad;
    Tensor dx(tp.value(xid).shape());
    for (std::int64_t nc = 0; nc < nc_total; ++nc) {
      double* ip = dx.data() + nc * in_sp;
      const double* op = gr.data() + nc * out_sp;
      for (std::int64_t oz = 0; oz < oi[0]; ++oz)
        for (std::int64_t oy = 0; oy < oi[1]; ++oy) {
          double* irow = ip + ((oz / fi[0]) * di[1] + oy / fi[1]) * di[2];
          const double* orow = op + (oz * oi[1] + oy) * oi[2];
          for (std::int64_t ox = 0; ox < oi[2]; ++ox) irow[ox / fi[2]] += orow[ox];
        }
    }
    tp.add_to_grad(xid, dx);
  };
  return t.record(std::move(y), {x.id}, std::move(backward), std::move(label));
}

// ---- activations ----

inline double sigmoid_scalar(double x) {
  if (x >= 0.0) {
    const double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Var sigmoid(Var x, std::string label = {}) {
  Tape& t = *x.tape;
  const Tensor& xv = t.value(x);
  Tensor y(xv.shape());
  for (std::int64_t i = 0; i < xv.size(); ++i) y[i] = sigmoid_scalar(xv[i]);
  const std::int32_t xid = x.id;
  auto backward = [xid](Tape& tp, std::int32_t self) {
    if (!tp.wants_grad(xid)) return;
    const Tensor& gr = tp.node(self).grad;
    const Tensor& yv = tp.node(self).value;
    Tensor dx(yv.shape());
    for (std::int64_t i = 0; i < yv.size(); ++i) dx[i] = gr[i] * yv[i] * (1.0 - yv[i]);
    tp.add_to_grad(xid, dx);
  };
  return t.record(std::move(y), {x.id}, std::move(backward), std::move(label));
}

inline Var leaky_relu(Var x, double slope = 0.01, std::string label = {}) {
  Tape& t = *x.tape;
  const Tensor& xv = t.value(x);
  Tensor y(xv.shape());
  for (std::int64_t i = 0; i < xv.size(); ++i) y[i] = xv[i] > 0.0 ? xv[i] : slope * xv[i];
  const std::int32_t xid = x.id;
  auto backward = [xid, slope](Tape& tp, std::int32_t self) {
    if (!tp.wants_grad(xid)) return;
    const Tensor& gr = tp.node(self).grad;
    const Tensor& xval = tp.value(xid);
    Tensor dx(xval.shape());
    for (std::int64_t i = 0; i < xval.size(); ++i) {
      dx[i] = gr[i] * (xval[i] > 0.0 ? 1.0 : slope);
    }
    tp.add_to_grad(xid, dx);
  };
  return t.record(std::move(y), {x.id}, std::move(backward), std::move(label));
}

inline Var relu(Var x, std::string label = {}) { return leaky_relu(x, 0.0, std::move(label)); }

// ---- elementwise add / mul with channel broadcast for gates ----

namespace detail {

template <typename FwdOp>
inline Tensor broadcast_apply(const Tensor& a, const Tensor& b, BroadcastKind bk, FwdOp f) {
  Tensor y(a.shape());
  if (bk == BroadcastKind::kNone) {
    for (std::int64_t i = 0; i < a.size(); ++i) y[i] = f(a[i], b[i]);
  } else {
    const std::int64_t sp = spatial_numel(a.shape());
    const std::int64_t nc = a.dim(0) * a.dim(1);
    for (std::int64_t j = 0; j < nc; ++j) {
      const double bv = b[j];
      const double* ap = a.data() + j * sp;
      double* yp = y.data() + j * sp;
      for (std::int64_t i = 0; i < sp; ++i) yp[i] = f(ap[i], bv);
    }
  }
  return y;
}

}  // namespace detail

inline Var add(Var a, Var b, std::string label = {}) {
  detail::check_same_tape(a, b, "add");
  Tape& t = *a.tape;
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  const auto bk = detail::broadcast_kind(av.shape(), bv.shape(), "add");
  Tensor y = detail::broadcast_apply(av, bv, bk, [](double x, double z) { return x + z; });
  const std::int32_t aid = a.id, bid = b.id;
  auto backward = [aid, bid, bk](Tape& tp, std::int32_t self) {
    const Tensor& gr = tp.node(self).grad;
    if (tp.wants_grad(aid)) tp.add_to_grad(aid, gr);
    if (tp.wants_grad(bid)) {
      if (bk == detail::BroadcastKind::kNone) {
        tp.add_to_grad(bid, gr);
      } else {
        const Tensor& bval = tp.value(bid);
        Tensor db(bval.shape());
        const std::int64_t sp = spatial_numel(gr.shape());
        const std::int64_t nc = gr.dim(0) * gr.dim(1);
        for (std::int64_t j = 0; j < nc; ++j) {
          double acc = 0.0;
          const double* gp = gr.data() + j * sp;
          for (std::int64_t i = 0; i < sp; ++i) acc += gp[i];
          db[j] = acc;
        }
        tp.add_to_grad(bid, db);
      }
    }
  };
  return t.record(std::move(y), {a.id, b.id}, std::move(backward), std::move(label));
}

inline Var mul(Var a, Var b, std::string label = {}) {
  detail::check_same_tape(a, b, "mul");
  Tape& t = *a.tape;
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  const auto bk = detail::broadcast_kind(av.shape(), bv.shape(), "mul");
  Tensor y = detail::broadcast_apply(av, bv, bk, [](double x, double z) { return x * z; });
  const std::int32_t aid = a.id, bid = b.id;
  auto backward = [aid, bid, bk](Tape& tp, std::int32_t self) {
    const Tensor& gr = tp.node(self).grad;
    const Tensor& aval = tp.value(aid);
    const Tensor& bval = tp.value(bid);
    if (bk == detail::BroadcastKind::kNone) {
      if (tp.wants_grad(aid)) {
        Tensor da(aval.shape());
        for (std::int64_t i = 0; i < gr.size(); ++i) da[i] = gr[i] * bval[i];
        tp.add_to_grad(aid, da);
      }
      if (tp.wants_grad(bid)) {
        Tensor db(bval.shape());
        for (std::int64_t i = 0; i < gr.size(); ++i) db[i] = gr[i] * aval[i];
        tp.add_to_grad(bid, db);
      }
    } else {
      const std::int64_t sp = spatial_numel(gr.shape());
      const std::int64_t nc = gr.dim(0) * gr.dim(1);
      if (tp.wants_grad(aid)) {
        Tensor da(aval.shape());
        for (std::int64_t j = 0; j < nc; ++j) {
          const double bvj = bval[j];
          const double* gp = gr.data() + j * sp;
          double* dp = da.data() + j * sp;
          for (std::int64_t i = 0; i < sp; ++i) dp[i] = gp[i] * bvj;
        }
        tp.add_to_grad(aid, da);
      }
      if (tp.wants_grad(bid)) {
        Tensor db(bval.shape());
        for (std::int64_t j = 0; j < nc; ++j) {
          double acc = 0.0;
          const double* gp = gr.data() + j * sp;
          const double* ap = aval.data() + j * sp;
          for (std::int64_t i = 0; i < sp; ++i) acc += gp[i] * ap[i];
          db[j] = acc;
        }
        tp.add_to_grad(bid, db);
      }
    }
  };
  return t.record(std::move(y), {a.id, b.id}, std::move(backward), std::move(label));
}

// ---- channel concat / slice ----

inline Var concat_channels(Var a, Var b, std::string label = {}) {
  detail::check_same_tape(a, b, "concat_channels");
  Tape& t = *a.tape;
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  if (av.rank() != bv.rank() || av.dim(0) != bv.dim(0)) {
    throw ShapeError("concat_channels: batch mismatch " + shape_str(av.shape()) + " vs " +
                     shape_str(bv.shape()));
  }
  for (int i = 2; i < av.rank(); ++i) {
    if (av.dim(i) != bv.dim(i)) {
      throw ShapeError("concat_channels: spatial axis " + std::to_string(i - 2) +
                       " mismatch: " + std::to_string(av.dim(i)) + " vs " +
                       std::to_string(bv.dim(i)));
    }
  }
  Shape os = av.shape();
  os[1] = av.dim(1) + bv.dim(1);
  Tensor y(os);
  const std::int64_t sp = spatial_numel(av.shape());
  const std::int64_t ca = av.dim(1), cb = bv.dim(1), n = av.dim(0);
  for (std::int64_t in = 0; in < n; ++in) {
    std::copy(av.data() + in * ca * sp, av.data() + (in + 1) * ca * sp,
              y.data() + in * (ca + cb) * sp);
    std::copy(bv.data() + in * cb * sp, bv.data() + (in + 1) * cb * sp,
              y.data() + in * (ca + cb) * sp + ca * sp);
  }
  const std::int32_t aid = a.id, bid = b.id;
  auto backward = [aid, bid, n, ca, cb, sp](Tape& tp, std::int32_t self) {
    const Tensor& gr = tp.node(self).grad;
    if (tp.wants_grad(aid)) {
      Tensor da(tp.value(aid).shape());
      for (std::int64_t in = 0; in < n; ++in) {
        std::copy(gr.data() + in * (ca + cb) * sp, gr.data() + in * (ca + cb) * sp + ca * sp,
                  da.data() + in * ca * sp);
      }
      tp.add_to_grad(aid, da);
    }
    if (tp.wants_grad(bid)) {
      Tensor db(tp.value(bid).shape());
      for (std::int64_t in = 0; in < n; ++in) {
        std::copy(gr.data() + in * (ca + cb) * sp + ca * sp,
                  gr.data() + (in + 1) * (ca + cb) * sp, db.data() + in * cb * sp);
      }
      tp.add_to_grad(bid, db);
    }
  };
  return t.record(std::move(y), {a.id, b.id}, std::move(backward), std::move(label));
}

// Channels [c0, c1) of x.
inline Var slice_channels(Var x, std::int64_t c0, std::int64_t c1, std::string label = {}) {
  Tape& t = *x.tape;
  const Tensor& xv = t.value(x);
  if (c0 < 0 || c1 <= c0 || c1 > xv.dim(1)) {
    throw ShapeError("slice_channels: range [" + std::to_string(c0) + ", " + std::to_string(c1) +
                     ") out of " + std::to_string(xv.dim(1)) + " channels");
  }
  Shape os = xv.shape();
  os[1] = c1 - c0;
  Tensor y(os);
  const std::int64_t sp = spatial_numel(xv.shape());
  const std::int64_t c = xv.dim(1), n = xv.dim(0), cs = c1 - c0;
  for (std::int64_t in = 0; in < n; ++in) {
    std::copy(xv.data() + (in * c + c0) * sp, xv.data() + (in * c + c1) * sp,
              y.data() + in * cs * sp);
  }
  const std::int32_t xid = x.id;
  auto backward = [xid, c0, c1, n, c, cs, sp](Tape& tp, std::int32_t self) {
    if (!tp.wants_grad(xid)) return;
    const Tensor& gr = tp.node(self).grad;
    Tensor dx(tp.value(xid).shape());
    for (std::int64_t in = 0; in < n; ++in) {
      std::copy(gr.data() + in * cs * sp, gr.data() + (in + 1) * cs * sp,
                dx.data() + (in * c + c0) * sp);
    }
    tp.add_to_grad(xid, dx);
  };
  return t.record(std::move(y), {x.id}, std::move(backward), std::move(label));
}

// ---- global average pooling ----

inline Var global_avg_pool(Var x, std::string label = {}) {
  Tape& t = *x.tape;
  const Tensor& xv = t.value(x);
  Shape os{xv.dim(0), xv.dim(1)};
  for (int i = 2; i < xv.rank(); ++i) os.push_back(1);
  Tensor y(os);
  const std::int64_t sp = spatial_numel(xv.shape());
  const std::int64_t nc = xv.dim(0) * xv.dim(1);
  for (std::int64_t j = 0; j < nc; ++j) {
    double acc = 0.0;
    const double* p = xv.data() + j * sp;
    for (std::int64_t i = 0; i < sp; ++i) acc += p[i];
    y[j] = acc / static_cast<double>(sp);
  }
  const std::int32_t xid = x.id;
  auto backward = [xid, sp, nc](Tape& tp, std::int32_t self) {
    if (!tp.wants_grad(xid)) return;
    const Tensor& gr = tp.node(self).grad;
    Tensor dx(tp.value(xid).shape());
    for (std::int64_t j = 0; j < nc; ++j) {
      const double gv = gr[j] / static_cast<double>(sp);
      double* p = dx.data() + j * sp;
      for (std::int64_t i = 0; i < sp; ++i) p[i] = gv;
    }
    tp.add_to_grad(xid, dx);
  };
  return t.record(std::move(y), {x.id}, std::move(backward), std::move(label));
}

// ---- instance normalization ----

// Per-sample, per-channel standardization followed by the affine gamma/beta.
inline Var instance_norm(Var x, Var gamma, Var beta, double eps = 1e-5,
                         std::string label = {}) {
  detail::check_same_tape(x, gamma, "instance_norm");
  detail::check_same_tape(x, beta, "instance_norm");
  Tape& t = *x.tape;
  const Tensor& xv = t.value(x);
  const Tensor& gv = t.value(gamma);
  const Tensor& bv = t.value(beta);
  const std::int64_t c = xv.dim(1);
  if (gv.size() != c || bv.size() != c) {
    throw ShapeError("instance_norm: gamma/beta must have " + std::to_string(c) + " entries");
  }
  const std::int64_t sp = spatial_numel(xv.shape());
  const std::int64_t n = xv.dim(0);
  Tensor y(xv.shape());
  std::vector<double> mean(static_cast<std::size_t>(n * c));
  std::vector<double> inv_std(static_cast<std::size_t>(n * c));
  for (std::int64_t j = 0; j < n * c; ++j) {
    const double* p = xv.data() + j * sp;
    double mu = 0.0;
    for (std::int64_t i = 0; i < sp; ++i) mu += p[i];
    mu /= static_cast<double>(sp);
    double var = 0.0;
    for (std::int64_t i = 0; i < sp; ++i) {
      const double d = p[i] - mu;
      var += d * d;
    }
    var /= static_cast<double>(sp);
    const double inv = 1.0 / std::sqrt(var + eps);
    mean[static_cast<std::size_t>(j)] = mu;
    inv_std[static_cast<std::size_t>(j)] = inv;
    const double ga = gv[j % c], be = bv[j % c];
    double* yp = y.data() + j * sp;
    for (std::int64_t i = 0; i < sp; ++i) yp[i] = ga * (p[i] - mu) * inv + be;
  }
  const std::int32_t xid = x.id, gid = gamma.id, bid = beta.id;
  auto backward = [xid, gid, bid, n, c, sp, mean = std::move(mean),
                   inv_std = std::move(inv_std)](Tape& tp, std::int32_t self) {
    const Tensor& gr = tp.node(self).grad;
    const Tensor& xval = tp.value(xid);
    const Tensor& gval = tp.value(gid);
    const bool want_x = tp.wants_grad(xid);
    const bool want_g = tp.wants_grad(gid);
    const bool want_b = tp.wants_grad(bid);
    Tensor dx, dg, db;
    if (want_x) dx = Tensor(xval.shape());
    if (want_g) dg = Tensor(tp.value(gid).shape());
    if (want_b) db = Tensor(tp.value(bid).shape());
    for (std::int64_t j = 0; j < n * c; ++j) {
      const double mu = mean[static_cast<std::size_t>(j)];
      const double inv = inv_std[static_cast<std::size_t>(j)];
      const double ga = gval[j % c];
      const double* xp = xval.data() + j * sp;
      const double* gp = gr.data() + j * sp;
      double sum_g = 0.0, sum_gxh = 0.0;
      for (std::int64_t i = 0; i < sp; ++i) {
        const double xh = (xp[i] - mu) * inv;
        sum_g += gp[i];
        sum_gxh += gp[i] * xh;
      }
      if (want_g) dg[j % c] += sum_gxh;
      if (want_b) db[j % c] += sum_g;
      if (want_x) {
        const double mg = sum_g / static_cast<double>(sp);
        const double mgxh = sum_gxh / static_cast<double>(sp);
        double* dp = dx.data() + j * sp;
        for (std::int64_t i = 0; i < sp; ++i) {
          const double xh = (xp[i] - mu) * inv;
          dp[i] = ga * inv * (gp[i] - mg - xh * mgxh);
        }
      }
    }
    if (want_x) tp.add_to_grad(xid, dx);
    if (want_g) tp.add_to_grad(gid, dg);
    if (want_b) tp.add_to_grad(bid, db);
  };
  return t.record(std::move(y), {x.id, gamma.id, beta.id}, std::move(backward), std::move(label));
}

// ---- reductions ----

inline Var sum_all(Var x, std::string label = {}) {
  Tape& t = *x.tape;
  const Tensor& xv = t.value(x);
  double acc = 0.0;
  for (std::int64_t i = 0; i < xv.size(); ++i) acc += xv[i];
  Tensor y(Shape{1});
  y[0] = acc;
  const std::int32_t xid = x.id;
  auto backward = [xid](Tape& tp, std::int32_t self) {
    if (!tp.wants_grad(xid)) return;
    const double g = tp.node(self).grad[0];
    Tensor dx(tp.value(xid).shape(), g);
    tp.add_to_grad(xid, dx);
  };
  return t.record(std::move(y), {x.id}, std::move(backward), std::move(label));
}

}  // namespace dmc
