#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dmc/blocks.hpp"
#include "dmc/layers.hpp"
#include "dmc/ops.hpp"
#include "dmc/params.hpp"
#include "dmc/tape.hpp"

// U-shaped segmentation networks assembled from block pairs. Per stage the
// pair is chosen by variant: unet = [plain, plain], dmrc = [DMRC, plain],
// dmsc = [DMSC, plain], dmc = [DMSC, DMRC]. A 1-kernel stem projects the
// input to the first stage width, 2-per-axis max-pooling descends between
// stages (channel growth happens in the next stage's first block), the
// decoder mirrors with stride-2 transposed convs and channel-concat skips,
// and a 1-kernel head emits logits.

namespace dmc {

enum class Variant { kUnet, kDmrc, kDmsc, kDmc };

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::kUnet: return "unet";
    case Variant::kDmrc: return "dmrc";
    case Variant::kDmsc: return "dmsc";
    case Variant::kDmc: return "dmc";
  }
  return "?";
}

inline Variant variant_from_name(const std::string& s) {
  if (s == "unet") return Variant::kUnet;
  if (s == "dmrc") return Variant::kDmrc;
  if (s == "dmsc") return Variant::kDmsc;
  if (s == "dmc") return Variant::kDmc;
  throw ConfigError("unknown network variant '" + s + "' (unet|dmrc|dmsc|dmc)");
}

struct NetworkSpec {
  int spatial_rank = 3;
  Variant variant = Variant::kDmc;
  std::vector<std::int64_t> stage_channels;   // empty = defaults by rank
  std::int64_t num_classes = 2;
  std::int64_t input_channels = 1;
  std::optional<bool> lightweight_dmsc;       // default: true in 3D, false in 2D
  std::int64_t dmsc_kernel = 5;
  std::int64_t dmrc_pool = 4;
  bool plain_convs = false;
  std::uint64_t seed = 0;

  std::vector<std::int64_t> channels() const {
    if (!stage_channels.empty()) return stage_channels;
    return spatial_rank == 2 ? std::vector<std::int64_t>{32, 64, 128, 256, 512, 512}
                             : std::vector<std::int64_t>{32, 64, 128, 256, 512};
  }

  bool lightweight() const { return lightweight_dmsc.value_or(spatial_rank == 3); }

  void validate() const {
    if (spatial_rank != 2 && spatial_rank != 3) {
      throw ConfigError("NetworkSpec: spatial_rank must be 2 or 3");
    }
    if (channels().size() < 2) {
      throw ConfigError("NetworkSpec: need at least 2 stages");
    }
    for (auto c : channels()) {
      if (c < 1) throw ConfigError("NetworkSpec: stage channels must be >= 1");
    }
    if (num_classes < 2) throw ConfigError("NetworkSpec: num_classes must be >= 2");
    if (input_channels < 1) throw ConfigError("NetworkSpec: input_channels must be >= 1");
    if (dmsc_kernel % 2 == 0 || dmsc_kernel < 3) {
      throw ConfigError("NetworkSpec: dmsc_kernel must be an odd integer >= 3");
    }
    if (dmrc_pool < 2) throw ConfigError("NetworkSpec: dmrc_pool must be >= 2");
  }
};

struct Stage {
  Block first;
  Block second;
};

struct Model {
  NetworkSpec spec;
  ParamStore params;
  ConvUnit stem, head;
  std::vector<Stage> enc;       // deepest stage is the bottleneck
  std::vector<ConvUnit> up;     // up[i] maps channels[i+1] -> channels[i]
  std::vector<Stage> dec;       // dec[i] consumes the concat at level i
};

namespace detail {

inline BlockKind first_kind(Variant v) {
  switch (v) {
    case Variant::kUnet: return BlockKind::kPlainConv;
    case Variant::kDmrc: return BlockKind::kDmrc;
    case Variant::kDmsc: return BlockKind::kDmsc;
    case Variant::kDmc: return BlockKind::kDmsc;
  }
  return BlockKind::kPlainConv;
}

inline BlockKind second_kind(Variant v) {
  return v == Variant::kDmc ? BlockKind::kDmrc : BlockKind::kPlainConv;
}

inline bool has_dmrc(Variant v) { return v == Variant::kDmrc || v == Variant::kDmc; }

}  // namespace detail

// materialize=false builds topology and shapes only (for counting); such a
// model cannot run forward.
inline Model build_network(const NetworkSpec& spec, bool materialize = true) {
  spec.validate();
  Model m;
  m.params = ParamStore(materialize);
  m.spec = spec;
  m.spec.stage_channels = spec.channels();
  m.spec.lightweight_dmsc = spec.lightweight();
  Rng rng(spec.seed);
  const auto ch = m.spec.stage_channels;
  const std::size_t levels = ch.size();

  ConvUnit::Options stem_opt;
  stem_opt.norm = !spec.plain_convs;
  stem_opt.act = spec.plain_convs ? Act::kNone : Act::kLeakyRelu;
  m.stem = ConvUnit::build(m.params, rng, "stem", spec.spatial_rank, spec.input_channels,
                           ch[0], 1, stem_opt);

  auto block_cfg = [&](BlockKind kind, std::int64_t c_in, std::int64_t c_out) {
    BlockConfig cfg;
    cfg.kind = kind;
    cfg.rank = spec.spatial_rank;
    cfg.c_in = c_in;
    cfg.c_out = c_out;
    cfg.lightweight = m.spec.lightweight();
    cfg.dmsc_kernel = spec.dmsc_kernel;
    cfg.dmrc_pool = spec.dmrc_pool;
    cfg.plain = spec.plain_convs;
    return cfg;
  };

  for (std::size_t i = 0; i < levels; ++i) {
    const std::int64_t c_in = i == 0 ? ch[0] : ch[i - 1];
    const std::string base = "enc" + std::to_string(i);
    Stage s;
    s.first = build_block_in(m.params, rng, base + ".b0",
                             block_cfg(detail::first_kind(spec.variant), c_in, ch[i]));
    s.second = build_block_in(m.params, rng, base + ".b1",
                              block_cfg(detail::second_kind(spec.variant), ch[i], ch[i]));
    m.enc.push_back(std::move(s));
  }

  ConvUnit::Options up_opt;
  up_opt.transposed = true;
  up_opt.norm = !spec.plain_convs;
  up_opt.act = spec.plain_convs ? Act::kNone : Act::kLeakyRelu;
  m.up.resize(levels - 1);
  m.dec.resize(levels - 1);
  for (std::size_t i = levels - 1; i-- > 0;) {
    const std::string base = "dec" + std::to_string(i);
    m.up[i] = ConvUnit::build(m.params, rng, base + ".up", spec.spatial_rank, ch[i + 1],
                              ch[i], 3, up_opt);
    Stage s;
    s.first = build_block_in(m.params, rng, base + ".b0",
                             block_cfg(detail::first_kind(spec.variant), 2 * ch[i], ch[i]));
    s.second = build_block_in(m.params, rng, base + ".b1",
                              block_cfg(detail::second_kind(spec.variant), ch[i], ch[i]));
    m.dec[i] = std::move(s);
  }

  ConvUnit::Options head_opt;  // bare conv: logits
  m.head = ConvUnit::build(m.params, rng, "head", spec.spatial_rank, ch[0],
                           spec.num_classes, 1, head_opt);
  return m;
}

// Re-draws every parameter from the given seed; the draw order equals the
// registration order, so this reproduces build_network(spec with that seed).
inline void init_params(Model& m, std::uint64_t seed) {
  NetworkSpec spec = m.spec;
  spec.seed = seed;
  Model fresh = build_network(spec);
  for (std::size_t i = 0; i < m.params.count(); ++i) {
    m.params.value(static_cast<int>(i)) = fresh.params.value(static_cast<int>(i));
  }
  m.spec.seed = seed;
}

// ---- geometry ----

inline void validate_patch_geometry(const NetworkSpec& spec,
                                    const std::vector<std::int64_t>& spatial) {
  const auto ch = spec.channels();
  const int levels = static_cast<int>(ch.size());
  if (spatial.size() != static_cast<std::size_t>(spec.spatial_rank)) {
    throw GeometryError("patch rank " + std::to_string(spatial.size()) +
                        " does not match network rank " +
                        std::to_string(spec.spatial_rank));
  }
  const std::int64_t down = std::int64_t{1} << (levels - 1);
  for (std::size_t a = 0; a < spatial.size(); ++a) {
    if (spatial[a] % down != 0 || spatial[a] / down < 1) {
      throw GeometryError("patch axis " + std::to_string(a) + " (extent " +
                          std::to_string(spatial[a]) + ") must be a positive multiple of 2^" +
                          std::to_string(levels - 1) + " = " + std::to_string(down));
    }
  }
  if (detail::has_dmrc(spec.variant)) {
    // in 3D the through-plane (last) axis is exempt: the pooled path never
    // pools it
    const std::size_t pooled_axes = spec.spatial_rank == 3 ? 2 : spatial.size();
    for (std::size_t a = 0; a < pooled_axes; ++a) {
      const std::int64_t need = down * spec.dmrc_pool;
      if (spatial[a] % need != 0) {
        throw GeometryError("patch axis " + std::to_string(a) + " (extent " +
                            std::to_string(spatial[a]) +
                            ") must be divisible by 2^(stages-1) * pool = " +
                            std::to_string(need) + " for the pooled-path blocks");
      }
    }
  }
}

inline Shape infer_logits_shape(const NetworkSpec& spec, const Shape& input) {
  if (static_cast<int>(input.size()) != spec.spatial_rank + 2) {
    throw ShapeError("input must be N x C x spatial, got " + shape_str(input));
  }
  if (input[1] != spec.input_channels) {
    throw ShapeError("input has " + std::to_string(input[1]) + " channels, spec expects " +
                     std::to_string(spec.input_channels));
  }
  validate_patch_geometry(spec, std::vector<std::int64_t>(input.begin() + 2, input.end()));
  Shape out = input;
  out[1] = spec.num_classes;
  return out;
}

// ---- forward ----

// Vars hold a pointer to their tape, so the tape is heap-owned to keep the
// address stable across moves of the result.
struct ForwardResult {
  std::unique_ptr<Tape> tape;
  Var logits;
  std::vector<Var> param_vars;  // aligned with Model::params entries
};

inline Var network_apply(const Model& m, Tape& t, const std::vector<Var>& pv, Var x) {
  const auto ch = m.spec.stage_channels;
  const std::size_t levels = ch.size();
  const std::vector<std::int64_t> two(static_cast<std::size_t>(m.spec.spatial_rank), 2);

  x = m.stem.forward(pv, x);
  std::vector<Var> skips;
  for (std::size_t i = 0; i < levels; ++i) {
    x = block_forward(m.enc[i].first, t, pv, x);
    x = block_forward(m.enc[i].second, t, pv, x);
    if (i + 1 < levels) {
      skips.push_back(x);
      x = max_pool_nd(x, two, two, "enc" + std::to_string(i) + ".pool");
    }
  }
  for (std::size_t i = levels - 1; i-- > 0;) {
    x = m.up[i].forward(pv, x);
    x = concat_channels(x, skips[i], "dec" + std::to_string(i) + ".skip");
    x = block_forward(m.dec[i].first, t, pv, x);
    x = block_forward(m.dec[i].second, t, pv, x);
  }
  return m.head.forward(pv, x);
}

inline ForwardResult model_forward(const Model& m, const Tensor& patch, bool training) {
  (void)infer_logits_shape(m.spec, patch.shape());
  ForwardResult r;
  r.tape = std::make_unique<Tape>();
  r.param_vars.reserve(m.params.count());
  for (const auto& e : m.params.entries()) {
    r.param_vars.push_back(r.tape->leaf(e.value, training, e.name));
  }
  Var x = r.tape->leaf(patch, false, "input");
  r.logits = network_apply(m, *r.tape, r.param_vars, x);
  return r;
}

}  // namespace dmc
