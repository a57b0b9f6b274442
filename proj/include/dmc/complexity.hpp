#pragma once

#include <cmath>
#include <cstdint>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dmc/network.hpp"

// Analytic parameter/FLOP accounting over a model's topology. Costs are
// computed from layer metadata and the input geometry; no activations are
// allocated. MACs are exact multiply-accumulate counts; the FLOPs column is
// ops_per_mac * macs + aux element ops, with the convention embedded in
// every report so the numbers are never ambiguous.

namespace dmc {

struct FlopConvention {
  double ops_per_mac = 1.5;

  std::string describe() const {
    std::ostringstream os;
    os << "flops = " << ops_per_mac
       << " ops/MAC * exact conv/linear MACs (transposed convs counted at input "
          "geometry) + aux ops at 1/element for pool, upsample, activation and "
          "elementwise fusion and 4/element for instance norm";
    return os.str();
  }
};

struct ComplexityReport {
  std::string model_name;
  FlopConvention convention;
  std::vector<std::int64_t> geometry;  // input spatial extents
  std::vector<LayerCost> rows;
  std::int64_t total_params = 0;
  std::int64_t total_macs = 0;
  std::int64_t total_flops = 0;
};

// Exact element count of the parameter store.
inline std::int64_t count_params(const Model& m) { return m.params.total_elements(); }

inline std::int64_t row_flops(const LayerCost& c, const FlopConvention& conv) {
  return static_cast<std::int64_t>(std::llround(conv.ops_per_mac * static_cast<double>(c.macs))) +
         c.aux_ops;
}

inline ComplexityReport complexity_report(const Model& m,
                                          const std::vector<std::int64_t>& spatial,
                                          FlopConvention conv = {}) {
  validate_patch_geometry(m.spec, spatial);
  ComplexityReport rep;
  rep.model_name = variant_name(m.spec.variant);
  rep.convention = conv;
  rep.geometry = spatial;
  const auto ch = m.spec.stage_channels;
  const std::size_t levels = ch.size();

  auto level_sp = [&](std::size_t l) {
    std::vector<std::int64_t> sp = spatial;
    for (auto& e : sp) e >>= l;
    return sp;
  };

  rep.rows.push_back(m.stem.cost(level_sp(0)));
  for (std::size_t i = 0; i < levels; ++i) {
    const auto sp = level_sp(i);
    block_costs(m.enc[i].first, sp, rep.rows);
    block_costs(m.enc[i].second, sp, rep.rows);
    if (i + 1 < levels) {
      LayerCost pool;
      pool.name = "enc" + std::to_string(i) + ".pool";
      pool.kind = "ops";
      std::int64_t out_el = ch[i];
      for (auto e : level_sp(i + 1)) out_el *= e;
      pool.aux_ops = out_el;
      rep.rows.push_back(pool);
    }
  }
  for (std::size_t i = levels - 1; i-- > 0;) {
    rep.rows.push_back(m.up[i].cost(level_sp(i + 1)));
    block_costs(m.dec[i].first, level_sp(i), rep.rows);
    block_costs(m.dec[i].second, level_sp(i), rep.rows);
  }
  rep.rows.push_back(m.head.cost(level_sp(0)));

  for (const LayerCost& c : rep.rows) {
    rep.total_params += c.params;
    rep.total_macs += c.macs;
    rep.total_flops += row_flops(c, conv);
  }
  return rep;
}

inline std::int64_t count_flops(const Model& m, const std::vector<std::int64_t>& spatial,
                                FlopConvention conv = {}) {
  return complexity_report(m, spatial, conv).total_flops;
}

// ---- the published comparison grid: 7 configurations per rank ----

struct GridRow {
  std::string name;
  NetworkSpec spec;
  std::int64_t params = 0;
  std::int64_t macs = 0;
  std::int64_t flops = 0;
};

inline std::vector<std::int64_t> default_geometry(int rank) {
  return rank == 2 ? std::vector<std::int64_t>{512, 512}
                   : std::vector<std::int64_t>{192, 192, 96};
}

inline std::vector<GridRow> comparison_grid(int rank, const std::vector<std::int64_t>& geometry,
                                            FlopConvention conv = {}, bool plain = true) {
  auto base = [&](Variant v) {
    NetworkSpec s;
    s.spatial_rank = rank;
    s.variant = v;
    s.num_classes = 2;
    s.input_channels = 1;
    s.plain_convs = plain;
    return s;
  };
  std::vector<GridRow> rows;
  auto push = [&](std::string name, NetworkSpec s) {
    GridRow r;
    r.name = std::move(name);
    r.spec = s;
    Model m = build_network(s, /*materialize=*/false);
    ComplexityReport rep = complexity_report(m, geometry, conv);
    r.params = rep.total_params;
    r.macs = rep.total_macs;
    r.flops = rep.total_flops;
    rows.push_back(std::move(r));
  };
  push("U-Net", base(Variant::kUnet));
  {
    NetworkSpec s = base(Variant::kDmrc);
    s.dmrc_pool = 2;
    push("DMRC-Net 2x2 AvgPool", s);
    s.dmrc_pool = 4;
    push("DMRC-Net 4x4 AvgPool", s);
  }
  for (std::int64_t k : {5, 7}) {
    for (bool dw : {false, true}) {
      NetworkSpec s = base(Variant::kDmsc);
      s.dmsc_kernel = k;
      s.lightweight_dmsc = dw;
      push("DMSC-Net " + std::to_string(k) + (dw ? " DWConv" : " Conv"), s);
    }
  }
  return rows;
}

// ---- serialization ----

inline nlohmann::json report_to_json(const ComplexityReport& rep) {
  nlohmann::json rows = nlohmann::json::array();
  for (const LayerCost& c : rep.rows) {
    rows.push_back({{"name", c.name},
                    {"kind", c.kind},
                    {"params", c.params},
                    {"macs", c.macs},
                    {"flops", row_flops(c, rep.convention)}});
  }
  return nlohmann::json{{"convention", rep.convention.describe()},
                        {"geometry", rep.geometry},
                        {"model", rep.model_name},
                        {"rows", rows},
                        {"totals",
                         {{"params", rep.total_params},
                          {"macs", rep.total_macs},
                          {"flops", rep.total_flops}}}};
}

inline nlohmann::json grid_to_json(int rank, const std::vector<std::int64_t>& geometry,
                                   const FlopConvention& conv,
                                   const std::vector<GridRow>& rows) {
  nlohmann::json jr = nlohmann::json::array();
  std::int64_t tp = 0, tm = 0, tf = 0;
  for (const GridRow& r : rows) {
    jr.push_back({{"name", r.name},
                  {"kind", "network"},
                  {"params", r.params},
                  {"macs", r.macs},
                  {"flops", r.flops}});
    tp += r.params;
    tm += r.macs;
    tf += r.flops;
  }
  return nlohmann::json{{"convention", conv.describe()},
                        {"geometry", geometry},
                        {"rank", rank},
                        {"rows", jr},
                        {"totals", {{"params", tp}, {"macs", tm}, {"flops", tf}}}};
}

inline std::string grid_to_text(int rank, const std::vector<std::int64_t>& geometry,
                                const std::vector<GridRow>& rows) {
  std::ostringstream os;
  os << rank << "D grid at " << shape_str(Shape(geometry.begin(), geometry.end())) << "\n";
  os << std::left << std::setw(26) << "network" << std::right << std::setw(12) << "Params (M)"
     << std::setw(12) << "FLOPs (G)" << "\n";
  for (const GridRow& r : rows) {
    os << std::left << std::setw(26) << r.name << std::right << std::fixed
       << std::setprecision(2) << std::setw(12) << static_cast<double>(r.params) / 1e6
       << std::setw(12) << static_cast<double>(r.flops) / 1e9 << "\n";
  }
  return os.str();
}

}  // namespace dmc
