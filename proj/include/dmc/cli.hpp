#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "dmc/checkpoint.hpp"
#include "dmc/complexity.hpp"
#include "dmc/gradcheck_suite.hpp"
#include "dmc/infer.hpp"
#include "dmc/metrics.hpp"
#include "dmc/phantom.hpp"
#include "dmc/train.hpp"
#include "dmc/volume.hpp"

// Command-line surface. Subcommands: synth, train, eval, complexity,
// gradcheck, stats. Exit codes: 0 success, 1 user error, 2 internal error.

namespace dmc::cli {

namespace detail {

inline Shape parse_extents(const std::string& s) {
  Shape out;
  std::string token;
  std::istringstream is(s);
  while (std::getline(is, token, 'x')) {
    if (token.empty()) continue;
    out.push_back(std::stoll(token));
  }
  if (out.empty()) throw ConfigError("cannot parse extents from '" + s + "'");
  return out;
}

inline std::vector<double> parse_spacing(const std::string& s) {
  std::vector<double> out;
  std::string token;
  std::istringstream is(s);
  while (std::getline(is, token, ',')) {
    if (token.empty()) continue;
    out.push_back(std::stod(token));
  }
  if (out.empty()) throw ConfigError("cannot parse spacing from '" + s + "'");
  return out;
}

inline nlohmann::json load_json_file(const std::filesystem::path& p) {
  if (!std::filesystem::exists(p)) throw IoError("file not found: " + p.string());
  try {
    return nlohmann::json::parse(dmc::detail::read_all(p));
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed JSON in " + p.string() + ": " + e.what());
  }
}

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  std::filesystem::create_directories(p.parent_path().empty() ? "." : p.parent_path());
  dmc::detail::atomic_write(p, text);
}

inline nlohmann::json record_to_json(const MetricsRecord& r) {
  nlohmann::json dsc_j = nlohmann::json::object();
  nlohmann::json hd_j = nlohmann::json::object();
  for (const auto& [cls, v] : r.dsc) dsc_j[std::to_string(cls)] = v;
  for (const auto& [cls, v] : r.hd95) {
    if (v.has_value()) {
      hd_j[std::to_string(cls)] = *v;
    } else {
      hd_j[std::to_string(cls)] = nullptr;
    }
  }
  nlohmann::json j{{"case", r.case_id}, {"dsc", dsc_j}, {"hd95", hd_j}};
  if (r.fold >= 0) j["fold"] = r.fold;
  return j;
}

}  // namespace detail

// ---- synth ----

inline int cmd_synth(const std::string& out_dir, int cases, const Shape& size,
                     const std::vector<double>& spacing, bool with_tumor, std::uint64_t seed,
                     int folds) {
  namespace fs = std::filesystem;
  if (cases < 1) throw ConfigError("synth: --cases must be >= 1");
  fs::create_directories(out_dir);
  DatasetManifest m;
  m.num_classes = with_tumor ? 3 : 2;
  m.provenance = "synthetic phantoms, seed " + std::to_string(seed);
  std::vector<std::string> ids;
  for (int i = 0; i < cases; ++i) {
    const std::string id = "case" + std::to_string(i);
    VolumeSample s =
        synth_phantom(seed + static_cast<std::uint64_t>(i), size, spacing, with_tumor);
    s.id = id;
    const std::string img = id + "_image.json";
    const std::string lab = id + "_label.json";
    write_sample(s, fs::path(out_dir) / img, fs::path(out_dir) / lab);
    m.cases.push_back({id, img, lab, -1});
    ids.push_back(id);
  }
  if (folds > 1) {
    const auto assignment = kfold_split(ids, folds, seed);
    for (std::size_t i = 0; i < m.cases.size(); ++i) m.cases[i].fold = assignment[i];
  }
  m.save(fs::path(out_dir) / "manifest.json");
  std::cout << "wrote " << cases << " cases + manifest to " << out_dir << "\n";
  return 0;
}

// ---- train ----

inline int cmd_train(const std::string& config_path, std::optional<std::uint64_t> seed,
                     const std::string& out_override, const std::string& resume) {
  RunConfig cfg = run_config_from_json(detail::load_json_file(config_path));
  if (seed.has_value()) cfg.seed = *seed;
  if (!out_override.empty()) cfg.out_dir = out_override;
  // manifest path is relative to the config file
  const std::filesystem::path cfg_dir = std::filesystem::path(config_path).parent_path();
  if (!cfg.manifest.empty() && std::filesystem::path(cfg.manifest).is_relative()) {
    cfg.manifest = (cfg_dir / cfg.manifest).string();
  }
  std::optional<std::filesystem::path> resume_path;
  if (!resume.empty()) resume_path = resume;
  TrainResult r = train(cfg, resume_path);
  std::cout << "checkpoint: " << r.checkpoint_path.string() << "\n";
  std::cout << "log: " << r.log_path.string() << "\n";
  if (!r.epochs.empty()) {
    const auto& last = r.epochs.back();
    std::cout << "final epoch " << last.epoch << ": loss " << last.loss << ", train_dsc "
              << last.train_dsc << "\n";
  }
  return 0;
}

// ---- eval ----

inline int cmd_eval(const std::string& ckpt_path, const std::string& manifest_path, int fold,
                    const std::string& patch_str, const std::string& out_dir) {
  namespace fs = std::filesystem;
  if (!fs::exists(ckpt_path)) throw IoError("file not found: " + ckpt_path);
  Checkpoint ckpt = load_checkpoint(ckpt_path);
  Model model = build_network(ckpt.spec);
  apply_checkpoint(model, ckpt);

  DatasetManifest manifest = DatasetManifest::load(manifest_path);
  if (manifest.num_classes != model.spec.num_classes) {
    throw ConfigError("eval: manifest num_classes " + std::to_string(manifest.num_classes) +
                      " != model num_classes " + std::to_string(model.spec.num_classes));
  }
  Shape patch = detail::parse_extents(patch_str);
  if (static_cast<int>(patch.size()) != model.spec.spatial_rank) {
    throw ConfigError("eval: patch rank does not match the model");
  }

  fs::create_directories(out_dir);
  std::vector<MetricsRecord> records;
  Predictor pred = model_predictor(model);
  for (std::size_t i = 0; i < manifest.cases.size(); ++i) {
    if (fold >= 0 && manifest.cases[i].fold != fold) continue;
    VolumeSample s = preprocess_case(manifest.load_case(i), {});
    MetricsRecord rec = evaluate_case(pred, s, model.spec.num_classes,
                                      std::vector<std::int64_t>(patch.begin(), patch.end()));
    rec.fold = manifest.cases[i].fold;
    records.push_back(std::move(rec));
  }
  if (records.empty()) throw DataError("eval: no cases selected");

  std::string lines;
  for (const auto& r : records) lines += detail::record_to_json(r).dump() + "\n";
  detail::write_text(fs::path(out_dir) / "metrics.jsonl", lines);

  nlohmann::json summary = nlohmann::json::object();
  for (const auto& [cls, s] : summarize(records)) {
    summary[std::to_string(cls)] = {{"dsc_mean", s.dsc_mean},
                                    {"dsc_std", s.dsc_std},
                                    {"hd95_median", s.hd95_median},
                                    {"hd95_q1", s.hd95_q1},
                                    {"hd95_q3", s.hd95_q3},
                                    {"hd95_undefined", s.hd95_undefined},
                                    {"n", s.n}};
  }
  detail::write_text(fs::path(out_dir) / "summary.json", summary.dump(2) + "\n");
  std::cout << summary.dump(2) << "\n";
  return 0;
}

// ---- complexity ----

inline int cmd_complexity(int rank, const std::string& grid, const std::string& spec_path,
                          const std::string& geometry_str, double ops_per_mac,
                          bool with_norms, const std::string& out_path) {
  FlopConvention conv;
  conv.ops_per_mac = ops_per_mac;
  nlohmann::json out_json;
  std::ostringstream text;

  if (!grid.empty()) {
    if (grid != "table4") throw ConfigError("complexity: unknown grid '" + grid + "'");
    std::vector<int> ranks = rank == 0 ? std::vector<int>{2, 3} : std::vector<int>{rank};
    nlohmann::json grids = nlohmann::json::array();
    for (int r : ranks) {
      const auto geometry = geometry_str.empty()
                                ? default_geometry(r)
                                : std::vector<std::int64_t>(detail::parse_extents(geometry_str));
      const auto rows = comparison_grid(r, geometry, conv, /*plain=*/!with_norms);
      grids.push_back(grid_to_json(r, geometry, conv, rows));
      text << grid_to_text(r, geometry, rows) << "\n";
    }
    out_json = grids.size() == 1 ? grids[0] : nlohmann::json{{"grids", grids}};
  } else if (!spec_path.empty()) {
    NetworkSpec spec = spec_from_json(detail::load_json_file(spec_path));
    if (with_norms) spec.plain_convs = false;
    Model m = build_network(spec, /*materialize=*/false);
    const auto geometry = geometry_str.empty()
                              ? default_geometry(spec.spatial_rank)
                              : std::vector<std::int64_t>(detail::parse_extents(geometry_str));
    ComplexityReport rep = complexity_report(m, geometry, conv);
    out_json = report_to_json(rep);
    text << variant_name(spec.variant) << " at " << shape_str(Shape(geometry.begin(), geometry.end()))
         << ": params " << rep.total_params << " (" << static_cast<double>(rep.total_params) / 1e6
         << " M), flops " << rep.total_flops << " (" << static_cast<double>(rep.total_flops) / 1e9
         << " G)\n";
  } else {
    throw ConfigError("complexity: pass --grid table4 or --spec <spec.json>");
  }

  std::cout << text.str();
  if (!out_path.empty()) detail::write_text(out_path, out_json.dump(2) + "\n");
  return 0;
}

// ---- gradcheck ----

inline int cmd_gradcheck(double tol_override) {
  auto entries = run_gradcheck_suite();
  bool all = true;
  for (auto& e : entries) {
    if (tol_override > 0.0) {
      e.tolerance = tol_override;
      e.pass = e.max_rel_error < tol_override;
    }
    std::cout << (e.pass ? "[ok]   " : "[FAIL] ") << e.name << ": " << e.max_rel_error
              << " (tol " << e.tolerance << ")\n";
    all = all && e.pass;
  }
  std::cout << (all ? "gradcheck suite passed" : "gradcheck suite FAILED") << "\n";
  return all ? 0 : 1;
}

// ---- stats ----

inline int cmd_stats(const std::string& a_path, const std::string& b_path,
                     const std::string& metric, int cls, const std::string& out_path) {
  auto load_metric = [&](const std::string& path) {
    if (!std::filesystem::exists(path)) throw IoError("file not found: " + path);
    std::map<std::string, double> by_case;
    std::ifstream is(path);
    std::string line;
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(line);
      } catch (const nlohmann::json::exception& e) {
        throw IoError("malformed metrics line in " + path + ": " + e.what());
      }
      const auto& m = j.at(metric);
      const std::string key = std::to_string(cls);
      if (m.contains(key) && !m.at(key).is_null()) {
        by_case[j.at("case").get<std::string>()] = m.at(key).get<double>();
      }
    }
    return by_case;
  };
  if (metric != "dsc" && metric != "hd95") {
    throw ConfigError("stats: --metric must be dsc or hd95");
  }
  const auto ma = load_metric(a_path);
  const auto mb = load_metric(b_path);
  std::vector<double> a, b;
  for (const auto& [id, va] : ma) {
    auto it = mb.find(id);
    if (it != mb.end()) {
      a.push_back(va);
      b.push_back(it->second);
    }
  }
  if (a.empty()) throw DataError("stats: no paired cases between the two files");
  WilcoxonResult r = wilcoxon_signed_rank(a, b);
  nlohmann::json j{{"metric", metric},
                   {"class", cls},
                   {"pairs", a.size()},
                   {"n_nonzero", r.n},
                   {"statistic", r.statistic},
                   {"method", r.method},
                   {"degenerate", r.degenerate}};
  if (r.p_value.has_value()) {
    j["p_value"] = *r.p_value;
  } else {
    j["p_value"] = nullptr;
  }
  std::cout << j.dump(2) << "\n";
  if (!out_path.empty()) detail::write_text(out_path, j.dump(2) + "\n");
  return 0;
}

// ---- entry point ----

inline int run(const std::vector<std::string>& args) {
  CLI::App app{"dynamic multi-scale / multi-resolution segmentation toolkit"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic phantom dataset");
  std::string synth_out = "dataset";
  int synth_cases = 4;
  std::string synth_size = "48x48x48";
  std::string synth_spacing = "1,1,1";
  bool synth_tumor = false;
  std::uint64_t synth_seed = 0;
  int synth_folds = 0;
  synth->add_option("--out", synth_out, "output directory");
  synth->add_option("--cases", synth_cases, "number of cases");
  synth->add_option("--size", synth_size, "volume extents, e.g. 48x48x48");
  synth->add_option("--spacing", synth_spacing, "voxel spacing in mm, e.g. 1,1,1");
  synth->add_flag("--with-tumor", synth_tumor, "embed a second foreground class");
  synth->add_option("--seed", synth_seed, "generation seed");
  synth->add_option("--folds", synth_folds, "assign cross-validation folds");

  // train
  auto* tr = app.add_subcommand("train", "train a network from a JSON run config");
  std::string train_config, train_out, train_resume;
  std::optional<std::uint64_t> train_seed;
  std::uint64_t train_seed_raw = 0;
  bool train_seed_set = false;
  tr->add_option("--config", train_config, "run config JSON")->required();
  tr->add_option("--seed", train_seed_raw, "override the config seed")
      ->each([&train_seed_set](const std::string&) { train_seed_set = true; });
  tr->add_option("--out", train_out, "override the output directory");
  tr->add_option("--resume", train_resume, "checkpoint to resume from");

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint against a manifest");
  std::string eval_ckpt, eval_manifest, eval_patch = "32x32x32", eval_out = "eval";
  int eval_fold = -1;
  ev->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
  ev->add_option("--manifest", eval_manifest, "dataset manifest")->required();
  ev->add_option("--fold", eval_fold, "restrict to one validation fold");
  ev->add_option("--patch", eval_patch, "sliding-window patch, e.g. 32x32x32");
  ev->add_option("--out", eval_out, "output directory");

  // complexity
  auto* cx = app.add_subcommand("complexity", "analytic params/FLOPs accounting");
  int cx_rank = 0;
  std::string cx_grid, cx_spec, cx_geometry, cx_out;
  double cx_opm = 1.5;
  bool cx_norms = false;
  cx->add_option("--rank", cx_rank, "2 or 3 (grid default: both)");
  cx->add_option("--grid", cx_grid, "named comparison grid: table4");
  cx->add_option("--spec", cx_spec, "network spec JSON for a per-layer report");
  cx->add_option("--geometry", cx_geometry, "input extents, e.g. 512x512");
  cx->add_option("--ops-per-mac", cx_opm, "FLOPs per multiply-accumulate (default 1.5)");
  cx->add_flag("--with-norms", cx_norms, "count instance-norm layers too");
  cx->add_option("--out", cx_out, "write the JSON report here");

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "run the finite-difference suite");
  bool gc_tiny = false;
  double gc_tol = 0.0;
  gc->add_flag("--tiny", gc_tiny, "desk-scale suite (the default and only size)");
  gc->add_option("--tol", gc_tol, "override every entry's tolerance");

  // stats
  auto* st = app.add_subcommand("stats", "Wilcoxon signed-rank test on paired metrics");
  std::string stats_a, stats_b, stats_metric = "dsc", stats_out;
  int stats_cls = 1;
  st->add_option("--a", stats_a, "metrics.jsonl of method A")->required();
  st->add_option("--b", stats_b, "metrics.jsonl of method B")->required();
  st->add_option("--metric", stats_metric, "dsc or hd95");
  st->add_option("--class", stats_cls, "class id");
  st->add_option("--out", stats_out, "write the JSON result here");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {  // --help
      std::cout << app.help();
      return 0;
    }
    std::cerr << e.what() << "\n" << app.help();
    return 1;
  }

  try {
    if (*synth) {
      return cmd_synth(synth_out, synth_cases, detail::parse_extents(synth_size),
                       detail::parse_spacing(synth_spacing), synth_tumor, synth_seed,
                       synth_folds);
    }
    if (*tr) {
      if (train_seed_set) train_seed = train_seed_raw;
      return cmd_train(train_config, train_seed, train_out, train_resume);
    }
    if (*ev) return cmd_eval(eval_ckpt, eval_manifest, eval_fold, eval_patch, eval_out);
    if (*cx) {
      if (cx_rank != 0 && cx_rank != 2 && cx_rank != 3) {
        throw ConfigError("complexity: --rank must be 2 or 3");
      }
      return cmd_complexity(cx_rank, cx_grid, cx_spec, cx_geometry, cx_opm, cx_norms, cx_out);
    }
    if (*gc) {
      (void)gc_tiny;
      return cmd_gradcheck(gc_tol);
    }
    if (*st) return cmd_stats(stats_a, stats_b, stats_metric, stats_cls, stats_out);
    std::cerr << app.help();
    return 1;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const GeometryError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace dmc::cli
