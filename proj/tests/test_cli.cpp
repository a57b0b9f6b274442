#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "dmc/cli.hpp"

using namespace dmc;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::path("test_tmp") / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

int run_cli(std::vector<std::string> args) { return cli::run(args); }

}  // namespace

TEST_CASE("cli synth and manifest") {
  const fs::path dir = fresh_dir("cli_synth");
  REQUIRE(run_cli({"synth", "--out", (dir / "data").string(), "--cases", "3", "--size",
                   "32x32x32", "--seed", "9", "--folds", "3"}) == 0);
  DatasetManifest m = DatasetManifest::load(dir / "data" / "manifest.json");
  REQUIRE(m.cases.size() == 3);
  REQUIRE(m.num_classes == 2);
  for (const auto& c : m.cases) REQUIRE(c.fold >= 0);
  // reproducible artifacts
  REQUIRE(run_cli({"synth", "--out", (dir / "data2").string(), "--cases", "3", "--size",
                   "32x32x32", "--seed", "9", "--folds", "3"}) == 0);
  REQUIRE(detail::read_all(dir / "data" / "case0_image.raw") ==
          detail::read_all(dir / "data2" / "case0_image.raw"));
}

TEST_CASE("cli complexity") {
  const fs::path dir = fresh_dir("cli_complexity");
  SECTION("table4 grid has 7 rows per rank") {
    REQUIRE(run_cli({"complexity", "--rank", "2", "--grid", "table4", "--out",
                     (dir / "grid2.json").string()}) == 0);
    auto j = nlohmann::json::parse(detail::read_all(dir / "grid2.json"));
    REQUIRE(j["rows"].size() == 7);
    REQUIRE(j["rank"] == 2);
  }
  SECTION("both ranks by default") {
    REQUIRE(run_cli({"complexity", "--grid", "table4", "--out", (dir / "grids.json").string()}) ==
            0);
    auto j = nlohmann::json::parse(detail::read_all(dir / "grids.json"));
    REQUIRE(j["grids"].size() == 2);
  }
  SECTION("per-layer report from a spec file") {
    nlohmann::json spec{{"spatial_rank", 2}, {"variant", "dmc"},
                        {"stage_channels", {4, 8}},  {"num_classes", 2},
                        {"input_channels", 1},       {"plain_convs", true}};
    std::ofstream(dir / "spec.json") << spec.dump();
    REQUIRE(run_cli({"complexity", "--spec", (dir / "spec.json").string(), "--geometry",
                     "32x32", "--out", (dir / "rep.json").string()}) == 0);
    auto j = nlohmann::json::parse(detail::read_all(dir / "rep.json"));
    REQUIRE(j.contains("convention"));
    REQUIRE(j.contains("rows"));
    REQUIRE(j["totals"]["params"].get<std::int64_t>() > 0);
  }
  SECTION("bad rank is a user error") {
    REQUIRE(run_cli({"complexity", "--rank", "4", "--grid", "table4"}) == 1);
  }
}

TEST_CASE("cli train, eval and stats round trip") {
  const fs::path dir = fresh_dir("cli_train");
  REQUIRE(run_cli({"synth", "--out", (dir / "data").string(), "--cases", "2", "--size",
                   "32x32x32", "--seed", "4", "--folds", "2"}) == 0);
  nlohmann::json cfg{
      {"network",
       {{"spatial_rank", 2},
        {"variant", "dmc"},
        {"stage_channels", {4, 8}},
        {"num_classes", 2},
        {"input_channels", 1},
        {"seed", 7}}},
      {"manifest", "data/manifest.json"},
      {"epochs", 2},
      {"steps_per_epoch", 2},
      {"batch_size", 2},
      {"patch_size", {16, 16}},
      {"base_lr", 0.005},
      {"seed", 3},
      {"oversample_prob", 1.0},
      {"augment", {{"enabled", false}}},
      {"out_dir", (dir / "run").string()}};
  std::ofstream(dir / "cfg.json") << cfg.dump();
  REQUIRE(run_cli({"train", "--config", (dir / "cfg.json").string()}) == 0);
  REQUIRE(fs::exists(dir / "run" / "checkpoint_final.dmc"));
  REQUIRE(fs::exists(dir / "run" / "train_log.jsonl"));

  REQUIRE(run_cli({"eval", "--checkpoint", (dir / "run" / "checkpoint_final.dmc").string(),
                   "--manifest", (dir / "data" / "manifest.json").string(), "--patch", "16x16",
                   "--out", (dir / "eval_a").string()}) == 0);
  REQUIRE(fs::exists(dir / "eval_a" / "metrics.jsonl"));
  auto summary = nlohmann::json::parse(detail::read_all(dir / "eval_a" / "summary.json"));
  REQUIRE(summary.contains("1"));
  REQUIRE(summary["1"].contains("dsc_mean"));
  REQUIRE(summary["1"].contains("hd95_median"));

  // paired stats against itself is degenerate but well-formed
  REQUIRE(run_cli({"stats", "--a", (dir / "eval_a" / "metrics.jsonl").string(), "--b",
                   (dir / "eval_a" / "metrics.jsonl").string(), "--class", "1", "--out",
                   (dir / "wilcoxon.json").string()}) == 0);
  auto w = nlohmann::json::parse(detail::read_all(dir / "wilcoxon.json"));
  REQUIRE(w["degenerate"].get<bool>());
}

TEST_CASE("cli gradcheck exits clean") {
  REQUIRE(run_cli({"gradcheck", "--tiny"}) == 0);
}

TEST_CASE("cli error surfaces") {
  SECTION("missing config file") {
    REQUIRE(run_cli({"train", "--config", "does_not_exist.json"}) == 1);
  }
  SECTION("unknown flag prints usage and fails") {
    REQUIRE(run_cli({"synth", "--frobnicate"}) == 1);
  }
  SECTION("unknown subcommand") {
    REQUIRE(run_cli({"transmogrify"}) == 1);
  }
  SECTION("missing required option") {
    REQUIRE(run_cli({"eval", "--manifest", "x.json"}) == 1);
  }
  SECTION("stats on a missing file") {
    REQUIRE(run_cli({"stats", "--a", "nope.jsonl", "--b", "nope.jsonl"}) == 1);
  }
}
