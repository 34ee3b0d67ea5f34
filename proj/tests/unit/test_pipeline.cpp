#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"

#include "dmac/config.hpp"
#include "dmac/digest.hpp"
#include "dmac/errors.hpp"
#include "dmac/pipeline.hpp"

using namespace dmac;
namespace fs = std::filesystem;

namespace {

config::ExperimentConfig tiny_relay() {
  auto c = config::parse_config(R"({
    "seed": 3,
    "env": {"kind": "relay"},
    "team": {"episodes": 20, "hidden": [8], "gate_hidden": [8], "batch": 8, "target_sync": 10},
    "adversary": {"episodes": 8, "hidden": [8], "batch": 8, "target_sync": 5, "budget": 1},
    "retrain": {"rounds": 1, "adversary_episodes": 4, "cp_episodes": 6, "metric_episodes": 5},
    "attack": {"episodes": 8, "hidden": [8], "batch": 8, "target_sync": 5},
    "eval": {"episodes": 10, "workers": 1}
  })");
  return c;
}

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / name;
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

}  // namespace

TEST_SUITE("pipeline") {

TEST_CASE("config text round trips") {
  const auto c = tiny_relay();
  CHECK(c.team_episodes == 20);
  CHECK(c.env.kind == env::Kind::relay);
  CHECK(c.env.agents == 4);
  CHECK(c.adversary.hidden == std::vector<int>{8});
  const std::string text = config::serialize_config(c);
  const auto back = config::parse_config(text);
  CHECK(back == c);
  CHECK(config::serialize_config(back) == text);
  CHECK(config::config_digest(back) == config::config_digest(c));
  CHECK(config::config_digest(c).size() == 64);
}

TEST_CASE("config errors") {
  CHECK_THROWS_AS(config::parse_config(R"({"team": {"bogus": 1}})"), ConfigError);
  CHECK_THROWS_AS(config::parse_config(R"({"bogus": {}})"), ConfigError);
  CHECK_THROWS_AS(config::parse_config(R"({"team": {"batch": "eight"}})"), ConfigError);
  CHECK_THROWS_AS(config::parse_config("{not json"), ConfigError);
  CHECK_THROWS_AS(config::parse_config(R"({"retrain": {"p_mask": 1.5}})"), ConfigError);
  try {
    config::parse_config(R"({"adversary": {"nonsense": true}})");
    FAIL("expected a config error");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("adversary.nonsense") != std::string::npos);
  }
}

TEST_CASE("overrides") {
  const auto c = tiny_relay();
  const std::vector<std::string> ov{"team.batch=16", "adversary.disable_embedding=true", "team.mode=full"};
  const auto o = config::apply_overrides(c, ov);
  CHECK(o.team.batch == 16);
  CHECK(o.team.mode == team::CommMode::full);
  CHECK_FALSE(o.adversary.features.use_embedding);
  CHECK(config::config_digest(o) != config::config_digest(c));
  const std::vector<std::string> bad{"team.bogus=1"};
  CHECK_THROWS_AS(config::apply_overrides(c, bad), ConfigError);
  const std::vector<std::string> shapeless{"team.batch"};
  CHECK_THROWS_AS(config::apply_overrides(c, shapeless), ConfigError);
}

TEST_CASE("stages refuse to run without their inputs") {
  const auto dir = fresh_dir("dmac_pipeline_deps");
  const auto c = tiny_relay();
  for (auto stage : {pipeline::Stage::retrain, pipeline::Stage::train_adversary, pipeline::Stage::evaluate}) {
    try {
      pipeline::run_stage(stage, c, dir);
      FAIL("expected a dependency error");
    } catch (const DependencyError& e) {
      CHECK(std::string(e.what()).find("train-team") != std::string::npos);
    }
  }
  pipeline::run_stage(pipeline::Stage::train_team, c, dir);
  CHECK_THROWS_AS(pipeline::run_stage(pipeline::Stage::retrain, c, dir), DependencyError);
  // Tampering with an artifact is noticed downstream.
  { std::ofstream(dir / "team.ckpt", std::ios::app) << "x"; }
  CHECK_THROWS_AS(pipeline::run_stage(pipeline::Stage::train_adversary, c, dir), DependencyError);
  fs::remove_all(dir);
}

TEST_CASE("an empty run reports only gaps") {
  const auto dir = fresh_dir("dmac_pipeline_empty");
  fs::create_directories(dir);
  const auto r = pipeline::build_report(dir);
  CHECK(r.cells.empty());
  CHECK(r.gaps.size() == 2 * pipeline::conditions().size());
  const auto text = pipeline::report_text(r);
  CHECK(pipeline::parse_report_text(text).gaps == r.gaps);
  CHECK(pipeline::parse_report_json(pipeline::report_json(r)).gaps == r.gaps);
  fs::remove_all(dir);
}

TEST_CASE("full relay run end to end") {
  const auto dir = fresh_dir("dmac_pipeline_full");
  const auto c = tiny_relay();
  for (auto stage : pipeline::all_stages()) pipeline::run_stage(stage, c, dir);
  const auto m = pipeline::read_manifest(dir);
  CHECK(m.stages.size() == pipeline::all_stages().size());
  for (const auto& [name, entry] : m.stages) {
    CHECK(entry.config_digest == config::config_digest(c));
    CHECK_NOTHROW(pipeline::verify_artifacts(entry, dir));
  }

  const auto r = pipeline::build_report(dir);
  CHECK(r.gaps.empty());
  for (const auto& condition : pipeline::conditions())
    for (const char* column : {"before", "after"}) {
      REQUIRE(r.cells.count(condition));
      REQUIRE(r.cells.at(condition).count(column));
      const auto& cell = r.cells.at(condition).at(column);
      CHECK(cell.win_rate >= 0.0);
      CHECK(cell.win_rate <= 1.0);
    }

  // The written text and JSON carry the same numbers.
  const auto from_text = pipeline::parse_report_text(slurp(dir / "report.txt"));
  const auto from_json = pipeline::parse_report_json(slurp(dir / "report.json"));
  for (const auto& [condition, row] : from_json.cells)
    for (const auto& [column, cell] : row) {
      const auto& t = from_text.cells.at(condition).at(column);
      CHECK(t.win_rate == cell.win_rate);
      CHECK(t.mean_return == cell.mean_return);
      CHECK(t.sd == cell.sd);
      CHECK(t.average == cell.average);
      CHECK(t.high == cell.high);
      CHECK(t.low == cell.low);
    }

  // Re-running a stage with the same config rewrites identical bytes.
  const std::string ckpt = slurp(dir / "team.ckpt");
  pipeline::run_stage(pipeline::Stage::train_team, c, dir);
  CHECK(slurp(dir / "team.ckpt") == ckpt);
  // and invalidates everything downstream of it.
  const auto after = pipeline::read_manifest(dir);
  CHECK(after.stages.size() == 1);
  CHECK(after.find(pipeline::Stage::train_team) != nullptr);
  fs::remove_all(dir);
}

TEST_CASE("attackers for both columns share their seeds") {
  const auto dir = fresh_dir("dmac_pipeline_crn");
  const std::vector<std::string> ov{"retrain.rounds=0"};
  const auto c = config::apply_overrides(tiny_relay(), ov);
  for (auto stage : {pipeline::Stage::train_team, pipeline::Stage::train_adversary, pipeline::Stage::retrain,
                     pipeline::Stage::train_attack})
    pipeline::run_stage(stage, c, dir);
  // Zero rounds leave the team as it was, so the two attackers coincide.
  CHECK(slurp(dir / "retrained_team.ckpt") == slurp(dir / "team.ckpt"));
  CHECK(slurp(dir / "attacker_after.ckpt") == slurp(dir / "attacker_before.ckpt"));
  fs::remove_all(dir);
}

}  // TEST_SUITE
