#include "dmac/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <memory>
#include <sstream>

#include "json.hpp"

#include "dmac/adversary.hpp"
#include "dmac/attacks.hpp"
#include "dmac/digest.hpp"
#include "dmac/errors.hpp"
#include "dmac/eval.hpp"
#include "dmac/retrain.hpp"
#include "dmac/rng.hpp"
#include "dmac/team.hpp"

namespace dmac::pipeline {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

constexpr const char* kManifest = "manifest.json";
const std::vector<std::string> kColumns{"before", "after"};

std::string utc_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

std::uint64_t stage_seed(std::uint64_t seed, Stage stage) {
  return derive_seed(seed, 100 + static_cast<std::uint64_t>(stage));
}

// Stages whose outputs are built from `stage`'s outputs.
std::vector<Stage> dependents(Stage stage) {
  switch (stage) {
    case Stage::train_team:
      return {Stage::train_adversary, Stage::retrain, Stage::train_attack, Stage::evaluate, Stage::report};
    case Stage::train_adversary: return {Stage::retrain, Stage::evaluate, Stage::report};
    case Stage::retrain: return {Stage::train_attack, Stage::evaluate, Stage::report};
    case Stage::train_attack: return {Stage::evaluate, Stage::report};
    case Stage::evaluate: return {Stage::report};
    case Stage::report: return {};
  }
  return {};
}

std::vector<Stage> prerequisites(Stage stage) {
  switch (stage) {
    case Stage::train_team: return {};
    case Stage::train_adversary: return {Stage::train_team};
    case Stage::retrain: return {Stage::train_team, Stage::train_adversary};
    case Stage::train_attack: return {Stage::train_team};
    case Stage::evaluate: return {Stage::train_team};
    case Stage::report: return {};
  }
  return {};
}

const StageEntry& require(const RunManifest& m, Stage needed, Stage running, const fs::path& dir) {
  const StageEntry* e = m.find(needed);
  if (!e)
    throw DependencyError("stage " + to_string(running) + " needs a completed " + to_string(needed) +
                          " stage in " + dir.string() + "; run " + to_string(needed) + " first");
  verify_artifacts(*e, dir);
  return *e;
}

template <class Fn>
void write_file(const fs::path& path, Fn&& fill) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  fill(out);
  if (!out) throw IoError("failed writing " + path.string());
}

std::ifstream open_read(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  return in;
}

team::TeamPolicy read_team(const fs::path& path) {
  auto in = open_read(path);
  return team::load_team(in);
}

adversary::Adversary read_adversary(const fs::path& path) {
  auto in = open_read(path);
  return adversary::load_adversary(in);
}

attacks::AttackerPolicy read_attacker(const fs::path& path) {
  auto in = open_read(path);
  return attacks::load_attacker(in);
}

std::string read_text(const fs::path& path) {
  auto in = open_read(path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class Outputs {
 public:
  explicit Outputs(fs::path dir) : dir_(std::move(dir)) {}
  template <class Fn>
  void write(const std::string& name, Fn&& fill) {
    const fs::path p = dir_ / name;
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    write_file(p, fill);
    list_.push_back({name, file_digest(p)});
  }
  std::vector<Artifact> take() { return std::move(list_); }

 private:
  fs::path dir_;
  std::vector<Artifact> list_;
};

bool has_output(const StageEntry* e, const std::string& name) {
  if (!e) return false;
  return std::any_of(e->outputs.begin(), e->outputs.end(), [&](const Artifact& a) { return a.path == name; });
}

void stage_train_team(const config::ExperimentConfig& c, const env::Environment& e, std::uint64_t seed,
                      Outputs& out) {
  const team::TrainResult r = team::train_team(e, c.team, c.team_episodes, seed);
  out.write("team.ckpt", [&](std::ostream& os) { team::save_team(r.policy, os); });
  out.write("team_curve.csv", [&](std::ostream& os) { team::write_curve(r.curve, os); });
}

void stage_train_adversary(const config::ExperimentConfig& c, const env::Environment& e, std::uint64_t seed,
                           const fs::path& dir, Outputs& out) {
  const team::TeamPolicy policy = read_team(dir / "team.ckpt");
  const adversary::Adversary a = adversary::train_adversary(e, policy, c.adversary, c.adversary_episodes, seed);
  out.write("adversary.ckpt", [&](std::ostream& os) { adversary::save_adversary(a, os); });
  out.write("adversary_curve.csv", [&](std::ostream& os) { adversary::write_curve(a.curve, os); });
}

void stage_retrain(const config::ExperimentConfig& c, const env::Environment& e, std::uint64_t seed,
                   const fs::path& dir, Outputs& out) {
  team::TeamPolicy policy = read_team(dir / "team.ckpt");
  adversary::Adversary a = read_adversary(dir / "adversary.ckpt");
  const retrain::RetrainResult r =
      retrain::retrain_cp(e, std::move(policy), c.team, std::move(a), c.adversary, c.retrain, seed);
  out.write("retrained_team.ckpt", [&](std::ostream& os) { team::save_team(r.policy, os); });
  out.write("retrained_adversary.ckpt", [&](std::ostream& os) { adversary::save_adversary(r.adversary, os); });
  out.write("rounds.csv", [&](std::ostream& os) { retrain::write_rounds(r.rounds, os); });
}

void stage_train_attack(const config::ExperimentConfig& c, const env::Environment& e, std::uint64_t seed,
                        const fs::path& dir, bool retrained, Outputs& out) {
  // Both columns share the attacker's seeds, so the two attackers differ only
  // through the team they were trained against.
  for (const std::string& column : kColumns) {
    if (column == "after" && !retrained) continue;
    const team::TeamPolicy policy = read_team(dir / (column == "before" ? "team.ckpt" : "retrained_team.ckpt"));
    attacks::AttackerPolicy attacker = attacks::make_attacker(e, c.attack, derive_seed(seed, 1));
    const auto curve =
        attacks::train_learned_attack(e, policy, c.attack, c.attack_episodes, derive_seed(seed, 2), attacker);
    out.write("attacker_" + column + ".ckpt", [&](std::ostream& os) { attacks::save_attacker(attacker, os); });
    out.write("attack_" + column + "_curve.csv", [&](std::ostream& os) { attacks::write_curve(curve, os); });
  }
}

void stage_evaluate(const config::ExperimentConfig& c, const env::Environment& e, std::uint64_t seed,
                    const fs::path& dir, const RunManifest& m, Outputs& out) {
  const StageEntry* retrain_entry = m.find(Stage::retrain);
  const StageEntry* attack_entry = m.find(Stage::train_attack);
  const StageEntry* adversary_entry = m.find(Stage::train_adversary);
  eval::EvalOptions options;
  options.episodes = c.eval.episodes;
  options.workers = c.eval.workers;
  options.seed = seed;
  for (const std::string& column : kColumns) {
    if (column == "after" && !retrain_entry) continue;
    const team::TeamPolicy policy = read_team(dir / (column == "before" ? "team.ckpt" : "retrained_team.ckpt"));
    std::vector<std::pair<std::string, std::unique_ptr<team::Interferer>>> runs;
    runs.emplace_back("clean", nullptr);
    runs.emplace_back("random_masker", std::make_unique<attacks::RandomMasker>(c.adversary.budget));
    runs.emplace_back("reward_based_masker", std::make_unique<attacks::RewardBasedMasker>());
    const std::string adv_file = column == "before" ? "adversary.ckpt" : "retrained_adversary.ckpt";
    if ((column == "before" && adversary_entry) || column == "after")
      runs.emplace_back("dmac_adversary", std::make_unique<adversary::AdversaryMasker>(
                                              std::make_shared<adversary::Adversary>(read_adversary(dir / adv_file))));
    runs.emplace_back("heuristic_attack", std::make_unique<attacks::HeuristicAttacker>(c.attack.budget));
    const std::string attacker_file = "attacker_" + column + ".ckpt";
    if (has_output(attack_entry, attacker_file))
      runs.emplace_back("learned_attack", std::make_unique<attacks::LearnedAttacker>(
                                              std::make_shared<attacks::AttackerPolicy>(read_attacker(dir / attacker_file))));
    for (const auto& [condition, hook] : runs) {
      const eval::EvalReport r = eval::evaluate(e, policy, hook.get(), condition, options);
      const std::string stem = "eval/" + column + "_" + condition;
      const std::string heatmap = stem + "_heatmap.txt";
      out.write(heatmap, [&](std::ostream& os) { eval::write_heatmap(r.frequency, os); });
      out.write(stem + ".json", [&](std::ostream& os) {
        os << eval::report_json(r, fs::path(heatmap).filename().string());
      });
    }
  }
}

void stage_report(const fs::path& dir, Outputs& out) {
  const Report r = build_report(dir);
  out.write("report.txt", [&](std::ostream& os) { os << report_text(r); });
  out.write("report.json", [&](std::ostream& os) { os << report_json(r); });
}

json cell_json(const ReportCell& c) {
  return json{{"win_rate", c.win_rate}, {"mean_return", c.mean_return}, {"freq_high", c.high},
              {"freq_low", c.low},      {"freq_average", c.average},    {"freq_sd", c.sd}};
}

ReportCell parse_cell(const nlohmann::json& j) {
  return {j.at("win_rate").get<double>(),     j.at("mean_return").get<double>(), j.at("freq_sd").get<double>(),
          j.at("freq_average").get<double>(), j.at("freq_high").get<double>(),   j.at("freq_low").get<double>()};
}

// Shortest text that reads back to the same double.
std::string number(double v) { return json(v).dump(); }

}  // namespace

std::string to_string(Stage stage) {
  switch (stage) {
    case Stage::train_team: return "train-team";
    case Stage::train_adversary: return "train-adversary";
    case Stage::retrain: return "retrain";
    case Stage::train_attack: return "train-attack";
    case Stage::evaluate: return "evaluate";
    case Stage::report: return "report";
  }
  return "?";
}

Stage parse_stage(const std::string& name) {
  for (Stage s : all_stages())
    if (to_string(s) == name) return s;
  throw ConfigError("unknown stage '" + name + "'");
}

const std::vector<Stage>& all_stages() {
  static const std::vector<Stage> s{Stage::train_team,   Stage::train_adversary, Stage::retrain,
                                    Stage::train_attack, Stage::evaluate,        Stage::report};
  return s;
}

const StageEntry* RunManifest::find(Stage stage) const {
  const auto it = stages.find(to_string(stage));
  return it == stages.end() ? nullptr : &it->second;
}

RunManifest read_manifest(const fs::path& run_dir) {
  RunManifest m;
  const fs::path p = run_dir / kManifest;
  if (!fs::exists(p)) return m;
  try {
    const auto j = nlohmann::json::parse(read_text(p));
    if (j.at("format") != "dmac-manifest" || j.at("version") != 1) throw IoError("not a run manifest: " + p.string());
    for (const auto& s : j.at("stages")) {
      StageEntry e;
      e.stage = s.at("stage").get<std::string>();
      e.config_digest = s.at("config_digest").get<std::string>();
      e.seed = s.at("seed").get<std::uint64_t>();
      e.started = s.at("started").get<std::string>();
      e.finished = s.at("finished").get<std::string>();
      for (const auto& a : s.at("outputs")) e.outputs.push_back({a.at("path"), a.at("sha256")});
      m.stages[e.stage] = std::move(e);
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed manifest " + p.string() + ": " + e.what());
  }
  return m;
}

void write_manifest(const RunManifest& manifest, const fs::path& run_dir) {
  json j;
  j["format"] = "dmac-manifest";
  j["version"] = 1;
  j["stages"] = json::array();
  for (Stage s : all_stages()) {
    const StageEntry* e = manifest.find(s);
    if (!e) continue;
    json outputs = json::array();
    for (const auto& a : e->outputs) outputs.push_back({{"path", a.path}, {"sha256", a.sha256}});
    j["stages"].push_back({{"stage", e->stage},
                           {"config_digest", e->config_digest},
                           {"seed", e->seed},
                           {"started", e->started},
                           {"finished", e->finished},
                           {"outputs", outputs}});
  }
  write_file(run_dir / kManifest, [&](std::ostream& os) { os << j.dump(2) << '\n'; });
}

void verify_artifacts(const StageEntry& entry, const fs::path& run_dir) {
  for (const auto& a : entry.outputs) {
    const fs::path p = run_dir / a.path;
    if (!fs::exists(p))
      throw DependencyError(a.path + " from stage " + entry.stage + " is missing; re-run " + entry.stage);
    if (file_digest(p) != a.sha256)
      throw DependencyError(a.path + " from stage " + entry.stage + " changed since it was written; re-run " +
                            entry.stage);
  }
}

StageEntry run_stage(Stage stage, const config::ExperimentConfig& config, const fs::path& run_dir) {
  config::validate(config);
  fs::create_directories(run_dir);
  RunManifest manifest = read_manifest(run_dir);
  for (Stage need : prerequisites(stage)) require(manifest, need, stage, run_dir);
  // Optional inputs are checked too when present.
  for (Stage opt : {Stage::train_adversary, Stage::retrain, Stage::train_attack})
    if (stage == Stage::evaluate && manifest.find(opt)) verify_artifacts(*manifest.find(opt), run_dir);
  if (stage == Stage::train_attack && manifest.find(Stage::retrain))
    verify_artifacts(*manifest.find(Stage::retrain), run_dir);

  StageEntry entry;
  entry.stage = to_string(stage);
  entry.config_digest = config::config_digest(config);
  entry.seed = config.seed;
  entry.started = utc_now();

  const auto environment = env::make_environment(config.env);
  const std::uint64_t seed = stage_seed(config.seed, stage);
  Outputs out(run_dir);
  out.write("config_" + entry.stage + ".json", [&](std::ostream& os) { os << config::serialize_config(config); });
  switch (stage) {
    case Stage::train_team: stage_train_team(config, *environment, seed, out); break;
    case Stage::train_adversary: stage_train_adversary(config, *environment, seed, run_dir, out); break;
    case Stage::retrain: stage_retrain(config, *environment, seed, run_dir, out); break;
    case Stage::train_attack:
      stage_train_attack(config, *environment, seed, run_dir, manifest.find(Stage::retrain) != nullptr, out);
      break;
    case Stage::evaluate: stage_evaluate(config, *environment, seed, run_dir, manifest, out); break;
    case Stage::report: stage_report(run_dir, out); break;
  }
  entry.outputs = out.take();
  entry.finished = utc_now();

  for (Stage d : dependents(stage)) manifest.stages.erase(to_string(d));
  manifest.stages[entry.stage] = entry;
  write_manifest(manifest, run_dir);
  return entry;
}

const std::vector<std::string>& conditions() {
  static const std::vector<std::string> c{"clean",          "random_masker",    "reward_based_masker",
                                          "dmac_adversary", "heuristic_attack", "learned_attack"};
  return c;
}

Report build_report(const fs::path& run_dir) {
  Report r;
  const RunManifest m = read_manifest(run_dir);
  const StageEntry* ev = m.find(Stage::evaluate);
  if (ev) verify_artifacts(*ev, run_dir);
  for (const auto& condition : conditions())
    for (const auto& column : kColumns) {
      const std::string name = "eval/" + column + "_" + condition + ".json";
      if (!has_output(ev, name)) {
        r.gaps.push_back(condition + "/" + column);
        continue;
      }
      const eval::EvalReport e = eval::parse_report_json(read_text(run_dir / name), eval::FrequencyMatrix{});
      r.cells[condition][column] = {e.win_rate,         e.mean_return, e.summary.sd,
                                    e.summary.average, e.summary.high, e.summary.low};
    }
  return r;
}

std::string report_text(const Report& r) {
  std::ostringstream os;
  os << "dmac report 1\n\n";
  os << "win rate by condition, before and after retraining\n";
  os << std::left << std::setw(22) << "condition" << std::setw(24) << "before" << "after\n";
  for (const auto& condition : conditions()) {
    os << std::setw(22) << condition;
    for (const auto& column : kColumns) {
      const auto row = r.cells.find(condition);
      const bool have = row != r.cells.end() && row->second.count(column);
      const std::string v = have ? number(row->second.at(column).win_rate) : "-";
      if (column == "before")
        os << std::setw(24) << v;
      else
        os << v;
    }
    os << '\n';
  }
  os << "\ncells\n";
  os << "condition column win_rate mean_return freq_high freq_low freq_average freq_sd\n";
  for (const auto& condition : conditions())
    for (const auto& column : kColumns) {
      const auto row = r.cells.find(condition);
      if (row == r.cells.end() || !row->second.count(column)) continue;
      const ReportCell& c = row->second.at(column);
      os << condition << ' ' << column << ' ' << number(c.win_rate) << ' ' << number(c.mean_return) << ' '
         << number(c.high) << ' ' << number(c.low) << ' ' << number(c.average) << ' ' << number(c.sd) << '\n';
    }
  os << "\ngaps";
  if (r.gaps.empty()) os << " none";
  for (const auto& g : r.gaps) os << ' ' << g;
  os << '\n';
  return os.str();
}

std::string report_json(const Report& r) {
  json j;
  j["format"] = "dmac-report";
  j["version"] = 1;
  j["columns"] = kColumns;
  j["rows"] = json::array();
  for (const auto& condition : conditions()) {
    json row;
    row["condition"] = condition;
    for (const auto& column : kColumns) {
      const auto it = r.cells.find(condition);
      row[column] = it != r.cells.end() && it->second.count(column) ? cell_json(it->second.at(column)) : json(nullptr);
    }
    j["rows"].push_back(row);
  }
  j["gaps"] = r.gaps;
  return j.dump(2) + "\n";
}

Report parse_report_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    if (j.at("format") != "dmac-report" || j.at("version") != 1) throw IoError("not a report document");
    Report r;
    for (const auto& row : j.at("rows")) {
      const std::string condition = row.at("condition");
      for (const auto& column : kColumns)
        if (!row.at(column).is_null()) r.cells[condition][column] = parse_cell(row.at(column));
    }
    r.gaps = j.at("gaps").get<std::vector<std::string>>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed report: ") + e.what());
  }
}

Report parse_report_text(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  Report r;
  bool cells = false;
  while (std::getline(in, line)) {
    if (line == "cells") {
      cells = true;
      std::getline(in, line);  // header
      continue;
    }
    if (line.rfind("gaps", 0) == 0) {
      std::istringstream ls(line.substr(4));
      std::string g;
      while (ls >> g)
        if (g != "none") r.gaps.push_back(g);
      cells = false;
      continue;
    }
    if (!cells || line.empty()) continue;
    std::istringstream ls(line);
    std::string condition, column, v[6];
    ls >> condition >> column >> v[0] >> v[1] >> v[2] >> v[3] >> v[4] >> v[5];
    if (!ls) throw IoError("malformed report line: " + line);
    auto d = [](const std::string& s) { return nlohmann::json::parse(s).get<double>(); };
    r.cells[condition][column] = {d(v[0]), d(v[1]), d(v[5]), d(v[4]), d(v[2]), d(v[3])};
  }
  return r;
}

}  // namespace dmac::pipeline
