// Acceptance runner: one PASS/FAIL line per criterion.
#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "dmac/adversary.hpp"
#include "dmac/comm.hpp"
#include "dmac/config.hpp"
#include "dmac/digest.hpp"
#include "dmac/graph.hpp"
#include "dmac/nn.hpp"
#include "dmac/pipeline.hpp"
#include "dmac/rng.hpp"
#include "oracles.hpp"

using namespace dmac;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

// Tolerances and limits.
constexpr double kAggregationTolerance = 1e-12;
constexpr double kGradientTolerance = 1e-4;
constexpr double kMarginOverRandom = 0.15;
constexpr double kMarginOverReward = 0.10;
constexpr double kAblationShrink = 0.05;
constexpr double kRobustnessGain = 0.15;
constexpr double kCleanSlack = 0.02;
constexpr double kSdRatio = 0.8;
constexpr double kAverageGrowth = 0.10;
constexpr double kLimitMasking = 1.0;
constexpr double kLimitIgm = 5.0;
constexpr double kLimitAggregation = 5.0;
constexpr double kLimitGradients = 30.0;
constexpr double kLimitRelay = 600.0;
constexpr double kLimitPerEnv = 900.0;
constexpr int kEvalEpisodes = 500;

struct Verdict {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int digits = 3) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string sci(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

std::string timing(double seconds, double limit) { return "runtime " + fmt(seconds, 2) + " s (limit " + fmt(limit, 0) + " s)"; }

struct Context {
  fs::path configs;
  fs::path work;
  bool reuse = false;
};

config::ExperimentConfig load(const Context& ctx, const std::string& name, const std::vector<std::string>& overrides = {}) {
  return config::apply_overrides(config::load_config(ctx.configs / name), overrides);
}

// Runs the listed stages in order. With reuse, a stage whose recorded entry
// has the same config digest and intact artifacts is skipped.
double run_stages(const Context& ctx, const config::ExperimentConfig& cfg, const fs::path& dir,
                  const std::vector<pipeline::Stage>& stages) {
  const auto t0 = Clock::now();
  if (!ctx.reuse) fs::remove_all(dir);
  for (auto stage : stages) {
    if (ctx.reuse) {
      const auto m = pipeline::read_manifest(dir);
      const auto* e = m.find(stage);
      if (e && e->config_digest == config::config_digest(cfg)) {
        try {
          pipeline::verify_artifacts(*e, dir);
          continue;
        } catch (const std::exception&) {
        }
      }
    }
    pipeline::run_stage(stage, cfg, dir);
  }
  return seconds_since(t0);
}

const pipeline::ReportCell& cell(const pipeline::Report& r, const std::string& condition, const std::string& column) {
  const auto row = r.cells.find(condition);
  if (row == r.cells.end() || !row->second.count(column))
    throw std::runtime_error("report has no cell " + condition + "/" + column);
  return row->second.at(column);
}

// ---------------------------------------------------------------------------

Verdict masking_exactness() {
  const auto t0 = Clock::now();
  Rng rng(101);
  int cases = 0, exact = 0;
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<nn::Vector> obs(3, nn::Vector(7));
    for (auto& o : obs)
      for (int k = 0; k < o.size(); ++k) o(k) = rng.uniform(-2, 2);
    comm::CommDecision open{{rng.bernoulli(0.7), rng.bernoulli(0.7), rng.bernoulli(0.7)}};
    const auto set = comm::exchange(obs, open, comm::MessageEncoder(7));
    for (int bits = 0; bits < 8; ++bits) {
      const std::vector<bool> m{(bits & 1) != 0, (bits & 2) != 0, (bits & 4) != 0};
      ++cases;
      exact += oracle::identical(comm::apply_mask(set, comm::MaskMatrix{m}), oracle::mask_slots(set, m));
    }
  }
  const double t = seconds_since(t0);
  return {exact == cases && t < kLimitMasking,
          std::to_string(exact) + "/" + std::to_string(cases) + " masked sets bitwise equal to the oracle, " +
              timing(t, kLimitMasking)};
}

Verdict igm_equivalence() {
  const auto t0 = Clock::now();
  Rng rng(202);
  const int channels = comm::channel_count(4);
  int agree = 0;
  const int critics = 100;
  for (int trial = 0; trial < critics; ++trial) {
    nn::Matrix q(2, channels);
    for (int k = 0; k < q.size(); ++k) q.data()[k] = rng.uniform(-1, 1);
    adversary::MixingCritic critic{nn::Vector(channels), rng.uniform(-1, 1), adversary::MixerKind::linear};
    for (int c = 0; c < channels; ++c) critic.omega(c) = rng.uniform(-1.0, 2.0);
    critic.project();
    std::vector<std::array<double, 2>> rows(channels);
    for (int c = 0; c < channels; ++c) rows[c] = {q(0, c), q(1, c)};
    const auto joint = oracle::enumerate_joint(rows, {critic.omega.data(), critic.omega.data() + channels}, critic.bias);
    const auto s = adversary::select_from_q(q, adversary::SelectMode::greedy, 0.0, 0, rng);
    std::vector<int> chosen(channels);
    for (int c = 0; c < channels; ++c) chosen[c] = s.mask.mask[c];
    agree += std::find(joint.maximizers.begin(), joint.maximizers.end(), chosen) != joint.maximizers.end();
  }
  const double t = seconds_since(t0);
  return {agree == critics && t < kLimitIgm,
          std::to_string(agree) + "/" + std::to_string(critics) +
              " per-channel argmaxes are joint argmaxes over 64 joint actions, " + timing(t, kLimitIgm)};
}

Verdict aggregation_oracle() {
  const auto t0 = Clock::now();
  Rng rng(303);
  double worst = 0.0;
  const int graphs = 200;
  for (int trial = 0; trial < graphs; ++trial) {
    const int n = 2 + static_cast<int>(rng.index(7));
    const int dim = 1 + static_cast<int>(rng.index(6));
    const int rounds = static_cast<int>(rng.index(4));
    const graph::GraphOptions opt{rng.uniform(0.5, 3.0), rng.uniform(0.1, 1.0), false};
    std::vector<nn::Vector> attrs(n, nn::Vector(dim));
    for (auto& a : attrs)
      for (int k = 0; k < dim; ++k) a(k) = rng.uniform(-5, 5);
    nn::Matrix d = nn::Matrix::Zero(n, n);
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j) d(i, j) = d(j, i) = rng.uniform(0, 4);
    oracle::WeightTable w(n, std::vector<std::optional<double>>(n));
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        if (i != j && d(i, j) <= opt.radius) w[i][j] = std::max(d(i, j), opt.min_weight);
    oracle::Table e0(n);
    for (int i = 0; i < n; ++i) e0[i].assign(attrs[i].data(), attrs[i].data() + dim);
    const auto ref = oracle::aggregate(w, e0, rounds);
    const auto g = graph::build_graph(attrs, d, opt);
    const auto got = graph::aggregate(g, graph::init_embeddings(g, dim), rounds);
    for (int i = 0; i < n; ++i)
      for (int k = 0; k < dim; ++k) worst = std::max(worst, std::abs(got.rows[i](k) - ref[i][k]));
  }
  const double t = seconds_since(t0);
  return {worst <= kAggregationTolerance && t < kLimitAggregation,
          std::to_string(graphs) + " graphs, worst abs error " + sci(worst) + " (tol 1e-12), " +
              timing(t, kLimitAggregation)};
}

Verdict gradient_fidelity() {
  const auto t0 = Clock::now();
  Rng rng(404);
  double worst = 0.0;
  std::size_t compared = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const int in = 1 + static_cast<int>(rng.index(6));
    const int depth = 1 + static_cast<int>(rng.index(3));
    std::vector<int> sizes{in};
    for (int k = 0; k < depth; ++k) sizes.push_back(1 + static_cast<int>(rng.index(8)));
    sizes.push_back(1 + static_cast<int>(rng.index(4)));
    const nn::DenseNetwork net(sizes, rng());
    nn::Matrix xs(in, 4), ys(sizes.back(), 4);
    for (int k = 0; k < xs.size(); ++k) xs.data()[k] = rng.uniform(-1, 1);
    for (int k = 0; k < ys.size(); ++k) ys.data()[k] = rng.uniform(-1, 1);
    const auto r = oracle::check_gradients(net, xs, ys);
    worst = std::max(worst, r.worst_relative);
    compared += r.compared;
  }
  const double t = seconds_since(t0);
  return {worst < kGradientTolerance && t < kLimitGradients,
          "20 networks, " + std::to_string(compared) + " gradient entries, worst relative error " + sci(worst) + " (tol 1e-4), " + timing(t, kLimitGradients)};
}

// ---------------------------------------------------------------------------

struct RelayMargins {
  double clean = 0, random = 0, reward = 0, adversary = 0;
  double over_random() const { return random - adversary; }
  double over_reward() const { return reward - adversary; }
  double seconds = 0;
};

RelayMargins relay_margins(const Context& ctx, const std::vector<std::string>& overrides, const std::string& dir) {
  auto cfg = load(ctx, "relay.json", overrides);
  cfg.eval.episodes = kEvalEpisodes;
  RelayMargins m;
  m.seconds = run_stages(ctx, cfg, ctx.work / dir,
                         {pipeline::Stage::train_team, pipeline::Stage::train_adversary, pipeline::Stage::evaluate});
  const auto r = pipeline::build_report(ctx.work / dir);
  m.clean = cell(r, "clean", "before").win_rate;
  m.random = cell(r, "random_masker", "before").win_rate;
  m.reward = cell(r, "reward_based_masker", "before").win_rate;
  m.adversary = cell(r, "dmac_adversary", "before").win_rate;
  return m;
}

std::string describe(const RelayMargins& m) {
  return "clean " + fmt(m.clean) + ", random_masker " + fmt(m.random) + ", reward_based_masker " + fmt(m.reward) +
         ", dmac_adversary " + fmt(m.adversary);
}

Verdict critical_channels(const RelayMargins& m) {
  const bool ok = m.over_random() >= kMarginOverRandom && m.over_reward() >= kMarginOverReward && m.seconds < kLimitRelay;
  return {ok, "relay win rates: " + describe(m) + "; extra drop vs random " + fmt(m.over_random()) +
                  " (need >= 0.15), vs reward-based " + fmt(m.over_reward()) + " (need >= 0.10), " +
                  timing(m.seconds, kLimitRelay)};
}

Verdict ablation(const RelayMargins& full, const RelayMargins& bare) {
  const double shrink_random = full.over_random() - bare.over_random();
  const double shrink_reward = full.over_reward() - bare.over_reward();
  const bool ok = shrink_random >= kAblationShrink && shrink_reward >= kAblationShrink;
  return {ok, "without embedding: " + describe(bare) + "; margin vs random " + fmt(full.over_random()) + " -> " +
                  fmt(bare.over_random()) + " (shrink " + fmt(shrink_random) + "), vs reward-based " +
                  fmt(full.over_reward()) + " -> " + fmt(bare.over_reward()) + " (shrink " + fmt(shrink_reward) +
                  "), need both >= 0.05"};
}

// ---------------------------------------------------------------------------

struct EnvRun {
  std::string name;
  pipeline::Report report;
  double seconds = 0;
};

EnvRun full_run(const Context& ctx, const std::string& name) {
  auto cfg = load(ctx, name + ".json");
  cfg.eval.episodes = kEvalEpisodes;
  cfg.adversary.budget = 1;
  cfg.attack.budget = 1;
  EnvRun r{name, {}, 0.0};
  r.seconds = run_stages(ctx, cfg, ctx.work / name, pipeline::all_stages());
  r.report = pipeline::build_report(ctx.work / name);
  return r;
}

Verdict robustness_gain(const std::vector<EnvRun>& runs) {
  bool ok = true;
  std::string d;
  for (const auto& r : runs) {
    const double before = cell(r.report, "learned_attack", "before").win_rate;
    const double after = cell(r.report, "learned_attack", "after").win_rate;
    const bool env_ok = after - before >= kRobustnessGain && r.seconds < kLimitPerEnv;
    ok = ok && env_ok;
    d += r.name + ": learned attack " + fmt(before) + " -> " + fmt(after) + " (gain " + fmt(after - before) +
         ", need >= 0.15), " + timing(r.seconds, kLimitPerEnv) + "; ";
  }
  return {ok, d};
}

Verdict clean_kept(const std::vector<EnvRun>& runs) {
  bool ok = true;
  std::string d;
  for (const auto& r : runs) {
    const double before = cell(r.report, "clean", "before").win_rate;
    const double after = cell(r.report, "clean", "after").win_rate;
    ok = ok && after >= before - kCleanSlack;
    d += r.name + ": clean " + fmt(before) + " -> " + fmt(after) + " (need >= " + fmt(before - kCleanSlack) + "); ";
  }
  return {ok, d};
}

Verdict decentralization(const std::vector<EnvRun>& runs) {
  bool ok = true;
  std::string d;
  for (const auto& r : runs) {
    const auto& before = cell(r.report, "clean", "before");
    const auto& after = cell(r.report, "clean", "after");
    const bool sd_ok = after.sd <= kSdRatio * before.sd;
    const bool avg_ok = after.average <= (1.0 + kAverageGrowth) * before.average;
    ok = ok && sd_ok && avg_ok;
    d += r.name + ": frequency SD " + fmt(before.sd) + " -> " + fmt(after.sd) + " (ratio " +
         (before.sd > 0 ? fmt(after.sd / before.sd) : std::string("undefined")) + ", need <= 0.8), average " +
         fmt(before.average) +
         " -> " + fmt(after.average) + " (need <= " + fmt((1.0 + kAverageGrowth) * before.average) + "); ";
  }
  return {ok, d};
}

// ---------------------------------------------------------------------------

std::map<std::string, std::string> file_digests(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const std::string rel = fs::relative(e.path(), dir).generic_string();
    if (rel == "manifest.json") continue;  // carries wall-clock timestamps
    out[rel] = file_digest(e.path());
  }
  return out;
}

Verdict determinism(const Context& ctx) {
  const std::vector<std::string> small{"team.episodes=300",           "adversary.episodes=60", "retrain.rounds=1",
                                       "retrain.adversary_episodes=30", "retrain.cp_episodes=40",
                                       "retrain.metric_episodes=20",  "attack.episodes=60",    "eval.episodes=100"};
  const auto cfg = load(ctx, "relay.json", small);
  Context fresh = ctx;
  fresh.reuse = false;
  run_stages(fresh, cfg, ctx.work / "determinism_a", pipeline::all_stages());
  run_stages(fresh, cfg, ctx.work / "determinism_b", pipeline::all_stages());
  // Re-run every stage in place as well.
  const auto first = file_digests(ctx.work / "determinism_a");
  for (auto stage : pipeline::all_stages()) pipeline::run_stage(stage, cfg, ctx.work / "determinism_a");
  const auto again = file_digests(ctx.work / "determinism_a");
  const auto other = file_digests(ctx.work / "determinism_b");

  const auto ma = pipeline::read_manifest(ctx.work / "determinism_a");
  const auto mb = pipeline::read_manifest(ctx.work / "determinism_b");
  bool manifests = ma.stages.size() == mb.stages.size();
  for (const auto& [name, entry] : ma.stages)
    manifests = manifests && mb.stages.count(name) && mb.stages.at(name).outputs == entry.outputs &&
                mb.stages.at(name).config_digest == entry.config_digest;

  int differ = 0;
  for (const auto& [path, digest] : first) {
    differ += !other.count(path) || other.at(path) != digest;
    differ += !again.count(path) || again.at(path) != digest;
  }
  const bool ok = differ == 0 && first.size() == other.size() && first.size() == again.size() && manifests &&
                  first.count("report.json") && first.count("team.ckpt");
  return {ok, std::to_string(first.size()) + " artifacts across all six stages compared over two fresh runs and an "
                                              "in-place re-run, " +
                  std::to_string(differ) + " differ; manifest outputs " + (manifests ? "match" : "differ")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  Context ctx;
  std::string configs = DMAC_CONFIG_DIR;
  std::string work = "acceptance_runs";
  std::vector<int> only;
  app.add_option("--configs", configs, "directory holding relay.json, tj.json and pp.json")->capture_default_str();
  app.add_option("--work-dir", work, "where run directories are written")->capture_default_str();
  app.add_option("--only", only, "criteria to run (default: all)");
  app.add_flag("--reuse", ctx.reuse, "skip stages already recorded with the same config");
  CLI11_PARSE(app, argc, argv);
  ctx.configs = configs;
  ctx.work = work;
  fs::create_directories(ctx.work);

  auto wanted = [&](int c) { return only.empty() || std::find(only.begin(), only.end(), c) != only.end(); };
  std::map<int, Verdict> results;
  auto report = [&](int c, const std::function<Verdict()>& check) {
    Verdict v;
    try {
      v = check();
    } catch (const std::exception& e) {
      v = {false, std::string("error: ") + e.what()};
    }
    std::cerr << "[criterion " << c << " " << (v.pass ? "pass" : "fail") << "]" << std::endl;
    results[c] = v;
  };

  if (wanted(1)) report(1, masking_exactness);
  if (wanted(2)) report(2, igm_equivalence);
  if (wanted(3)) report(3, aggregation_oracle);
  if (wanted(4)) report(4, gradient_fidelity);

  if (wanted(5) || wanted(9)) {
    RelayMargins full, bare;
    std::string err;
    try {
      full = relay_margins(ctx, {}, "relay");
      if (wanted(9)) bare = relay_margins(ctx, {"adversary.disable_embedding=true"}, "relay_no_embedding");
    } catch (const std::exception& e) {
      err = e.what();
    }
    auto guarded = [&](auto f) {
      return [&, f] { return err.empty() ? f() : Verdict{false, "error: " + err}; };
    };
    if (wanted(5)) report(5, guarded([&] { return critical_channels(full); }));
    if (wanted(9)) report(9, guarded([&] { return ablation(full, bare); }));
  }

  if (wanted(6) || wanted(7) || wanted(8)) {
    std::vector<EnvRun> runs;
    std::string err;
    try {
      runs.push_back(full_run(ctx, "tj"));
      runs.push_back(full_run(ctx, "pp"));
    } catch (const std::exception& e) {
      err = e.what();
    }
    auto guarded = [&](auto f) {
      return [&, f] { return err.empty() ? f() : Verdict{false, "error: " + err}; };
    };
    if (wanted(6)) report(6, guarded([&] { return robustness_gain(runs); }));
    if (wanted(7)) report(7, guarded([&] { return clean_kept(runs); }));
    if (wanted(8)) report(8, guarded([&] { return decentralization(runs); }));
  }

  if (wanted(10)) report(10, [&] { return determinism(ctx); });

  int failed = 0;
  for (const auto& [c, v] : results) {
    failed += !v.pass;
    std::cout << "criterion " << c << ": " << (v.pass ? "PASS" : "FAIL") << "  " << v.detail << '\n';
  }
  std::cout << (failed == 0 ? "all criteria passed" : std::to_string(failed) + " criteria failed") << std::endl;
  return failed == 0 ? 0 : 1;
}
