#include <cmath>
#include <memory>
#include <sstream>
#include <vector>

#include "doctest.h"

#include "dmac/attacks.hpp"
#include "dmac/env.hpp"
#include "dmac/team.hpp"
#include "oracles.hpp"

using namespace dmac;
using nn::Matrix;
using nn::Vector;

namespace {

comm::ObservationSet open_set(int n, const std::vector<bool>& open, Rng& rng) {
  std::vector<Vector> obs(n, Vector(6));
  for (auto& o : obs)
    for (int k = 0; k < 6; ++k) o(k) = rng.uniform(-1, 1);
  return comm::exchange(obs, comm::CommDecision{open}, comm::MessageEncoder(6));
}

graph::AgentGraph graph_of(int n, const Matrix& d, double radius) {
  std::vector<Vector> attrs(n, Vector::Zero(2));
  return graph::build_graph(attrs, d, {radius, 1.0, false});
}

}  // namespace

TEST_SUITE("attacks") {

TEST_CASE("random masker hits each channel uniformly") {
  Rng rng(1);
  std::vector<int> hits(6, 0);
  const int draws = 10000;
  for (int k = 0; k < draws; ++k) {
    const auto m = attacks::random_masker(4, rng);
    int count = 0;
    for (int c = 0; c < 6; ++c) {
      count += m.mask[c];
      hits[c] += m.mask[c];
    }
    REQUIRE(count == 1);
  }
  for (int h : hits) CHECK(std::abs(h / double(draws) - 1.0 / 6) < 0.02);
  for (int k = 0; k < 20; ++k) CHECK(attacks::random_masker(2, rng).mask == std::vector<bool>{true});
  const auto three = attacks::random_masker(5, rng, 3);
  CHECK(std::count(three.mask.begin(), three.mask.end(), true) == 3);
}

TEST_CASE("reward-based masker") {
  Rng rng(2);
  Matrix d(3, 3);
  d << 0, 1, 5, 1, 0, 5, 5, 5, 0;
  const auto g = graph_of(3, d, 2.0);
  const comm::ChannelSet ch(3);

  SUBCASE("unique top agent with one neighbour") {
    const std::vector<double> r{0.0, 2.0, 1.0};
    for (int k = 0; k < 10; ++k) {
      const auto m = attacks::reward_based_masker(r, g, rng);
      CHECK(m.mask == std::vector<bool>{true, false, false});
    }
  }
  SUBCASE("equal rewards pick the first agent") {
    const std::vector<double> r{0.5, 0.5, 0.5};
    const auto m = attacks::reward_based_masker(r, g, rng);
    CHECK(m.mask[ch.index(0, 1)]);
  }
  SUBCASE("isolated top agent falls back to one random channel") {
    const std::vector<double> r{0.0, 0.0, 3.0};
    std::vector<int> hits(3, 0);
    for (int k = 0; k < 3000; ++k) {
      const auto m = attacks::reward_based_masker(r, g, rng);
      REQUIRE(std::count(m.mask.begin(), m.mask.end(), true) == 1);
      for (int c = 0; c < 3; ++c) hits[c] += m.mask[c];
    }
    for (int h : hits) CHECK(h > 800);
  }
}

TEST_CASE("heuristic attack") {
  Rng rng(3);
  SUBCASE("no open channel leaves the set alone") {
    const auto set = open_set(3, {false, false, false}, rng);
    auto copy = set;
    CHECK(attacks::heuristic_attack(copy, 1, rng).empty());
    CHECK(oracle::identical(copy, set));
  }
  SUBCASE("full budget replaces every open message and keeps flags") {
    const auto set = open_set(4, {true, false, true, true, false, true}, rng);
    auto copy = set;
    const auto hit = attacks::heuristic_attack(copy, 4, rng);
    CHECK(hit.size() == 4);
    const comm::ChannelSet ch(4);
    for (int c = 0; c < 6; ++c) {
      const auto [i, j] = ch[c];
      CHECK(copy.slot(i, j).masked == set.slot(i, j).masked);
      if (set.slot(i, j).is_null()) {
        CHECK(copy.slot(i, j) == set.slot(i, j));
        continue;
      }
      CHECK_FALSE(copy.slot(i, j).content == set.slot(i, j).content);
      CHECK(copy.slot(i, j).content.cwiseAbs().maxCoeff() <= 1.0);
      CHECK_FALSE(copy.slot(i, j).content == copy.slot(j, i).content);
    }
    for (int a = 0; a < 4; ++a) CHECK(copy.agents[a].observation == set.agents[a].observation);
  }
  SUBCASE("budget one touches a single channel") {
    const auto set = open_set(4, std::vector<bool>(6, true), rng);
    auto copy = set;
    const auto hit = attacks::heuristic_attack(copy, 1, rng);
    REQUIRE(hit.size() == 1);
    const comm::ChannelSet ch(4);
    for (int c = 0; c < 6; ++c) {
      const auto [i, j] = ch[c];
      CHECK((copy.slot(i, j) == set.slot(i, j)) == (c != hit[0]));
    }
  }
}

TEST_CASE("attacks do not touch the environment") {
  env::TrafficJunction tj(env::default_config(env::Kind::traffic_junction));
  const auto digest = tj.digest();
  const auto obs = tj.observe();
  const comm::CommDecision open{std::vector<bool>(45, true)};
  const team::StepView view{tj, obs, open, 0};
  attacks::RandomMasker rm;
  attacks::RewardBasedMasker rb;
  attacks::HeuristicAttacker ha;
  rm.begin_episode(1);
  rb.begin_episode(1);
  ha.begin_episode(1);
  CHECK(rm.mask(view).has_value());
  CHECK(rb.mask(view).has_value());
  auto set = comm::exchange(obs, open, comm::MessageEncoder(13));
  ha.perturb(set, view);
  CHECK(tj.digest() == digest);
}

TEST_CASE("learned attacker choices") {
  env::Relay relay(env::default_config(env::Kind::relay));
  attacks::AttackConfig cfg;
  cfg.hidden = {8};
  auto a = attacks::make_attacker(relay, cfg, 3);
  CHECK(a.epsilon == 1.0);
  CHECK(a.codebook.cwiseAbs().maxCoeff() <= 1.0);
  Rng rng(4);
  Matrix q(16, 3);
  q.setZero();
  q(5, 1) = 2.0;
  q(7, 2) = 1.0;
  const std::vector<int> open{0, 3, 5};
  a.epsilon = 0.0;
  const auto greedy = attacks::choose_attack(a, q, open, false, rng);
  REQUIRE(greedy.size() == 1);
  CHECK(greedy[0].channel == 3);
  CHECK(greedy[0].code == 5);
  a.epsilon = 1.0;
  for (int k = 0; k < 50; ++k) {
    const auto c = attacks::choose_attack(a, q, open, true, rng);
    REQUIRE(c.size() == 1);
    CHECK(std::find(open.begin(), open.end(), c[0].channel) != open.end());
  }
  CHECK(attacks::choose_attack(a, Matrix(16, 0), {}, true, rng).empty());

  auto set = open_set(4, std::vector<bool>(6, true), rng);
  attacks::apply_attack(set, a.codebook, greedy);
  const auto [i, j] = comm::ChannelSet(4)[3];
  CHECK(set.slot(i, j).content == a.codebook.col(5));
  CHECK(set.slot(j, i).content == a.codebook.col(5));
  CHECK_FALSE(set.slot(i, j).masked);
}

TEST_CASE("code margin gradient matches finite differences") {
  env::TrafficJunction tj(env::default_config(env::Kind::traffic_junction));
  team::TeamConfig tc;
  tc.hidden = {16};
  tc.mode = team::CommMode::full;
  const auto team = team::make_team_policy(tj, tc, 2);
  attacks::AttackConfig cfg;
  cfg.hidden = {8};
  const auto a = attacks::make_attacker(tj, cfg, 5);
  attacks::AttackRecord rec;
  rec.observations.resize(13, 10);
  const auto obs = tj.observe();
  for (int k = 0; k < 10; ++k) rec.observations.col(k) = obs[k];
  rec.delivered.assign(45, true);
  for (int c : {0, 7, 30}) {
    const attacks::AttackChoice choice{c, 3};
    Vector grad;
    attacks::code_margin(team, rec, a.codebook, choice, &grad);
    REQUIRE(grad.size() == comm::kMessageDim);
    Matrix book = a.codebook;
    for (int k = 0; k < comm::kMessageDim; ++k) {
      const double keep = book(k, 3);
      book(k, 3) = keep + 1e-6;
      const double up = attacks::code_margin(team, rec, book, choice, nullptr);
      book(k, 3) = keep - 1e-6;
      const double down = attacks::code_margin(team, rec, book, choice, nullptr);
      book(k, 3) = keep;
      const double numeric = (up - down) / 2e-6;
      if (std::abs(numeric) > 1e-8 || std::abs(grad(k)) > 1e-8)
        CHECK(oracle::relative_error(grad(k), numeric) < 1e-4);
    }
  }
}

TEST_CASE("learned attack training keeps codes in range and replays") {
  env::Relay relay(env::default_config(env::Kind::relay));
  team::TeamConfig tc;
  tc.hidden = {16};
  tc.mode = team::CommMode::full;
  const auto team = team::make_team_policy(relay, tc, 6);
  attacks::AttackConfig cfg;
  cfg.hidden = {8};
  cfg.batch = 8;
  cfg.code_learning_rate = 0.5;
  auto a = attacks::make_attacker(relay, cfg, 7);
  auto b = a;
  const auto ca = attacks::train_learned_attack(relay, team, cfg, 30, 8, a);
  const auto cb = attacks::train_learned_attack(relay, team, cfg, 30, 8, b);
  CHECK(ca.size() == 30);
  CHECK(a.net == b.net);
  CHECK(a.codebook == b.codebook);
  CHECK(a.codebook.cwiseAbs().maxCoeff() <= 1.0);

  std::stringstream s;
  attacks::save_attacker(a, s);
  const auto back = attacks::load_attacker(s);
  CHECK(back.net == a.net);
  CHECK(back.codebook == a.codebook);
  CHECK(back.budget == a.budget);
  CHECK(back.features == a.features);
}

TEST_CASE("untrained attacker acts at random") {
  env::Relay relay(env::default_config(env::Kind::relay));
  team::TeamConfig tc;
  tc.mode = team::CommMode::full;
  const auto team = team::make_team_policy(relay, tc, 6);
  auto a = attacks::make_attacker(relay, attacks::AttackConfig{}, 7);
  const auto untouched = a;
  attacks::train_learned_attack(relay, team, attacks::AttackConfig{}, 0, 8, a);
  CHECK(a.net == untouched.net);
  CHECK(a.epsilon == 1.0);
}

}  // TEST_SUITE
