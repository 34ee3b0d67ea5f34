#include <algorithm>
#include <cmath>
#include <set>
#include <utility>
#include <vector>

#include "doctest.h"

#include "dmac/env.hpp"
#include "dmac/errors.hpp"

using namespace dmac;
using env::GridPos;

namespace {

env::EnvConfig tj(int agents = 10) {
  auto c = env::default_config(env::Kind::traffic_junction);
  c.agents = agents;
  return c;
}

env::EnvConfig pp(int agents = 8) {
  auto c = env::default_config(env::Kind::predator_prey);
  c.agents = agents;
  return c;
}

env::StepOutcome run_out(env::Environment& e, const std::vector<int>& actions) {
  env::StepOutcome last;
  while (!e.terminal()) last = e.step(actions);
  return last;
}

}  // namespace

TEST_SUITE("env") {

TEST_CASE("reset is deterministic per seed") {
  for (auto kind : {env::Kind::traffic_junction, env::Kind::predator_prey, env::Kind::relay}) {
    auto a = env::make_environment(env::default_config(kind));
    auto b = env::make_environment(env::default_config(kind));
    a->reset(123);
    b->reset(123);
    CHECK(a->digest() == b->digest());
    CHECK(a->state().positions == b->state().positions);
    dmac::Rng rng(5);
    for (int t = 0; t < 6 && !a->terminal(); ++t) {
      std::vector<int> acts(a->agent_count());
      for (int& x : acts) x = static_cast<int>(rng.index(a->action_count()));
      const auto oa = a->step(acts);
      const auto ob = b->step(acts);
      CHECK(oa.team_reward == ob.team_reward);
      CHECK(a->digest() == b->digest());
    }
  }
}

TEST_CASE("clones step independently") {
  env::TrafficJunction a(tj());
  auto b = a.clone();
  const std::vector<int> gas(10, env::TrafficJunction::kGas);
  a.step(gas);
  CHECK(a.digest() != b->digest());
  b->step(gas);
  CHECK(a.digest() == b->digest());
}

TEST_CASE("traffic junction places ten cars at entry points") {
  env::TrafficJunction e(tj());
  const auto& ps = e.state().positions;
  REQUIRE(ps.size() == 10);
  std::set<std::pair<int, int>> cells;
  for (int i = 0; i < 10; ++i) {
    cells.insert({ps[i].x, ps[i].y});
    CHECK_FALSE(e.in_intersection(ps[i]));
    CHECK(e.is_active(i));
    CHECK(e.route(i) == i % 4);
  }
  CHECK(cells.size() == 10);
  CHECK(e.observation_dim() == 13);
  CHECK(e.observe().size() == 10);
}

TEST_CASE("predator-prey places predators and prey") {
  env::PredatorPrey e(pp());
  CHECK(e.state().positions.size() == 8);
  const GridPos prey = e.prey();
  CHECK(prey.x >= 0);
  CHECK(prey.x < 10);
  CHECK(prey.y >= 0);
  CHECK(prey.y < 10);
  for (const auto& p : e.state().positions) CHECK(std::hypot(p.x - prey.x, p.y - prey.y) > 2.0);
}

TEST_CASE("traffic junction collision costs ten per pair") {
  env::TrafficJunction e(tj(4));
  const int vc = 14 / 2 - 1, hr = 14 / 2 - 1;
  e.place(0, {vc - 1, hr});  // eastbound, one cell before the junction
  e.place(2, {vc, hr - 1});  // southbound, one cell before the same cell
  e.place(1, {12, hr + 1});
  e.place(3, {vc + 1, 12});
  const auto out = e.step(std::vector<int>{0, 1, 0, 1});
  CHECK(e.collisions() == 1);
  CHECK(e.crashed(0));
  CHECK(e.crashed(2));
  CHECK(out.team_reward == doctest::Approx(-10.0 + 2 * env::TrafficJunction::kTimeReward));
  CHECK(out.agent_rewards[0] == doctest::Approx(-10.01));
  CHECK_FALSE(e.is_active(0));

  const auto last = run_out(e, {1, 1, 1, 1});
  CHECK_FALSE(env::is_win(last));
}

TEST_CASE("traffic junction time cost inside the junction") {
  env::TrafficJunction e(tj(4));
  const int vc = 14 / 2 - 1, hr = 14 / 2 - 1;
  e.place(0, {vc - 1, hr});
  const auto out = e.step(std::vector<int>{0, 1, 1, 1});
  CHECK(e.in_intersection(e.state().positions[0]));
  CHECK(out.team_reward == doctest::Approx(-0.01));
  CHECK(e.collisions() == 0);
}

TEST_CASE("traffic junction scripted schedule wins") {
  // Oracle schedule: the two horizontal cars use parallel lanes and drive
  // together; the vertical cars wait until both have left the grid.
  env::TrafficJunction e(tj(4));
  env::StepOutcome out;
  int completed = 0;
  while (!e.terminal()) {
    const bool horizontal_done = e.exited(0) && e.exited(1);
    std::vector<int> a{0, 0, horizontal_done ? 0 : 1, horizontal_done ? 0 : 1};
    out = e.step(a);
    completed += out.completed;
  }
  CHECK(e.collisions() == 0);
  CHECK(completed == 4);
  CHECK(env::is_win(out));
}

TEST_CASE("traffic junction reward bound holds under random play") {
  env::TrafficJunction e(tj());
  CHECK(e.reward_min() == doctest::Approx(-90.1));
  dmac::Rng rng(17);
  for (int ep = 0; ep < 50; ++ep) {
    e.reset(rng());
    while (!e.terminal()) {
      std::vector<int> a(10);
      for (int& x : a) x = static_cast<int>(rng.index(2));
      const auto out = e.step(a);
      CHECK(out.team_reward >= e.reward_min());
      CHECK(out.team_reward <= e.reward_max());
    }
  }
}

TEST_CASE("distances use each task's metric") {
  env::PredatorPrey p(pp(2));
  p.place(0, {0, 0});
  p.place(1, {3, 4});
  CHECK(p.distances()(0, 1) == 5.0);
  CHECK(p.distances()(1, 0) == 5.0);

  env::TrafficJunction t(tj(2));
  t.place(0, {0, 0});
  t.place(1, {3, 4});
  CHECK(t.distances()(0, 1) == 7.0);
  CHECK(t.distances()(0, 0) == 0.0);
}

TEST_CASE("agent with nobody in range sees zero neighbour fields") {
  env::PredatorPrey e(pp(3));
  e.place(0, {0, 0});
  e.place(1, {9, 9});
  e.place(2, {9, 0});
  e.place_prey({5, 9});
  const auto obs = e.observe();
  for (int k = 7; k <= 9; ++k) CHECK(obs[0](k) == 0.0);

  env::TrafficJunction t(tj(4));
  const auto tobs = t.observe();
  for (int i = 0; i < 4; ++i)
    for (int k = 8; k <= 12; ++k) CHECK(tobs[i](k) == 0.0);
}

TEST_CASE("predator-prey capture reward") {
  env::PredatorPrey e(pp(3));
  e.place(0, {0, 0});
  e.place(1, {9, 9});
  e.place(2, {9, 0});
  e.place_prey({5, 5});
  const auto none = e.step(std::vector<int>{0, 0, 0});
  CHECK(none.team_reward == 0.0);
  CHECK(e.captures() == 0);

  e.place(0, {4, 5});
  e.place(1, {6, 5});
  e.place_prey({5, 5});
  const auto hit = e.step(std::vector<int>{0, 0, 0});
  CHECK(hit.team_reward == 1.0);
  CHECK(hit.agent_rewards[0] == 1.0);
  CHECK(hit.agent_rewards[2] == 0.0);
  CHECK(e.captures() == 1);
}

TEST_CASE("predator-prey below threshold at the horizon loses") {
  env::PredatorPrey e(pp());
  const auto last = run_out(e, std::vector<int>(8, 0));
  CHECK(e.captures() < 3);
  CHECK_FALSE(env::is_win(last));
}

TEST_CASE("is_win rejects non-terminal outcomes") {
  env::PredatorPrey e(pp());
  const auto out = e.step(std::vector<int>(8, 0));
  CHECK_THROWS_AS(env::is_win(out), std::logic_error);
}

TEST_CASE("relay: scouts see the goal, a perfect runner wins") {
  env::Relay e(env::default_config(env::Kind::relay));
  CHECK(e.is_scout(0));
  CHECK_FALSE(e.is_scout(env::Relay::kRunner));
  env::StepOutcome out;
  while (!e.terminal()) {
    const auto obs = e.observe();
    int goal = 0;
    obs[0].maxCoeff(&goal);
    CHECK(goal == e.goal());
    std::vector<int> a(4, 0);
    a[env::Relay::kRunner] = goal;
    out = e.step(a);
    CHECK(out.team_reward == 1.0);
  }
  CHECK(env::is_win(out));
  CHECK(e.correct_steps() == 5);
}

TEST_CASE("bad configs and actions are rejected") {
  auto c = tj();
  c.agents = 1;
  CHECK_THROWS_AS(env::make_environment(c), ConfigError);
  c = tj();
  c.agents = 40;
  CHECK_THROWS_AS(env::make_environment(c), ConfigError);
  env::TrafficJunction e(tj(4));
  CHECK_THROWS_AS(e.step(std::vector<int>{0, 0}), ShapeError);
  CHECK_THROWS_AS(e.step(std::vector<int>{0, 0, 0, 2}), std::out_of_range);
  CHECK(env::parse_kind(env::to_string(env::Kind::predator_prey)) == env::Kind::predator_prey);
}

}  // TEST_SUITE
