#include <cmath>
#include <set>

#include "doctest.h"
#include "mpdt/data.hpp"
#include "mpdt/envs.hpp"

using namespace mpdt;

namespace {

// Independent restatement of the per-problem rewards.
double reference_reward(Problem p, const std::vector<double>& c, const State& s) {
  if (p == Problem::point_velocity) return -std::fabs(s[0] - c[0]);
  if (p == Problem::point_direction) return s[2] * std::cos(c[0]) + s[3] * std::sin(c[0]);
  if (p == Problem::point_reach) return -std::hypot(s[0] - c[0], s[1] - c[1]);
  const double d = std::hypot(s[0] - c[0], s[1] - c[1]);
  return d <= 0.5 ? 1.0 : 0.0;
}

bool inside_wall(const State& s) { return maze::is_wall(maze::cell_of(s[0], s[1])); }

}  // namespace

TEST_CASE("reset") {
  auto v = make_task(Problem::point_velocity, 0, {0.5});
  CHECK(initial_state(v, 3) == State{0.0});
  auto d = make_task(Problem::point_direction, 0, {1.0});
  CHECK(initial_state(d, 3) == State{0, 0, 0, 0});
  auto r = make_task(Problem::point_reach, 0, {1.0, 0.0});
  CHECK(initial_state(r, 9) == initial_state(r, 9));
  for (double x : initial_state(r, 9)) CHECK(std::fabs(x) <= 0.25);
  auto m = make_task(Problem::grid_maze, 0, {1, 1});
  for (std::uint64_t seed = 0; seed < 500; ++seed) CHECK_FALSE(inside_wall(initial_state(m, seed)));
}

TEST_CASE("step examples") {
  EnvInstance v(make_task(Problem::point_velocity, 0, {0.1}), 1);
  const std::vector<double> one{1.0};
  auto r = v.step(one);
  CHECK(r.next_state[0] == doctest::Approx(0.1));
  CHECK(r.reward == doctest::Approx(0.0));

  auto d = make_task(Problem::point_direction, 0, {0.0});
  CHECK(dense_reward(d, {3.0, 0.0, 0.5, 0.0}) == 0.5);

  auto m = make_task(Problem::grid_maze, 0, {1, 1});
  CHECK(dense_reward(m, {1.3, 1.3, 0, 0}) == 1.0);
  CHECK(dense_reward(m, {1.4, 1.4, 0, 0}) == 0.0);
}

TEST_CASE("episode ends at the horizon") {
  EnvInstance e(make_task(Problem::point_reach, 0, {0.0, 1.0}), 2);
  const std::vector<double> a{0.0, 0.0};
  for (int t = 0; t < 32; ++t) {
    auto r = e.step(a);
    CHECK(r.done == (t == 31));
  }
  CHECK_THROWS_AS(e.step(a), ContractError);
  const std::vector<double> wrong{0.0};
  EnvInstance f(make_task(Problem::point_reach, 0, {0.0, 1.0}), 2);
  CHECK_THROWS_AS(f.step(wrong), ContractError);
}

TEST_CASE("delayed reward delivers the sum at the end") {
  auto spec = make_task(Problem::point_reach, 0, {0.5, 0.5});
  auto delayed = spec;
  delayed.reward_mode = RewardMode::delayed;
  EnvInstance a(spec, 4), b(delayed, 4);
  const std::vector<double> act{0.3, -0.2};
  double sum = 0.0;
  for (int t = 0; t < 32; ++t) {
    auto ra = a.step(act);
    auto rb = b.step(act);
    sum += ra.reward;
    if (t < 31) CHECK(rb.reward == 0.0);
    else CHECK(rb.reward == doctest::Approx(sum).epsilon(1e-12));
  }
}

TEST_CASE("reward correctness over random transitions") {
  for (Problem p : all_problems()) {
    auto split = make_split(p, p == Problem::grid_maze ? 21 : 12, p == Problem::grid_maze ? 5 : 4, 1);
    Rng rng(7);
    int checked = 0;
    while (checked < 1000) {
      const TaskSpec& task = split.train[uniform_index(rng, split.train.size())];
      EnvInstance env(task, rng());
      while (!env.done() && checked < 1000) {
        Action a = random_action(p, rng);
        auto r = env.step(a);
        CHECK(r.reward == reference_reward(p, task.c, r.next_state));
        ++checked;
      }
    }
  }
}

TEST_CASE("experts") {
  auto reach = make_task(Problem::point_reach, 0, {1.0, 0.0});
  auto a = expert_action(reach, {0.0, 0.0});
  CHECK(a[0] == doctest::Approx(1.0));
  CHECK(a[1] == doctest::Approx(0.0));
  auto vel = make_task(Problem::point_velocity, 0, {0.4});
  CHECK(expert_action(vel, {0.4})[0] == 0.0);

  SUBCASE("reach expert gets within 0.01 of any goal in the unit disc") {
    Rng rng(8);
    for (int i = 0; i < 200; ++i) {
      const double r = std::sqrt(uniform(rng, 0, 1));
      const double th = uniform(rng, 0, 2 * M_PI);
      auto spec = make_task(Problem::point_reach, 0, {r * std::cos(th), r * std::sin(th)});
      auto traj = rollout(spec, tier_policy(spec, Quality::expert), rng());
      const auto& last = traj.states.back();
      State final = transition(Problem::point_reach, last, clip_action(traj.actions.back()));
      CHECK(std::hypot(final[0] - spec.c[0], final[1] - spec.c[1]) <= 0.01);
    }
  }
}

TEST_CASE("maze wall integrity") {
  auto split = make_split(Problem::grid_maze, 21, 5, 1);
  std::vector<TaskSpec> tasks = split.train;
  tasks.insert(tasks.end(), split.test.begin(), split.test.end());
  for (const TaskSpec& task : tasks) {
    for (Quality q : {Quality::expert, Quality::medium, Quality::random}) {
      for (std::uint64_t seed = 0; seed < 20; ++seed) {
        auto traj = rollout(task, tier_policy(task, q), seed);
        for (const auto& s : traj.states) CHECK_FALSE(inside_wall(s));
      }
    }
  }
}

TEST_CASE("splits") {
  auto maze = make_split(Problem::grid_maze, 21, 5, 0);
  CHECK(maze.train.size() == 21);
  REQUIRE(maze.test.size() == 5);
  const std::vector<std::vector<double>> test_cells{{1, 2}, {2, 4}, {3, 3}, {4, 1}, {6, 6}};
  for (std::size_t i = 0; i < 5; ++i) CHECK(maze.test[i].c == test_cells[i]);
  CHECK_THROWS_AS(make_split(Problem::grid_maze, 22, 5, 0), ConfigError);

  auto reach = make_split(Problem::point_reach, 12, 4, 3);
  std::set<std::vector<double>> goals;
  for (const auto& t : reach.train) goals.insert(t.c);
  for (const auto& t : reach.test) goals.insert(t.c);
  CHECK(goals.size() == 16);

  auto again = make_split(Problem::point_reach, 12, 4, 3);
  for (std::size_t i = 0; i < 4; ++i) CHECK(again.test[i].c == reach.test[i].c);

  auto vel = make_split(Problem::point_velocity, 8, 3, 0);
  for (const auto& t : vel.train) {
    CHECK(t.c[0] >= 0.1 - 1e-12);
    CHECK(t.c[0] <= 1.0 + 1e-12);
  }
}

TEST_CASE("observations never carry the task parameter") {
  auto a = make_task(Problem::point_reach, 0, {0.9, 0.1});
  auto b = make_task(Problem::point_reach, 1, {-0.4, 0.7});
  EnvInstance ea(a, 5), eb(b, 5);
  CHECK(ea.observation() == eb.observation());
  const std::vector<double> act{0.2, 0.2};
  ea.step(act);
  eb.step(act);
  CHECK(ea.observation() == eb.observation());
}
