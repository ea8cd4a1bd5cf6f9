#include "doctest.h"
#include "mpdt/data.hpp"
#include "mpdt/envs.hpp"

using namespace mpdt;

namespace {

void check_problem(Problem p, int n_train, int n_test) {
  auto split = make_split(p, n_train, n_test, 1);
  std::vector<TaskSpec> tasks = split.train;
  tasks.insert(tasks.end(), split.test.begin(), split.test.end());
  for (const TaskSpec& task : tasks) {
    const Baselines b = estimate_baselines(task, 100, 11);
    INFO(problem_name(p), " task ", task.task_id, ": expert ", b.expert_mean, ", random ",
         b.random_mean, " +- ", b.random_std);
    CHECK(b.expert_mean - b.random_mean >= 5.0 * b.random_std);
  }
}

}  // namespace

// Expert mean return beats the uniform-random mean by at least 5 random-return
// standard deviations on every task, 100 episodes each.
TEST_CASE("expert competence: point_velocity") { check_problem(Problem::point_velocity, 12, 4); }
TEST_CASE("expert competence: point_direction") { check_problem(Problem::point_direction, 12, 4); }
TEST_CASE("expert competence: point_reach") { check_problem(Problem::point_reach, 12, 4); }
TEST_CASE("expert competence: grid_maze") { check_problem(Problem::grid_maze, 21, 5); }
