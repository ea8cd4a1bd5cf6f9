#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mpdt/errors.hpp"
#include "mpdt/random.hpp"

namespace mpdt {

enum class Problem { point_velocity, point_direction, point_reach, grid_maze };

std::string_view problem_name(Problem problem);
Problem parse_problem(std::string_view name);
std::span<const Problem> all_problems();

struct ProblemInfo {
  std::size_t state_dim;
  std::size_t action_dim;
  std::size_t param_dim;
  int horizon;
};

ProblemInfo problem_info(Problem problem);

enum class RewardMode { dense, delayed };

using State = std::vector<double>;
using Action = std::vector<double>;

struct TaskSpec {
  Problem problem = Problem::point_reach;
  int task_id = 0;
  std::vector<double> c;  // goal velocity | goal angle | target xy | maze goal cell
  double target_return = 0.0;
  int horizon = 0;
  RewardMode reward_mode = RewardMode::dense;
};

TaskSpec make_task(Problem problem, int task_id, std::vector<double> c);

// Initial state distribution; the only stochastic part of every problem.
State initial_state(const TaskSpec& spec, std::uint64_t seed);

// Deterministic dynamics on the (already clipped) action.
State transition(Problem problem, const State& state, std::span<const double> action);

// Per-step dense reward of arriving in next_state.
double dense_reward(const TaskSpec& spec, const State& next_state);

// Observation emitted to the agent. Takes no task parameter.
State observe(const State& physical_state);

Action clip_action(std::span<const double> action);

struct StepResult {
  State next_state;
  double reward = 0.0;
  bool done = false;
};

class EnvInstance {
 public:
  EnvInstance(TaskSpec spec, std::uint64_t seed);

  const State& reset(std::uint64_t seed);
  StepResult step(std::span<const double> action);

  const TaskSpec& spec() const { return spec_; }
  State observation() const { return observe(state_); }
  int t() const { return t_; }
  bool done() const { return t_ >= spec_.horizon; }

 private:
  TaskSpec spec_;
  State state_;
  int t_ = 0;
  double withheld_ = 0.0;
};

Action expert_action(const TaskSpec& spec, const State& state);
Action random_action(Problem problem, Rng& rng);

namespace maze {

constexpr int kSize = 8;  // 6x6 interior plus border walls; cells are 1-indexed
extern const std::array<std::string_view, kSize> kMediumLayout;

struct Cell {
  int row;
  int col;
  bool operator==(const Cell&) const = default;
};

bool is_wall(Cell cell);
Cell cell_of(double x, double y);
std::vector<Cell> empty_cells();  // row-major, 26 cells
// Number of moves from each cell to goal over 4-connected empty cells; -1 when unreachable.
std::array<std::array<int, kSize>, kSize> distance_field(Cell goal);

}  // namespace maze

struct TaskSplit {
  Problem problem;
  std::vector<TaskSpec> train;
  std::vector<TaskSpec> test;
};

TaskSplit make_split(Problem problem, int n_train, int n_test, std::uint64_t seed);

}  // namespace mpdt
