#include "mpdt/envs.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <numbers>

#include "mpdt/errors.hpp"

namespace mpdt {

namespace {

constexpr double kVelocityGain = 0.1;
constexpr double kDirectionDamping = 0.9;
constexpr double kReachStep = 0.05;
constexpr double kReachStart = 0.25;
constexpr double kMazeAccel = 0.1;
constexpr double kMazeMaxSpeed = 0.25;
constexpr double kMazeGoalRadius = 0.5;
constexpr double kMazeWallMargin = 1e-6;

double clip(double v, double lo, double hi) { return std::min(hi, std::max(lo, v)); }

}  // namespace

std::string_view problem_name(Problem problem) {
  switch (problem) {
    case Problem::point_velocity: return "point_velocity";
    case Problem::point_direction: return "point_direction";
    case Problem::point_reach: return "point_reach";
    case Problem::grid_maze: return "grid_maze";
  }
  return "unknown";
}

Problem parse_problem(std::string_view name) {
  for (Problem p : all_problems()) {
    if (problem_name(p) == name) return p;
  }
  throw ConfigError("unknown problem '" + std::string(name) + "'");
}

std::span<const Problem> all_problems() {
  static constexpr std::array problems{Problem::point_velocity, Problem::point_direction,
                                       Problem::point_reach, Problem::grid_maze};
  return problems;
}

ProblemInfo problem_info(Problem problem) {
  switch (problem) {
    case Problem::point_velocity: return {1, 1, 1, 50};
    case Problem::point_direction: return {4, 2, 1, 50};
    case Problem::point_reach: return {2, 2, 2, 32};
    case Problem::grid_maze: return {4, 2, 2, 64};
  }
  throw ConfigError("unknown problem");
}

TaskSpec make_task(Problem problem, int task_id, std::vector<double> c) {
  const ProblemInfo info = problem_info(problem);
  if (c.size() != info.param_dim) {
    throw ConfigError(std::string(problem_name(problem)) + " task parameter needs " +
                      std::to_string(info.param_dim) + " values, got " +
                      std::to_string(c.size()));
  }
  TaskSpec spec;
  spec.problem = problem;
  spec.task_id = task_id;
  spec.c = std::move(c);
  spec.horizon = info.horizon;
  return spec;
}

namespace maze {

const std::array<std::string_view, kSize> kMediumLayout = {
    "########",  //
    "#OO##OO#",  //
    "#OO#OOO#",  //
    "##OOO###",  //
    "#OO#OOO#",  //
    "#O#OO#O#",  //
    "#OOO#OO#",  //
    "########",
};

bool is_wall(Cell cell) {
  if (cell.row < 0 || cell.row >= kSize || cell.col < 0 || cell.col >= kSize) return true;
  return kMediumLayout[cell.row][cell.col] == '#';
}

Cell cell_of(double x, double y) {
  return {static_cast<int>(std::floor(x + 0.5)), static_cast<int>(std::floor(y + 0.5))};
}

std::vector<Cell> empty_cells() {
  std::vector<Cell> out;
  for (int r = 0; r < kSize; ++r) {
    for (int c = 0; c < kSize; ++c) {
      if (!is_wall({r, c})) out.push_back({r, c});
    }
  }
  return out;
}

std::array<std::array<int, kSize>, kSize> distance_field(Cell goal) {
  std::array<std::array<int, kSize>, kSize> dist;
  for (auto& row : dist) row.fill(-1);
  if (is_wall(goal)) return dist;
  std::deque<Cell> queue{goal};
  dist[goal.row][goal.col] = 0;
  constexpr std::array<std::array<int, 2>, 4> kMoves{{{-1, 0}, {1, 0}, {0, -1}, {0, 1}}};
  while (!queue.empty()) {
    const Cell cur = queue.front();
    queue.pop_front();
    for (const auto& m : kMoves) {
      const Cell next{cur.row + m[0], cur.col + m[1]};
      if (is_wall(next) || dist[next.row][next.col] >= 0) continue;
      dist[next.row][next.col] = dist[cur.row][cur.col] + 1;
      queue.push_back(next);
    }
  }
  return dist;
}

}  // namespace maze

State initial_state(const TaskSpec& spec, std::uint64_t seed) {
  Rng rng(seed);
  switch (spec.problem) {
    case Problem::point_velocity: return {0.0};
    case Problem::point_direction: return {0.0, 0.0, 0.0, 0.0};
    case Problem::point_reach:
      return {uniform(rng, -kReachStart, kReachStart), uniform(rng, -kReachStart, kReachStart)};
    case Problem::grid_maze: {
      const auto cells = maze::empty_cells();
      const maze::Cell cell = cells[uniform_index(rng, cells.size())];
      return {cell.row + uniform(rng, -0.5, 0.5), cell.col + uniform(rng, -0.5, 0.5), 0.0, 0.0};
    }
  }
  throw ConfigError("unknown problem");
}

Action clip_action(std::span<const double> action) {
  Action out(action.begin(), action.end());
  for (double& a : out) a = clip(a, -1.0, 1.0);
  return out;
}

State transition(Problem problem, const State& s, std::span<const double> a) {
  switch (problem) {
    case Problem::point_velocity: return {s[0] + kVelocityGain * a[0]};
    case Problem::point_direction: {
      const double vx = kDirectionDamping * s[2] + kVelocityGain * a[0];
      const double vy = kDirectionDamping * s[3] + kVelocityGain * a[1];
      return {s[0] + vx, s[1] + vy, vx, vy};
    }
    case Problem::point_reach: return {s[0] + kReachStep * a[0], s[1] + kReachStep * a[1]};
    case Problem::grid_maze: {
      double vx = clip(s[2] + kMazeAccel * a[0], -kMazeMaxSpeed, kMazeMaxSpeed);
      double vy = clip(s[3] + kMazeAccel * a[1], -kMazeMaxSpeed, kMazeMaxSpeed);
      // Axis-wise moves; a blocked axis stops at the current cell's edge.
      double x = s[0] + vx;
      const maze::Cell from = maze::cell_of(s[0], s[1]);
      if (maze::is_wall(maze::cell_of(x, s[1]))) {
        x = from.row + (vx > 0 ? 0.5 - kMazeWallMargin : -0.5 + kMazeWallMargin);
        vx = 0.0;
      }
      double y = s[1] + vy;
      if (maze::is_wall(maze::cell_of(x, y))) {
        const maze::Cell here = maze::cell_of(x, s[1]);
        y = here.col + (vy > 0 ? 0.5 - kMazeWallMargin : -0.5 + kMazeWallMargin);
        vy = 0.0;
      }
      return {x, y, vx, vy};
    }
  }
  throw ConfigError("unknown problem");
}

double dense_reward(const TaskSpec& spec, const State& next) {
  const auto& c = spec.c;
  switch (spec.problem) {
    case Problem::point_velocity: return -std::abs(next[0] - c[0]);
    case Problem::point_direction: return next[2] * std::cos(c[0]) + next[3] * std::sin(c[0]);
    case Problem::point_reach: return -std::hypot(next[0] - c[0], next[1] - c[1]);
    case Problem::grid_maze:
      return std::hypot(next[0] - c[0], next[1] - c[1]) <= kMazeGoalRadius ? 1.0 : 0.0;
  }
  throw ConfigError("unknown problem");
}

State observe(const State& physical_state) { return physical_state; }

EnvInstance::EnvInstance(TaskSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
  if (spec_.horizon <= 0) spec_.horizon = problem_info(spec_.problem).horizon;
  reset(seed);
}

const State& EnvInstance::reset(std::uint64_t seed) {
  state_ = initial_state(spec_, seed);
  t_ = 0;
  withheld_ = 0.0;
  return state_;
}

StepResult EnvInstance::step(std::span<const double> action) {
  if (done()) throw ContractError("step called on a finished episode");
  const std::size_t d_a = problem_info(spec_.problem).action_dim;
  if (action.size() != d_a) {
    throw ContractError("action has " + std::to_string(action.size()) + " components, expected " +
                        std::to_string(d_a));
  }
  const Action a = clip_action(action);
  state_ = transition(spec_.problem, state_, a);
  double reward = dense_reward(spec_, state_);
  t_ += 1;
  StepResult out;
  out.done = t_ == spec_.horizon;
  if (spec_.reward_mode == RewardMode::delayed) {
    withheld_ += reward;
    reward = out.done ? withheld_ : 0.0;
  }
  out.next_state = observe(state_);
  out.reward = reward;
  return out;
}

Action expert_action(const TaskSpec& spec, const State& s) {
  const auto& c = spec.c;
  switch (spec.problem) {
    case Problem::point_velocity: return {clip(10.0 * (c[0] - s[0]), -1.0, 1.0)};
    case Problem::point_direction: return {std::cos(c[0]), std::sin(c[0])};
    case Problem::point_reach: {
      double ax = (c[0] - s[0]) / kReachStep;
      double ay = (c[1] - s[1]) / kReachStep;
      const double norm = std::hypot(ax, ay);
      if (norm > 1.0) {
        ax /= norm;
        ay /= norm;
      }
      return {clip(ax, -1.0, 1.0), clip(ay, -1.0, 1.0)};
    }
    case Problem::grid_maze: {
      const maze::Cell goal{static_cast<int>(std::lround(c[0])), static_cast<int>(std::lround(c[1]))};
      const auto dist = maze::distance_field(goal);
      const maze::Cell here = maze::cell_of(s[0], s[1]);
      if (dist[here.row][here.col] < 0) {
        throw ConfigError("maze goal cell is unreachable from the current position");
      }
      double tx = c[0], ty = c[1];
      if (!(here == goal)) {
        constexpr std::array<std::array<int, 2>, 4> kMoves{{{-1, 0}, {1, 0}, {0, -1}, {0, 1}}};
        for (const auto& m : kMoves) {
          const maze::Cell next{here.row + m[0], here.col + m[1]};
          if (!maze::is_wall(next) && dist[next.row][next.col] == dist[here.row][here.col] - 1) {
            tx = next.row;
            ty = next.col;
            break;
          }
        }
      }
      // Velocity command toward the waypoint, tracked with a saturating P-controller.
      const double want_vx = clip(0.5 * (tx - s[0]), -kMazeMaxSpeed, kMazeMaxSpeed);
      const double want_vy = clip(0.5 * (ty - s[1]), -kMazeMaxSpeed, kMazeMaxSpeed);
      return {clip((want_vx - s[2]) / kMazeAccel, -1.0, 1.0),
              clip((want_vy - s[3]) / kMazeAccel, -1.0, 1.0)};
    }
  }
  throw ConfigError("unknown problem");
}

Action random_action(Problem problem, Rng& rng) {
  Action a(problem_info(problem).action_dim);
  for (double& v : a) v = uniform(rng, -1.0, 1.0);
  return a;
}

namespace {

// Positions k = 0..n_test-1 at floor((k+1) N / (n_test+1)) never hit the ends,
// so every test task sits between two train tasks.
std::vector<bool> interleaved_test_mask(int total, int n_test) {
  std::vector<bool> is_test(total, false);
  for (int k = 0; k < n_test; ++k) {
    is_test[static_cast<std::size_t>((k + 1) * total / (n_test + 1))] = true;
  }
  return is_test;
}

}  // namespace

TaskSplit make_split(Problem problem, int n_train, int n_test, std::uint64_t seed) {
  if (n_train < 1 || n_test < 1) throw ConfigError("make_split: n_train and n_test must be >= 1");
  TaskSplit split{problem, {}, {}};
  const int total = n_train + n_test;

  if (problem == Problem::grid_maze) {
    const auto cells = maze::empty_cells();
    if (total > static_cast<int>(cells.size())) {
      throw ConfigError("grid_maze has " + std::to_string(cells.size()) + " goal cells, " +
                        std::to_string(total) + " tasks requested");
    }
    std::vector<bool> is_test(cells.size(), false);
    std::vector<bool> used(cells.size(), false);
    if (n_train == 21 && n_test == 5) {
      for (int idx : {1, 6, 10, 12, 25}) is_test[idx] = true;
      used.assign(cells.size(), true);
    } else {
      std::vector<std::size_t> order(cells.size());
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      Rng rng(seed);
      std::shuffle(order.begin(), order.end(), rng);
      for (int k = 0; k < total; ++k) {
        used[order[k]] = true;
        is_test[order[k]] = k < n_test;
      }
    }
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (!used[i]) continue;
      TaskSpec spec = make_task(problem, static_cast<int>(i),
                                {static_cast<double>(cells[i].row), static_cast<double>(cells[i].col)});
      const auto dist = maze::distance_field(cells[i]);
      for (const auto& other : cells) {
        if (dist[other.row][other.col] < 0) throw ConfigError("maze goal unreachable");
      }
      (is_test[i] ? split.test : split.train).push_back(std::move(spec));
    }
    return split;
  }

  const auto is_test = interleaved_test_mask(total, n_test);
  for (int i = 0; i < total; ++i) {
    std::vector<double> c;
    switch (problem) {
      case Problem::point_velocity:
        c = {0.1 + 0.9 * (total == 1 ? 0.0 : static_cast<double>(i) / (total - 1))};
        break;
      case Problem::point_direction:
        c = {2.0 * std::numbers::pi * i / total};
        break;
      case Problem::point_reach: {
        const double angle = 2.0 * std::numbers::pi * i / total;
        c = {std::cos(angle), std::sin(angle)};
        break;
      }
      case Problem::grid_maze: break;
    }
    TaskSpec spec = make_task(problem, i, std::move(c));
    (is_test[i] ? split.test : split.train).push_back(std::move(spec));
  }
  return split;
}

}  // namespace mpdt
