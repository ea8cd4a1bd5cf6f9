#include "mpdt/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>

#include "json.hpp"
#include "mpdt/errors.hpp"

namespace mpdt {

namespace {
constexpr double kStdFloor = 1e-6;
constexpr double kMediumNoise = 0.3;
}  // namespace

std::string_view quality_name(Quality quality) {
  switch (quality) {
    case Quality::expert: return "expert";
    case Quality::medium: return "medium";
    case Quality::random: return "random";
  }
  return "unknown";
}

Quality parse_quality(std::string_view name) {
  for (Quality q : {Quality::expert, Quality::medium, Quality::random}) {
    if (quality_name(q) == name) return q;
  }
  throw ConfigError("unknown data quality '" + std::string(name) + "'");
}

std::vector<double> compute_rtg(std::span<const double> rewards) {
  std::vector<double> rtg(rewards.size());
  double acc = 0.0;
  for (std::size_t i = rewards.size(); i-- > 0;) {
    acc = rewards[i] + acc;
    rtg[i] = acc;
  }
  return rtg;
}

Trajectory make_trajectory(std::vector<std::vector<double>> states,
                           std::vector<std::vector<double>> actions, std::vector<double> rewards) {
  if (states.size() != rewards.size() || actions.size() != rewards.size()) {
    throw ContractError("trajectory arrays disagree in length");
  }
  Trajectory traj;
  traj.states = std::move(states);
  traj.actions = std::move(actions);
  traj.rewards = std::move(rewards);
  traj.rtg = compute_rtg(traj.rewards);
  traj.total_return = traj.rtg.empty() ? 0.0 : traj.rtg.front();
  return traj;
}

Trajectory rollout(const TaskSpec& spec, const PolicyFn& policy, std::uint64_t seed) {
  EnvInstance env(spec, derive_seed(seed, 0));
  Rng policy_rng(derive_seed(seed, 1));
  std::vector<std::vector<double>> states, actions;
  std::vector<double> rewards;
  State obs = env.observation();
  while (!env.done()) {
    Action a = clip_action(policy(obs, policy_rng));
    StepResult r = env.step(a);
    states.push_back(std::move(obs));
    actions.push_back(std::move(a));
    rewards.push_back(r.reward);
    obs = std::move(r.next_state);
  }
  return make_trajectory(std::move(states), std::move(actions), std::move(rewards));
}

PolicyFn tier_policy(const TaskSpec& spec, Quality quality) {
  switch (quality) {
    case Quality::expert:
      return [spec](const State& s, Rng&) { return expert_action(spec, s); };
    case Quality::medium:
      return [spec](const State& s, Rng& rng) {
        Action a = expert_action(spec, s);
        for (double& v : a) v += normal(rng, 0.0, kMediumNoise);
        return clip_action(a);
      };
    case Quality::random:
      return [problem = spec.problem](const State&, Rng& rng) { return random_action(problem, rng); };
  }
  throw ConfigError("unknown data quality");
}

StateStats compute_state_stats(std::span<const Trajectory> trajectories, std::size_t state_dim) {
  StateStats stats{std::vector<double>(state_dim, 0.0), std::vector<double>(state_dim, 0.0)};
  std::size_t count = 0;
  for (const auto& traj : trajectories) {
    for (const auto& s : traj.states) {
      for (std::size_t j = 0; j < state_dim; ++j) stats.mean[j] += s[j];
      ++count;
    }
  }
  if (count == 0) {
    std::fill(stats.std.begin(), stats.std.end(), 1.0);
    return stats;
  }
  for (double& m : stats.mean) m /= static_cast<double>(count);
  for (const auto& traj : trajectories) {
    for (const auto& s : traj.states) {
      for (std::size_t j = 0; j < state_dim; ++j) {
        stats.std[j] += (s[j] - stats.mean[j]) * (s[j] - stats.mean[j]);
      }
    }
  }
  for (double& v : stats.std) v = std::max(kStdFloor, std::sqrt(v / static_cast<double>(count)));
  return stats;
}

TaskDataset generate_dataset(const TaskSpec& spec, Quality quality, std::size_t n_traj,
                             std::size_t n_prompt, std::uint64_t seed) {
  if (n_traj < 1) throw ContractError("generate_dataset: n_traj must be >= 1");
  TaskDataset ds;
  ds.spec = spec;
  ds.quality = quality;
  const PolicyFn policy = tier_policy(spec, quality);
  const PolicyFn expert = tier_policy(spec, Quality::expert);
  for (std::size_t i = 0; i < n_traj; ++i) {
    ds.trajectories.push_back(rollout(spec, policy, derive_seed(seed, 10, i)));
  }
  for (std::size_t i = 0; i < n_prompt; ++i) {
    ds.prompt_pool.push_back(rollout(spec, expert, derive_seed(seed, 11, i)));
  }
  const StateStats stats =
      compute_state_stats(ds.trajectories, problem_info(spec.problem).state_dim);
  ds.state_mean = stats.mean;
  ds.state_std = stats.std;
  return ds;
}

InputNormalizer InputNormalizer::from_dataset(const TaskDataset& dataset, double rtg_scale) {
  return {dataset.state_mean, dataset.state_std, rtg_scale};
}

InputNormalizer InputNormalizer::pooled(std::span<const TaskDataset> datasets, double rtg_scale) {
  if (datasets.empty()) throw ContractError("InputNormalizer::pooled: no datasets");
  std::vector<Trajectory> all;
  for (const auto& ds : datasets) {
    all.insert(all.end(), ds.trajectories.begin(), ds.trajectories.end());
  }
  const std::size_t d_s = all.empty() ? datasets[0].state_mean.size() : all[0].states[0].size();
  const StateStats stats = compute_state_stats(all, d_s);
  return {stats.mean, stats.std, rtg_scale};
}

std::size_t Segment::valid_steps() const {
  return static_cast<std::size_t>(std::count(loss_mask.begin(), loss_mask.end(), 1));
}

Segment make_segment(const Trajectory& traj, std::size_t end_index, std::size_t K,
                     const InputNormalizer& norm) {
  if (end_index >= traj.length()) throw ContractError("make_segment: end index past trajectory end");
  if (K < 1) throw ContractError("make_segment: K must be >= 1");
  Segment seg;
  seg.context_len = K;
  seg.state_dim = traj.states[0].size();
  seg.action_dim = traj.actions[0].size();
  seg.rtg.assign(K, 0.0);
  seg.states.assign(K * seg.state_dim, 0.0);
  seg.actions.assign(K * seg.action_dim, 0.0);
  seg.loss_mask.assign(K, 0);
  seg.timesteps.assign(K, 0);
  const std::size_t start = end_index + 1 >= K ? end_index + 1 - K : 0;
  const std::size_t n = end_index - start + 1;
  const std::size_t pad = K - n;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t t = start + i;
    const std::size_t k = pad + i;
    seg.rtg[k] = norm.rtg(traj.rtg[t]);
    for (std::size_t j = 0; j < seg.state_dim; ++j) {
      seg.states[k * seg.state_dim + j] = norm.state(j, traj.states[t][j]);
    }
    for (std::size_t j = 0; j < seg.action_dim; ++j) {
      seg.actions[k * seg.action_dim + j] = traj.actions[t][j];
    }
    seg.loss_mask[k] = 1;
    seg.timesteps[k] = t;
  }
  return seg;
}

Segment sample_segment(const TaskDataset& dataset, std::size_t K, Rng& rng,
                       const InputNormalizer& norm) {
  if (dataset.trajectories.empty()) throw ContractError("sample_segment: dataset is empty");
  std::vector<double> weights;
  weights.reserve(dataset.trajectories.size());
  for (const auto& t : dataset.trajectories) weights.push_back(static_cast<double>(t.length()));
  std::discrete_distribution<std::size_t> pick(weights.begin(), weights.end());
  const Trajectory& traj = dataset.trajectories[pick(rng)];
  const std::size_t end = uniform_index(rng, traj.length());
  return make_segment(traj, end, K, norm);
}

Segment sample_segment(const TaskDataset& dataset, std::size_t K, Rng& rng) {
  return sample_segment(dataset, K, rng, InputNormalizer::from_dataset(dataset));
}

std::string dataset_file_name(const TaskSpec& spec, Quality quality) {
  return std::string(problem_name(spec.problem)) + "_task" + std::to_string(spec.task_id) + "_" +
         std::string(quality_name(quality)) + ".json";
}

namespace {

using ojson = nlohmann::ordered_json;

ojson trajectory_to_json(const Trajectory& t) {
  return ojson{{"states", t.states}, {"actions", t.actions}, {"rewards", t.rewards},
               {"rtg", t.rtg}};
}

[[noreturn]] void parse_fail(const std::string& where, const std::string& what) {
  throw ParseError(where + ": " + what);
}

std::vector<std::vector<double>> read_rows(const ojson& arr, std::size_t width,
                                           const std::string& where) {
  if (!arr.is_array()) parse_fail(where, "expected an array of rows");
  std::vector<std::vector<double>> rows;
  for (std::size_t i = 0; i < arr.size(); ++i) {
    const std::string at = where + "[" + std::to_string(i) + "]";
    if (!arr[i].is_array()) parse_fail(at, "expected an array");
    if (arr[i].size() != width) {
      parse_fail(at, "expected " + std::to_string(width) + " values, got " +
                         std::to_string(arr[i].size()));
    }
    std::vector<double> row;
    for (const auto& v : arr[i]) {
      if (!v.is_number()) parse_fail(at, "non-numeric value");
      row.push_back(v.get<double>());
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

std::vector<double> read_numbers(const ojson& arr, const std::string& where) {
  if (!arr.is_array()) parse_fail(where, "expected an array");
  std::vector<double> out;
  for (const auto& v : arr) {
    if (!v.is_number()) parse_fail(where, "non-numeric value");
    out.push_back(v.get<double>());
  }
  return out;
}

Trajectory trajectory_from_json(const ojson& j, const ProblemInfo& info, const std::string& where) {
  if (!j.is_object()) parse_fail(where, "expected an object");
  for (const char* key : {"states", "actions", "rewards"}) {
    if (!j.contains(key)) parse_fail(where, std::string("missing field '") + key + "'");
  }
  auto states = read_rows(j["states"], info.state_dim, where + ".states");
  auto actions = read_rows(j["actions"], info.action_dim, where + ".actions");
  auto rewards = read_numbers(j["rewards"], where + ".rewards");
  if (states.size() != rewards.size() || actions.size() != rewards.size()) {
    parse_fail(where, "states/actions/rewards lengths differ");
  }
  Trajectory traj = make_trajectory(std::move(states), std::move(actions), std::move(rewards));
  if (j.contains("rtg")) {
    auto rtg = read_numbers(j["rtg"], where + ".rtg");
    if (rtg.size() != traj.length()) parse_fail(where + ".rtg", "length differs from rewards");
    traj.rtg = std::move(rtg);
    traj.total_return = traj.rtg.empty() ? 0.0 : traj.rtg.front();
  }
  return traj;
}

}  // namespace

void write_dataset(const TaskDataset& ds, const std::filesystem::path& path) {
  ojson trajs = ojson::array();
  for (const auto& t : ds.trajectories) trajs.push_back(trajectory_to_json(t));
  ojson pool = ojson::array();
  for (const auto& t : ds.prompt_pool) pool.push_back(trajectory_to_json(t));
  ojson doc{{"task_id", ds.spec.task_id},
            {"problem", problem_name(ds.spec.problem)},
            {"parameter", ds.spec.c},
            {"quality", quality_name(ds.quality)},
            {"reward_mode", ds.spec.reward_mode == RewardMode::delayed ? "delayed" : "dense"},
            {"horizon", ds.spec.horizon},
            {"target_return", ds.spec.target_return},
            {"state_mean", ds.state_mean},
            {"state_std", ds.state_std},
            {"trajectories", std::move(trajs)},
            {"prompt_pool", std::move(pool)}};
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ConfigError("cannot write dataset " + path.string());
  out << doc.dump() << '\n';
}

TaskDataset read_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open dataset " + path.string());
  const std::string file = path.filename().string();
  ojson doc;
  try {
    doc = ojson::parse(in);
  } catch (const ojson::parse_error& e) {
    throw ParseError(file + ": " + e.what());
  }
  for (const char* key : {"task_id", "problem", "parameter", "quality", "horizon",
                          "target_return", "trajectories"}) {
    if (!doc.contains(key)) parse_fail(file, std::string("missing field '") + key + "'");
  }
  TaskDataset ds;
  try {
    const Problem problem = parse_problem(doc["problem"].get<std::string>());
    ds.spec = make_task(problem, doc["task_id"].get<int>(),
                        read_numbers(doc["parameter"], file + ".parameter"));
    ds.spec.horizon = doc["horizon"].get<int>();
    ds.spec.target_return = doc["target_return"].get<double>();
    ds.spec.reward_mode = doc.value("reward_mode", std::string("dense")) == "delayed"
                              ? RewardMode::delayed
                              : RewardMode::dense;
    ds.quality = parse_quality(doc["quality"].get<std::string>());
  } catch (const ConfigError& e) {
    parse_fail(file, e.what());
  } catch (const ojson::exception& e) {
    parse_fail(file, e.what());
  }
  const ProblemInfo info = problem_info(ds.spec.problem);
  const auto& trajs = doc["trajectories"];
  if (!trajs.is_array()) parse_fail(file + ".trajectories", "expected an array");
  for (std::size_t i = 0; i < trajs.size(); ++i) {
    ds.trajectories.push_back(
        trajectory_from_json(trajs[i], info, file + ".trajectories[" + std::to_string(i) + "]"));
  }
  if (doc.contains("prompt_pool")) {
    const auto& pool = doc["prompt_pool"];
    if (!pool.is_array()) parse_fail(file + ".prompt_pool", "expected an array");
    for (std::size_t i = 0; i < pool.size(); ++i) {
      ds.prompt_pool.push_back(
          trajectory_from_json(pool[i], info, file + ".prompt_pool[" + std::to_string(i) + "]"));
    }
  }
  if (doc.contains("state_mean") && doc.contains("state_std")) {
    ds.state_mean = read_numbers(doc["state_mean"], file + ".state_mean");
    ds.state_std = read_numbers(doc["state_std"], file + ".state_std");
    if (ds.state_mean.size() != info.state_dim || ds.state_std.size() != info.state_dim) {
      parse_fail(file + ".state_mean", "expected " + std::to_string(info.state_dim) + " values");
    }
  } else {
    const StateStats stats = compute_state_stats(ds.trajectories, info.state_dim);
    ds.state_mean = stats.mean;
    ds.state_std = stats.std;
  }
  return ds;
}

TaskDataset with_delayed_rewards(const TaskDataset& dataset) {
  TaskDataset out = dataset;
  out.spec.reward_mode = RewardMode::delayed;
  auto delay = [](Trajectory& t) {
    double sum = 0.0;
    for (double& r : t.rewards) {
      sum += r;
      r = 0.0;
    }
    if (!t.rewards.empty()) t.rewards.back() = sum;
    t = make_trajectory(std::move(t.states), std::move(t.actions), std::move(t.rewards));
  };
  if (dataset.spec.reward_mode == RewardMode::delayed) return out;
  for (Trajectory& t : out.trajectories) delay(t);
  for (Trajectory& t : out.prompt_pool) delay(t);
  return out;
}

InputLayout InputLayout::for_problem(Problem problem) {
  const ProblemInfo info = problem_info(problem);
  return {info.state_dim, info.action_dim, info.param_dim, false};
}

InputLayout InputLayout::all_problems() {
  InputLayout out{0, 0, 0, true};
  for (Problem p : mpdt::all_problems()) {
    const ProblemInfo info = problem_info(p);
    out.state_dim = std::max(out.state_dim, info.state_dim);
    out.action_dim = std::max(out.action_dim, info.action_dim);
    out.param_dim = std::max(out.param_dim, info.param_dim);
  }
  out.param_dim += mpdt::all_problems().size();
  return out;
}

namespace {

std::vector<double> pad_to(std::span<const double> v, std::size_t width, const char* what) {
  if (v.size() > width) {
    throw ContractError(std::string(what) + " has " + std::to_string(v.size()) +
                        " values, layout allows " + std::to_string(width));
  }
  std::vector<double> out(v.begin(), v.end());
  out.resize(width, 0.0);
  return out;
}

}  // namespace

std::vector<double> InputLayout::task_param(const TaskSpec& spec) const {
  if (!mixed) return pad_to(spec.c, param_dim, "task parameter");
  const std::size_t n_problems = mpdt::all_problems().size();
  std::vector<double> out = pad_to(spec.c, param_dim - n_problems, "task parameter");
  out.resize(param_dim, 0.0);
  out[param_dim - n_problems + static_cast<std::size_t>(spec.problem)] = 1.0;
  return out;
}

std::vector<double> InputLayout::pad_state(std::span<const double> state) const {
  return pad_to(state, state_dim, "state");
}

std::vector<double> InputLayout::pad_action(std::span<const double> action) const {
  return pad_to(action, action_dim, "action");
}

TaskDataset pad_dataset(const TaskDataset& dataset, const InputLayout& layout) {
  TaskDataset out = dataset;
  out.spec.c = layout.task_param(dataset.spec);
  auto pad_all = [&](std::vector<Trajectory>& trajs) {
    for (auto& t : trajs) {
      for (auto& s : t.states) s = layout.pad_state(s);
      for (auto& a : t.actions) a = layout.pad_action(a);
    }
  };
  pad_all(out.trajectories);
  pad_all(out.prompt_pool);
  out.state_mean = pad_to(dataset.state_mean, layout.state_dim, "state_mean");
  out.state_std = pad_to(dataset.state_std, layout.state_dim, "state_std");
  std::fill(out.state_std.begin() + static_cast<std::ptrdiff_t>(dataset.state_std.size()),
            out.state_std.end(), 1.0);
  return out;
}

Baselines estimate_baselines(const TaskSpec& spec, std::size_t episodes, std::uint64_t seed) {
  if (episodes < 1) throw ContractError("estimate_baselines: episodes must be >= 1");
  Baselines b;
  b.expert_max = -std::numeric_limits<double>::infinity();
  const PolicyFn expert = tier_policy(spec, Quality::expert);
  const PolicyFn random = tier_policy(spec, Quality::random);
  std::vector<double> random_returns;
  for (std::size_t i = 0; i < episodes; ++i) {
    const double er = rollout(spec, expert, derive_seed(seed, 20, i)).total_return;
    b.expert_mean += er;
    b.expert_max = std::max(b.expert_max, er);
    random_returns.push_back(rollout(spec, random, derive_seed(seed, 21, i)).total_return);
  }
  b.expert_mean /= static_cast<double>(episodes);
  b.random_mean = std::accumulate(random_returns.begin(), random_returns.end(), 0.0) /
                  static_cast<double>(episodes);
  double var = 0.0;
  for (double r : random_returns) var += (r - b.random_mean) * (r - b.random_mean);
  b.random_std = std::sqrt(var / static_cast<double>(episodes));
  return b;
}

}  // namespace mpdt
