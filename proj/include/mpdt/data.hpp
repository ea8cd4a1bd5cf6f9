#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mpdt/envs.hpp"

namespace mpdt {

enum class Quality { expert, medium, random };

std::string_view quality_name(Quality quality);
Quality parse_quality(std::string_view name);

// Suffix sums: rtg[t] = rewards[t] + ... + rewards[T-1].
std::vector<double> compute_rtg(std::span<const double> rewards);

struct Trajectory {
  std::vector<std::vector<double>> states;
  std::vector<std::vector<double>> actions;
  std::vector<double> rewards;
  std::vector<double> rtg;
  double total_return = 0.0;

  std::size_t length() const { return rewards.size(); }
};

Trajectory make_trajectory(std::vector<std::vector<double>> states,
                           std::vector<std::vector<double>> actions, std::vector<double> rewards);

using PolicyFn = std::function<Action(const State&, Rng&)>;

// One episode. states[t] is the observation the action at step t responds to.
Trajectory rollout(const TaskSpec& spec, const PolicyFn& policy, std::uint64_t seed);

PolicyFn tier_policy(const TaskSpec& spec, Quality quality);

struct StateStats {
  std::vector<double> mean;
  std::vector<double> std;
};

// Per-component population mean/std over every timestep; std floored at 1e-6.
StateStats compute_state_stats(std::span<const Trajectory> trajectories, std::size_t state_dim);

struct TaskDataset {
  TaskSpec spec;
  Quality quality = Quality::expert;
  std::vector<Trajectory> trajectories;
  std::vector<Trajectory> prompt_pool;  // expert episodes held out for trajectory prompts
  std::vector<double> state_mean;
  std::vector<double> state_std;
};

TaskDataset generate_dataset(const TaskSpec& spec, Quality quality, std::size_t n_traj,
                             std::size_t n_prompt, std::uint64_t seed);

// Maps raw environment quantities to model inputs.
struct InputNormalizer {
  std::vector<double> state_mean;
  std::vector<double> state_std;
  double rtg_scale = 1.0;

  static InputNormalizer from_dataset(const TaskDataset& dataset, double rtg_scale = 1.0);
  static InputNormalizer pooled(std::span<const TaskDataset> datasets, double rtg_scale);

  double state(std::size_t component, double value) const {
    return (value - state_mean[component]) / state_std[component];
  }
  double rtg(double value) const { return value / rtg_scale; }
};

// K-step window, left-padded with zeros; values already normalized.
struct Segment {
  std::size_t context_len = 0;
  std::size_t state_dim = 0;
  std::size_t action_dim = 0;
  std::vector<double> rtg;      // [K]
  std::vector<double> states;   // [K, d_s]
  std::vector<double> actions;  // [K, d_a]
  std::vector<std::uint8_t> loss_mask;
  std::vector<std::size_t> timesteps;

  std::size_t valid_steps() const;
};

// Steps max(0, end-K+1)..end of the trajectory.
Segment make_segment(const Trajectory& trajectory, std::size_t end_index, std::size_t K,
                     const InputNormalizer& norm);

// Trajectory drawn proportionally to its length, end index uniform in [0, T-1].
Segment sample_segment(const TaskDataset& dataset, std::size_t K, Rng& rng,
                       const InputNormalizer& norm);
Segment sample_segment(const TaskDataset& dataset, std::size_t K, Rng& rng);

std::string dataset_file_name(const TaskSpec& spec, Quality quality);
void write_dataset(const TaskDataset& dataset, const std::filesystem::path& path);
TaskDataset read_dataset(const std::filesystem::path& path);

// Copy whose rewards are withheld until the last step, where their sum is
// delivered. Returns-to-go are recomputed; total returns are unchanged.
TaskDataset with_delayed_rewards(const TaskDataset& dataset);

// Model-facing dimensions. A mixed layout trains one model on every problem:
// states and actions are zero-padded to the widest problem and c is padded to
// the widest parameter, followed by a one-hot problem id.
struct InputLayout {
  std::size_t state_dim = 0;
  std::size_t action_dim = 0;
  std::size_t param_dim = 0;
  bool mixed = false;

  static InputLayout for_problem(Problem problem);
  static InputLayout all_problems();

  std::vector<double> task_param(const TaskSpec& spec) const;
  std::vector<double> pad_state(std::span<const double> state) const;
  std::vector<double> pad_action(std::span<const double> action) const;
};

// Copy with states/actions padded and spec.c replaced by layout.task_param.
TaskDataset pad_dataset(const TaskDataset& dataset, const InputLayout& layout);

struct Baselines {
  double expert_mean = 0.0;
  double expert_max = 0.0;
  double random_mean = 0.0;
  double random_std = 0.0;
};

// Monte-Carlo returns of the scripted expert and the uniform-random policy.
Baselines estimate_baselines(const TaskSpec& spec, std::size_t episodes, std::uint64_t seed);

}  // namespace mpdt
