#pragma once

#include <functional>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "mpdt/data.hpp"
#include "mpdt/model.hpp"
#include "mpdt/prompts.hpp"

namespace mpdt {

// 100 (ret - random) / (expert - random). Throws ConfigError when expert == random.
double normalized_score(double ret, double random_ret, double expert_ret);

struct EpisodeResult {
  double total_return = 0.0;
  Trajectory trajectory;           // raw (unpadded, unnormalized) states and actions
  std::vector<double> rtg_track;   // R-hat fed at each step, starting with G
  std::size_t max_window = 0;      // largest number of valid steps ever fed to the model
};

// Maps a batch of context windows (current step last) to raw actions for the
// current step, one per segment.
using SegmentPolicy = std::function<std::vector<std::vector<double>>(std::span<const Segment>)>;

struct WindowShape {
  std::size_t context_len = 0;
  std::size_t state_dim = 0;   // model-facing (padded) sizes
  std::size_t action_dim = 0;
};

// Lockstep rollouts of one episode per seed. R-hat starts at target_return and
// is updated as step -> observe r -> check done -> R-hat -= r -> append.
std::vector<EpisodeResult> rollout_with_policy(const SegmentPolicy& policy, const WindowShape& window,
                                               const TaskSpec& spec, const InputLayout& layout,
                                               const InputNormalizer& norm, double target_return,
                                               std::span<const std::uint64_t> seeds);

// Model in eval mode with one prompt per segment.
SegmentPolicy model_policy(const DecisionTransformer<float>& model,
                           std::vector<AssembledPrompt<float>> prompts);

// Rolls out one episode per prompt/seed in lockstep. The policy is the model in
// eval mode; predicted actions are truncated to the problem's action size and
// clipped to the action box.
std::vector<EpisodeResult> rollout_episodes(const DecisionTransformer<float>& model,
                                            std::span<const AssembledPrompt<float>> prompts,
                                            const TaskSpec& spec, const InputLayout& layout,
                                            const InputNormalizer& norm, double target_return,
                                            std::span<const std::uint64_t> seeds);

EpisodeResult rollout_episode(const DecisionTransformer<float>& model,
                              const AssembledPrompt<float>& prompt, const TaskSpec& spec,
                              const InputLayout& layout, const InputNormalizer& norm,
                              double target_return, std::uint64_t seed);

// A task as seen by the evaluator: its spec (with G), the normalized-score baselines, and
// the held-out expert episodes for trajectory prompts.
struct EvalTask {
  TaskSpec spec;
  double expert_return = std::numeric_limits<double>::quiet_NaN();
  double random_return = std::numeric_limits<double>::quiet_NaN();
  std::vector<Trajectory> prompt_pool;  // unpadded
};

struct TaskResult {
  int task_id = 0;
  std::string problem;
  std::string split;
  double mean_return = 0.0;
  double normalized_score = 0.0;
  std::size_t n_episodes = 0;
};

struct SplitAggregate {
  double mean = 0.0;
  double std = 0.0;
  std::size_t n_tasks = 0;
};

struct EvalReport {
  std::vector<TaskResult> per_task;
  std::map<std::string, SplitAggregate> aggregate;

  void finalize();  // recomputes aggregate from per_task
  nlohmann::ordered_json to_json() const;
};

struct EvalSettings {
  std::size_t episodes_per_task = 20;
  std::uint64_t seed = 0;
};

// Builds the policy for one task's episodes given their prompt seeds.
using TaskPolicyFactory =
    std::function<SegmentPolicy(const EvalTask& task, std::span<const std::uint64_t> prompt_seeds)>;

EvalReport evaluate_tasks(const TaskPolicyFactory& make_policy, const WindowShape& window,
                          std::span<const EvalTask> tasks, const std::string& split,
                          const InputLayout& layout, const InputNormalizer& norm,
                          const EvalSettings& settings);

// Runs episodes_per_task rollouts per task. Episode e of task i uses seeds derived
// from (seed, task_id, e) only, so results do not depend on task order.
EvalReport evaluate_split(const DecisionTransformer<float>& model, const ParamStore<float>& params,
                          const PromptVariant& variant, std::span<const EvalTask> tasks,
                          const std::string& split, const InputLayout& layout,
                          const InputNormalizer& norm, const EvalSettings& settings);

}  // namespace mpdt
