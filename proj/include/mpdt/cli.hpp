#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "mpdt/eval.hpp"
#include "mpdt/grad_check.hpp"
#include "mpdt/train.hpp"

namespace mpdt {

// Everything needed to reproduce a training run. Serialized as one JSON
// document; unknown keys are rejected.
struct RunConfig {
  std::string problem = "point_reach";  // a problem name or "all"
  std::filesystem::path data_dir;
  std::string variant = "task-learned";
  int prompt_len = -1;     // < 0: problem default
  std::size_t traj_episodes = 1;
  std::size_t traj_seg_len = 0;  // 0: problem default
  ModelConfig model;
  std::size_t batch_per_task = 16;
  std::size_t grad_steps_per_iter = 10;
  std::size_t max_iters = 2000;
  std::size_t eval_every = 500;
  std::uint64_t seed = 1;
  double base_lr = 0.0;  // <= 0: 1e-3 for 30-token prompts, else 1e-4
  std::int64_t warmup = 10000;
  double weight_decay = 1e-4;
  double rtg_scale = 0.0;
  bool sparse_reward = false;
  std::size_t eval_episodes = 20;

  static RunConfig from_json(const nlohmann::json& doc);
  nlohmann::ordered_json to_json() const;

  // Fills in problem defaults and checks consistency.
  RunConfig resolved() const;
  TrainConfig train_config() const;
  InputLayout layout() const;
};

RunConfig read_run_config(const std::filesystem::path& path);

PromptTag parse_variant(std::string_view name);  // accepts task-learned and task_learned
std::string variant_flag_name(PromptTag tag);     // hyphenated form

// One task entry of split.json.
struct SplitTask {
  TaskSpec spec;  // target_return = G
  std::string split;  // train | test
  double expert_return = 0.0;
  double expert_max = 0.0;
  double random_return = 0.0;
  double random_std = 0.0;
  std::string dataset;  // file name relative to the data directory
};

struct SplitFile {
  std::string quality;
  std::string reward_mode;
  std::uint64_t seed = 0;
  std::vector<SplitTask> tasks;
};

SplitFile read_split_file(const std::filesystem::path& path);

struct GenDataOptions {
  std::string problem = "point_reach";  // or "all"
  std::filesystem::path out;
  std::size_t trajectories = 50;
  std::size_t prompt_trajectories = 5;
  std::string quality = "expert";
  int n_train = 0;  // 0: problem default
  int n_test = 0;
  std::uint64_t seed = 1;
  bool sparse = false;
  bool force = false;
  std::size_t baseline_episodes = 100;
};

SplitFile generate_data(const GenDataOptions& options);

// Datasets and evaluation tasks of a run, already matched to its layout.
struct RunData {
  InputLayout layout;
  std::vector<TaskDataset> train;  // padded
  std::vector<EvalTask> seen;
  std::vector<EvalTask> unseen;
};

RunData load_run_data(const RunConfig& config);

EvalSettings eval_settings(const RunConfig& config, std::size_t episodes);

// Metric rows for one evaluation of both splits.
std::vector<MetricRow> eval_metric_rows(std::size_t iteration, const std::string& variant,
                                        const EvalReport& report, bool mixed);

// Trains into out (config.json, metrics.csv, checkpoint, normalizer.json).
TrainResult run_training(const RunConfig& config, const std::filesystem::path& out);

// Reloads a run directory and evaluates "seen", "unseen" or "both".
EvalReport run_evaluation(const std::filesystem::path& run_dir, const std::string& split,
                          std::size_t episodes);

struct AblateOptions {
  std::filesystem::path config;  // optional base RunConfig
  std::filesystem::path data_dir;
  std::string problem = "point_reach";
  std::vector<std::uint64_t> seeds{1, 6, 8};
  std::vector<int> prompt_lens;  // empty: the five variants; else task-learned per length
  std::filesystem::path out;
  bool resume = false;
};

struct AblationRow {
  std::string variant;
  int prompt_len = 0;
  std::vector<double> scores;  // final unseen normalized score per seed
  double mean = 0.0;
  double std = 0.0;  // over seeds
};

std::vector<AblationRow> run_ablation(const AblateOptions& options);
void write_ablation_csv(const std::vector<AblationRow>& rows, const std::filesystem::path& path);

struct GradCheckOptions {
  std::size_t probes = 256;
  double step = 1e-6;
  std::uint64_t seed = 1;
};

struct GradCheckReport {
  GradCheckResult result;
  std::size_t prompt_probes = 0;
  bool passed = false;
};

GradCheckReport run_grad_check(const GradCheckOptions& options);

// Parses argv and runs a subcommand. Returns 0 on success, 1 for invalid
// input or configuration, 2 for runtime and numeric failures.
int run_cli(int argc, char** argv);

}  // namespace mpdt
