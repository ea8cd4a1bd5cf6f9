#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "mpdt/adam.hpp"
#include "mpdt/data.hpp"
#include "mpdt/model.hpp"
#include "mpdt/prompts.hpp"

namespace mpdt {

struct TrainConfig {
  PromptVariant variant;
  ModelConfig model;  // dims and prompt capacity are filled in from the layout
  std::size_t batch_per_task = 16;
  std::size_t grad_steps_per_iter = 10;
  std::size_t max_iters = 2000;
  std::size_t eval_every = 500;  // 0 disables periodic evaluation
  std::uint64_t seed = 1;
  AdamConfig optim;
  double rtg_scale = 0.0;  // <= 0: max |G| over the training tasks
  bool sparse_reward = false;

  void validate() const;
};

// Model config for a variant over the given input layout.
ModelConfig resolve_model_config(const TrainConfig& config, const InputLayout& layout);

// One metrics.csv row.
struct MetricRow {
  std::size_t iteration = 0;
  std::string phase;  // train | eval
  std::string variant;
  std::string split;  // train | seen | unseen
  std::string task_id;
  std::string value_kind;  // loss | mean_return | normalized_score
  double value = 0.0;
};

inline constexpr const char* kMetricsHeader = "iteration,phase,variant,split,task_id,value_kind,value";
std::string format_metric_row(const MetricRow& row);

template <typename T>
struct TrainBatch {
  std::vector<Segment> segments;
  std::vector<AssembledPrompt<T>> prompts;
  std::vector<std::size_t> task_index;  // dataset position of each segment
};

// batch_per_task segments from every dataset, each paired with its task's prompt.
template <typename T>
TrainBatch<T> sample_batch(const DecisionTransformer<T>& model, const ParamStore<T>& params,
                           const PromptVariant& variant, std::span<const TaskDataset> datasets,
                           const InputNormalizer& norm, std::size_t batch_per_task, Rng& rng);

template <typename T>
Tensor<T> batch_loss(const DecisionTransformer<T>& model, const TrainBatch<T>& batch, bool train,
                     Rng* dropout_rng);

// Combined behaviour-cloning loss over batch_per_task segments from every
// dataset, each paired with its task's prompt.
template <typename T>
Tensor<T> batch_loss(const DecisionTransformer<T>& model, const ParamStore<T>& params,
                     const PromptVariant& variant, std::span<const TaskDataset> datasets,
                     const InputNormalizer& norm, std::size_t batch_per_task, Rng& rng, bool train);

struct StepStats {
  double loss = 0.0;
  double prompt_grad_norm = 0.0;  // L2 norm of the z gradients before the update
  std::size_t batch_size = 0;
};

StepStats train_step(std::span<const TaskDataset> datasets, const DecisionTransformer<float>& model,
                     ParamStore<float>& params, const PromptVariant& variant,
                     AdamState<float>& opt, const InputNormalizer& norm,
                     std::size_t batch_per_task, Rng& rng);

// Freshly initialised model (and learned prompt) parameters for a run.
ParamStore<float> init_run_parameters(const TrainConfig& config, const ModelConfig& model);

double resolve_rtg_scale(const TrainConfig& config, std::span<const TaskDataset> datasets);

using EvalHook = std::function<std::vector<MetricRow>(std::size_t iteration, const ParamStore<float>&,
                                                      const InputNormalizer&)>;

struct TrainResult {
  ParamStore<float> params;
  ModelConfig model;
  InputNormalizer normalizer;
  std::vector<MetricRow> metrics;
};

// Runs max_iters iterations. Datasets must already match the layout. When
// run_dir is non-empty, metrics.csv, normalizer.json and the final checkpoint
// (model.json + model.bin) are written there.
TrainResult train_run(const TrainConfig& config, std::span<const TaskDataset> datasets,
                      const InputLayout& layout, const EvalHook& eval_hook,
                      const std::filesystem::path& run_dir);

void write_normalizer(const InputNormalizer& norm, const std::filesystem::path& path);
InputNormalizer read_normalizer(const std::filesystem::path& path);

}  // namespace mpdt
