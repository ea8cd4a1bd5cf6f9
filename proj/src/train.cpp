#include "mpdt/train.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "json.hpp"
#include "mpdt/checkpoint.hpp"

namespace mpdt {

void TrainConfig::validate() const {
  variant.validate();
  if (variant.tag == PromptTag::task && variant.learned_len != 0) {
    throw ConfigError("variant 'task' has no learned prompt; use task_learned for n > 0");
  }
  if (variant.tag == PromptTag::none && variant.learned_len != 0) {
    throw ConfigError("variant 'none' has no learned prompt");
  }
  if (batch_per_task < 1) throw ConfigError("batch_per_task must be >= 1");
  if (grad_steps_per_iter < 1) throw ConfigError("grad_steps_per_iter must be >= 1");
  if (max_iters < 1) throw ConfigError("max_iters must be >= 1");
  if (!(optim.base_lr > 0.0)) throw ConfigError("learning rate must be positive");
  if (optim.warmup_steps < 1) throw ConfigError("warmup must be >= 1");
  if (optim.weight_decay < 0.0) throw ConfigError("weight decay must be >= 0");
}

ModelConfig resolve_model_config(const TrainConfig& config, const InputLayout& layout) {
  ModelConfig m = config.model;
  m.state_dim = layout.state_dim;
  m.action_dim = layout.action_dim;
  m.param_dim = config.variant.uses_task_param() ? layout.param_dim : 0;
  m.prompt_capacity = config.variant.prompt_length();
  m.validate();
  return m;
}

std::string format_metric_row(const MetricRow& r) {
  char value[64];
  std::snprintf(value, sizeof value, "%.17g", r.value);
  return std::to_string(r.iteration) + "," + r.phase + "," + r.variant + "," + r.split + "," +
         r.task_id + "," + r.value_kind + "," + value;
}

template <typename T>
TrainBatch<T> sample_batch(const DecisionTransformer<T>& model, const ParamStore<T>& params,
                           const PromptVariant& variant, std::span<const TaskDataset> datasets,
                           const InputNormalizer& norm, std::size_t batch_per_task, Rng& rng) {
  if (datasets.empty()) throw ContractError("training needs at least one task dataset");
  const std::size_t K = model.config().context_len;
  TrainBatch<T> batch;
  for (std::size_t i = 0; i < datasets.size(); ++i) {
    const TaskDataset& ds = datasets[i];
    if (ds.trajectories.empty()) {
      throw ContractError("task " + std::to_string(ds.spec.task_id) + " has no trajectories");
    }
    // Prompts without trajectory segments are identical across the task's batch.
    std::optional<AssembledPrompt<T>> shared;
    if (variant.tag != PromptTag::trajectory) shared = assemble(variant, model, params, ds.spec, {}, rng, norm);
    for (std::size_t b = 0; b < batch_per_task; ++b) {
      batch.segments.push_back(sample_segment(ds, K, rng, norm));
      batch.prompts.push_back(shared ? *shared
                                     : assemble(variant, model, params, ds.spec, ds.prompt_pool, rng, norm));
      batch.task_index.push_back(i);
    }
  }
  return batch;
}

template <typename T>
Tensor<T> batch_loss(const DecisionTransformer<T>& model, const TrainBatch<T>& batch, bool train,
                     Rng* dropout_rng) {
  const Tensor<T> pred = model.forward(model.embed(batch.segments, batch.prompts), train, dropout_rng);
  return bc_loss(pred, target_actions<T>(batch.segments), stacked_loss_mask(batch.segments));
}

template <typename T>
Tensor<T> batch_loss(const DecisionTransformer<T>& model, const ParamStore<T>& params,
                     const PromptVariant& variant, std::span<const TaskDataset> datasets,
                     const InputNormalizer& norm, std::size_t batch_per_task, Rng& rng,
                     bool train) {
  const TrainBatch<T> batch = sample_batch(model, params, variant, datasets, norm, batch_per_task, rng);
  return batch_loss(model, batch, train, &rng);
}

StepStats train_step(std::span<const TaskDataset> datasets, const DecisionTransformer<float>& model,
                     ParamStore<float>& params, const PromptVariant& variant,
                     AdamState<float>& opt, const InputNormalizer& norm,
                     std::size_t batch_per_task, Rng& rng) {
  const Tensor<float> loss = batch_loss(model, params, variant, datasets, norm, batch_per_task, rng, true);
  StepStats stats;
  stats.loss = loss.item();
  stats.batch_size = datasets.size() * batch_per_task;
  if (!std::isfinite(stats.loss)) throw NumericError("non-finite training loss");
  backward(loss, params);
  double sq = 0.0;
  for (const Tensor<float>& z : learned_blocks(params)) {
    for (float g : z.grad()) sq += static_cast<double>(g) * g;
  }
  stats.prompt_grad_norm = std::sqrt(sq);
  adam_step(params, opt);
  return stats;
}

ParamStore<float> init_run_parameters(const TrainConfig& config, const ModelConfig& model) {
  ParamStore<float> params;
  init_model_parameters(model, params, derive_seed(config.seed, 1));
  init_learned_prompt(config.variant.uses_learned() ? config.variant.learned_len : 0,
                      model.embed_dim, derive_seed(config.seed, 2), params);
  return params;
}

double resolve_rtg_scale(const TrainConfig& config, std::span<const TaskDataset> datasets) {
  if (config.rtg_scale > 0.0) return config.rtg_scale;
  double scale = 0.0;
  for (const TaskDataset& ds : datasets) scale = std::max(scale, std::fabs(ds.spec.target_return));
  return scale > 0.0 ? scale : 1.0;
}

void write_normalizer(const InputNormalizer& norm, const std::filesystem::path& path) {
  nlohmann::ordered_json doc{{"state_mean", norm.state_mean},
                             {"state_std", norm.state_std},
                             {"rtg_scale", norm.rtg_scale}};
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << doc.dump(2) << '\n';
}

InputNormalizer read_normalizer(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path.string());
  try {
    const auto doc = nlohmann::json::parse(in);
    return {doc.at("state_mean").get<std::vector<double>>(),
            doc.at("state_std").get<std::vector<double>>(), doc.at("rtg_scale").get<double>()};
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.filename().string() + ": " + e.what());
  }
}

TrainResult train_run(const TrainConfig& config, std::span<const TaskDataset> datasets,
                      const InputLayout& layout, const EvalHook& eval_hook,
                      const std::filesystem::path& run_dir) {
  config.validate();
  if (datasets.empty()) throw ContractError("training needs at least one task dataset");
  if (config.variant.tag == PromptTag::trajectory) {
    for (const TaskDataset& ds : datasets) {
      if (ds.prompt_pool.empty()) {
        throw ConfigError("trajectory variant: task " + std::to_string(ds.spec.task_id) +
                          " has no prompt trajectories");
      }
    }
  }
  for (const TaskDataset& ds : datasets) {
    if (ds.trajectories.empty() || ds.trajectories[0].states[0].size() != layout.state_dim ||
        ds.trajectories[0].actions[0].size() != layout.action_dim) {
      throw ConfigError("dataset for task " + std::to_string(ds.spec.task_id) +
                        " does not match the input layout");
    }
  }

  TrainResult result;
  result.model = resolve_model_config(config, layout);
  result.params = init_run_parameters(config, result.model);
  result.normalizer = InputNormalizer::pooled(datasets, resolve_rtg_scale(config, datasets));
  const DecisionTransformer<float> model(result.model, result.params);
  AdamState<float> opt(config.optim);
  Rng rng(derive_seed(config.seed, 3));
  const std::string variant(prompt_tag_name(config.variant.tag));

  std::ofstream csv;
  if (!run_dir.empty()) {
    std::filesystem::create_directories(run_dir);
    csv.open(run_dir / "metrics.csv", std::ios::trunc);
    if (!csv) throw ConfigError("cannot write " + (run_dir / "metrics.csv").string());
    csv << kMetricsHeader << '\n';
  }
  auto emit = [&](const MetricRow& row) {
    result.metrics.push_back(row);
    if (csv.is_open()) csv << format_metric_row(row) << '\n';
  };
  auto evaluate = [&](std::size_t iteration) {
    if (!eval_hook) return;
    for (const MetricRow& row : eval_hook(iteration, result.params, result.normalizer)) emit(row);
  };

  for (std::size_t it = 0; it < config.max_iters; ++it) {
    double sum = 0.0;
    for (std::size_t s = 0; s < config.grad_steps_per_iter; ++s) {
      StepStats st;
      try {
        st = train_step(datasets, model, result.params, config.variant, opt, result.normalizer,
                        config.batch_per_task, rng);
      } catch (const NumericError& e) {
        throw NumericError("iteration " + std::to_string(it) + ": " + e.what());
      }
      sum += st.loss;
    }
    emit({it, "train", variant, "train", "all", "loss",
          sum / static_cast<double>(config.grad_steps_per_iter)});
    const bool last = it + 1 == config.max_iters;
    if (config.eval_every > 0 && ((it + 1) % config.eval_every == 0) && !last) evaluate(it);
    if (last) evaluate(it);
  }

  if (!run_dir.empty()) {
    save_checkpoint(result.params, run_dir / "model.json", run_dir / "model.bin");
    write_normalizer(result.normalizer, run_dir / "normalizer.json");
  }
  return result;
}

template TrainBatch<float> sample_batch<float>(const DecisionTransformer<float>&,
                                              const ParamStore<float>&, const PromptVariant&,
                                              std::span<const TaskDataset>, const InputNormalizer&,
                                              std::size_t, Rng&);
template TrainBatch<double> sample_batch<double>(const DecisionTransformer<double>&,
                                                const ParamStore<double>&, const PromptVariant&,
                                                std::span<const TaskDataset>, const InputNormalizer&,
                                                std::size_t, Rng&);
template Tensor<float> batch_loss<float>(const DecisionTransformer<float>&, const TrainBatch<float>&,
                                         bool, Rng*);
template Tensor<double> batch_loss<double>(const DecisionTransformer<double>&,
                                           const TrainBatch<double>&, bool, Rng*);
template Tensor<float> batch_loss<float>(const DecisionTransformer<float>&, const ParamStore<float>&,
                                         const PromptVariant&, std::span<const TaskDataset>,
                                         const InputNormalizer&, std::size_t, Rng&, bool);
template Tensor<double> batch_loss<double>(const DecisionTransformer<double>&,
                                           const ParamStore<double>&, const PromptVariant&,
                                           std::span<const TaskDataset>, const InputNormalizer&,
                                           std::size_t, Rng&, bool);

}  // namespace mpdt
