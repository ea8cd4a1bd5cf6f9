#include "mpdt/eval.hpp"

#include <cmath>

namespace mpdt {

double normalized_score(double ret, double random_ret, double expert_ret) {
  if (!std::isfinite(random_ret) || !std::isfinite(expert_ret)) {
    throw ConfigError("normalized score: missing expert or random baseline");
  }
  if (expert_ret == random_ret) {
    throw ConfigError("normalized score: degenerate task, expert return equals random return");
  }
  return 100.0 * ((ret - random_ret) / (expert_ret - random_ret));
}

std::vector<EpisodeResult> rollout_with_policy(const SegmentPolicy& policy, const WindowShape& window,
                                               const TaskSpec& spec, const InputLayout& layout,
                                               const InputNormalizer& norm, double target_return,
                                               std::span<const std::uint64_t> seeds) {
  const std::size_t K = window.context_len;
  const std::size_t n = seeds.size();
  const std::size_t d_a = problem_info(spec.problem).action_dim;
  if (K < 1) throw ContractError("rollout: context length must be >= 1");

  struct Live {
    EnvInstance env;
    EpisodeResult result;
    State raw_obs;
    std::vector<std::vector<double>> states;   // padded, normalized
    std::vector<std::vector<double>> actions;  // padded
  };
  auto normalized_obs = [&](const State& obs) {
    std::vector<double> s = layout.pad_state(obs);
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = norm.state(i, s[i]);
    return s;
  };
  std::vector<Live> eps;
  eps.reserve(n);
  for (std::size_t e = 0; e < n; ++e) {
    EnvInstance env(spec, seeds[e]);
    State obs = env.observation();
    Live live{std::move(env), {}, obs, {normalized_obs(obs)}, {}};
    live.result.rtg_track.push_back(target_return);
    eps.push_back(std::move(live));
  }

  while (!eps.empty() && !eps[0].env.done()) {
    const std::size_t t = static_cast<std::size_t>(eps[0].env.t());
    const std::size_t start = t + 1 >= K ? t + 1 - K : 0;
    const std::size_t valid = t - start + 1;
    const std::size_t pad = K - valid;
    std::vector<Segment> segments(n);
    for (std::size_t e = 0; e < n; ++e) {
      Segment& seg = segments[e];
      seg.context_len = K;
      seg.state_dim = window.state_dim;
      seg.action_dim = window.action_dim;
      seg.rtg.assign(K, 0.0);
      seg.states.assign(K * window.state_dim, 0.0);
      seg.actions.assign(K * window.action_dim, 0.0);
      seg.loss_mask.assign(K, 0);
      seg.timesteps.assign(K, 0);
      for (std::size_t i = 0; i < valid; ++i) {
        const std::size_t step = start + i;
        const std::size_t k = pad + i;
        seg.rtg[k] = norm.rtg(eps[e].result.rtg_track[step]);
        std::copy(eps[e].states[step].begin(), eps[e].states[step].end(),
                  seg.states.begin() + static_cast<std::ptrdiff_t>(k * window.state_dim));
        // The current action is unknown; its token comes after the state token.
        if (step < t) {
          std::copy(eps[e].actions[step].begin(), eps[e].actions[step].end(),
                    seg.actions.begin() + static_cast<std::ptrdiff_t>(k * window.action_dim));
        }
        seg.loss_mask[k] = 1;
        seg.timesteps[k] = step;
      }
      eps[e].result.max_window = std::max(eps[e].result.max_window, valid);
    }
    const std::vector<std::vector<double>> raw = policy(segments);
    if (raw.size() != n) throw ContractError("rollout: policy returned the wrong number of actions");
    for (std::size_t e = 0; e < n; ++e) {
      Live& live = eps[e];
      if (raw[e].size() < d_a) throw ContractError("rollout: policy action too short");
      for (std::size_t i = 0; i < d_a; ++i) {
        if (!std::isfinite(raw[e][i])) {
          throw NumericError("rollout: non-finite action at step " + std::to_string(t) + " of " +
                             std::string(problem_name(spec.problem)) + " task " +
                             std::to_string(spec.task_id));
        }
      }
      const Action a = clip_action(std::span<const double>(raw[e].data(), d_a));
      const StepResult r = live.env.step(a);
      live.result.trajectory.states.push_back(live.raw_obs);
      live.result.trajectory.actions.push_back(a);
      live.result.trajectory.rewards.push_back(r.reward);
      live.actions.push_back(layout.pad_action(a));
      if (r.done) continue;
      live.result.rtg_track.push_back(live.result.rtg_track.back() - r.reward);
      live.states.push_back(normalized_obs(r.next_state));
      live.raw_obs = r.next_state;
    }
  }

  std::vector<EpisodeResult> out;
  out.reserve(n);
  for (Live& live : eps) {
    Trajectory& tr = live.result.trajectory;
    tr = make_trajectory(std::move(tr.states), std::move(tr.actions), std::move(tr.rewards));
    live.result.total_return = tr.total_return;
    out.push_back(std::move(live.result));
  }
  return out;
}

SegmentPolicy model_policy(const DecisionTransformer<float>& model,
                           std::vector<AssembledPrompt<float>> prompts) {
  return [&model, prompts = std::move(prompts)](std::span<const Segment> segments) {
    const NoGradGuard no_grad;
    const std::size_t K = model.config().context_len;
    const std::size_t d_a = model.config().action_dim;
    const Tensor<float> pred = model.forward(model.embed(segments, prompts), false, nullptr);
    const auto values = pred.values();
    std::vector<std::vector<double>> out;
    for (std::size_t e = 0; e < segments.size(); ++e) {
      const float* row = values.data() + (e * K + (K - 1)) * d_a;
      out.emplace_back(row, row + d_a);
    }
    return out;
  };
}

std::vector<EpisodeResult> rollout_episodes(const DecisionTransformer<float>& model,
                                            std::span<const AssembledPrompt<float>> prompts,
                                            const TaskSpec& spec, const InputLayout& layout,
                                            const InputNormalizer& norm, double target_return,
                                            std::span<const std::uint64_t> seeds) {
  if (prompts.size() != seeds.size()) throw ContractError("rollout: one prompt per episode");
  const ModelConfig& cfg = model.config();
  return rollout_with_policy(model_policy(model, {prompts.begin(), prompts.end()}),
                             {cfg.context_len, cfg.state_dim, cfg.action_dim}, spec, layout, norm,
                             target_return, seeds);
}

EpisodeResult rollout_episode(const DecisionTransformer<float>& model,
                              const AssembledPrompt<float>& prompt, const TaskSpec& spec,
                              const InputLayout& layout, const InputNormalizer& norm,
                              double target_return, std::uint64_t seed) {
  return rollout_episodes(model, std::span<const AssembledPrompt<float>>(&prompt, 1), spec, layout,
                          norm, target_return, std::span<const std::uint64_t>(&seed, 1))[0];
}

void EvalReport::finalize() {
  aggregate.clear();
  std::map<std::string, std::vector<double>> scores;
  for (const TaskResult& r : per_task) scores[r.split].push_back(r.normalized_score);
  for (const auto& [split, v] : scores) {
    SplitAggregate a;
    a.n_tasks = v.size();
    for (double x : v) a.mean += x;
    a.mean /= static_cast<double>(v.size());
    for (double x : v) a.std += (x - a.mean) * (x - a.mean);
    a.std = std::sqrt(a.std / static_cast<double>(v.size()));
    aggregate[split] = a;
  }
}

nlohmann::ordered_json EvalReport::to_json() const {
  nlohmann::ordered_json tasks = nlohmann::ordered_json::array();
  for (const TaskResult& r : per_task) {
    tasks.push_back({{"task_id", r.task_id},
                     {"problem", r.problem},
                     {"split", r.split},
                     {"mean_return", r.mean_return},
                     {"normalized_score", r.normalized_score},
                     {"n_episodes", r.n_episodes}});
  }
  nlohmann::ordered_json agg = nlohmann::ordered_json::object();
  for (const auto& [split, a] : aggregate) {
    agg[split] = {{"mean", a.mean}, {"std", a.std}, {"n_tasks", a.n_tasks}};
  }
  return {{"per_task", tasks}, {"aggregate", agg}};
}

EvalReport evaluate_tasks(const TaskPolicyFactory& make_policy, const WindowShape& window,
                          std::span<const EvalTask> tasks, const std::string& split,
                          const InputLayout& layout, const InputNormalizer& norm,
                          const EvalSettings& settings) {
  if (settings.episodes_per_task < 1) throw ConfigError("episodes per task must be >= 1");
  EvalReport report;
  for (const EvalTask& task : tasks) {
    // Validate baselines before spending time on rollouts.
    normalized_score(0.0, task.random_return, task.expert_return);
    const auto id = static_cast<std::uint64_t>(task.spec.task_id) +
                    (static_cast<std::uint64_t>(task.spec.problem) << 32);
    std::vector<std::uint64_t> env_seeds, prompt_seeds;
    for (std::size_t e = 0; e < settings.episodes_per_task; ++e) {
      env_seeds.push_back(derive_seed(settings.seed, id, 2 * e));
      prompt_seeds.push_back(derive_seed(settings.seed, id, 2 * e + 1));
    }
    const auto episodes = rollout_with_policy(make_policy(task, prompt_seeds), window, task.spec,
                                              layout, norm, task.spec.target_return, env_seeds);
    TaskResult r;
    r.task_id = task.spec.task_id;
    r.problem = std::string(problem_name(task.spec.problem));
    r.split = split;
    r.n_episodes = episodes.size();
    for (const EpisodeResult& ep : episodes) r.mean_return += ep.total_return;
    r.mean_return /= static_cast<double>(episodes.size());
    r.normalized_score = normalized_score(r.mean_return, task.random_return, task.expert_return);
    report.per_task.push_back(r);
  }
  report.finalize();
  return report;
}

EvalReport evaluate_split(const DecisionTransformer<float>& model, const ParamStore<float>& params,
                          const PromptVariant& variant, std::span<const EvalTask> tasks,
                          const std::string& split, const InputLayout& layout,
                          const InputNormalizer& norm, const EvalSettings& settings) {
  const ModelConfig& cfg = model.config();
  const NoGradGuard no_grad;
  auto factory = [&](const EvalTask& task, std::span<const std::uint64_t> prompt_seeds) {
    TaskSpec model_spec = task.spec;
    model_spec.c = layout.task_param(task.spec);
    std::vector<Trajectory> pool = task.prompt_pool;
    for (Trajectory& tr : pool) {
      for (auto& s : tr.states) s = layout.pad_state(s);
      for (auto& a : tr.actions) a = layout.pad_action(a);
    }
    std::vector<AssembledPrompt<float>> prompts;
    for (std::uint64_t ps : prompt_seeds) {
      Rng prompt_rng(ps);
      prompts.push_back(assemble(variant, model, params, model_spec, pool, prompt_rng, norm));
    }
    return model_policy(model, std::move(prompts));
  };
  return evaluate_tasks(factory, {cfg.context_len, cfg.state_dim, cfg.action_dim}, tasks, split,
                        layout, norm, settings);
}

}  // namespace mpdt
