#include "mpdt/prompts.hpp"

namespace mpdt {

namespace {
constexpr std::array<PromptTag, 5> kTags{PromptTag::task_learned, PromptTag::task,
                                         PromptTag::pure_learned, PromptTag::trajectory,
                                         PromptTag::none};
}  // namespace

std::string_view prompt_tag_name(PromptTag tag) {
  switch (tag) {
    case PromptTag::task_learned: return "task_learned";
    case PromptTag::task: return "task";
    case PromptTag::pure_learned: return "pure_learned";
    case PromptTag::trajectory: return "trajectory";
    case PromptTag::none: return "none";
  }
  return "?";
}

PromptTag parse_prompt_tag(std::string_view name) {
  for (PromptTag t : kTags) {
    if (prompt_tag_name(t) == name) return t;
  }
  throw ConfigError("unknown prompt variant '" + std::string(name) +
                    "' (expected task_learned, task, pure_learned, trajectory or none)");
}

const std::array<PromptTag, 5>& all_prompt_tags() { return kTags; }

void PromptVariant::validate() const {
  if (tag == PromptTag::pure_learned && learned_len == 0) {
    throw ConfigError("pure_learned needs a prompt length n >= 1");
  }
  if (tag == PromptTag::trajectory && (traj_episodes == 0 || traj_seg_len == 0)) {
    throw ConfigError("trajectory prompt needs J >= 1 and H >= 1");
  }
}

std::size_t PromptVariant::prompt_length() const {
  switch (tag) {
    case PromptTag::task_learned: return 3 * (learned_len + 1);
    case PromptTag::task: return 3;
    case PromptTag::pure_learned: return 3 * learned_len;
    case PromptTag::trajectory: return 3 * traj_seg_len * traj_episodes;
    case PromptTag::none: return 0;
  }
  return 0;
}

template <typename T>
void init_learned_prompt(std::size_t n, std::size_t h, std::uint64_t seed, ParamStore<T>& params) {
  if (h == 0) throw ParameterError("init_learned_prompt: h must be >= 1");
  if (n == 0) return;
  Rng rng(seed);
  for (const char* name : kPromptBlockNames) {
    std::vector<T> v(n * h);
    for (T& x : v) x = static_cast<T>(normal(rng, 0.0, 0.02));
    params.add(name, Tensor<T>({n, h}, std::move(v)));
  }
}

template <typename T>
std::vector<Tensor<T>> learned_blocks(const ParamStore<T>& params) {
  std::vector<Tensor<T>> out;
  if (!params.contains(kPromptBlockNames[0])) return out;
  for (const char* name : kPromptBlockNames) out.push_back(params.get(name));
  return out;
}

template <typename T>
Tensor<T> make_task_prompt(const DecisionTransformer<T>& model, std::span<const double> c) {
  const Tensor<T> tok = model.embed_task_param(c);
  return ops::concat(std::vector<Tensor<T>>{tok, tok, tok}, 0);
}

template <typename T>
Tensor<T> sample_trajectory_prompt(const DecisionTransformer<T>& model,
                                   std::span<const Trajectory> pool, std::size_t J, std::size_t H,
                                   Rng& rng, const InputNormalizer& norm) {
  if (pool.empty()) throw ContractError("trajectory prompt: prompt pool is empty");
  if (J == 0 || H == 0) throw ContractError("trajectory prompt: J and H must be >= 1");
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < pool.size(); ++i) {
    if (pool[i].length() >= H) eligible.push_back(i);
  }
  if (eligible.empty()) {
    throw ContractError("trajectory prompt: no pool episode has " + std::to_string(H) + " steps");
  }
  const std::size_t d_s = model.config().state_dim;
  const std::size_t d_a = model.config().action_dim;
  std::vector<double> rtg, states, actions;
  std::vector<std::size_t> timesteps;
  for (std::size_t j = 0; j < J; ++j) {
    const Trajectory& tr = pool[eligible[uniform_index(rng, eligible.size())]];
    for (std::size_t t = 0; t < H; ++t) {
      if (tr.states[t].size() != d_s || tr.actions[t].size() != d_a) {
        throw ContractError("trajectory prompt: pool episode dims do not match the model");
      }
      rtg.push_back(norm.rtg(tr.rtg[t]));
      for (std::size_t i = 0; i < d_s; ++i) states.push_back(norm.state(i, tr.states[t][i]));
      actions.insert(actions.end(), tr.actions[t].begin(), tr.actions[t].end());
      timesteps.push_back(t);
    }
  }
  const std::size_t rows = H * J;
  return ops::reshape(model.embed_steps(rtg, states, actions, timesteps),
                      {3 * rows, model.config().embed_dim});
}

template <typename T>
AssembledPrompt<T> assemble(const PromptVariant& variant, const DecisionTransformer<T>& model,
                            const ParamStore<T>& params, const TaskSpec& task,
                            std::span<const Trajectory> pool, Rng& rng,
                            const InputNormalizer& norm) {
  variant.validate();
  AssembledPrompt<T> out;
  if (variant.uses_task_param()) out.c_tokens = make_task_prompt(model, task.c);
  if (variant.uses_learned()) {
    out.z_blocks = learned_blocks(params);
    if (out.z_blocks.size() != 3 || out.z_blocks[0].dim(0) != variant.learned_len) {
      throw ContractError("learned prompt blocks missing or of the wrong length in the store");
    }
  }
  if (variant.tag == PromptTag::trajectory) {
    if (pool.empty()) throw ConfigError("trajectory variant requires a non-empty prompt pool");
    out.traj_tokens = sample_trajectory_prompt(model, pool, variant.traj_episodes,
                                               variant.traj_seg_len, rng, norm);
  }
  return out;
}

#define MPDT_INSTANTIATE_PROMPTS(T)                                                            \
  template void init_learned_prompt<T>(std::size_t, std::size_t, std::uint64_t, ParamStore<T>&); \
  template std::vector<Tensor<T>> learned_blocks<T>(const ParamStore<T>&);                     \
  template Tensor<T> make_task_prompt<T>(const DecisionTransformer<T>&, std::span<const double>); \
  template Tensor<T> sample_trajectory_prompt<T>(const DecisionTransformer<T>&,                \
                                                 std::span<const Trajectory>, std::size_t,     \
                                                 std::size_t, Rng&, const InputNormalizer&);   \
  template AssembledPrompt<T> assemble<T>(const PromptVariant&, const DecisionTransformer<T>&, \
                                          const ParamStore<T>&, const TaskSpec&,               \
                                          std::span<const Trajectory>, Rng&,                   \
                                          const InputNormalizer&);

MPDT_INSTANTIATE_PROMPTS(float)
MPDT_INSTANTIATE_PROMPTS(double)

}  // namespace mpdt
