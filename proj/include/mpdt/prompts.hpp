#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string_view>

#include "mpdt/data.hpp"
#include "mpdt/model.hpp"
#include "mpdt/param_store.hpp"

namespace mpdt {

enum class PromptTag { task_learned, task, pure_learned, trajectory, none };

std::string_view prompt_tag_name(PromptTag tag);
PromptTag parse_prompt_tag(std::string_view name);
const std::array<PromptTag, 5>& all_prompt_tags();

struct PromptVariant {
  PromptTag tag = PromptTag::task_learned;
  std::size_t learned_len = 0;    // n, tokens per block z_i
  std::size_t traj_episodes = 1;  // J
  std::size_t traj_seg_len = 2;   // H

  void validate() const;
  std::size_t prompt_length() const;
  bool uses_task_param() const { return tag == PromptTag::task_learned || tag == PromptTag::task; }
  bool uses_learned() const {
    return (tag == PromptTag::task_learned || tag == PromptTag::pure_learned) && learned_len > 0;
  }
};

inline constexpr std::array<const char*, 3> kPromptBlockNames{"prompt_z1", "prompt_z2", "prompt_z3"};

// Registers prompt_z1..z3 ([n, h], N(0, 0.02^2)) in the store. n = 0 registers nothing.
template <typename T>
void init_learned_prompt(std::size_t n, std::size_t h, std::uint64_t seed, ParamStore<T>& params);

// Handles to the three learned blocks; empty when none are registered.
template <typename T>
std::vector<Tensor<T>> learned_blocks(const ParamStore<T>& params);

// c embedded once and replicated: [3, h].
template <typename T>
Tensor<T> make_task_prompt(const DecisionTransformer<T>& model, std::span<const double> c);

// J episodes drawn uniformly from the pool, first H steps of each: [3 H J, h].
// Episodes shorter than H are skipped.
template <typename T>
Tensor<T> sample_trajectory_prompt(const DecisionTransformer<T>& model,
                                   std::span<const Trajectory> pool, std::size_t J, std::size_t H,
                                   Rng& rng, const InputNormalizer& norm);

template <typename T>
AssembledPrompt<T> assemble(const PromptVariant& variant, const DecisionTransformer<T>& model,
                            const ParamStore<T>& params, const TaskSpec& task,
                            std::span<const Trajectory> pool, Rng& rng,
                            const InputNormalizer& norm);

}  // namespace mpdt
