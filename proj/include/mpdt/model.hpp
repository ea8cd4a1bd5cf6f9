#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "mpdt/data.hpp"
#include "mpdt/ops.hpp"
#include "mpdt/param_store.hpp"

namespace mpdt {

enum class PromptOrder {
  interleaved,  // [z1, c, z2, c, z3, c]
  grouped,      // [c, c, c, z1, z2, z3]
};

struct ModelConfig {
  std::size_t context_len = 20;
  std::size_t n_layers = 3;
  std::size_t n_heads = 1;
  std::size_t embed_dim = 64;
  double dropout = 0.1;
  std::size_t state_dim = 0;
  std::size_t action_dim = 0;
  std::size_t param_dim = 0;       // 0 when the variant never sees c
  std::size_t max_timestep = 64;
  std::size_t prompt_capacity = 0;  // rows of the prompt-position table
  bool prompt_position_embedding = true;
  PromptOrder prompt_order = PromptOrder::interleaved;

  void validate() const;
};

enum class TokenRole : std::uint8_t { prompt_z, prompt_c, prompt_traj, rtg, state, action };

// Conditioning prefix for one sample. Exactly one of (c_tokens and/or
// z_blocks), traj_tokens, or nothing is populated.
template <typename T>
struct AssembledPrompt {
  Tensor<T> c_tokens;               // [3, h]
  std::vector<Tensor<T>> z_blocks;  // three [n, h] parameter handles
  Tensor<T> traj_tokens;            // [3 H J, h]

  std::size_t length() const;
  std::vector<TokenRole> roles(PromptOrder order) const;
  // Prompt rows in model order, or an undefined tensor when empty.
  Tensor<T> tokens(PromptOrder order) const;
};

// Batched model input: B sequences of identical length L = L_prompt + 3K.
template <typename T>
struct TokenSequence {
  Tensor<T> embeddings;                     // [B, L, h]
  std::vector<std::uint8_t> attention_mask;  // [B, L], 1 = real token
  std::vector<std::int64_t> step_index;      // [B, L], -1 on prompt tokens
  std::vector<TokenRole> token_role;         // [L]
  std::size_t prompt_len = 0;
  std::size_t batch = 0;
  std::size_t context_len = 0;

  std::size_t length() const { return token_role.size(); }
};

// allowed[i * L + j] == 1 iff token i may attend to token j. step_valid (per
// trajectory step, optional) removes padded steps from both sides.
std::vector<std::uint8_t> causal_mask(std::size_t len_prompt, std::size_t K,
                                      std::span<const std::uint8_t> step_valid = {});

// Registers every transformer parameter in a fixed order. Weights ~ N(0, 0.02^2),
// biases zero, norm gains one.
template <typename T>
void init_model_parameters(const ModelConfig& config, ParamStore<T>& params, std::uint64_t seed);

// A stateless view binding a config to parameter handles in a store.
template <typename T>
class DecisionTransformer {
 public:
  DecisionTransformer(ModelConfig config, const ParamStore<T>& params);

  const ModelConfig& config() const { return config_; }

  // [rows, 1] rtg, [rows, d_s] states, [rows, d_a] actions with timestep
  // ids -> [rows, 3, h] per-step (rtg, state, action) token triples.
  Tensor<T> embed_steps(std::span<const double> rtg, std::span<const double> states,
                        std::span<const double> actions, std::span<const std::size_t> timesteps) const;

  // c -> [1, h]
  Tensor<T> embed_task_param(std::span<const double> c) const;

  TokenSequence<T> embed(std::span<const Segment> segments,
                         std::span<const AssembledPrompt<T>> prompts) const;

  // Predicted actions [B, K, d_a] read from each state token's hidden state.
  Tensor<T> forward(const TokenSequence<T>& tokens, bool train, Rng* dropout_rng) const;

 private:
  struct Linear {
    Tensor<T> weight;
    Tensor<T> bias;
    Tensor<T> operator()(const Tensor<T>& x) const { return ops::add(ops::matmul(x, weight), bias); }
  };
  struct Norm {
    Tensor<T> gain;
    Tensor<T> bias;
  };
  struct Block {
    Norm ln_attn;
    Linear query, key, value, proj;
    Norm ln_mlp;
    Linear fc, fc_out;
  };

  Tensor<T> attention(const Block& block, const Tensor<T>& x,
                      const std::vector<std::uint8_t>& blocked, std::size_t batch,
                      std::size_t len, bool train, Rng* rng) const;

  ModelConfig config_;
  Linear embed_rtg_, embed_state_, embed_action_;
  std::optional<Linear> embed_param_;
  Tensor<T> embed_timestep_;
  Tensor<T> embed_prompt_pos_;
  std::vector<Block> blocks_;
  Norm ln_final_;
  Linear action_head_;
};

// embed + forward for a single segment with its prompt; output [K, d_a].
template <typename T>
Tensor<T> predict_actions(const DecisionTransformer<T>& model, const Segment& segment,
                          const AssembledPrompt<T>& prompt, bool train = false,
                          Rng* dropout_rng = nullptr);

// Mean over valid steps of the squared L2 action error.
// predicted/target: [..., K, d_a]; loss_mask: one entry per step.
template <typename T>
Tensor<T> bc_loss(const Tensor<T>& predicted, const Tensor<T>& target,
                  std::span<const std::uint8_t> loss_mask);

// Stacks the segments' target actions into [B, K, d_a].
template <typename T>
Tensor<T> target_actions(std::span<const Segment> segments);

std::vector<std::uint8_t> stacked_loss_mask(std::span<const Segment> segments);

}  // namespace mpdt
