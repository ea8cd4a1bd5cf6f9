#include "mpdt/model.hpp"

#include <cmath>
#include <limits>

namespace mpdt {

void ModelConfig::validate() const {
  if (context_len < 1) throw ConfigError("model: context_len must be >= 1");
  if (n_layers < 1) throw ConfigError("model: n_layers must be >= 1");
  if (n_heads < 1 || embed_dim < 1 || embed_dim % n_heads != 0) {
    throw ConfigError("model: embed_dim " + std::to_string(embed_dim) +
                      " must be a positive multiple of n_heads " + std::to_string(n_heads));
  }
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("model: dropout must be in [0, 1)");
  if (state_dim < 1 || action_dim < 1) throw ConfigError("model: state/action dims must be >= 1");
  if (max_timestep < 1) throw ConfigError("model: max_timestep must be >= 1");
}

template <typename T>
std::size_t AssembledPrompt<T>::length() const {
  std::size_t n = 0;
  if (c_tokens.defined()) n += c_tokens.dim(0);
  for (const auto& z : z_blocks) n += z.dim(0);
  if (traj_tokens.defined()) n += traj_tokens.dim(0);
  return n;
}

template <typename T>
std::vector<TokenRole> AssembledPrompt<T>::roles(PromptOrder order) const {
  std::vector<TokenRole> out;
  if (traj_tokens.defined()) {
    out.assign(traj_tokens.dim(0), TokenRole::prompt_traj);
    return out;
  }
  const bool has_c = c_tokens.defined();
  const std::size_t n_z = z_blocks.empty() ? 0 : z_blocks[0].dim(0);
  if (order == PromptOrder::grouped) {
    if (has_c) out.insert(out.end(), 3, TokenRole::prompt_c);
    out.insert(out.end(), 3 * n_z, TokenRole::prompt_z);
    return out;
  }
  for (std::size_t i = 0; i < 3; ++i) {
    if (!z_blocks.empty()) out.insert(out.end(), n_z, TokenRole::prompt_z);
    if (has_c) out.push_back(TokenRole::prompt_c);
  }
  return out;
}

template <typename T>
Tensor<T> AssembledPrompt<T>::tokens(PromptOrder order) const {
  if (traj_tokens.defined()) return traj_tokens;
  std::vector<Tensor<T>> parts;
  if (order == PromptOrder::grouped) {
    if (c_tokens.defined()) parts.push_back(c_tokens);
    parts.insert(parts.end(), z_blocks.begin(), z_blocks.end());
  } else {
    for (std::size_t i = 0; i < 3; ++i) {
      if (!z_blocks.empty()) parts.push_back(z_blocks[i]);
      if (c_tokens.defined()) parts.push_back(ops::slice(c_tokens, 0, i, i + 1));
    }
  }
  if (parts.empty()) return {};
  if (parts.size() == 1) return parts[0];
  return ops::concat(parts, 0);
}

std::vector<std::uint8_t> causal_mask(std::size_t len_prompt, std::size_t K,
                                      std::span<const std::uint8_t> step_valid) {
  if (!step_valid.empty() && step_valid.size() != K) {
    throw ShapeError("causal_mask: step_valid needs " + std::to_string(K) + " entries");
  }
  const std::size_t L = len_prompt + 3 * K;
  auto valid = [&](std::size_t pos) {
    return pos < len_prompt || step_valid.empty() || step_valid[(pos - len_prompt) / 3] != 0;
  };
  std::vector<std::uint8_t> allowed(L * L, 0);
  for (std::size_t i = 0; i < L; ++i) {
    if (!valid(i)) continue;
    for (std::size_t j = 0; j <= i; ++j) allowed[i * L + j] = valid(j) ? 1 : 0;
  }
  return allowed;
}

namespace {

template <typename T>
Tensor<T> normal_tensor(Shape shape, Rng& rng, double stddev) {
  std::vector<T> v(shape_numel(shape));
  for (T& x : v) x = static_cast<T>(normal(rng, 0.0, stddev));
  return Tensor<T>(std::move(shape), std::move(v));
}

template <typename T>
Tensor<T> from_doubles(Shape shape, std::span<const double> values) {
  return Tensor<T>(std::move(shape), std::vector<T>(values.begin(), values.end()));
}

constexpr double kInitStd = 0.02;
constexpr double kNormEps = 1e-5;
constexpr double kMaskedLogit = -1e30;

}  // namespace

template <typename T>
void init_model_parameters(const ModelConfig& cfg, ParamStore<T>& params, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  const std::size_t h = cfg.embed_dim;
  auto linear = [&](const std::string& name, std::size_t in, std::size_t out) {
    params.add(name + ".weight", normal_tensor<T>({in, out}, rng, kInitStd));
    params.add(name + ".bias", Tensor<T>::zeros({out}));
  };
  auto norm = [&](const std::string& name) {
    params.add(name + ".gain", Tensor<T>({h}, std::vector<T>(h, T(1))));
    params.add(name + ".bias", Tensor<T>::zeros({h}));
  };
  linear("embed_rtg", 1, h);
  linear("embed_state", cfg.state_dim, h);
  linear("embed_action", cfg.action_dim, h);
  if (cfg.param_dim > 0) linear("embed_param", cfg.param_dim, h);
  params.add("embed_timestep", normal_tensor<T>({cfg.max_timestep, h}, rng, kInitStd));
  if (cfg.prompt_capacity > 0 && cfg.prompt_position_embedding) {
    params.add("embed_prompt_pos", normal_tensor<T>({cfg.prompt_capacity, h}, rng, kInitStd));
  }
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const std::string p = "layer" + std::to_string(l);
    norm(p + ".ln_attn");
    linear(p + ".attn.query", h, h);
    linear(p + ".attn.key", h, h);
    linear(p + ".attn.value", h, h);
    linear(p + ".attn.proj", h, h);
    norm(p + ".ln_mlp");
    linear(p + ".mlp.fc", h, 4 * h);
    linear(p + ".mlp.proj", 4 * h, h);
  }
  norm("ln_final");
  linear("action_head", h, cfg.action_dim);
}

template <typename T>
DecisionTransformer<T>::DecisionTransformer(ModelConfig config, const ParamStore<T>& params)
    : config_(std::move(config)) {
  config_.validate();
  auto linear = [&](const std::string& name) {
    return Linear{params.get(name + ".weight"), params.get(name + ".bias")};
  };
  auto norm = [&](const std::string& name) {
    return Norm{params.get(name + ".gain"), params.get(name + ".bias")};
  };
  embed_rtg_ = linear("embed_rtg");
  embed_state_ = linear("embed_state");
  embed_action_ = linear("embed_action");
  if (config_.param_dim > 0) embed_param_ = linear("embed_param");
  embed_timestep_ = params.get("embed_timestep");
  if (config_.prompt_capacity > 0 && config_.prompt_position_embedding) {
    embed_prompt_pos_ = params.get("embed_prompt_pos");
  }
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    const std::string p = "layer" + std::to_string(l);
    blocks_.push_back(Block{norm(p + ".ln_attn"), linear(p + ".attn.query"),
                            linear(p + ".attn.key"), linear(p + ".attn.value"),
                            linear(p + ".attn.proj"), norm(p + ".ln_mlp"), linear(p + ".mlp.fc"),
                            linear(p + ".mlp.proj")});
  }
  ln_final_ = norm("ln_final");
  action_head_ = linear("action_head");

  const std::size_t h = config_.embed_dim;
  auto expect = [&](const Tensor<T>& t, Shape shape, const char* what) {
    if (t.shape() != shape) {
      throw ShapeError(std::string("model parameter ") + what + " has shape " +
                       shape_str(t.shape()) + ", config expects " + shape_str(shape));
    }
  };
  expect(embed_state_.weight, {config_.state_dim, h}, "embed_state.weight");
  expect(embed_action_.weight, {config_.action_dim, h}, "embed_action.weight");
  expect(embed_timestep_, {config_.max_timestep, h}, "embed_timestep");
  expect(action_head_.weight, {h, config_.action_dim}, "action_head.weight");
}

template <typename T>
Tensor<T> DecisionTransformer<T>::embed_steps(std::span<const double> rtg,
                                              std::span<const double> states,
                                              std::span<const double> actions,
                                              std::span<const std::size_t> timesteps) const {
  const std::size_t rows = rtg.size();
  const std::size_t h = config_.embed_dim;
  if (states.size() != rows * config_.state_dim || actions.size() != rows * config_.action_dim ||
      timesteps.size() != rows) {
    throw ShapeError("embed_steps: inputs disagree with " + std::to_string(rows) + " steps of d_s=" +
                     std::to_string(config_.state_dim) + ", d_a=" +
                     std::to_string(config_.action_dim));
  }
  for (std::size_t t : timesteps) {
    if (t >= config_.max_timestep) {
      throw ContractError("timestep " + std::to_string(t) + " exceeds max_timestep " +
                          std::to_string(config_.max_timestep));
    }
  }
  const Tensor<T> time = ops::embedding_lookup(embed_timestep_, timesteps, Shape{rows});
  auto token = [&](const Linear& map, std::span<const double> x, std::size_t width) {
    Tensor<T> e = ops::add(map(from_doubles<T>({rows, width}, x)), time);
    return ops::reshape(e, {rows, 1, h});
  };
  const std::vector<Tensor<T>> parts{token(embed_rtg_, rtg, 1),
                                     token(embed_state_, states, config_.state_dim),
                                     token(embed_action_, actions, config_.action_dim)};
  return ops::concat(parts, 1);
}

template <typename T>
Tensor<T> DecisionTransformer<T>::embed_task_param(std::span<const double> c) const {
  if (!embed_param_) throw ContractError("model was configured without a task-parameter embedding");
  if (c.size() != config_.param_dim) {
    throw ContractError("task parameter has " + std::to_string(c.size()) + " values, model expects " +
                        std::to_string(config_.param_dim));
  }
  return (*embed_param_)(from_doubles<T>({1, c.size()}, c));
}

template <typename T>
TokenSequence<T> DecisionTransformer<T>::embed(std::span<const Segment> segments,
                                               std::span<const AssembledPrompt<T>> prompts) const {
  const std::size_t B = segments.size();
  const std::size_t K = config_.context_len;
  const std::size_t h = config_.embed_dim;
  if (B == 0) throw ContractError("embed: empty batch");
  if (prompts.size() != B) throw ContractError("embed: one prompt per segment required");

  std::vector<double> rtg, states, actions;
  std::vector<std::size_t> timesteps;
  for (const Segment& s : segments) {
    if (s.context_len > K) {
      throw ContractError("segment has " + std::to_string(s.context_len) +
                          " steps, context length is " + std::to_string(K));
    }
    if (s.context_len != K) throw ContractError("segment must be padded to K");
    rtg.insert(rtg.end(), s.rtg.begin(), s.rtg.end());
    states.insert(states.end(), s.states.begin(), s.states.end());
    actions.insert(actions.end(), s.actions.begin(), s.actions.end());
    timesteps.insert(timesteps.end(), s.timesteps.begin(), s.timesteps.end());
  }
  Tensor<T> traj = ops::reshape(embed_steps(rtg, states, actions, timesteps), {B, 3 * K, h});

  TokenSequence<T> seq;
  seq.batch = B;
  seq.context_len = K;
  seq.prompt_len = prompts[0].length();
  const std::size_t Lp = seq.prompt_len;
  seq.token_role = prompts[0].roles(config_.prompt_order);
  for (std::size_t k = 0; k < K; ++k) {
    seq.token_role.insert(seq.token_role.end(), {TokenRole::rtg, TokenRole::state, TokenRole::action});
  }

  if (Lp > 0) {
    std::vector<Tensor<T>> rows;
    for (const auto& p : prompts) {
      if (p.length() != Lp) throw ContractError("embed: prompts in one batch differ in length");
      Tensor<T> tok = p.tokens(config_.prompt_order);
      if (tok.rank() != 2 || tok.dim(1) != h) {
        throw ShapeError("prompt tokens " + shape_str(tok.shape()) + " do not match embed_dim " +
                         std::to_string(h));
      }
      rows.push_back(tok);
    }
    Tensor<T> prefix = ops::reshape(ops::concat(rows, 0), {B, Lp, h});
    if (embed_prompt_pos_.defined()) {
      if (Lp > config_.prompt_capacity) {
        throw ShapeError("prompt of length " + std::to_string(Lp) + " exceeds prompt capacity " +
                         std::to_string(config_.prompt_capacity));
      }
      std::vector<std::size_t> pos(B * Lp);
      for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = i % Lp;
      prefix = ops::add(prefix, ops::embedding_lookup(embed_prompt_pos_, pos, Shape{B, Lp}));
    }
    seq.embeddings = ops::concat(std::vector<Tensor<T>>{prefix, traj}, 1);
  } else {
    seq.embeddings = traj;
  }

  const std::size_t L = Lp + 3 * K;
  seq.attention_mask.assign(B * L, 1);
  seq.step_index.assign(B * L, -1);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t k = 0; k < K; ++k) {
      for (std::size_t r = 0; r < 3; ++r) {
        const std::size_t pos = b * L + Lp + 3 * k + r;
        seq.attention_mask[pos] = segments[b].loss_mask[k];
        seq.step_index[pos] = static_cast<std::int64_t>(segments[b].timesteps[k]);
      }
    }
  }
  return seq;
}

template <typename T>
Tensor<T> DecisionTransformer<T>::attention(const Block& blk, const Tensor<T>& x,
                                            const std::vector<std::uint8_t>& blocked,
                                            std::size_t B, std::size_t L, bool train,
                                            Rng* rng) const {
  const std::size_t H = config_.n_heads;
  const std::size_t dh = config_.embed_dim / H;
  const T p = static_cast<T>(config_.dropout);
  const Tensor<T> q = blk.query(x);
  const Tensor<T> k = blk.key(x);
  const Tensor<T> v = blk.value(x);
  std::vector<Tensor<T>> heads;
  for (std::size_t hd = 0; hd < H; ++hd) {
    auto part = [&](const Tensor<T>& t) { return H == 1 ? t : ops::slice(t, 2, hd * dh, (hd + 1) * dh); };
    Tensor<T> scores = ops::matmul(part(q), ops::transpose_last2(part(k)));
    scores = ops::mul_scalar(scores, static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh))));
    scores = ops::masked_fill(scores, std::span<const std::uint8_t>(blocked), static_cast<T>(kMaskedLogit));
    // Fully blocked rows (padding) come out uniform; zero them explicitly.
    Tensor<T> probs = ops::masked_fill(ops::softmax_lastdim(scores),
                                       std::span<const std::uint8_t>(blocked), T(0));
    if (train) probs = ops::dropout(probs, p, *rng, true);
    heads.push_back(ops::matmul(probs, part(v)));
  }
  Tensor<T> merged = H == 1 ? heads[0] : ops::concat(heads, 2);
  (void)B;
  (void)L;
  return blk.proj(merged);
}

template <typename T>
Tensor<T> DecisionTransformer<T>::forward(const TokenSequence<T>& tokens, bool train,
                                          Rng* rng) const {
  const std::size_t B = tokens.batch;
  const std::size_t L = tokens.length();
  const std::size_t K = tokens.context_len;
  const std::size_t h = config_.embed_dim;
  const std::size_t Lp = tokens.prompt_len;
  const T p = static_cast<T>(config_.dropout);
  if (tokens.embeddings.shape() != Shape{B, L, h}) {
    throw ShapeError("forward: embeddings " + shape_str(tokens.embeddings.shape()) +
                     " do not match batch " + std::to_string(B) + " x length " + std::to_string(L));
  }
  train = train && config_.dropout > 0.0;
  if (train && rng == nullptr) throw ContractError("forward: train mode needs a dropout rng");

  std::vector<std::uint8_t> blocked(B * L * L);
  for (std::size_t b = 0; b < B; ++b) {
    const std::uint8_t* valid = tokens.attention_mask.data() + b * L;
    std::uint8_t* out = blocked.data() + b * L * L;
    for (std::size_t i = 0; i < L; ++i) {
      for (std::size_t j = 0; j < L; ++j) out[i * L + j] = (j <= i && valid[i] && valid[j]) ? 0 : 1;
    }
  }

  auto check_finite = [](const Tensor<T>& t, const std::string& where) {
    for (T v : t.values()) {
      if (!std::isfinite(static_cast<double>(v))) {
        throw NumericError("non-finite activation in " + where);
      }
    }
  };
  auto drop = [&](const Tensor<T>& t) { return train ? ops::dropout(t, p, *rng, true) : t; };

  Tensor<T> x = drop(tokens.embeddings);
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    const Block& blk = blocks_[l];
    const Tensor<T> a =
        ops::layer_norm(x, blk.ln_attn.gain, blk.ln_attn.bias, static_cast<T>(kNormEps));
    x = ops::add(x, drop(attention(blk, a, blocked, B, L, train, rng)));
    const Tensor<T> m = ops::layer_norm(x, blk.ln_mlp.gain, blk.ln_mlp.bias, static_cast<T>(kNormEps));
    x = ops::add(x, drop(blk.fc_out(ops::relu(blk.fc(m)))));
    check_finite(x, "layer " + std::to_string(l));
  }
  x = ops::layer_norm(x, ln_final_.gain, ln_final_.bias, static_cast<T>(kNormEps));

  Tensor<T> traj = Lp > 0 ? ops::slice(x, 1, Lp, L) : x;
  Tensor<T> state_hidden =
      ops::reshape(ops::slice(ops::reshape(traj, {B, K, 3, h}), 2, 1, 2), {B, K, h});
  Tensor<T> out = action_head_(state_hidden);
  check_finite(out, "action head");
  return out;
}

template <typename T>
Tensor<T> predict_actions(const DecisionTransformer<T>& model, const Segment& segment,
                          const AssembledPrompt<T>& prompt, bool train, Rng* dropout_rng) {
  const TokenSequence<T> seq = model.embed(std::span<const Segment>(&segment, 1),
                                           std::span<const AssembledPrompt<T>>(&prompt, 1));
  Tensor<T> out = model.forward(seq, train, dropout_rng);
  return ops::reshape(out, {segment.context_len, model.config().action_dim});
}

template <typename T>
Tensor<T> bc_loss(const Tensor<T>& predicted, const Tensor<T>& target,
                  std::span<const std::uint8_t> loss_mask) {
  if (predicted.shape() != target.shape()) {
    throw ShapeError("bc_loss: predicted " + shape_str(predicted.shape()) + " vs target " +
                     shape_str(target.shape()));
  }
  const std::size_t d_a = predicted.shape().back();
  const std::size_t steps = predicted.numel() / d_a;
  if (loss_mask.size() != steps) {
    throw ShapeError("bc_loss: mask has " + std::to_string(loss_mask.size()) + " entries for " +
                     std::to_string(steps) + " steps");
  }
  std::size_t valid = 0;
  std::vector<std::uint8_t> pad(predicted.numel(), 0);
  for (std::size_t s = 0; s < steps; ++s) {
    if (loss_mask[s]) {
      ++valid;
    } else {
      std::fill_n(pad.begin() + s * d_a, d_a, 1);
    }
  }
  if (valid == 0) throw ContractError("bc_loss: every step is masked");
  const Tensor<T> pred_m = ops::masked_fill(predicted, std::span<const std::uint8_t>(pad), T(0));
  const Tensor<T> tgt_m = ops::masked_fill(target.detach(), std::span<const std::uint8_t>(pad), T(0));
  // mse averages over steps * d_a entries; rescale to a per-valid-step sum over d_a.
  const T scale = static_cast<T>(static_cast<double>(predicted.numel()) / static_cast<double>(valid));
  return ops::mul_scalar(ops::mean_squared_error(pred_m, tgt_m), scale);
}

template <typename T>
Tensor<T> target_actions(std::span<const Segment> segments) {
  if (segments.empty()) throw ContractError("target_actions: empty batch");
  const std::size_t K = segments[0].context_len;
  const std::size_t d_a = segments[0].action_dim;
  std::vector<T> v;
  v.reserve(segments.size() * K * d_a);
  for (const Segment& s : segments) v.insert(v.end(), s.actions.begin(), s.actions.end());
  return Tensor<T>({segments.size(), K, d_a}, std::move(v));
}

std::vector<std::uint8_t> stacked_loss_mask(std::span<const Segment> segments) {
  std::vector<std::uint8_t> out;
  for (const Segment& s : segments) out.insert(out.end(), s.loss_mask.begin(), s.loss_mask.end());
  return out;
}

#define MPDT_INSTANTIATE_MODEL(T)                                                               \
  template struct AssembledPrompt<T>;                                                           \
  template class DecisionTransformer<T>;                                                        \
  template void init_model_parameters<T>(const ModelConfig&, ParamStore<T>&, std::uint64_t);    \
  template Tensor<T> predict_actions<T>(const DecisionTransformer<T>&, const Segment&,          \
                                        const AssembledPrompt<T>&, bool, Rng*);                 \
  template Tensor<T> bc_loss<T>(const Tensor<T>&, const Tensor<T>&,                             \
                                std::span<const std::uint8_t>);                                 \
  template Tensor<T> target_actions<T>(std::span<const Segment>);

MPDT_INSTANTIATE_MODEL(float)
MPDT_INSTANTIATE_MODEL(double)

}  // namespace mpdt
