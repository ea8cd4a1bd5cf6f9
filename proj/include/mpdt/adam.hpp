#pragma once

#include <cstdint>
#include <vector>

#include "mpdt/param_store.hpp"

namespace mpdt {

struct AdamConfig {
  double base_lr = 1e-4;
  std::int64_t warmup_steps = 1000;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with decoupled weight decay and linear warmup to base_lr. Moments are
// aligned with the store's insertion order.
template <typename T>
struct AdamState {
  AdamConfig config;
  std::int64_t step = 0;
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;

  explicit AdamState(AdamConfig cfg = {}) : config(cfg) {
    if (config.warmup_steps < 1) throw ParameterError("adam: warmup_steps must be positive");
  }
};

// base_lr * min(1, step / warmup_steps) for a 1-based step index.
double effective_lr(const AdamConfig& config, std::int64_t step);

// Applies one update to every parameter and zeroes the grads.
template <typename T>
void adam_step(ParamStore<T>& store, AdamState<T>& opt);

extern template void adam_step<float>(ParamStore<float>&, AdamState<float>&);
extern template void adam_step<double>(ParamStore<double>&, AdamState<double>&);

}  // namespace mpdt
