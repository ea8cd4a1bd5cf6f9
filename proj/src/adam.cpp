#include "mpdt/adam.hpp"

#include <algorithm>
#include <cmath>

namespace mpdt {

double effective_lr(const AdamConfig& config, std::int64_t step) {
  const double ramp = static_cast<double>(step) / static_cast<double>(config.warmup_steps);
  return config.base_lr * std::min(1.0, ramp);
}

template <typename T>
void adam_step(ParamStore<T>& store, AdamState<T>& opt) {
  auto& entries = store.entries();
  for (const auto& [name, t] : entries) {
    if (!t.has_grad()) throw ContractError("adam_step: parameter '" + name + "' has no gradient");
  }
  if (opt.m.empty()) {
    for (const auto& [_, t] : entries) {
      opt.m.emplace_back(t.numel(), T(0));
      opt.v.emplace_back(t.numel(), T(0));
    }
  }
  if (opt.m.size() != entries.size()) {
    throw ContractError("adam_step: optimizer state tracks " + std::to_string(opt.m.size()) +
                        " parameters, store has " + std::to_string(entries.size()));
  }

  opt.step += 1;
  const AdamConfig& c = opt.config;
  const double lr = effective_lr(c, opt.step);
  const double bias1 = 1.0 - std::pow(c.beta1, static_cast<double>(opt.step));
  const double bias2 = 1.0 - std::pow(c.beta2, static_cast<double>(opt.step));
  const T b1 = T(c.beta1), b2 = T(c.beta2);

  for (std::size_t p = 0; p < entries.size(); ++p) {
    Tensor<T>& param = entries[p].second;
    auto values = param.values_mut();
    auto grad = param.grad_mut();
    auto& m = opt.m[p];
    auto& v = opt.v[p];
    if (m.size() != values.size()) {
      throw ContractError("adam_step: moment size mismatch for '" + entries[p].first + "'");
    }
    for (std::size_t i = 0; i < values.size(); ++i) {
      const T g = grad[i];
      m[i] = b1 * m[i] + (T(1) - b1) * g;
      v[i] = b2 * v[i] + (T(1) - b2) * g * g;
      const double m_hat = static_cast<double>(m[i]) / bias1;
      const double v_hat = static_cast<double>(v[i]) / bias2;
      const double update = m_hat / (std::sqrt(v_hat) + c.eps) + c.weight_decay * values[i];
      values[i] = static_cast<T>(values[i] - lr * update);
    }
    std::fill(grad.begin(), grad.end(), T(0));
  }
}

template void adam_step<float>(ParamStore<float>&, AdamState<float>&);
template void adam_step<double>(ParamStore<double>&, AdamState<double>&);

}  // namespace mpdt
