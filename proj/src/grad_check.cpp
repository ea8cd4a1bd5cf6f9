#include "mpdt/grad_check.hpp"

#include <algorithm>
#include <cmath>

namespace mpdt {

double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1e-12, std::abs(analytic) + std::abs(numeric));
}

template <typename T>
GradCheckResult finite_difference_check(const std::function<Tensor<T>()>& loss_fn,
                                        ParamStore<T>& store, std::size_t n_probes, double step,
                                        Rng& rng) {
  if (n_probes < 1) throw ContractError("finite_difference_check: n_probes must be >= 1");
  if (store.size() == 0) throw ContractError("finite_difference_check: empty parameter store");

  auto evaluate = [&]() -> double {
    NoGradGuard no_grad;
    const double v = static_cast<double>(loss_fn().item());
    if (!std::isfinite(v)) throw NumericError("finite_difference_check: loss is not finite");
    return v;
  };

  store.zero_grad();
  Tensor<T> loss = loss_fn();
  if (!std::isfinite(static_cast<double>(loss.item()))) {
    throw NumericError("finite_difference_check: loss is not finite");
  }
  backward(loss);

  GradCheckResult result;
  auto& entries = store.entries();
  for (std::size_t i = 0; i < n_probes; ++i) {
    auto& [name, param] = entries[i % entries.size()];
    const std::size_t idx = uniform_index(rng, param.numel());
    auto values = param.values_mut();
    const T original = values[idx];
    values[idx] = static_cast<T>(original + step);
    const double up = evaluate();
    values[idx] = static_cast<T>(original - step);
    const double down = evaluate();
    values[idx] = original;

    GradProbe probe;
    probe.name = name;
    probe.index = idx;
    probe.analytic = static_cast<double>(param.grad()[idx]);
    probe.numeric = (up - down) / (2.0 * step);
    probe.relative_error = relative_error(probe.analytic, probe.numeric);
    result.max_relative_error = std::max(result.max_relative_error, probe.relative_error);
    result.probes.push_back(std::move(probe));
  }
  store.zero_grad();
  return result;
}

template GradCheckResult finite_difference_check<float>(const std::function<Tensor<float>()>&,
                                                        ParamStore<float>&, std::size_t, double,
                                                        Rng&);
template GradCheckResult finite_difference_check<double>(const std::function<Tensor<double>()>&,
                                                         ParamStore<double>&, std::size_t, double,
                                                         Rng&);

}  // namespace mpdt
