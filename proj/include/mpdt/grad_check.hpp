#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mpdt/param_store.hpp"
#include "mpdt/random.hpp"

namespace mpdt {

struct GradProbe {
  std::string name;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double relative_error = 0.0;
};

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::vector<GradProbe> probes;
};

// |a - n| / max(1e-12, |a| + |n|)
double relative_error(double analytic, double numeric);

// Compares backward() against central differences (f(p+h) - f(p-h)) / 2h on
// n_probes scalar entries. Probes cycle through the parameter tensors in
// store order so every tensor is covered once n_probes >= store.size();
// the entry within a tensor is drawn from rng. loss_fn must be deterministic.
template <typename T>
GradCheckResult finite_difference_check(const std::function<Tensor<T>()>& loss_fn,
                                        ParamStore<T>& store, std::size_t n_probes, double step,
                                        Rng& rng);

extern template GradCheckResult finite_difference_check<float>(
    const std::function<Tensor<float>()>&, ParamStore<float>&, std::size_t, double, Rng&);
extern template GradCheckResult finite_difference_check<double>(
    const std::function<Tensor<double>()>&, ParamStore<double>&, std::size_t, double, Rng&);

}  // namespace mpdt
