#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "mpdt/random.hpp"
#include "mpdt/tensor.hpp"

namespace mpdt::ops {

// a: [..., m, k]. b: [k, n] (shared across leading dims) or [..., k, n] with
// the same leading dims as a.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

// Elementwise add of equal shapes, or bias-add when b is [last dim of a].
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T s);

template <typename T>
Tensor<T> concat(std::span<const Tensor<T>> parts, std::size_t axis);

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  return concat(std::span<const Tensor<T>>(parts), axis);
}

// Half-open range [begin, end) along axis.
template <typename T>
Tensor<T> slice(const Tensor<T>& a, std::size_t axis, std::size_t begin, std::size_t end);

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape);

// Rows of table [N, h] gathered by indices; result shape is index_shape + [h].
template <typename T>
Tensor<T> embedding_lookup(const Tensor<T>& table, std::span<const std::size_t> indices,
                           const Shape& index_shape);

// Normalizes over the last dimension with population variance.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps);

template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x);

template <typename T>
Tensor<T> relu(const Tensor<T>& x);

// Inverted dropout; identity when !train or p == 0.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, T p, Rng& rng, bool train);

// Entries where mask != 0 are replaced by value (and receive no gradient).
template <typename T>
Tensor<T> masked_fill(const Tensor<T>& x, std::span<const std::uint8_t> mask, T value);

template <typename T>
Tensor<T> transpose_last2(const Tensor<T>& x);

template <typename T>
Tensor<T> sum(const Tensor<T>& x);

// mean((a - b)^2) over all elements, shape [1].
template <typename T>
Tensor<T> mean_squared_error(const Tensor<T>& a, const Tensor<T>& b);

enum class OpKind {
  matmul,
  add,
  mul_scalar,
  concat,
  slice,
  embedding_lookup,
  layer_norm,
  softmax_lastdim,
  relu,
  dropout,
  masked_fill,
  transpose_last2,
  sum,
  mean_squared_error,
};

std::string_view op_name(OpKind kind);
std::span<const OpKind> all_op_kinds();

struct OpAttrs {
  std::size_t axis = 0;
  std::size_t begin = 0;
  std::size_t end = 0;
  double scalar = 0.0;  // mul_scalar factor, masked_fill value
  double eps = 1e-5;
  double p = 0.0;
  bool train = false;
  Rng* rng = nullptr;
  std::vector<std::uint8_t> mask;
  std::vector<std::size_t> indices;
  Shape index_shape;
};

// Uniform entry point over the op set; layer_norm takes inputs {x, gain, bias}.
template <typename T>
Tensor<T> forward_op(OpKind kind, std::span<const Tensor<T>> inputs, const OpAttrs& attrs);

}  // namespace mpdt::ops
