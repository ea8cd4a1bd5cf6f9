#include "mpdt/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <array>
#include <cmath>

namespace mpdt::ops {

namespace {

template <typename T>
using Node = detail::Node<T>;

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <typename T>
Tensor<T> make_output(Shape shape, std::vector<T> values, std::vector<const Tensor<T>*> inputs,
                      std::function<void(Node<T>&)> backward_fn) {
  Tensor<T> out(std::move(shape), std::move(values), false);
  if (!grad_enabled()) return out;
  bool any = false;
  for (const Tensor<T>* in : inputs) any = any || in->requires_grad();
  if (!any) return out;
  auto& node = *out.node();
  node.requires_grad = true;
  for (const Tensor<T>* in : inputs) node.parents.push_back(in->node());
  node.backward_fn = std::move(backward_fn);
  return out;
}

// Parent gradient buffer, or nullptr when the parent needs none.
template <typename T>
T* parent_grad(Node<T>& out, std::size_t i) {
  auto& p = *out.parents[i];
  if (!p.requires_grad) return nullptr;
  p.ensure_grad();
  return p.grad.data();
}

void require(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

// dst (m x n) = or += op(a) * op(b), with op(a) m x k and op(b) k x n.
// Operands are copied into aligned storage first: Eigen's vectorized inner
// reductions peel by address, so products over arbitrary buffers would round
// differently from run to run.
template <typename T>
void gemm(T* dst, const T* a, bool trans_a, const T* b, bool trans_b, std::size_t m,
          std::size_t k, std::size_t n, bool accumulate) {
  const auto M = static_cast<Eigen::Index>(m);
  const auto K = static_cast<Eigen::Index>(k);
  const auto N = static_cast<Eigen::Index>(n);
  RowMat<T> lhs = trans_a ? RowMat<T>(ConstMatMap<T>(a, K, M).transpose())
                          : RowMat<T>(ConstMatMap<T>(a, M, K));
  RowMat<T> rhs = trans_b ? RowMat<T>(ConstMatMap<T>(b, N, K).transpose())
                          : RowMat<T>(ConstMatMap<T>(b, K, N));
  RowMat<T> prod(M, N);
  prod.noalias() = lhs * rhs;
  if (accumulate) {
    MatMap<T>(dst, M, N) += prod;
  } else {
    MatMap<T>(dst, M, N) = prod;
  }
}

}  // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.rank() >= 2 && b.rank() >= 2,
          "matmul: operands need rank >= 2, got " + shape_str(a.shape()) + " and " +
              shape_str(b.shape()));
  const std::size_t k = a.shape().back();
  const std::size_t m = a.dim(a.rank() - 2);
  const std::size_t bk = b.dim(b.rank() - 2);
  const std::size_t n = b.shape().back();
  require(k == bk, "matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " +
                       shape_str(b.shape()));
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(n);

  if (b.rank() == 2) {
    const std::size_t rows = a.numel() / k;
    std::vector<T> out(rows * n);
    gemm(out.data(), a.values().data(), false, b.values().data(), false, rows, k, n, false);
    return make_output<T>(std::move(out_shape), std::move(out), {&a, &b},
                          [rows, k, n](Node<T>& o) {
                            if (T* ga = parent_grad(o, 0)) {
                              gemm(ga, o.grad.data(), false, o.parents[1]->values.data(), true,
                                   rows, n, k, true);
                            }
                            if (T* gb = parent_grad(o, 1)) {
                              gemm(gb, o.parents[0]->values.data(), true, o.grad.data(), false, k,
                                   rows, n, true);
                            }
                          });
  }

  require(a.rank() == b.rank() &&
              std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin()),
          "matmul: batch dimensions differ, " + shape_str(a.shape()) + " x " +
              shape_str(b.shape()));
  const std::size_t batch = a.numel() / (m * k);
  std::vector<T> out(batch * m * n);
  for (std::size_t i = 0; i < batch; ++i) {
    gemm(out.data() + i * m * n, a.values().data() + i * m * k, false,
         b.values().data() + i * k * n, false, m, k, n, false);
  }
  return make_output<T>(std::move(out_shape), std::move(out), {&a, &b},
                        [batch, m, k, n](Node<T>& o) {
                          T* ga = parent_grad(o, 0);
                          T* gb = parent_grad(o, 1);
                          const T* av = o.parents[0]->values.data();
                          const T* bv = o.parents[1]->values.data();
                          for (std::size_t i = 0; i < batch; ++i) {
                            const T* dy = o.grad.data() + i * m * n;
                            if (ga) gemm(ga + i * m * k, dy, false, bv + i * k * n, true, m, n, k, true);
                            if (gb) gemm(gb + i * k * n, av + i * m * k, true, dy, false, k, m, n, true);
                          }
                        });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() == b.shape()) {
    std::vector<T> out(a.numel());
    const auto av = a.values();
    const auto bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    return make_output<T>(a.shape(), std::move(out), {&a, &b}, [](Node<T>& o) {
      for (std::size_t p = 0; p < 2; ++p) {
        if (T* g = parent_grad(o, p)) {
          for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
        }
      }
    });
  }
  require(b.rank() == 1 && b.dim(0) == a.shape().back(),
          "add: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
              " are neither equal nor a last-dimension bias");
  const std::size_t width = b.dim(0);
  const std::size_t rows = a.numel() / width;
  std::vector<T> out(a.numel());
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < width; ++j) out[r * width + j] = av[r * width + j] + bv[j];
  }
  return make_output<T>(a.shape(), std::move(out), {&a, &b}, [rows, width](Node<T>& o) {
    if (T* ga = parent_grad(o, 0)) {
      for (std::size_t i = 0; i < o.grad.size(); ++i) ga[i] += o.grad[i];
    }
    if (T* gb = parent_grad(o, 1)) {
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < width; ++j) gb[j] += o.grad[r * width + j];
      }
    }
  });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T s) {
  std::vector<T> out(a.values().begin(), a.values().end());
  for (T& v : out) v *= s;
  return make_output<T>(a.shape(), std::move(out), {&a}, [s](Node<T>& o) {
    if (T* g = parent_grad(o, 0)) {
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += s * o.grad[i];
    }
  });
}

template <typename T>
Tensor<T> concat(std::span<const Tensor<T>> parts, std::size_t axis) {
  require(!parts.empty(), "concat: no inputs");
  const Shape& first = parts[0].shape();
  require(axis < first.size(), "concat: axis " + std::to_string(axis) + " out of range for " +
                                   shape_str(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  std::vector<std::size_t> widths;
  std::vector<const Tensor<T>*> inputs;
  std::size_t inner = 1;
  for (std::size_t d = axis + 1; d < first.size(); ++d) inner *= first[d];
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == first[d];
    require(ok, "concat: " + shape_str(s) + " does not match " + shape_str(first) +
                    " outside axis " + std::to_string(axis));
    out_shape[axis] += s[axis];
    widths.push_back(s[axis] * inner);
    inputs.push_back(&p);
  }
  std::size_t outer = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= first[d];
  const std::size_t row = out_shape[axis] * inner;
  std::vector<T> out(outer * row);
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const T* src = parts[p].values().data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(src + o * widths[p], widths[p], out.data() + o * row + offset);
    }
    offset += widths[p];
  }
  return make_output<T>(std::move(out_shape), std::move(out), inputs,
                        [widths, outer, row](Node<T>& o) {
                          std::size_t off = 0;
                          for (std::size_t p = 0; p < widths.size(); ++p) {
                            if (T* g = parent_grad(o, p)) {
                              for (std::size_t r = 0; r < outer; ++r) {
                                const T* src = o.grad.data() + r * row + off;
                                T* dst = g + r * widths[p];
                                for (std::size_t j = 0; j < widths[p]; ++j) dst[j] += src[j];
                              }
                            }
                            off += widths[p];
                          }
                        });
}

template <typename T>
Tensor<T> slice(const Tensor<T>& a, std::size_t axis, std::size_t begin, std::size_t end) {
  require(axis < a.rank(), "slice: axis " + std::to_string(axis) + " out of range for " +
                               shape_str(a.shape()));
  require(begin < end && end <= a.dim(axis),
          "slice: range [" + std::to_string(begin) + ", " + std::to_string(end) +
              ") invalid for dimension " + std::to_string(a.dim(axis)) + " of " +
              shape_str(a.shape()));
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= a.dim(d);
  for (std::size_t d = axis + 1; d < a.rank(); ++d) inner *= a.dim(d);
  const std::size_t src_row = a.dim(axis) * inner;
  const std::size_t dst_row = (end - begin) * inner;
  const std::size_t off = begin * inner;
  Shape out_shape = a.shape();
  out_shape[axis] = end - begin;
  std::vector<T> out(outer * dst_row);
  const T* src = a.values().data();
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(src + o * src_row + off, dst_row, out.data() + o * dst_row);
  }
  return make_output<T>(std::move(out_shape), std::move(out), {&a},
                        [outer, src_row, dst_row, off](Node<T>& o) {
                          if (T* g = parent_grad(o, 0)) {
                            for (std::size_t r = 0; r < outer; ++r) {
                              for (std::size_t j = 0; j < dst_row; ++j) {
                                g[r * src_row + off + j] += o.grad[r * dst_row + j];
                              }
                            }
                          }
                        });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  require(shape_numel(shape) == a.numel(),
          "reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  std::vector<T> out(a.values().begin(), a.values().end());
  return make_output<T>(std::move(shape), std::move(out), {&a}, [](Node<T>& o) {
    if (T* g = parent_grad(o, 0)) {
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
    }
  });
}

template <typename T>
Tensor<T> embedding_lookup(const Tensor<T>& table, std::span<const std::size_t> indices,
                           const Shape& index_shape) {
  require(table.rank() == 2, "embedding_lookup: table must be [N, h], got " +
                                 shape_str(table.shape()));
  require(shape_numel(index_shape) == indices.size(),
          "embedding_lookup: index shape " + shape_str(index_shape) + " does not hold " +
              std::to_string(indices.size()) + " indices");
  const std::size_t rows = table.dim(0);
  const std::size_t h = table.dim(1);
  std::vector<T> out(indices.size() * h);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    require(indices[i] < rows, "embedding_lookup: index " + std::to_string(indices[i]) +
                                   " out of range for table with " + std::to_string(rows) +
                                   " rows");
    std::copy_n(table.values().data() + indices[i] * h, h, out.data() + i * h);
  }
  Shape out_shape = index_shape;
  out_shape.push_back(h);
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return make_output<T>(std::move(out_shape), std::move(out), {&table},
                        [idx = std::move(idx), h](Node<T>& o) {
                          if (T* g = parent_grad(o, 0)) {
                            for (std::size_t i = 0; i < idx.size(); ++i) {
                              for (std::size_t j = 0; j < h; ++j) g[idx[i] * h + j] += o.grad[i * h + j];
                            }
                          }
                        });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
  const std::size_t h = x.shape().back();
  require(gain.shape() == Shape{h} && bias.shape() == Shape{h},
          "layer_norm: gain/bias must be [" + std::to_string(h) + "], got " +
              shape_str(gain.shape()) + " and " + shape_str(bias.shape()));
  const std::size_t rows = x.numel() / h;
  std::vector<T> out(x.numel());
  std::vector<T> xhat(x.numel());
  std::vector<T> rstd(rows);
  const T* xv = x.values().data();
  const T* gv = gain.values().data();
  const T* bv = bias.values().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv + r * h;
    T mean = 0;
    for (std::size_t j = 0; j < h; ++j) mean += row[j];
    mean /= T(h);
    T var = 0;
    for (std::size_t j = 0; j < h; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= T(h);
    rstd[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < h; ++j) {
      xhat[r * h + j] = (row[j] - mean) * rstd[r];
      out[r * h + j] = xhat[r * h + j] * gv[j] + bv[j];
    }
  }
  return make_output<T>(
      x.shape(), std::move(out), {&x, &gain, &bias},
      [rows, h, xhat = std::move(xhat), rstd = std::move(rstd)](Node<T>& o) {
        const T* dy = o.grad.data();
        const T* gv = o.parents[1]->values.data();
        T* gx = parent_grad(o, 0);
        T* gg = parent_grad(o, 1);
        T* gb = parent_grad(o, 2);
        for (std::size_t r = 0; r < rows; ++r) {
          const T* dyr = dy + r * h;
          const T* xh = xhat.data() + r * h;
          if (gg || gb) {
            for (std::size_t j = 0; j < h; ++j) {
              if (gg) gg[j] += dyr[j] * xh[j];
              if (gb) gb[j] += dyr[j];
            }
          }
          if (gx) {
            T mean_d = 0, mean_dx = 0;
            for (std::size_t j = 0; j < h; ++j) {
              const T d = dyr[j] * gv[j];
              mean_d += d;
              mean_dx += d * xh[j];
            }
            mean_d /= T(h);
            mean_dx /= T(h);
            for (std::size_t j = 0; j < h; ++j) {
              gx[r * h + j] += rstd[r] * (dyr[j] * gv[j] - mean_d - xh[j] * mean_dx);
            }
          }
        }
      });
}

template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x) {
  const std::size_t h = x.shape().back();
  const std::size_t rows = x.numel() / h;
  std::vector<T> out(x.numel());
  const T* xv = x.values().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv + r * h;
    T* y = out.data() + r * h;
    const T mx = *std::max_element(row, row + h);
    T total = 0;
    for (std::size_t j = 0; j < h; ++j) {
      y[j] = std::exp(row[j] - mx);
      total += y[j];
    }
    for (std::size_t j = 0; j < h; ++j) y[j] /= total;
  }
  return make_output<T>(x.shape(), out, {&x}, [rows, h, y = out](Node<T>& o) {
    if (T* g = parent_grad(o, 0)) {
      for (std::size_t r = 0; r < rows; ++r) {
        const T* yr = y.data() + r * h;
        const T* dy = o.grad.data() + r * h;
        T dot = 0;
        for (std::size_t j = 0; j < h; ++j) dot += dy[j] * yr[j];
        for (std::size_t j = 0; j < h; ++j) g[r * h + j] += yr[j] * (dy[j] - dot);
      }
    }
  });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(x.values().begin(), x.values().end());
  for (T& v : out) v = v > T(0) ? v : T(0);
  return make_output<T>(x.shape(), std::move(out), {&x}, [](Node<T>& o) {
    if (T* g = parent_grad(o, 0)) {
      const T* xv = o.parents[0]->values.data();
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += xv[i] > T(0) ? o.grad[i] : T(0);
    }
  });
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, T p, Rng& rng, bool train) {
  if (!(p >= T(0) && p < T(1))) {
    throw ParameterError("dropout: probability must be in [0, 1), got " + std::to_string(p));
  }
  if (!train || p == T(0)) return x;
  const T scale = T(1) / (T(1) - p);
  // Four 16-bit draws per engine call.
  const auto threshold = static_cast<std::uint32_t>(std::lround((1.0 - static_cast<double>(p)) * 65536.0));
  std::vector<T> factor(x.numel());
  std::vector<T> out(x.numel());
  const T* xv = x.values().data();
  std::uint64_t bits = 0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (i % 4 == 0) bits = rng();
    factor[i] = static_cast<std::uint32_t>(bits & 0xFFFFu) < threshold ? scale : T(0);
    bits >>= 16;
    out[i] = xv[i] * factor[i];
  }
  return make_output<T>(x.shape(), std::move(out), {&x},
                        [factor = std::move(factor)](Node<T>& o) {
                          if (T* g = parent_grad(o, 0)) {
                            for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += factor[i] * o.grad[i];
                          }
                        });
}

template <typename T>
Tensor<T> masked_fill(const Tensor<T>& x, std::span<const std::uint8_t> mask, T value) {
  require(mask.size() == x.numel(), "masked_fill: mask has " + std::to_string(mask.size()) +
                                        " entries for tensor " + shape_str(x.shape()));
  std::vector<T> out(x.values().begin(), x.values().end());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (mask[i]) out[i] = value;
  }
  std::vector<std::uint8_t> m(mask.begin(), mask.end());
  return make_output<T>(x.shape(), std::move(out), {&x}, [m = std::move(m)](Node<T>& o) {
    if (T* g = parent_grad(o, 0)) {
      for (std::size_t i = 0; i < o.grad.size(); ++i) {
        if (!m[i]) g[i] += o.grad[i];
      }
    }
  });
}

template <typename T>
Tensor<T> transpose_last2(const Tensor<T>& x) {
  require(x.rank() >= 2, "transpose_last2: rank >= 2 required, got " + shape_str(x.shape()));
  const std::size_t m = x.dim(x.rank() - 2);
  const std::size_t n = x.shape().back();
  const std::size_t batch = x.numel() / (m * n);
  Shape out_shape = x.shape();
  std::swap(out_shape[out_shape.size() - 1], out_shape[out_shape.size() - 2]);
  std::vector<T> out(x.numel());
  for (std::size_t b = 0; b < batch; ++b) {
    MatMap<T>(out.data() + b * m * n, n, m) =
        ConstMatMap<T>(x.values().data() + b * m * n, m, n).transpose();
  }
  return make_output<T>(std::move(out_shape), std::move(out), {&x},
                        [batch, m, n](Node<T>& o) {
                          if (T* g = parent_grad(o, 0)) {
                            for (std::size_t b = 0; b < batch; ++b) {
                              MatMap<T>(g + b * m * n, m, n) +=
                                  ConstMatMap<T>(o.grad.data() + b * m * n, n, m).transpose();
                            }
                          }
                        });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = 0;
  for (T v : x.values()) total += v;
  return make_output<T>(Shape{1}, std::vector<T>{total}, {&x}, [](Node<T>& o) {
    if (T* g = parent_grad(o, 0)) {
      const std::size_t n = o.parents[0]->values.size();
      for (std::size_t i = 0; i < n; ++i) g[i] += o.grad[0];
    }
  });
}

template <typename T>
Tensor<T> mean_squared_error(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(), "mean_squared_error: shapes differ, " + shape_str(a.shape()) +
                                      " vs " + shape_str(b.shape()));
  const auto av = a.values();
  const auto bv = b.values();
  T total = 0;
  for (std::size_t i = 0; i < av.size(); ++i) total += (av[i] - bv[i]) * (av[i] - bv[i]);
  const T n = T(av.size());
  return make_output<T>(Shape{1}, std::vector<T>{total / n}, {&a, &b}, [n](Node<T>& o) {
    const T* av = o.parents[0]->values.data();
    const T* bv = o.parents[1]->values.data();
    const std::size_t count = o.parents[0]->values.size();
    const T scale = T(2) * o.grad[0] / n;
    if (T* ga = parent_grad(o, 0)) {
      for (std::size_t i = 0; i < count; ++i) ga[i] += scale * (av[i] - bv[i]);
    }
    if (T* gb = parent_grad(o, 1)) {
      for (std::size_t i = 0; i < count; ++i) gb[i] -= scale * (av[i] - bv[i]);
    }
  });
}

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::matmul: return "matmul";
    case OpKind::add: return "add";
    case OpKind::mul_scalar: return "mul_scalar";
    case OpKind::concat: return "concat";
    case OpKind::slice: return "slice";
    case OpKind::embedding_lookup: return "embedding_lookup";
    case OpKind::layer_norm: return "layer_norm";
    case OpKind::softmax_lastdim: return "softmax_lastdim";
    case OpKind::relu: return "relu";
    case OpKind::dropout: return "dropout";
    case OpKind::masked_fill: return "masked_fill";
    case OpKind::transpose_last2: return "transpose_last2";
    case OpKind::sum: return "sum";
    case OpKind::mean_squared_error: return "mean_squared_error";
  }
  return "unknown";
}

std::span<const OpKind> all_op_kinds() {
  static constexpr std::array kinds{
      OpKind::matmul,          OpKind::add,         OpKind::mul_scalar,
      OpKind::concat,          OpKind::slice,       OpKind::embedding_lookup,
      OpKind::layer_norm,      OpKind::softmax_lastdim, OpKind::relu,
      OpKind::dropout,         OpKind::masked_fill, OpKind::transpose_last2,
      OpKind::sum,             OpKind::mean_squared_error,
  };
  return kinds;
}

template <typename T>
Tensor<T> forward_op(OpKind kind, std::span<const Tensor<T>> inputs, const OpAttrs& attrs) {
  auto need = [&](std::size_t n) {
    if (inputs.size() != n) {
      throw ShapeError(std::string(op_name(kind)) + ": expected " + std::to_string(n) +
                       " inputs, got " + std::to_string(inputs.size()));
    }
  };
  switch (kind) {
    case OpKind::matmul: need(2); return matmul(inputs[0], inputs[1]);
    case OpKind::add: need(2); return add(inputs[0], inputs[1]);
    case OpKind::mul_scalar: need(1); return mul_scalar(inputs[0], T(attrs.scalar));
    case OpKind::concat: return concat(inputs, attrs.axis);
    case OpKind::slice: need(1); return slice(inputs[0], attrs.axis, attrs.begin, attrs.end);
    case OpKind::embedding_lookup:
      need(1);
      return embedding_lookup(inputs[0], std::span<const std::size_t>(attrs.indices),
                              attrs.index_shape);
    case OpKind::layer_norm: need(3); return layer_norm(inputs[0], inputs[1], inputs[2], T(attrs.eps));
    case OpKind::softmax_lastdim: need(1); return softmax_lastdim(inputs[0]);
    case OpKind::relu: need(1); return relu(inputs[0]);
    case OpKind::dropout: {
      need(1);
      if (attrs.train && attrs.rng == nullptr) throw ParameterError("dropout: train mode needs an rng");
      Rng fallback(0);
      return dropout(inputs[0], T(attrs.p), attrs.rng ? *attrs.rng : fallback, attrs.train);
    }
    case OpKind::masked_fill:
      need(1);
      return masked_fill(inputs[0], std::span<const std::uint8_t>(attrs.mask), T(attrs.scalar));
    case OpKind::transpose_last2: need(1); return transpose_last2(inputs[0]);
    case OpKind::sum: need(1); return sum(inputs[0]);
    case OpKind::mean_squared_error: need(2); return mean_squared_error(inputs[0], inputs[1]);
  }
  throw ShapeError("forward_op: unknown op kind");
}

#define MPDT_INSTANTIATE_OPS(T)                                                              \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> mul_scalar(const Tensor<T>&, T);                                        \
  template Tensor<T> concat(std::span<const Tensor<T>>, std::size_t);                        \
  template Tensor<T> slice(const Tensor<T>&, std::size_t, std::size_t, std::size_t);         \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                       \
  template Tensor<T> embedding_lookup(const Tensor<T>&, std::span<const std::size_t>,        \
                                      const Shape&);                                         \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);    \
  template Tensor<T> softmax_lastdim(const Tensor<T>&);                                      \
  template Tensor<T> relu(const Tensor<T>&);                                                 \
  template Tensor<T> dropout(const Tensor<T>&, T, Rng&, bool);                               \
  template Tensor<T> masked_fill(const Tensor<T>&, std::span<const std::uint8_t>, T);        \
  template Tensor<T> transpose_last2(const Tensor<T>&);                                      \
  template Tensor<T> sum(const Tensor<T>&);                                                  \
  template Tensor<T> mean_squared_error(const Tensor<T>&, const Tensor<T>&);                 \
  template Tensor<T> forward_op(OpKind, std::span<const Tensor<T>>, const OpAttrs&);

MPDT_INSTANTIATE_OPS(float)
MPDT_INSTANTIATE_OPS(double)

}  // namespace mpdt::ops
