#pragma once

#include <cstddef>
#include <vector>

#include "endonet/tensor/graph.hpp"
#include "endonet/tensor/tensor.hpp"

// Differentiable operations. Each op computes its output eagerly and, when
// a graph is active on the calling thread and any input requires grad,
// records a backward closure on that graph. All ops are instantiated for
// float and double.
namespace endonet::tensor::ops {

/// a @ b. `b` rank 2 with `a` rank >= 2 flattens a's leading dims; two
/// rank-3 operands are multiplied batch-wise. trans_* transpose the last two
/// dims of the corresponding operand (rank-2 operands only for trans_a).
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool trans_a = false,
                 bool trans_b = false);

struct Conv2dAttrs {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

/// x [N,C,H,W], weight [O,C,kh,kw], bias [O] or undefined.
/// Output spatial extent floor((n + 2p - k) / s) + 1.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 Conv2dAttrs attrs);

template <typename T>
Tensor<T> relu(const Tensor<T>& x);

/// Exact GELU: x * Phi(x).
template <typename T>
Tensor<T> gelu(const Tensor<T>& x);

/// Normalizes over the last axis.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5));

/// Channel axis 1 of a [N,C] or [N,C,H,W] input. In training mode batch
/// statistics are used and the running buffers are updated in place
/// (running_var tracks the unbiased estimate); in eval mode the frozen
/// running statistics are used.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     Tensor<T>& running_mean, Tensor<T>& running_var, bool training,
                     T momentum = T(0.1), T eps = T(1e-5));

/// Max-subtracted softmax along `axis`. Entries of -inf receive weight 0.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis = -1);

/// Full reduction to a scalar (pairwise summation).
template <typename T>
Tensor<T> sum(const Tensor<T>& x);
template <typename T>
Tensor<T> mean(const Tensor<T>& x);
/// Reduction along one axis, which is removed from the output shape.
template <typename T>
Tensor<T> sum(const Tensor<T>& x, int axis);
template <typename T>
Tensor<T> mean(const Tensor<T>& x, int axis);

/// Elementwise with numpy-style broadcasting.
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor);

/// mean((a - b)^2) as a scalar.
template <typename T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b);

/// logits [N,C]; targets in [0,C). Optional per-class weights give
/// sum_i w[t_i] * nll_i / sum_i w[t_i].
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<std::size_t>& targets,
                        const std::vector<T>& class_weights = {});

/// Rows of table [V,D] gathered into [n,D].
template <typename T>
Tensor<T> embedding_lookup(const Tensor<T>& table, const std::vector<std::size_t>& indices);

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis);

/// [begin, end) along `axis`.
template <typename T>
Tensor<T> slice(const Tensor<T>& x, int axis, std::size_t begin, std::size_t end);

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);

struct Pool2dAttrs {
  std::size_t kernel_h = 2;
  std::size_t kernel_w = 2;
  std::size_t stride = 2;
  std::size_t padding = 0;
};

/// Padding cells are excluded from the average.
template <typename T>
Tensor<T> avg_pool(const Tensor<T>& x, Pool2dAttrs attrs);
template <typename T>
Tensor<T> max_pool(const Tensor<T>& x, Pool2dAttrs attrs);

/// [N,C,H,W] -> [N,C] spatial mean.
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x);

/// True when any element is NaN or infinite.
template <typename T>
bool has_non_finite(const Tensor<T>& x);

}  // namespace endonet::tensor::ops
