#pragma once

#include <cstdint>
#include <functional>
#include <string_view>
#include <vector>

#include "endonet/tensor/tensor.hpp"

namespace endonet::tensor {

enum class OpKind : std::uint8_t {
  matmul,
  conv2d,
  relu,
  gelu,
  layer_norm,
  batch_norm,
  softmax,
  mean,
  sum,
  add,
  mul,
  mse,
  cross_entropy,
  embedding_lookup,
  concat,
  slice,
  avg_pool,
  max_pool,
  // helpers that are not part of the public op list but still differentiable
  sub,
  scale,
  reshape,
};

std::string_view op_name(OpKind kind) noexcept;

/// Tape of recorded ops in topological (execution) order. An op is recorded
/// on the thread's active graph when at least one input requires grad.
/// backward() walks the tape once in reverse; afterwards the graph is
/// consumed and its saved activations are released.
template <typename T>
class Graph {
 public:
  struct Record {
    OpKind kind;
    std::vector<Tensor<T>> inputs;
    Tensor<T> output;
    std::function<void()> backward;
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  void record(OpKind kind, std::vector<Tensor<T>> inputs, Tensor<T> output,
              std::function<void()> backward_fn);

  std::size_t size() const noexcept { return records_.size(); }
  bool consumed() const noexcept { return consumed_; }
  const std::vector<Record>& records() const noexcept { return records_; }

  /// Populates grad on every requires-grad leaf reachable from `loss`.
  /// Throws NonScalarLoss for a non-scalar loss and GraphConsumed when
  /// called twice without a fresh forward pass.
  void backward(const Tensor<T>& loss);

  /// Drops the tape and re-arms the graph for another forward pass.
  void reset();

 private:
  std::vector<Record> records_;
  bool consumed_ = false;
};

extern template class Graph<float>;
extern template class Graph<double>;

/// The graph ops record into on this thread, or nullptr.
template <typename T>
Graph<T>* active_graph() noexcept;

/// RAII activation of a graph for the current thread.
template <typename T>
class GraphScope {
 public:
  explicit GraphScope(Graph<T>& graph);
  ~GraphScope();
  GraphScope(const GraphScope&) = delete;
  GraphScope& operator=(const GraphScope&) = delete;

 private:
  Graph<T>* previous_;
};

extern template class GraphScope<float>;
extern template class GraphScope<double>;

/// Convenience wrapper over Graph::backward.
template <typename T>
void backward(Graph<T>& graph, const Tensor<T>& loss) {
  graph.backward(loss);
}

}  // namespace endonet::tensor
