#include "endonet/tensor/graph.hpp"

#include <algorithm>

#include "endonet/common/error.hpp"

namespace endonet::tensor {

std::string_view op_name(OpKind kind) noexcept {
  switch (kind) {
    case OpKind::matmul: return "matmul";
    case OpKind::conv2d: return "conv2d";
    case OpKind::relu: return "relu";
    case OpKind::gelu: return "gelu";
    case OpKind::layer_norm: return "layer_norm";
    case OpKind::batch_norm: return "batch_norm";
    case OpKind::softmax: return "softmax";
    case OpKind::mean: return "mean";
    case OpKind::sum: return "sum";
    case OpKind::add: return "add";
    case OpKind::mul: return "mul";
    case OpKind::mse: return "mse";
    case OpKind::cross_entropy: return "cross_entropy";
    case OpKind::embedding_lookup: return "embedding_lookup";
    case OpKind::concat: return "concat";
    case OpKind::slice: return "slice";
    case OpKind::avg_pool: return "avg_pool";
    case OpKind::max_pool: return "max_pool";
    case OpKind::sub: return "sub";
    case OpKind::scale: return "scale";
    case OpKind::reshape: return "reshape";
  }
  return "unknown";
}

namespace {
template <typename T>
thread_local Graph<T>* g_active = nullptr;
}  // namespace

template <typename T>
Graph<T>* active_graph() noexcept {
  return g_active<T>;
}

template <typename T>
GraphScope<T>::GraphScope(Graph<T>& graph) : previous_(g_active<T>) {
  g_active<T> = &graph;
}

template <typename T>
GraphScope<T>::~GraphScope() {
  g_active<T> = previous_;
}

template <typename T>
void Graph<T>::record(OpKind kind, std::vector<Tensor<T>> inputs, Tensor<T> output,
                      std::function<void()> backward_fn) {
  if (consumed_) {
    throw Error(ErrorCode::GraphConsumed,
                std::string(op_name(kind)) + ": graph already consumed by backward; call reset()");
  }
  output.mark_non_leaf();
  records_.push_back(Record{kind, std::move(inputs), std::move(output), std::move(backward_fn)});
}

template <typename T>
void Graph<T>::backward(const Tensor<T>& loss) {
  if (consumed_) {
    throw Error(ErrorCode::GraphConsumed, "backward: graph was already consumed; re-run forward");
  }
  if (!loss.defined() || loss.numel() != 1) {
    throw Error(ErrorCode::NonScalarLoss,
                "backward: loss must be scalar, got shape " +
                    (loss.defined() ? shape_string(loss.shape()) : std::string("<undefined>")));
  }
  if (!loss.requires_grad()) {
    throw Error(ErrorCode::InvalidArgument, "backward: loss does not depend on any parameter");
  }
  Tensor<T> root = loss;
  root.ensure_grad()[0] = T{1};
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    if (!it->output.has_grad()) continue;  // not on a path to the loss
    it->backward();
  }
  for (auto& rec : records_) {
    if (!rec.output.is_leaf()) rec.output.clear_grad();
  }
  records_.clear();
  consumed_ = true;
}

template <typename T>
void Graph<T>::reset() {
  records_.clear();
  consumed_ = false;
}

template class Graph<float>;
template class Graph<double>;
template class GraphScope<float>;
template class GraphScope<double>;
template Graph<float>* active_graph<float>() noexcept;
template Graph<double>* active_graph<double>() noexcept;

}  // namespace endonet::tensor
