#include "mpdt/tensor.hpp"

#include <algorithm>
#include <unordered_set>

namespace mpdt {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return shape.empty() ? 0 : n;
}

std::string shape_str(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

template <typename T>
void backward(const Tensor<T>& loss) {
  using NodeT = detail::Node<T>;
  if (!loss.defined()) throw ContractError("backward: loss tensor is undefined");
  if (loss.shape() != Shape{1}) {
    throw ContractError("backward: loss must have shape [1], got " + shape_str(loss.shape()));
  }
  NodeT* root = loss.node().get();
  if (root->released) {
    throw StateError("backward: graph already consumed; run a new forward pass first");
  }

  // Post-order DFS gives parents before children; walk it in reverse.
  std::vector<NodeT*> order;
  std::unordered_set<NodeT*> visited;
  std::vector<std::pair<NodeT*, std::size_t>> stack{{root, 0}};
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      NodeT* parent = node->parents[next++].get();
      if (visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  if (root->requires_grad) {
    root->ensure_grad();
    root->grad[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      NodeT* node = *it;
      if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
    }
  }

  for (NodeT* node : order) {
    if (node->is_leaf()) continue;
    node->parents.clear();
    node->backward_fn = nullptr;
    node->grad.clear();
    node->grad.shrink_to_fit();
  }
  root->released = true;
}

template void backward<float>(const Tensor<float>&);
template void backward<double>(const Tensor<double>&);

}  // namespace mpdt
