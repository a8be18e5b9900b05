#pragma once

#include "lunardem/tensor.hpp"

#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace lunardem {

/// A value in the computation graph. Leaves with requires_grad are parameters.
template <typename Scalar>
struct Node {
  Tensor<Scalar> value;
  Tensor<Scalar> grad;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;
  bool requires_grad = false;

  /// Gradient buffer, zero-allocated on first use.
  Tensor<Scalar>& grad_buffer() {
    if (grad.shape() != value.shape()) grad = Tensor<Scalar>(value.shape());
    return grad;
  }
};

template <typename Scalar>
using Var = std::shared_ptr<Node<Scalar>>;

namespace detail {
inline thread_local bool grad_enabled = true;
}

inline bool grad_enabled() { return detail::grad_enabled; }

/// Disables graph recording for the lifetime of the guard.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename Scalar>
Var<Scalar> constant(Tensor<Scalar> value) {
  auto node = std::make_shared<Node<Scalar>>();
  node->value = std::move(value);
  return node;
}

template <typename Scalar>
Var<Scalar> parameter(Tensor<Scalar> value) {
  auto node = constant(std::move(value));
  node->requires_grad = true;
  return node;
}

/// Creates an op output. The backward closure is only attached when some input
/// needs a gradient and recording is enabled.
template <typename Scalar>
Var<Scalar> make_result(Tensor<Scalar> value, std::vector<Var<Scalar>> inputs,
                        std::function<void(Node<Scalar>&)> backward_fn) {
  auto node = constant(std::move(value));
  if (!grad_enabled()) return node;
  bool needs = false;
  for (const auto& in : inputs) needs = needs || (in && in->requires_grad);
  if (!needs) return node;
  node->requires_grad = true;
  node->inputs = std::move(inputs);
  node->backward_fn = std::move(backward_fn);
  return node;
}

/// Reverse-mode sweep seeded with d(objective)/d(root) for each root.
template <typename Scalar>
void backward(const std::vector<std::pair<Var<Scalar>, Tensor<Scalar>>>& seeds) {
  std::vector<Node<Scalar>*> order;
  std::unordered_set<Node<Scalar>*> visited;
  // Iterative post-order DFS; deep networks would overflow a recursive walk.
  std::vector<std::pair<Node<Scalar>*, std::size_t>> stack;
  for (const auto& [root, seed] : seeds) {
    if (!root->requires_grad) continue;
    root->grad_buffer().vec() += seed.vec();
    if (visited.insert(root.get()).second) stack.emplace_back(root.get(), 0);
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        Node<Scalar>* child = node->inputs[next++].get();
        if (child && child->requires_grad && visited.insert(child).second) {
          stack.emplace_back(child, 0);
        }
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
  }
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<Scalar>* node = *it;
    if (node->backward_fn && node->grad.size() > 0) node->backward_fn(*node);
  }
}

template <typename Scalar>
void backward(const Var<Scalar>& root, const Tensor<Scalar>& seed) {
  backward<Scalar>({{root, seed}});
}

}  // namespace lunardem
