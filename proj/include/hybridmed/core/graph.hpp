// Reverse-mode autodiff over a dynamically built DAG. Each op allocates a
// Node whose backprop closure scatters the node's gradient into its parents.
// Gradients accumulate in fixed parent order, so a full backward pass is
// bitwise reproducible for a given graph.
#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "hybridmed/core/tensor.hpp"

namespace hybridmed::ag {

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
  Tensor value;
  Tensor grad;  // allocated on first use, same shape as value
  std::vector<Var> parents;
  std::function<void()> backprop;  // empty for leaves / no-grad nodes
  bool requires_grad = false;
  std::string name;  // set for parameters only

  Tensor& ensure_grad() {
    if (grad.size() != value.size()) grad = Tensor(value.shape());
    return grad;
  }
  void zero_grad() {
    if (grad.size() == value.size()) grad.fill(0.0);
  }
};

// Thread-local gradient mode. Ops consulted it at graph build time; with
// grads disabled they emit detached constant nodes (no parents, no closure).
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

struct NoGradGuard {
  NoGradGuard() : prev_(grad_mode()) { grad_mode() = false; }
  ~NoGradGuard() { grad_mode() = prev_; }

 private:
  bool prev_;
};

inline Var leaf(Tensor value, bool requires_grad = false, std::string name = {}) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  n->name = std::move(name);
  return n;
}

inline Var constant(Tensor value) { return leaf(std::move(value), false); }

// Value alias with no graph edges. The KD teacher distribution passes
// through this so no gradient reaches the summarization branch.
inline Var stop_gradient(const Var& x) { return constant(x->value); }

inline bool track(const std::vector<Var>& inputs) {
  if (!grad_mode()) return false;
  for (const auto& v : inputs)
    if (v && v->requires_grad) return true;
  return false;
}

// Makes the result node; wire_backprop is only consulted when some input
// needs gradients and grad mode is on.
inline Var make_node(Tensor value, std::vector<Var> inputs,
                     const std::function<std::function<void()>(Node*)>& wire_backprop) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  if (track(inputs)) {
    n->requires_grad = true;
    n->parents = std::move(inputs);
    n->backprop = wire_backprop(n.get());
  }
  return n;
}

// Runs reverse-mode accumulation from a scalar root. Topological order is
// obtained with an iterative DFS; the reversed order is the visit schedule.
inline void backward(const Var& root) {
  check(root->value.size() == 1, "backward: root must be scalar");
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.push_back({root.get(), 0});
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node* p = node->parents[idx].get();
      ++idx;
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root->ensure_grad();
  root->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backprop) (*it)->backprop();
  }
}

}  // namespace hybridmed::ag
