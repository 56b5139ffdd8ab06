#pragma once

#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mol/tensor.hpp"

namespace mol {

template <typename Scalar>
struct Node {
  Tensor<Scalar> value;
  Tensor<Scalar> grad;  // empty until something flows into it
  bool requires_grad = false;
  std::string op;
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into the inputs.
  std::function<void(Node&)> backward_fn;

  void accumulate(const Tensor<Scalar>& g) {
    if (grad.empty()) {
      grad = g;
    } else {
      grad.data() += g.data();
    }
  }

  template <typename Expr>
  void accumulate_matrix(const Expr& g) {
    if (grad.empty()) {
      grad = Tensor<Scalar>(value.shape());
      grad.matrix() = g;
    } else {
      grad.matrix() += g;
    }
  }
};

// Shallow handle to a graph node; copies alias the same node. Leaves created with
// Var::parameter accumulate gradients across backward calls until cleared.
template <typename Scalar_>
class Var {
 public:
  using Scalar = Scalar_;
  using NodeT = Node<Scalar>;

  Var() = default;
  explicit Var(std::shared_ptr<NodeT> node) : node_(std::move(node)) {}

  static Var constant(Tensor<Scalar> value) {
    auto n = std::make_shared<NodeT>();
    n->value = std::move(value);
    n->op = "const";
    return Var(std::move(n));
  }

  static Var parameter(Tensor<Scalar> value) {
    auto n = std::make_shared<NodeT>();
    n->value = std::move(value);
    n->requires_grad = true;
    n->op = "param";
    return Var(std::move(n));
  }

  bool defined() const { return static_cast<bool>(node_); }
  explicit operator bool() const { return defined(); }

  const Tensor<Scalar>& value() const { return node_->value; }
  Tensor<Scalar>& mutable_value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) const { node_->requires_grad = on; }

  bool has_grad() const { return !node_->grad.empty(); }
  // Zeros when no gradient reached this variable.
  Tensor<Scalar> grad() const {
    return node_->grad.empty() ? Tensor<Scalar>(node_->value.shape()) : node_->grad;
  }
  Tensor<Scalar>& mutable_grad() const {
    if (node_->grad.empty()) node_->grad = Tensor<Scalar>(node_->value.shape());
    return node_->grad;
  }
  void zero_grad() const { node_->grad = Tensor<Scalar>(); }

  const std::shared_ptr<NodeT>& node() const { return node_; }

 private:
  std::shared_ptr<NodeT> node_;
};

using Vard = Var<double>;

// Builds a node for an op result. The node requires grad iff any input does;
// otherwise the backward closure is dropped.
template <typename Scalar>
Var<Scalar> make_result(std::string op, Tensor<Scalar> value,
                        std::vector<std::shared_ptr<Node<Scalar>>> inputs,
                        std::function<void(Node<Scalar>&)> backward_fn) {
  auto n = std::make_shared<Node<Scalar>>();
  n->value = std::move(value);
  n->op = std::move(op);
  for (const auto& in : inputs) n->requires_grad = n->requires_grad || in->requires_grad;
  if (n->requires_grad) {
    n->inputs = std::move(inputs);
    n->backward_fn = std::move(backward_fn);
  }
  return Var<Scalar>(std::move(n));
}

// Evaluation-order record of every grad-requiring node reachable from a root.
template <typename Scalar>
class GradTape {
 public:
  explicit GradTape(const Var<Scalar>& root) {
    if (!root.defined()) throw UsageError("GradTape on undefined variable");
    // Iterative post-order DFS gives a topological order (inputs before users).
    std::unordered_set<const Node<Scalar>*> seen;
    std::vector<std::pair<Node<Scalar>*, std::size_t>> stack;
    if (root.node()->requires_grad) {
      stack.emplace_back(root.node().get(), 0);
      seen.insert(root.node().get());
    }
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        Node<Scalar>* child = node->inputs[next++].get();
        if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
      } else {
        order_.push_back(node);
        stack.pop_back();
      }
    }
  }

  const std::vector<Node<Scalar>*>& order() const { return order_; }

  // Reverse sweep; each node is visited exactly once. Intermediate gradients
  // are released after use, leaf gradients stay.
  void backward(const Tensor<Scalar>& seed) {
    if (order_.empty()) return;
    Node<Scalar>* root = order_.back();
    if (seed.shape() != root->value.shape()) {
      throw DimensionError("backward seed shape " + shape_str(seed.shape()) +
                           " does not match root " + shape_str(root->value.shape()));
    }
    root->accumulate(seed);
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
      Node<Scalar>* node = *it;
      if (!node->backward_fn) continue;
      if (!node->grad.empty()) node->backward_fn(*node);
      node->grad = Tensor<Scalar>();
    }
  }

 private:
  std::vector<Node<Scalar>*> order_;
};

template <typename Scalar>
void backward(const Var<Scalar>& loss) {
  if (loss.value().numel() != 1) {
    throw UsageError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
  }
  GradTape<Scalar> tape(loss);
  tape.backward(Tensor<Scalar>(loss.shape(), Scalar(1)));
}

}  // namespace mol
