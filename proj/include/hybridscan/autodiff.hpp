#pragma once

#include <functional>
#include <memory>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "hybridscan/tensor.hpp"

namespace hybridscan {

/// One vertex of the reverse-mode tape.
///
/// `backward` reads `grad` (the upstream gradient of this node) and
/// accumulates into the grads of `parents`. Leaves have no parents and no
/// backward function.
template <typename Scalar>
struct Node {
  Tensor<Scalar> value;
  Tensor<Scalar> grad;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
  std::string_view op = "leaf";
  bool requires_grad = false;

  /// Parent `i` if it participates in differentiation, else nullptr.
  Node* input(std::size_t i) const {
    Node* p = parents[i].get();
    return p->requires_grad ? p : nullptr;
  }

  void accumulate(const Tensor<Scalar>& g) {
    if (!grad.defined()) {
      grad = g;
    } else {
      grad.array() += g.array();
    }
  }

  void accumulate(Tensor<Scalar>&& g) {
    if (!grad.defined()) {
      grad = std::move(g);
    } else {
      grad.array() += g.array();
    }
  }
};

/// Shared handle onto a tape node. Copies alias the same node.
template <typename Scalar>
class Var {
 public:
  using NodeType = Node<Scalar>;

  Var() = default;

  explicit Var(Tensor<Scalar> value, bool requires_grad = false) : node_(std::make_shared<NodeType>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  explicit Var(std::shared_ptr<NodeType> node) : node_(std::move(node)) {}

  bool defined() const { return static_cast<bool>(node_); }

  const Tensor<Scalar>& value() const { return node_->value; }
  Tensor<Scalar>& mutable_value() { return node_->value; }
  const Tensor<Scalar>& grad() const { return node_->grad; }
  bool has_grad() const { return node_->grad.defined(); }
  const Shape& shape() const { return node_->value.shape(); }
  Index dim(Index axis) const { return node_->value.dim(axis); }
  Index size() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  std::string_view op() const { return node_->op; }

  void zero_grad() { node_->grad = Tensor<Scalar>(); }

  NodeType* node() const { return node_.get(); }
  const std::shared_ptr<NodeType>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<NodeType> node_;
};

/// Disables tape recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

/// Builds the result node of an op. When recording is off or no input
/// requires a gradient, the result is a plain constant and `backward` is
/// dropped.
template <typename Scalar>
Var<Scalar> record(std::string_view op, Tensor<Scalar> value, std::vector<Var<Scalar>> inputs,
                   std::function<void(Node<Scalar>&)> backward) {
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& in : inputs) needs = needs || (in.defined() && in.requires_grad());
  }
  Var<Scalar> out(std::move(value), needs);
  if (needs) {
    auto* node = out.node();
    node->op = op;
    node->parents.reserve(inputs.size());
    for (auto& in : inputs) node->parents.push_back(in.node_ptr());
    node->backward = std::move(backward);
  }
  return out;
}

/// Reverse pass from a scalar root. Each reachable node's backward runs once,
/// in reverse topological order; gradients of shared subexpressions add up.
/// Intermediate gradients and closures are released as the pass proceeds,
/// so a graph can be differentiated only once.
template <typename Scalar>
void backward(const Var<Scalar>& root);

template <typename Scalar>
struct Parameter {
  std::string name;
  Var<Scalar> var;
};

/// Ordered, uniquely named collection of trainable leaves.
template <typename Scalar>
class ParameterSet {
 public:
  Var<Scalar> add(const std::string& name, Tensor<Scalar> init);

  const std::vector<Parameter<Scalar>>& entries() const { return params_; }
  std::vector<Parameter<Scalar>>& entries() { return params_; }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  Var<Scalar> at(const std::string& name) const;
  Index numel() const;
  void zero_grad();

 private:
  std::vector<Parameter<Scalar>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace hybridscan
