#pragma once

// Reverse-mode differentiation over a dynamically recorded graph. Each
// operation returns a Var whose node remembers its inputs and a closure that
// applies the operation's vector-Jacobian product. backward() walks the graph
// in reverse topological order.

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "hart/tensor.hpp"

namespace hart {

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
  Tensor value;
  Tensor grad;  // empty until something flows into it
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<NodePtr> inputs;
  // Reads this->grad and accumulates into inputs' grads.
  std::function<void(Node&)> backward;

  Tensor& ensure_grad();
};

class Var {
 public:
  Var() = default;

  static Var leaf(Tensor value, bool requires_grad = true);
  static Var constant(Tensor value) { return leaf(std::move(value), false); }

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Tensor& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t dim(std::size_t axis) const { return node_->value.dim(axis); }
  std::size_t numel() const { return node_->value.numel(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }

  /// Gradient accumulated by backward(); zeros of the value's shape if none arrived.
  Tensor grad() const;
  bool has_grad() const { return node_ && !node_->grad.empty(); }
  void zero_grad() const;

  /// Overwrites a leaf's value in place (used by optimizers and finite differences).
  void set_value(Tensor value) const;
  Tensor& mutable_value() const { return node_->value; }

  const NodePtr& node() const noexcept { return node_; }

 private:
  explicit Var(NodePtr n) : node_(std::move(n)) {}
  NodePtr node_;
  friend Var make_result(Tensor, std::vector<Var>, std::function<void(Node&)>, const char*);
};

/// Builds an op output. Rejects non-finite values with NumericError naming the op.
/// The backward closure is dropped when no input requires a gradient.
Var make_result(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward, const char* op);

/// Seeds d(root)/d(root) = 1 for a single-element root and propagates.
void backward(const Var& root);

/// Propagates an explicit upstream gradient of root's shape.
void backward(const Var& root, const Tensor& seed);

/// Inputs of n that want gradients, paired with their accumulator.
inline Tensor* input_grad(Node& n, std::size_t i) {
  Node& in = *n.inputs[i];
  return in.requires_grad ? &in.ensure_grad() : nullptr;
}

}  // namespace hart
