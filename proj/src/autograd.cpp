#include "hart/autograd.hpp"

#include <unordered_set>

namespace hart {

Tensor& Node::ensure_grad() {
  if (grad.empty()) grad = Tensor::zeros(value.shape());
  return grad;
}

Var Var::leaf(Tensor value, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  return Var(std::move(n));
}

Tensor Var::grad() const {
  if (!node_->grad.empty()) return node_->grad;
  return Tensor::zeros(node_->value.shape());
}

void Var::zero_grad() const { node_->grad = Tensor(); }

void Var::set_value(Tensor value) const {
  if (value.shape() != node_->value.shape())
    throw ShapeError("set_value: " + shape_str(value.shape()) + " vs " + shape_str(node_->value.shape()));
  node_->value = std::move(value);
}

Var make_result(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward, const char* op) {
  if (!value.all_finite()) throw NumericError(std::string("non-finite value produced by ") + op);
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->op = op;
  for (const auto& in : inputs)
    if (in.requires_grad()) n->requires_grad = true;
  if (n->requires_grad) {
    n->inputs.reserve(inputs.size());
    for (auto& in : inputs) n->inputs.push_back(in.node());
    n->backward = std::move(backward);
  }
  return Var(std::move(n));
}

namespace {

std::vector<Node*> topo_order(Node* root) {
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  // Iterative post-order DFS; graphs from recurrent unrolling get deep.
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

}  // namespace

void backward(const Var& root, const Tensor& seed) {
  if (!root.defined()) throw ShapeError("backward on undefined Var");
  if (seed.shape() != root.shape())
    throw ShapeError("backward seed " + shape_str(seed.shape()) + " vs root " + shape_str(root.shape()));
  if (!root.requires_grad()) return;
  Node* r = root.node().get();
  Tensor& g = r->ensure_grad();
  for (std::size_t i = 0; i < g.numel(); ++i) g[i] += seed[i];
  auto order = topo_order(r);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

void backward(const Var& root) {
  if (root.numel() != 1) throw ShapeError("backward() without seed needs a scalar root, got " + shape_str(root.shape()));
  backward(root, Tensor::ones(root.shape()));
}

}  // namespace hart
