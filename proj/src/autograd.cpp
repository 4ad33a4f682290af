#include "ctdg/autograd.hpp"

#include <stdexcept>
#include <unordered_set>

namespace ctdg {

namespace {
thread_local bool t_grad_enabled = true;
}

Tensor& Node::grad_buffer() {
  if (grad.empty() || grad.shape() != value.shape()) grad = Tensor(value.shape(), 0.0);
  return grad;
}

void Node::accumulate(const Tensor& g) {
  if (g.shape() != value.shape()) {
    throw ShapeError("gradient shape " + shape_str(g.shape()) + " does not match value " + shape_str(value.shape()) +
                     " in op " + op);
  }
  Tensor& buf = grad_buffer();
  auto dst = buf.data();
  auto src = g.data();
  for (size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
  node_->op = "leaf";
}

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

bool grad_enabled() { return t_grad_enabled; }

Var make_result(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward_fn, const char* op) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->op = op;
  if (!t_grad_enabled) return Var(std::move(node));
  bool any = false;
  for (const Var& v : inputs) any = any || v.requires_grad();
  if (!any) return Var(std::move(node));
  node->requires_grad = true;
  node->inputs.reserve(inputs.size());
  for (Var& v : inputs) node->inputs.push_back(v.node());
  node->backward_fn = std::move(backward_fn);
  return Var(std::move(node));
}

void backward(const Var& loss) {
  if (!loss.defined()) throw std::logic_error("backward on an undefined variable");
  Node* root = loss.node().get();
  if (root->consumed) throw std::logic_error("backward called twice on the same graph; run a new forward first");
  if (loss.value().numel() != 1) throw ShapeError("backward requires a scalar loss, got " + shape_str(loss.shape()));
  if (!root->requires_grad) throw std::logic_error("loss does not depend on any variable requiring grad");

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, size_t>> stack{{root, 0}};
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (node->consumed) throw std::logic_error("graph node '" + node->op + "' was already consumed by backward");
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->grad = Tensor(root->value.shape(), 1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
  }
  for (Node* node : order) {
    if (node->inputs.empty()) continue;  // leaves keep their gradients
    node->inputs.clear();
    node->backward_fn = nullptr;
    node->grad = Tensor();
    node->consumed = true;
  }
}

}  // namespace ctdg
