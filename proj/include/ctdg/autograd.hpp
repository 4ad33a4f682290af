#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "ctdg/tensor.hpp"

namespace ctdg {

struct Node;
using NodePtr = std::shared_ptr<Node>;

/// One vertex of the recorded forward graph.
struct Node {
  Tensor value;
  Tensor grad;  // allocated on first accumulation
  bool requires_grad = false;
  bool consumed = false;
  std::string op;
  std::vector<NodePtr> inputs;
  // Reads this node's grad and accumulates into the inputs' grads.
  std::function<void(Node&)> backward_fn;

  /// Gradient buffer, zero-initialized on first access.
  Tensor& grad_buffer();
  void accumulate(const Tensor& g);
};

/// Handle to a graph node. Copies share the node.
class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);
  explicit Var(NodePtr node) : node_(std::move(node)) {}

  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  int64_t dim(int64_t axis) const { return node_->value.dim(axis); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool defined() const { return static_cast<bool>(node_); }

  /// Gradient accumulated by backward(); empty tensor when none was received.
  const Tensor& grad() const { return node_->grad; }
  void zero_grad() { node_->grad = Tensor(); }

  const NodePtr& node() const { return node_; }

  /// Constant copy that does not participate in differentiation.
  Var detach() const { return Var(node_->value, false); }

 private:
  NodePtr node_;
};

/// Run reverse-mode accumulation from a scalar loss. Every reachable leaf with
/// requires_grad receives its gradient; the graph is consumed, and a second
/// call on the same loss throws std::logic_error.
void backward(const Var& loss);

/// While alive, operations on this thread record no graph.
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

/// Builds the result node of an operation. Records inputs and the backward
/// closure only if recording is enabled and some input requires grad.
Var make_result(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward_fn, const char* op);

}  // namespace ctdg
