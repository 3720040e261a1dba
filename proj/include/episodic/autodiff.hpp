#pragma once

#include <map>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "episodic/tensor.hpp"

namespace episodic {

struct Node;
using NodePtr = std::shared_ptr<Node>;

/// One recorded operation (or a leaf). `backward` reads `grad` and
/// accumulates into the gradients of `inputs`.
struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  bool released = false;
  std::string op = "leaf";
  std::vector<NodePtr> inputs;
  std::function<void(Node&)> backward;

  bool is_leaf() const { return op == "leaf"; }

  Tensor& grad_buffer() {
    if (grad.empty()) grad = Tensor(value.shape(), 0.0);
    return grad;
  }
};

namespace detail {
inline thread_local int no_grad_depth = 0;
}

/// While alive, new operations are not recorded on the graph.
class NoGradGuard {
 public:
  NoGradGuard() { ++detail::no_grad_depth; }
  ~NoGradGuard() { --detail::no_grad_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline bool grad_enabled() { return detail::no_grad_depth == 0; }

/// Handle to a graph node. Copies share the node.
class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false)
      : node_(std::make_shared<Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(NodePtr node) : node_(std::move(node)) {}

  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t dim(std::size_t i) const { return node_->value.dim(i); }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  const Tensor& grad() const { return node_->grad; }
  void zero_grad() { node_->grad = Tensor(); }
  const NodePtr& node() const { return node_; }
  bool valid() const { return static_cast<bool>(node_); }

 private:
  NodePtr node_;
};

/// Creates the output node of an operation. Records a backward closure only
/// when some input requires a gradient and recording is enabled.
inline Var make_result(std::string op, Tensor value, std::vector<NodePtr> inputs,
                       std::function<void(Node&)> backward) {
  if (!value.all_finite()) {
    throw NumericError(op + ": non-finite output of shape " + shape_str(value.shape()));
  }
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->op = std::move(op);
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& in : inputs) needs = needs || in->requires_grad;
  }
  if (needs) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward = std::move(backward);
  }
  return Var(std::move(node));
}

/// Reverse-mode sweep from a scalar loss. Leaf gradients accumulate; the
/// recorded graph is released afterwards, so a second call on the same loss
/// fails.
inline void backward(const Var& loss) {
  const NodePtr& root = loss.node();
  if (loss.value().size() != 1) {
    throw ShapeError("backward: loss must be scalar, got shape " +
                     shape_str(loss.shape()));
  }
  if (root->released) {
    throw std::logic_error("backward: saved values of this graph were already released");
  }
  if (!root->requires_grad) return;

  // Iterative post-order DFS gives a topological order (inputs before users).
  // Shared handles keep intermediates alive while earlier nodes release
  // their inputs.
  std::vector<NodePtr> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<NodePtr, std::size_t>> stack{{root, 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      NodePtr child = node->inputs[next++];
      if (child->requires_grad && !seen.count(child.get())) {
        seen.insert(child.get());
        stack.emplace_back(std::move(child), 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->grad = Tensor(root->value.shape(), 1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = it->get();
    if (node->is_leaf()) continue;
    if (node->released) {
      throw std::logic_error("backward: node '" + node->op + "' has no saved values");
    }
    if (!node->grad.empty() && node->backward) node->backward(*node);
    node->grad = Tensor();
    node->backward = nullptr;
    node->inputs.clear();
    node->released = true;
  }
}

/// A named leaf tensor holding part of the model state.
struct Parameter {
  std::string name;
  Var var;
};

/// Ordered collection of parameters; iteration order is insertion order.
class ParameterSet {
 public:
  ParameterSet() = default;
  ParameterSet(ParameterSet&&) noexcept = default;
  ParameterSet& operator=(ParameterSet&&) noexcept = default;
  /// Copies hold their own leaves; values are cloned, gradients are not.
  ParameterSet(const ParameterSet& o) : index_(o.index_) {
    for (const auto& p : o.items_) items_.push_back({p.name, Var(p.var.value(), p.var.requires_grad())});
  }
  ParameterSet& operator=(const ParameterSet& o) {
    if (this != &o) *this = ParameterSet(o);
    return *this;
  }

  Var& add(const std::string& name, Tensor value) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter " + name);
    index_[name] = items_.size();
    items_.push_back({name, Var(std::move(value), true)});
    return items_.back().var;
  }

  const Var& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
    return items_[it->second].var;
  }
  Var& get(const std::string& name) {
    return const_cast<Var&>(std::as_const(*this).get(name));
  }
  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  std::vector<Parameter>& items() { return items_; }
  const std::vector<Parameter>& items() const { return items_; }
  std::size_t size() const { return items_.size(); }

  void zero_grad() {
    for (auto& p : items_) p.var.zero_grad();
  }

  /// Gradient per parameter name; parameters untouched by the last backward
  /// pass report zeros.
  std::map<std::string, Tensor> gradients() const {
    std::map<std::string, Tensor> out;
    for (const auto& p : items_) {
      out[p.name] = p.var.has_grad() ? p.var.grad() : Tensor(p.var.shape(), 0.0);
    }
    return out;
  }

  std::size_t num_scalars() const {
    std::size_t n = 0;
    for (const auto& p : items_) n += p.var.size();
    return n;
  }

 private:
  std::vector<Parameter> items_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace episodic
