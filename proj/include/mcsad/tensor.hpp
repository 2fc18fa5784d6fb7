#pragma once

// Dense row-major tensors with reverse-mode automatic differentiation.
//
// Every op result keeps shared references to its inputs together with a
// closure that maps the result's gradient onto the inputs' gradients. The
// recorded graph is the tape: `backward` orders it topologically and replays
// the closures in reverse. Graphs are retained after backward, so a second
// call re-propagates and leaf gradients accumulate (+=). Non-leaf gradients
// are recomputed from zero on each call. Use `zero_grad` to clear leaves.

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "mcsad/errors.hpp"

namespace mcsad {

using Index = std::ptrdiff_t;
using Shape = std::vector<Index>;

inline Index shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/// Thread-local switch controlling whether ops record graph edges.
class GradMode {
 public:
  static bool enabled() { return flag(); }
  static void set_enabled(bool on) { flag() = on; }

 private:
  static bool& flag() {
    thread_local bool on = true;
    return on;
  }
};

/// Disables graph recording for its lifetime (evaluation, optimizer updates).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(GradMode::enabled()) { GradMode::set_enabled(false); }
  ~NoGradGuard() { GradMode::set_enabled(previous_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

namespace detail {

template <typename Scalar>
struct Node {
  Shape shape;
  std::vector<Scalar> value;
  std::vector<Scalar> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;
  bool pending = false;  // set only while a backward pass is running

  bool is_leaf() const { return !backward_fn; }

  /// Gradient buffer of an input, or nullptr when the running pass does not
  /// need it.
  Scalar* grad_sink(std::size_t input) {
    Node& in = *inputs[input];
    if (!in.pending) return nullptr;
    if (in.grad.size() != in.value.size()) in.grad.assign(in.value.size(), Scalar(0));
    return in.grad.data();
  }
};

}  // namespace detail

template <typename Scalar = float>
class Tensor {
 public:
  using NodePtr = std::shared_ptr<detail::Node<Scalar>>;
  using ArrayMap = Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, 1>>;
  using ConstArrayMap = Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>>;

  Tensor() : node_(std::make_shared<detail::Node<Scalar>>()) { node_->shape = {0}; }

  Tensor(Shape shape, std::vector<Scalar> values) : node_(std::make_shared<detail::Node<Scalar>>()) {
    for (Index d : shape) {
      if (d < 0) throw ShapeError("negative dimension in shape " + shape_string(shape));
    }
    if (shape_numel(shape) != static_cast<Index>(values.size())) {
      throw ShapeError("shape " + shape_string(shape) + " does not match " +
                       std::to_string(values.size()) + " values");
    }
    node_->shape = std::move(shape);
    node_->value = std::move(values);
  }

  static Tensor zeros(Shape shape) { return full(std::move(shape), Scalar(0)); }
  static Tensor ones(Shape shape) { return full(std::move(shape), Scalar(1)); }
  static Tensor full(Shape shape, Scalar v) {
    const Index n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<Scalar>(static_cast<std::size_t>(n), v));
  }
  static Tensor scalar(Scalar v) { return Tensor(Shape{}, {v}); }

  /// Wraps an op result; records the edge when grad mode is on and any input
  /// participates in differentiation.
  static Tensor from_op(Shape shape, std::vector<Scalar> values, std::vector<NodePtr> inputs,
                        std::function<void(detail::Node<Scalar>&)> backward_fn) {
    Tensor out(std::move(shape), std::move(values));
    const bool track = GradMode::enabled() &&
                       std::any_of(inputs.begin(), inputs.end(),
                                   [](const NodePtr& n) { return n->requires_grad; });
    if (track) {
      out.node_->requires_grad = true;
      out.node_->inputs = std::move(inputs);
      out.node_->backward_fn = std::move(backward_fn);
    }
    return out;
  }

  const Shape& shape() const { return node_->shape; }
  Index dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t rank() const { return node_->shape.size(); }
  Index numel() const { return static_cast<Index>(node_->value.size()); }

  std::span<const Scalar> data() const { return node_->value; }
  /// Mutable view for in-place updates of leaves (optimizer steps, loading).
  std::span<Scalar> mutable_data() { return node_->value; }
  const std::vector<Scalar>& values() const { return node_->value; }
  ArrayMap array() { return ArrayMap(node_->value.data(), numel()); }
  ConstArrayMap array() const { return ConstArrayMap(node_->value.data(), numel()); }

  Scalar item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_string(shape()));
    return node_->value[0];
  }
  Scalar operator[](Index i) const { return node_->value[static_cast<std::size_t>(i)]; }

  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->is_leaf(); }

  Tensor& set_requires_grad(bool on) {
    if (!is_leaf()) throw ContractError("requires_grad can only be toggled on leaf tensors");
    node_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return node_->grad.size() == node_->value.size() && numel() > 0; }
  std::span<const Scalar> grad() const { return node_->grad; }
  std::span<Scalar> mutable_grad() { return node_->grad; }
  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), Scalar(0)); }
  void clear_grad() { node_->grad.clear(); }

  /// Copy of the values with no graph edge.
  Tensor detach() const { return Tensor(node_->shape, node_->value); }

  /// Deep copy that keeps the leaf's requires_grad flag but no history.
  Tensor clone() const {
    Tensor t = detach();
    t.node_->requires_grad = is_leaf() && requires_grad();
    return t;
  }

  bool same_node(const Tensor& other) const { return node_ == other.node_; }
  const NodePtr& node() const { return node_; }

  /// Reverse pass from a scalar tensor.
  void backward() const;

 private:
  NodePtr node_;
};

using Tensorf = Tensor<float>;
using Tensord = Tensor<double>;

template <typename Scalar>
Tensor<Scalar> detach(const Tensor<Scalar>& x) {
  return x.detach();
}

/// Vector-Jacobian product of `root` with `seed`, accumulated into leaves.
///
/// When `only` is non-empty the pass is restricted to paths that reach one of
/// those tensors; other leaves (e.g. model parameters) are left untouched.
template <typename Scalar>
void backward(const Tensor<Scalar>& root, std::span<const Scalar> seed,
              std::span<const Tensor<Scalar>> only = {}) {
  using Node = detail::Node<Scalar>;
  if (static_cast<Index>(seed.size()) != root.numel()) {
    throw ShapeError("backward seed has " + std::to_string(seed.size()) + " entries for root " +
                     shape_string(root.shape()));
  }
  Node* root_node = root.node().get();
  if (!root_node->requires_grad) return;

  // Post-order DFS: inputs precede consumers.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{root_node, 0}};
  visited.insert(root_node);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  std::unordered_set<const Node*> targets;
  for (const auto& t : only) targets.insert(t.node().get());
  for (Node* n : order) {
    if (targets.empty()) {
      n->pending = true;
    } else if (n->is_leaf()) {
      n->pending = targets.count(n) > 0;
    } else {
      n->pending = targets.count(n) > 0 ||
                   std::any_of(n->inputs.begin(), n->inputs.end(),
                               [](const auto& in) { return in->requires_grad && in->pending; });
    }
  }

  if (root_node->pending) {
    for (Node* n : order) {
      if (n->pending && !n->is_leaf()) n->grad.assign(n->value.size(), Scalar(0));
    }
    if (root_node->grad.size() != root_node->value.size()) {
      root_node->grad.assign(root_node->value.size(), Scalar(0));
    }
    for (std::size_t i = 0; i < seed.size(); ++i) root_node->grad[i] += seed[i];
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      if ((*it)->pending && !(*it)->is_leaf()) (*it)->backward_fn(**it);
    }
  }
  for (Node* n : order) n->pending = false;
}

template <typename Scalar>
void Tensor<Scalar>::backward() const {
  if (numel() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " + shape_string(shape()));
  }
  const Scalar one(1);
  mcsad::backward<Scalar>(*this, std::span<const Scalar>(&one, 1));
}

/// Gradient of a scalar with respect to the listed tensors only.
template <typename Scalar>
void backward_to(const Tensor<Scalar>& loss, std::span<const Tensor<Scalar>> targets) {
  if (loss.numel() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " + shape_string(loss.shape()));
  }
  const Scalar one(1);
  mcsad::backward<Scalar>(loss, std::span<const Scalar>(&one, 1), targets);
}

/// Converts between scalar types without graph history.
template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& x) {
  std::vector<To> v(x.data().begin(), x.data().end());
  return Tensor<To>(x.shape(), std::move(v));
}

}  // namespace mcsad
