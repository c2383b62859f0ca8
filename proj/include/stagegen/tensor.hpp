#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "stagegen/error.hpp"

namespace stagegen {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::int64_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {

inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}

template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(const Node&)> backward;

  std::span<T> grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

}  // namespace detail

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
  ~NoGradGuard() { detail::grad_enabled_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

/// Dense row-major tensor with an optional gradient, shared by handle.
///
/// Copying a Tensor aliases the same storage; use clone() for a deep copy.
/// Operations in ops.hpp record a backward closure on their result whenever
/// an input requires a gradient and recording is enabled.
template <class T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Tensor() : Tensor(Shape{0}) {}

  explicit Tensor(Shape shape) : node_(std::make_shared<detail::Node<T>>()) {
    for (auto d : shape) {
      if (d < 0) throw ShapeError("negative extent in shape " + shape_str(shape));
    }
    node_->value.assign(static_cast<std::size_t>(shape_numel(shape)), T(0));
    node_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
      : node_(std::make_shared<detail::Node<T>>()) {
    if (static_cast<std::int64_t>(values.size()) != shape_numel(shape)) {
      throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " + shape_str(shape));
    }
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static Tensor full(Shape shape, T v) {
    Tensor t(std::move(shape));
    std::fill(t.node_->value.begin(), t.node_->value.end(), v);
    return t;
  }

  static Tensor scalar(T v) { return Tensor(Shape{1}, std::vector<T>{v}); }

  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  const Shape& shape() const { return node_->shape; }
  std::int64_t dim(std::size_t i) const {
    if (i >= node_->shape.size()) throw ShapeError("dimension index " + std::to_string(i) + " out of range for " + shape_str(shape()));
    return node_->shape[i];
  }
  std::size_t rank() const { return node_->shape.size(); }
  std::int64_t numel() const { return static_cast<std::int64_t>(node_->value.size()); }

  std::span<T> data() { return node_->value; }
  std::span<const T> data() const { return node_->value; }
  std::vector<T>& values() { return node_->value; }
  const std::vector<T>& values() const { return node_->value; }

  bool has_grad() const { return !node_->grad.empty(); }
  /// Gradient buffer; allocated (zeroed) on first access.
  std::span<T> grad() { return node_->grad_buffer(); }
  std::span<const T> grad() const { return node_->grad; }
  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), T(0)); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }

  T item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }

  T& operator[](std::size_t i) { return node_->value[i]; }
  T operator[](std::size_t i) const { return node_->value[i]; }

  /// Deep copy of values; the copy is a leaf with no gradient.
  Tensor clone() const { return Tensor(node_->shape, node_->value, false); }

  /// Shares values, drops history: gradients never flow through the result.
  Tensor detach() const {
    auto n = std::make_shared<detail::Node<T>>();
    n->shape = node_->shape;
    n->value = node_->value;
    return Tensor(std::move(n));
  }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> v(node_->value.begin(), node_->value.end());
    return Tensor<U>(node_->shape, std::move(v), false);
  }

  bool all_finite() const {
    return std::all_of(node_->value.begin(), node_->value.end(), [](T v) { return std::isfinite(v); });
  }

  /// Reverse-mode sweep from this tensor. Scalars are seeded with 1; other
  /// shapes need an explicit seed gradient of the same size.
  void backward() {
    if (numel() != 1) throw ShapeError("backward() without seed requires a scalar, got " + shape_str(shape()));
    backward(std::vector<T>{T(1)});
  }

  void backward(const std::vector<T>& seed) {
    if (static_cast<std::int64_t>(seed.size()) != numel()) throw ShapeError("seed gradient size mismatch");
    if (!node_->requires_grad) throw Error("backward() on a tensor that does not require grad");
    std::vector<detail::Node<T>*> order;
    std::unordered_set<detail::Node<T>*> visited;
    // Iterative post-order DFS.
    std::vector<std::pair<detail::Node<T>*, std::size_t>> stack{{node_.get(), 0}};
    visited.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, idx] = stack.back();
      if (idx < n->parents.size()) {
        auto* p = n->parents[idx++].get();
        if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
    auto g = node_->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      detail::Node<T>* n = *it;
      if (n->backward && !n->grad.empty()) n->backward(*n);
    }
  }

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

namespace detail {

/// Builds an op result. The backward closure is attached only when recording
/// is on and some input requires a gradient.
template <class T>
Tensor<T> make_result(Shape shape, std::vector<T> value, const std::vector<const Tensor<T>*>& inputs,
                      std::function<void(const Node<T>&)> backward) {
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  bool needs = false;
  if (grad_enabled()) {
    for (const auto* in : inputs) needs = needs || in->requires_grad();
  }
  if (needs) {
    n->requires_grad = true;
    for (const auto* in : inputs) n->parents.push_back(in->node());
    n->backward = std::move(backward);
  }
  return Tensor<T>(std::move(n));
}

/// Gradient buffer of an input, or an empty span if it takes no gradient.
template <class T>
std::span<T> input_grad(const std::shared_ptr<Node<T>>& n) {
  if (!n->requires_grad) return {};
  return n->grad_buffer();
}

}  // namespace detail

template <class T>
void require_shape(const Tensor<T>& t, std::size_t rank, const char* what) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got shape " + shape_str(t.shape()));
  }
}

}  // namespace stagegen
