#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace m3p {

using Shape = std::vector<std::size_t>;

/// Raised when operand shapes are incompatible.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised for misuse of the gradient tape (non-scalar loss, reused graph).
class AutogradError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

inline std::size_t numel_of(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

namespace detail {
inline thread_local bool grad_enabled = true;
}

inline bool grad_enabled() { return detail::grad_enabled; }

/// Disables graph recording for its lifetime (evaluation, decoding).
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <class T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  bool released = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const { return !backward_fn && parents.empty(); }

  std::vector<T>& ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

/// Dense row-major tensor handle. Copies share storage; use clone() for a deep copy.
template <class T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<Node<T>>;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    if (numel_of(shape) != data.size())
      throw ShapeError("tensor data size " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    for (auto d : shape)
      if (d == 0) throw ShapeError("tensor dims must be positive: " + shape_str(shape));
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  explicit Tensor(NodePtr n) : node_(std::move(n)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = numel_of(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }
  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    auto n = numel_of(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
  }
  static Tensor ones(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), T(1), requires_grad);
  }
  static Tensor scalar(T v, bool requires_grad = false) { return Tensor({1}, {v}, requires_grad); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  std::span<T> mutable_data() { return node_->data; }
  std::vector<T>& storage() { return node_->data; }
  const std::vector<T>& storage() const { return node_->data; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() { node_->grad.clear(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool r) {
    if (!node_->is_leaf()) throw AutogradError("requires_grad can only be set on leaf tensors");
    node_->requires_grad = r;
  }

  T item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }
  T operator[](std::size_t i) const { return node_->data[i]; }

  /// Deep copy without history.
  Tensor clone() const { return Tensor(shape(), node_->data, false); }
  /// Same values, cut from the graph.
  Tensor detach() const { return Tensor(shape(), node_->data, false); }

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

/// Builds an op result. Parents and the backward closure are kept only when
/// recording is enabled and some parent needs a gradient.
template <class T, class Backward>
Tensor<T> make_op(const char* name, Shape shape, std::vector<T> data,
                  std::initializer_list<Tensor<T>> parents, Backward&& backward) {
  Tensor<T> out(std::move(shape), std::move(data), false);
  if (!grad_enabled()) return out;
  bool any = false;
  for (const auto& p : parents) any = any || p.requires_grad();
  if (!any) return out;
  auto& n = *out.node();
  n.requires_grad = true;
  n.op = name;
  for (const auto& p : parents) {
    if (p.node()->released)
      throw AutogradError(std::string("op '") + name + "' consumes a released graph node");
    n.parents.push_back(p.node());
  }
  n.backward_fn = std::forward<Backward>(backward);
  return out;
}

template <class T>
Tensor<T> make_op(const char* name, Shape shape, std::vector<T> data,
                  const std::vector<Tensor<T>>& parents,
                  std::function<void(Node<T>&)> backward) {
  Tensor<T> out(std::move(shape), std::move(data), false);
  if (!grad_enabled()) return out;
  bool any = false;
  for (const auto& p : parents) any = any || p.requires_grad();
  if (!any) return out;
  auto& n = *out.node();
  n.requires_grad = true;
  n.op = name;
  for (const auto& p : parents) {
    if (p.node()->released)
      throw AutogradError(std::string("op '") + name + "' consumes a released graph node");
    n.parents.push_back(p.node());
  }
  n.backward_fn = std::move(backward);
  return out;
}

/// Reverse-topological schedule of the graph feeding one scalar loss.
template <class T>
class Tape {
 public:
  explicit Tape(const Tensor<T>& root) {
    std::unordered_set<const Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    stack.emplace_back(root.node().get(), 0);
    seen.insert(root.node().get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (node->released)
        throw AutogradError("backward through a graph that was already consumed");
      if (next < node->parents.size()) {
        Node<T>* p = node->parents[next++].get();
        if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order_.push_back(node);
        stack.pop_back();
      }
    }
  }

  /// Nodes with every parent ahead of its children.
  const std::vector<Node<T>*>& order() const { return order_; }

 private:
  std::vector<Node<T>*> order_;
};

/// Populates .grad on every requires_grad leaf reachable from `loss`, then
/// frees the graph. A second call on the same graph throws.
template <class T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw AutogradError("backward() needs a scalar loss, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  if (!loss.requires_grad()) throw AutogradError("loss does not depend on any trainable tensor");
  Tape<T> tape(loss);
  auto& root = *loss.node();
  root.ensure_grad()[0] += T(1);
  const auto& order = tape.order();
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
  for (Node<T>* n : order) {
    if (n->is_leaf()) continue;
    n->backward_fn = nullptr;
    n->parents.clear();
    if (n != &root) n->grad.clear();
    n->released = true;
  }
}

}  // namespace m3p
