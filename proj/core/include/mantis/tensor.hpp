#pragma once

// Dense row-major tensors with define-by-run reverse-mode differentiation.
//
// Every op that consumes a tensor requiring gradients records a node whose
// parents were created before it; node ids are drawn from one monotonically
// increasing counter, so sorting reachable nodes by id yields a topological
// order. A graph is consumed by exactly one backward pass.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mantis {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class IndexError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

/// Violated calling contract (non-scalar backward root, reused graph, ...).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

namespace detail {

std::uint64_t next_node_id();
bool grad_mode_enabled();
void set_grad_mode(bool enabled);

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  bool consumed = false;
  std::uint64_t id = 0;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into parents' grads.
  std::function<void(const Node&)> backward;

  bool is_leaf() const { return !backward; }
  std::vector<T>& ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    return grad;
  }
};

}  // namespace detail

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_enabled()) { detail::set_grad_mode(false); }
  ~NoGradGuard() { detail::set_grad_mode(previous_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
class Tensor {
 public:
  using Node = detail::Node<T>;
  using BackwardFn = std::function<void(const Node&)>;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<T> data(shape_numel(shape), T(0));
    return from(std::move(shape), std::move(data), requires_grad);
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    std::vector<T> data(shape_numel(shape), value);
    return from(std::move(shape), std::move(data), requires_grad);
  }

  static Tensor from(Shape shape, std::vector<T> data, bool requires_grad = false) {
    if (shape_numel(shape) != data.size()) {
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    }
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->requires_grad = requires_grad;
    node->id = detail::next_node_id();
    return Tensor(std::move(node));
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return from(Shape{1}, std::vector<T>{value}, requires_grad);
  }

  /// Creates an op output. Parents that do not require gradients are
  /// dropped; if none remain (or grad mode is off) the result is a constant.
  static Tensor make_result(Shape shape, std::vector<T> data,
                            const std::vector<Tensor>& parents, BackwardFn backward) {
    Tensor out = from(std::move(shape), std::move(data), false);
    if (!detail::grad_mode_enabled()) return out;
    bool any = false;
    for (const auto& p : parents) {
      if (p.defined() && p.requires_grad()) any = true;
    }
    if (!any) return out;
    out.node_->requires_grad = true;
    for (const auto& p : parents) {
      if (p.defined()) out.node_->parents.push_back(p.node_);
    }
    out.node_->backward = std::move(backward);
    return out;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->data.size(); }
  /// Rows of the tensor viewed as a matrix over its last dimension.
  std::size_t rows() const { return rank() == 0 ? 1 : numel() / node_->shape.back(); }
  std::size_t cols() const { return rank() == 0 ? 1 : node_->shape.back(); }

  std::span<const T> data() const { return node_->data; }
  /// Direct write access; reserved for leaves (parameter updates, init).
  std::span<T> mutable_data() {
    if (!node_->is_leaf()) throw ContractError("mutable_data() on a non-leaf tensor");
    return node_->data;
  }
  T item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }
  T at(std::size_t flat) const { return node_->data.at(flat); }

  /// Gradient buffer; all zeros when nothing has been accumulated.
  std::span<const T> grad() const { return node_->ensure_grad(); }
  std::span<T> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() { node_->grad.assign(node_->data.size(), T(0)); }
  bool has_grad() const { return node_->grad.size() == node_->data.size(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool value) {
    if (!node_->is_leaf()) throw ContractError("set_requires_grad() on a non-leaf tensor");
    node_->requires_grad = value;
  }
  std::uint64_t node_id() const { return node_->id; }
  bool is_leaf() const { return node_->is_leaf(); }

  /// Detached copy of the values (new leaf).
  Tensor clone(bool requires_grad = false) const {
    return from(shape(), node_->data, requires_grad);
  }

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}
  std::shared_ptr<Node> node_;
};

/// Ordered record of the operations reachable from a scalar root, parents
/// before children.
template <typename T>
class Tape {
 public:
  static Tape record(const Tensor<T>& root);

  std::size_t size() const { return nodes_.size(); }
  std::span<detail::Node<T>* const> nodes() const { return nodes_; }

  /// Reverse sweep seeding d(root)/d(root) = 1. Leaves accumulate into their
  /// existing grad; intermediate graph state is released afterwards.
  void backward();

 private:
  explicit Tape(std::shared_ptr<detail::Node<T>> root) : root_(std::move(root)) {}
  std::shared_ptr<detail::Node<T>> root_;
  std::vector<detail::Node<T>*> nodes_;
};

template <typename T>
void backward(const Tensor<T>& root) {
  Tape<T>::record(root).backward();
}

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace mantis
