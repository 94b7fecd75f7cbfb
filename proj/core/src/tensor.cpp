#include "mantis/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <sstream>
#include <unordered_set>

namespace mantis {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

namespace detail {

namespace {
std::atomic<std::uint64_t> g_node_counter{0};
thread_local bool t_grad_mode = true;
}  // namespace

std::uint64_t next_node_id() { return g_node_counter.fetch_add(1, std::memory_order_relaxed); }
bool grad_mode_enabled() { return t_grad_mode; }
void set_grad_mode(bool enabled) { t_grad_mode = enabled; }

}  // namespace detail

template <typename T>
Tape<T> Tape<T>::record(const Tensor<T>& root) {
  if (!root.defined()) throw ContractError("backward on an undefined tensor");
  if (root.numel() != 1) {
    throw ContractError("backward requires a scalar root, got shape " + shape_str(root.shape()));
  }
  if (root.node()->consumed) {
    throw ContractError("graph already consumed by a previous backward pass");
  }
  Tape tape(root.node());
  if (!root.requires_grad()) return tape;

  std::unordered_set<const detail::Node<T>*> seen;
  std::vector<detail::Node<T>*> stack{root.node().get()};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto* n = stack.back();
    stack.pop_back();
    tape.nodes_.push_back(n);
    for (const auto& p : n->parents) {
      if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
  }
  std::sort(tape.nodes_.begin(), tape.nodes_.end(),
            [](const auto* a, const auto* b) { return a->id < b->id; });
  return tape;
}

template <typename T>
void Tape<T>::backward() {
  if (root_->consumed) throw ContractError("graph already consumed by a previous backward pass");
  const bool root_is_leaf = root_->is_leaf();
  if (nodes_.empty()) {
    root_->consumed = !root_is_leaf;
    return;
  }
  root_->ensure_grad()[0] = T(1);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    auto* n = *it;
    if (n->backward && n->grad.size() == n->data.size()) n->backward(*n);
  }
  for (auto* n : nodes_) {
    if (n->is_leaf()) continue;
    n->consumed = true;
    n->requires_grad = false;
    n->backward = nullptr;
    n->parents.clear();
    if (n != root_.get()) std::vector<T>().swap(n->grad);
  }
  root_->consumed = !root_is_leaf;
}

template class Tape<float>;
template class Tape<double>;

}  // namespace mantis
