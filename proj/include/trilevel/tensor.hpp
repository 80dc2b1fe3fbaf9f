#ifndef TRILEVEL_TENSOR_HPP
#define TRILEVEL_TENSOR_HPP

#include <algorithm>
#include <cstddef>
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

#include "trilevel/errors.hpp"

namespace trilevel {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

enum class OpKind {
  leaf,
  matmul,
  matmul_nt,
  masked_matmul_nt,
  masked_matmul,
  add,
  add_row,
  scale,
  gelu,
  layernorm,
  softmax_rows,
  gather_rows,
  slice_cols,
  concat_cols,
  concat_rows,
  mean_rows,
  sum,
  cross_entropy,
};

namespace detail {
inline std::uint64_t next_sequence() {
  thread_local std::uint64_t counter = 0;
  return ++counter;
}
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

/// Disables graph recording on this thread while alive (inference).
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

/// One recorded operation. Nodes are ordered by `sequence`, which increases with
/// creation, so reverse sequence order is a valid reverse topological order.
template <typename T>
struct TapeNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until populated
  bool requires_grad = false;
  OpKind op = OpKind::leaf;
  std::uint64_t sequence = detail::next_sequence();
  std::vector<std::shared_ptr<TapeNode>> inputs;
  // Reads this node's grad and accumulates into inputs' grads. Saved values live in the closure.
  std::function<void(TapeNode&)> backward;

  bool has_grad() const { return !grad.empty(); }
  std::vector<T>& ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

template <typename T>
class Tensor {
 public:
  using value_type = T;
  using Node = TapeNode<T>;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false) : node_(std::make_shared<Node>()) {
    if (shape_numel(shape) != data.size())
      throw DimensionError("tensor data length " + std::to_string(data.size()) + " does not match shape " +
                           shape_str(shape));
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
  }

  /// Build the result of an operation. The node only keeps its inputs and backward
  /// rule when at least one input requires grad.
  static Tensor from_op(OpKind op, Shape shape, std::vector<T> data, std::vector<Tensor> inputs,
                        std::function<void(Node&)> backward) {
    Tensor out(std::move(shape), std::move(data));
    bool needs = detail::grad_mode() && std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
    out.node_->op = op;
    if (needs) {
      out.node_->requires_grad = true;
      out.node_->inputs.reserve(inputs.size());
      for (auto& in : inputs) out.node_->inputs.push_back(in.node_);
      out.node_->backward = std::move(backward);
    }
    return out;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }
  std::size_t rows() const { return rank() == 0 ? 1 : node_->shape.front(); }
  std::size_t cols() const { return rank() == 0 ? 1 : node_->data.size() / std::max<std::size_t>(1, rows()); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  OpKind op() const { return node_->op; }

  std::span<const T> data() const { return node_->data; }
  // Mutable access is for leaves (parameters, inputs) only.
  std::span<T> mutable_data() { return node_->data; }
  std::vector<T>& storage() { return node_->data; }

  bool has_grad() const { return node_->has_grad(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  T item() const {
    if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }
  T at(std::size_t r, std::size_t c) const { return node_->data[r * cols() + c]; }

  Node& node() const { return *node_; }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

  /// Detached copy: same values, no history, no grad.
  Tensor detach() const { return Tensor(shape(), node_->data, false); }

 private:
  std::shared_ptr<Node> node_;
};

/// Reverse-mode sweep from a scalar. Every requires_grad node reachable from `loss`
/// receives an accumulated grad; leaves keep theirs until zeroed.
template <typename T>
void backward(const Tensor<T>& loss) {
  if (loss.numel() != 1) throw DimensionError("backward() needs a scalar loss, got " + shape_str(loss.shape()));
  if (!loss.requires_grad()) return;
  using Node = TapeNode<T>;
  std::vector<Node*> order;
  std::vector<Node*> stack{&loss.node()};
  std::unordered_set<const Node*> seen{&loss.node()};
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (auto& in : n->inputs) {
      if (in->requires_grad && seen.insert(in.get()).second) stack.push_back(in.get());
    }
  }
  std::sort(order.begin(), order.end(), [](const Node* a, const Node* b) { return a->sequence > b->sequence; });
  loss.node().ensure_grad()[0] += T(1);
  for (Node* n : order) {
    if (n->backward && n->has_grad()) n->backward(*n);
  }
  // Intermediate grads are only needed during the sweep.
  for (Node* n : order) {
    if (n->backward) n->grad.clear();
  }
}

}  // namespace trilevel

#endif  // TRILEVEL_TENSOR_HPP
