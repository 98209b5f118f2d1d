#pragma once

// Dense row-major tensors with define-by-run reverse-mode differentiation.
//
// Every tensor owns a node. Operations that consume a tensor requiring
// gradients record their inputs and a backward rule on the output node; the
// recorded graph is walked in reverse creation order by backward(). Nodes are
// numbered from a thread-local counter, so one graph must stay on one thread.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace fumnet {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using RowMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using MatMap = Eigen::Map<RowMat<Scalar>>;
template <typename Scalar>
using ConstMatMap = Eigen::Map<const RowMat<Scalar>>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline Index numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

/// Thread-local switch for graph recording. Evaluation code runs under a
/// NoGradGuard so no backward closures or saved activations are kept.
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

inline std::uint64_t next_order() {
  thread_local std::uint64_t counter = 0;
  return ++counter;
}

template <typename Scalar>
struct Node {
  Shape shape;
  Vec<Scalar> data;
  Vec<Scalar> grad;  // empty until a gradient reaches this node
  bool requires_grad = false;
  std::uint64_t order = next_order();
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this->grad and accumulates into parents that require grad.
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const { return !backward_fn; }

  Vec<Scalar>& grad_buffer() {
    if (grad.size() != data.size()) grad = Vec<Scalar>::Zero(data.size());
    return grad;
  }
};

}  // namespace detail

template <typename Scalar>
class Tensor {
 public:
  using Node = detail::Node<Scalar>;
  using scalar_type = Scalar;

  Tensor() = default;

  Tensor(Shape shape, Vec<Scalar> data) : node_(std::make_shared<Node>()) {
    if (fumnet::numel(shape) != data.size()) {
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + to_string(shape));
    }
    for (Index d : shape) {
      if (d < 0) throw ShapeError("negative dimension in shape " + to_string(shape));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
  }

  static Tensor zeros(Shape shape) {
    const Index n = fumnet::numel(shape);
    return Tensor(std::move(shape), Vec<Scalar>::Zero(n));
  }
  static Tensor full(Shape shape, Scalar value) {
    const Index n = fumnet::numel(shape);
    return Tensor(std::move(shape), Vec<Scalar>::Constant(n, value));
  }
  static Tensor from(Shape shape, std::initializer_list<Scalar> values) {
    Vec<Scalar> v(static_cast<Index>(values.size()));
    std::copy(values.begin(), values.end(), v.data());
    return Tensor(std::move(shape), std::move(v));
  }
  static Tensor from(Shape shape, const std::vector<Scalar>& values) {
    Vec<Scalar> v = Eigen::Map<const Vec<Scalar>>(values.data(), static_cast<Index>(values.size()));
    return Tensor(std::move(shape), std::move(v));
  }
  static Tensor scalar(Scalar value) { return full({1}, value); }

  static Tensor from_node(std::shared_ptr<Node> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  Index rank() const { return static_cast<Index>(node_->shape.size()); }
  Index dim(Index axis) const {
    if (axis < 0) axis += rank();
    return node_->shape.at(static_cast<std::size_t>(axis));
  }
  Index numel() const { return node_->data.size(); }

  Vec<Scalar>& data() { return node_->data; }
  const Vec<Scalar>& data() const { return node_->data; }
  Scalar* raw() { return node_->data.data(); }
  const Scalar* raw() const { return node_->data.data(); }

  bool has_grad() const { return node_->grad.size() == node_->data.size(); }
  const Vec<Scalar>& grad() const {
    if (!has_grad()) throw std::logic_error("tensor has no gradient");
    return node_->grad;
  }
  Vec<Scalar>& grad() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad.resize(0); }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    node_->requires_grad = on;
    return *this;
  }

  Scalar item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
    return node_->data[0];
  }

  /// Row-major element access for tests and diagnostics.
  Scalar at(std::initializer_list<Index> index) const { return node_->data[offset(index)]; }

  Index offset(std::initializer_list<Index> index) const {
    if (static_cast<Index>(index.size()) != rank()) {
      throw ShapeError("index rank mismatch for shape " + to_string(shape()));
    }
    Index flat = 0;
    std::size_t axis = 0;
    for (Index i : index) {
      const Index extent = node_->shape[axis++];
      if (i < 0 || i >= extent) throw std::out_of_range("tensor index out of range");
      flat = flat * extent + i;
    }
    return flat;
  }

  /// Copy of the values without any graph history.
  Tensor detach() const { return Tensor(shape(), data()); }

  void backward() const;

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

namespace detail {

template <typename Scalar>
void check_finite_outputs(const Node<Scalar>& out) {
#ifndef NDEBUG
  for (const auto& p : out.parents) {
    if (!p->data.allFinite()) return;
  }
  if (!out.data.allFinite()) {
    throw std::domain_error("non-finite values produced from finite inputs, shape " +
                            to_string(out.shape));
  }
#else
  (void)out;
#endif
}

}  // namespace detail

/// Creates the result of an operation. The backward rule is kept only when
/// recording is enabled and at least one input requires gradients.
template <typename Scalar, typename BackwardFn>
Tensor<Scalar> record(Shape shape, Vec<Scalar> data, std::vector<Tensor<Scalar>> inputs,
                      BackwardFn&& backward_fn) {
  Tensor<Scalar> out(std::move(shape), std::move(data));
  auto& node = *out.node();
  for (const auto& in : inputs) node.parents.push_back(in.node_ptr());
  detail::check_finite_outputs(node);
  const bool track =
      GradMode::enabled() &&
      std::any_of(inputs.begin(), inputs.end(), [](const auto& t) { return t.requires_grad(); });
  if (track) {
    node.requires_grad = true;
    node.backward_fn = std::forward<BackwardFn>(backward_fn);
  } else {
    node.parents.clear();
  }
  return out;
}

template <typename Scalar>
void Tensor<Scalar>::backward() const {
  if (numel() != 1) {
    throw ShapeError("backward() requires a scalar loss, got shape " + to_string(shape()));
  }
  if (!requires_grad()) throw std::logic_error("loss is not connected to any tensor requiring grad");

  // Collect every reachable node that participates in differentiation.
  std::vector<Node*> tape;
  std::vector<Node*> stack{node_.get()};
  std::unordered_set<const Node*> seen;
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    if (!seen.insert(n).second) continue;
    tape.push_back(n);
    for (const auto& p : n->parents) {
      if (p->requires_grad && !seen.contains(p.get())) stack.push_back(p.get());
    }
  }
  // Creation order is a topological order; walk it backwards.
  std::sort(tape.begin(), tape.end(), [](const Node* a, const Node* b) { return a->order > b->order; });

  node_->grad_buffer().array() += Scalar(1);
  for (Node* n : tape) {
    if (n->is_leaf()) continue;
    if (n->grad.size() == 0) continue;
    n->backward_fn(*n);
    n->grad.resize(0);
  }
}

}  // namespace fumnet
