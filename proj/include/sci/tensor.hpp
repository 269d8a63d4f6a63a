#ifndef SCI_TENSOR_HPP
#define SCI_TENSOR_HPP

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <vector>

#include "sci/errors.hpp"

namespace sci {

using Shape = std::vector<std::int64_t>;

std::int64_t numel(const Shape& shape);

template <class S>
struct TensorNode {
  Shape shape;
  std::vector<S> data;
  std::vector<S> grad;  // empty until the first accumulation
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), S(0));
  }
};

template <class S>
class Tensor;

/// Records backward closures of differentiable operations in creation order.
///
/// Creation order is a topological order of the graph, so replaying the
/// closures in reverse visits every node after all of its consumers. A tape
/// becomes the active recorder for the current thread on construction and
/// restores the previous recorder on destruction. Operations evaluated with
/// no active tape record nothing.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() noexcept;

  void record(std::function<void()> backward);

  /// Seeds d(loss)/d(loss) = 1 and replays the tape once in reverse.
  template <class S>
  void backward(const Tensor<S>& loss);

  /// Drops every recorded closure together with the activations they hold.
  void clear() noexcept;
  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  friend class NoGradGuard;
  std::vector<std::function<void()>> nodes_;
  Tape* previous_;
};

/// Suspends recording for the current thread within its scope.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Tape* saved_;
};

/// Dense row-major array with an optional gradient accumulator.
///
/// Copies share the underlying node (handle semantics, like a framework
/// tensor). Use clone() for an independent value copy.
template <class S>
class Tensor {
 public:
  using Scalar = S;
  using Node = TensorNode<S>;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, S value);
  static Tensor from(Shape shape, std::vector<S> values);
  static Tensor scalar(S value);

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  /// Extent of dimension i; negative i counts from the back.
  std::int64_t dim(int i) const;
  std::int64_t numel() const { return static_cast<std::int64_t>(node_->data.size()); }

  std::span<const S> data() const { return node_->data; }
  std::span<S> mutable_data() { return node_->data; }
  std::span<const S> grad() const { return node_->grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  void zero_grad() { node_->grad.clear(); }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    node_->requires_grad = on;
    return *this;
  }

  S item() const;
  S operator[](std::int64_t flat) const { return node_->data[static_cast<std::size_t>(flat)]; }

  /// Independent copy of the values with no graph history.
  Tensor clone() const;

  const std::shared_ptr<Node>& node() const noexcept { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

namespace autograd {

/// True when a tape is active and at least one input participates in the graph.
template <class S>
bool needs_grad(std::initializer_list<const Tensor<S>*> inputs) {
  if (Tape::active() == nullptr) return false;
  for (const auto* t : inputs)
    if (t != nullptr && t->defined() && t->requires_grad()) return true;
  return false;
}

/// Allocates an operation result; marks it differentiable when requested.
template <class S>
Tensor<S> make_result(Shape shape, bool differentiable) {
  auto node = std::make_shared<TensorNode<S>>();
  node->data.assign(static_cast<std::size_t>(numel(shape)), S(0));
  node->shape = std::move(shape);
  node->requires_grad = differentiable;
  return Tensor<S>(std::move(node));
}

inline void record(std::function<void()> backward) { Tape::active()->record(std::move(backward)); }

}  // namespace autograd

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace sci

#endif
