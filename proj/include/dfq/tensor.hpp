#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "dfq/error.hpp"

namespace dfq {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <typename Scalar>
using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

inline Index shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>{});
}

std::string shape_string(const Shape& shape);

// Dense row-major tensor handle. Copies share storage, so a tensor recorded on
// a Tape stays reachable from the backward closures that reference it.
// A default-constructed Tensor is an empty handle (see defined()).
template <typename Scalar>
class Tensor {
 public:
  using value_type = Scalar;
  using ArrayType = Array<Scalar>;

  Tensor() = default;

  explicit Tensor(Shape shape, Scalar fill = Scalar(0)) : impl_(std::make_shared<Impl>()) {
    check_shape(shape);
    impl_->data = ArrayType::Constant(shape_numel(shape), fill);
    impl_->shape = std::move(shape);
  }

  Tensor(Shape shape, ArrayType data) : impl_(std::make_shared<Impl>()) {
    check_shape(shape);
    if (shape_numel(shape) != data.size()) {
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_string(shape));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
  }

  static Tensor scalar(Scalar v) { return Tensor(Shape{1}, v); }

  bool defined() const noexcept { return impl_ != nullptr; }
  bool same(const Tensor& other) const noexcept { return impl_ == other.impl_; }

  const Shape& shape() const { return impl_->shape; }
  Index rank() const { return static_cast<Index>(impl_->shape.size()); }
  Index dim(Index i) const { return impl_->shape[static_cast<std::size_t>(i)]; }
  Index numel() const { return impl_->data.size(); }

  const ArrayType& data() const { return impl_->data; }
  // Writable access is reserved for leaves (optimizer updates, initialization).
  ArrayType& mutable_data() { return impl_->data; }

  Scalar item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape()));
    return impl_->data[0];
  }

  bool requires_grad() const noexcept { return impl_ && impl_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    impl_->requires_grad = on;
    return *this;
  }

  bool has_grad() const noexcept { return impl_ && impl_->grad.size() != 0; }
  const ArrayType& grad() const { return impl_->grad; }
  void zero_grad() { impl_->grad.resize(0); }

  // Handles share storage, so this is const on the handle like shared_ptr.
  template <typename Derived>
  void accumulate_grad(const Eigen::ArrayBase<Derived>& g) const {
    if (impl_->grad.size() == 0) {
      impl_->grad = g;
    } else {
      impl_->grad += g;
    }
  }

  // Fresh leaf holding a copy of the values; never requires grad.
  Tensor detach() const { return Tensor(shape(), data()); }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape(), data().template cast<Other>());
  }

  bool all_finite() const { return impl_->data.allFinite(); }

 private:
  struct Impl {
    Shape shape;
    ArrayType data;
    ArrayType grad;
    bool requires_grad = false;
  };

  static void check_shape(const Shape& shape) {
    for (Index e : shape) {
      if (e <= 0) throw ShapeError("non-positive extent in shape " + shape_string(shape));
    }
  }

  std::shared_ptr<Impl> impl_;
};

// Single-use record of primitive operations for reverse-mode differentiation.
// Operations record themselves only when some input requires grad; nodes are
// appended in execution order, which is already a topological order.
template <typename Scalar>
class Tape {
 public:
  using TensorType = Tensor<Scalar>;
  using ArrayType = Array<Scalar>;
  using BackwardFn = std::function<void(const ArrayType& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static bool any_requires_grad(std::initializer_list<const TensorType*> inputs) {
    for (const TensorType* t : inputs) {
      if (t != nullptr && t->defined() && t->requires_grad()) return true;
    }
    return false;
  }

  // Marks `output` as differentiable and appends its backward rule.
  void record(TensorType& output, BackwardFn fn) {
    output.set_requires_grad(true);
    nodes_.push_back(Node{output, std::move(fn)});
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  bool empty() const noexcept { return nodes_.empty(); }

  // Seeds d(root)/d(root) = 1 and runs every recorded backward rule once, in
  // reverse order. Leaf gradients accumulate; the tape is cleared afterwards.
  void backward(TensorType root) {
    if (!root.defined() || root.numel() != 1) {
      throw ContractError("backward() requires a scalar root, got shape " +
                          (root.defined() ? shape_string(root.shape()) : std::string("<undefined>")));
    }
    std::ptrdiff_t start = -1;
    for (std::ptrdiff_t i = static_cast<std::ptrdiff_t>(nodes_.size()) - 1; i >= 0; --i) {
      if (nodes_[static_cast<std::size_t>(i)].output.same(root)) {
        start = i;
        break;
      }
    }
    if (start < 0) {
      if (root.requires_grad()) {
        // Root is itself a leaf.
        root.accumulate_grad(ArrayType::Ones(1));
        nodes_.clear();
        return;
      }
      throw ContractError("backward() root was not produced on this tape");
    }
    root.accumulate_grad(ArrayType::Ones(1));
    for (std::ptrdiff_t i = start; i >= 0; --i) {
      Node& node = nodes_[static_cast<std::size_t>(i)];
      if (node.output.has_grad()) node.backward(node.output.grad());
    }
    nodes_.clear();
  }

  void clear() noexcept { nodes_.clear(); }

 private:
  struct Node {
    TensorType output;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
};

}  // namespace dfq
