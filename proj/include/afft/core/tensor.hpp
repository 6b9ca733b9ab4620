#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "afft/core/error.hpp"

namespace afft::core {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

enum class DType { kFloat32, kFloat64 };

template <typename T>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<float>() { return DType::kFloat32; }
template <>
constexpr DType dtype_of<double>() { return DType::kFloat64; }

template <typename T>
struct TensorNode;

// Closure that reads `self.grad` and accumulates into the parents' grads.
template <typename T>
using BackwardFn = std::function<void(TensorNode<T>& self)>;

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  bool backward_done = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  BackwardFn<T> backward;

  bool is_leaf() const { return !backward; }
  // Allocates a zeroed gradient buffer on first use.
  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

/// Dense row-major tensor handle. Copies share storage; use clone() for a deep copy.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor();
  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T fill, bool requires_grad = false);
  static Tensor scalar(T v, bool requires_grad = false);

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->value.size(); }
  static constexpr DType dtype() { return dtype_of<T>(); }

  std::span<const T> data() const { return node_->value; }
  // Direct write access; only meaningful for leaves (parameters, inputs).
  std::span<T> mutable_data() { return node_->value; }
  T item() const;
  T at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag);
  bool has_grad() const { return !node_->grad.empty(); }
  // Gradient values; zeros when nothing was accumulated.
  std::vector<T> grad() const;
  void zero_grad() { node_->grad.clear(); }

  Tensor detach() const;
  Tensor clone() const;

  const std::shared_ptr<TensorNode<T>>& node() const { return node_; }
  static Tensor from_node(std::shared_ptr<TensorNode<T>> node);

 private:
  std::shared_ptr<TensorNode<T>> node_;
};

/// Reverse topological record of the ops reachable from a scalar loss.
template <typename T>
class GradGraph {
 public:
  explicit GradGraph(const Tensor<T>& loss);
  // Nodes in topological order (inputs before outputs).
  const std::vector<TensorNode<T>*>& order() const { return order_; }
  void run_backward();

 private:
  std::shared_ptr<TensorNode<T>> root_;
  std::vector<TensorNode<T>*> order_;
};

/// Populates grads of every reachable requires_grad tensor with dloss/dtensor.
/// The op graph is released afterwards; a second call on the same loss throws.
template <typename T>
void backward(const Tensor<T>& loss);

/// Disables graph recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

/// Toggle the post-op NaN/Inf scan (on by default).
void set_check_finite(bool enabled);
bool check_finite_enabled();

}  // namespace afft::core
