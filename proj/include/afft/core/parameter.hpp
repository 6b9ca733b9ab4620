#pragma once

#include <map>
#include <random>
#include <string>
#include <vector>

#include "afft/core/tensor.hpp"

namespace afft::core {

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> tensor;
};

/// Ordered, name-unique collection of trainable tensors.
template <typename T>
class ParameterSet {
 public:
  void add(const std::string& name, const Tensor<T>& tensor);
  const std::vector<Parameter<T>>& items() const { return items_; }
  std::size_t size() const { return items_.size(); }
  const Tensor<T>& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  void zero_grad();
  std::size_t scalar_count() const;

 private:
  std::vector<Parameter<T>> items_;
  std::map<std::string, std::size_t> index_;
};

/// Truncated normal (cut at two standard deviations), std 0.02 unless stated.
template <typename T>
Tensor<T> trunc_normal(Shape shape, std::mt19937_64& rng, double stddev = 0.02);

/// Velocity buffers keyed by parameter name.
template <typename T>
struct MomentumState {
  std::map<std::string, std::vector<T>> velocity;
};

/// Classical momentum with L2 decay folded into the gradient:
///   v <- momentum * v + g + weight_decay * theta;  theta <- theta - lr * v
template <typename T>
void sgd_momentum_step(const ParameterSet<T>& params, double lr, double momentum, double weight_decay,
                       MomentumState<T>& state);

}  // namespace afft::core
