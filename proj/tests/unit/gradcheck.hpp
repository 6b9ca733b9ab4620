#pragma once

// Central finite-difference oracle shared by the gradient tests.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "afft/core/ops.hpp"
#include "afft/core/tensor.hpp"

namespace afft::testing {

using core::Tensor;

inline Tensor<double> random_tensor(core::Shape shape, std::mt19937_64& rng, double scale = 1.0,
                                    bool requires_grad = true) {
  std::normal_distribution<double> n(0.0, scale);
  std::vector<double> v(core::shape_numel(shape));
  for (auto& x : v) x = n(rng);
  return Tensor<double>(std::move(shape), std::move(v), requires_grad);
}

// ||a - n|| / max(||a||, ||n||, 1e-3). The floor covers parameters whose exact gradient is zero
// (e.g. key biases, which softmax shift invariance cancels), where both sides are pure rounding noise.
inline double relative_error(const std::vector<double>& a, const std::vector<double>& n) {
  double diff = 0, na = 0, nn = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - n[i]) * (a[i] - n[i]);
    na += a[i] * a[i];
    nn += n[i] * n[i];
  }
  return std::sqrt(diff) / std::max(std::sqrt(std::max(na, nn)), 1e-3);
}

inline std::vector<double> numeric_gradient(const std::function<Tensor<double>()>& loss, Tensor<double> x,
                                            double h = 1e-6) {
  core::NoGradGuard guard;
  auto data = x.mutable_data();
  std::vector<double> g(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    const double orig = data[i];
    data[i] = orig + h;
    const double up = loss().item();
    data[i] = orig - h;
    const double down = loss().item();
    data[i] = orig;
    g[i] = (up - down) / (2 * h);
  }
  return g;
}

// Worst relative error over all inputs between backward() and central differences.
inline double max_gradient_error(const std::function<Tensor<double>()>& loss, std::vector<Tensor<double>> inputs,
                                 double h = 1e-6) {
  for (auto& x : inputs) x.zero_grad();
  core::backward(loss());
  double worst = 0;
  for (auto& x : inputs) {
    const auto analytic = x.grad();
    const auto numeric = numeric_gradient(loss, x, h);
    worst = std::max(worst, relative_error(analytic, numeric));
  }
  return worst;
}

// Reduces an arbitrary-shaped output to a scalar with fixed random weights.
inline Tensor<double> weighted_sum(const Tensor<double>& y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto w = random_tensor(y.shape(), rng, 1.0, false);
  return core::sum(core::mul(y, w));
}

}  // namespace afft::testing
