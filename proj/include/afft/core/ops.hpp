#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <type_traits>
#include <vector>

#include "afft/core/attention_trace.hpp"
#include "afft/core/tensor.hpp"

namespace afft::core {

inline constexpr int kIgnoreIndex = -1;

/// Boolean keep-mask; 1 = position participates. Its shape must equal x's shape
/// or a suffix of it (broadcast over leading axes).
struct Mask {
  Shape shape;
  std::vector<std::uint8_t> allow;

  static Mask all(Shape shape);
  static Mask causal(std::size_t n);
  bool allowed(std::size_t flat) const { return allow[flat % allow.size()] != 0; }
};

/// Soft class targets for cross_entropy; rows with valid=0 are ignored.
struct SoftTargets {
  std::size_t rows = 0;
  std::size_t classes = 0;
  std::vector<double> probs;
  std::vector<std::uint8_t> valid;
};

template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
// Batched product: a[G, m, k] * b[G, k, n] -> [G, m, n].
template <typename T> Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b);
// x[..., in] * w[in, out] (+ bias[out]).
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const std::type_identity_t<Tensor<T>>* bias);

// Elementwise a + b; b may have the shape of a trailing suffix of a (broadcast over leading axes).
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T factor);
template <typename T> Tensor<T> relu(const Tensor<T>& x);
template <typename T> Tensor<T> gelu(const Tensor<T>& x);
template <typename T> Tensor<T> sigmoid(const Tensor<T>& x);
template <typename T> Tensor<T> log(const Tensor<T>& x);

template <typename T> Tensor<T> softmax(const Tensor<T>& x, std::ptrdiff_t axis = -1, const Mask* mask = nullptr);
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5));

/// Scaled dot-product attention on already-projected inputs.
/// q: [G, Tq, d], k/v: [G, Tk, d]; heads split d evenly; mask is [Tq, Tk].
/// When `capture` is set, the per-head softmax weights are appended to it.
template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads,
                    const Mask* mask = nullptr, AttentionTrace* capture = nullptr);

/// Mean cross-entropy over rows of logits [N, C] (or a single [C] vector) whose target is not kIgnoreIndex.
/// Returns 0 with zero gradient when every row is ignored.
template <typename T> Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> targets);
template <typename T> Tensor<T> cross_entropy(const Tensor<T>& logits, const SoftTargets& targets);

template <typename T> Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sum(const Tensor<T>& x);
template <typename T> Tensor<T> mean(const Tensor<T>& x);
template <typename T> Tensor<T> mean_axis(const Tensor<T>& x, std::size_t axis);

template <typename T> Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis);
template <typename T> Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t begin, std::size_t end);
template <typename T> Tensor<T> reshape(const Tensor<T>& x, Shape shape);

/// Inverted dropout; identity when p == 0.
template <typename T> Tensor<T> dropout(const Tensor<T>& x, double p, std::mt19937_64& rng);
/// Zeroes whole samples along axis 0 with probability p and rescales survivors by 1/(1-p).
template <typename T> Tensor<T> drop_path(const Tensor<T>& x, double p, std::mt19937_64& rng);

}  // namespace afft::core
