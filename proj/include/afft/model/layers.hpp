#pragma once

#include <random>
#include <string>

#include "afft/core/attention_trace.hpp"
#include "afft/core/ops.hpp"
#include "afft/core/parameter.hpp"

namespace afft::nn {

using core::Tensor;

/// Per-forward switches shared by every layer.
struct ForwardContext {
  bool training = false;
  std::mt19937_64* rng = nullptr;          // required when training with dropout/drop-path
  core::AttentionTrace* trace = nullptr;   // attention capture, optional
};

template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(std::size_t in, std::size_t out, std::mt19937_64& rng, bool bias = true);

  Tensor<T> forward(const Tensor<T>& x) const;
  void register_parameters(core::ParameterSet<T>& params, const std::string& prefix) const;

  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }

  Tensor<T> weight;  // [in, out]
  Tensor<T> bias;    // [out]
  bool has_bias = false;
};

template <typename T>
class LayerNorm {
 public:
  LayerNorm() = default;
  explicit LayerNorm(std::size_t dim);
  Tensor<T> forward(const Tensor<T>& x) const { return core::layer_norm(x, gamma, beta, T(1e-5)); }
  void register_parameters(core::ParameterSet<T>& params, const std::string& prefix) const;

  Tensor<T> gamma;
  Tensor<T> beta;
};

/// Projected multi-head attention: out = Wo · attend(Wq·q, Wk·kv, Wv·kv).
template <typename T>
class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(std::size_t dim, std::size_t heads, std::mt19937_64& rng);

  // query: [G, Tq, d], memory: [G, Tk, d], mask: [Tq, Tk] or null.
  Tensor<T> forward(const Tensor<T>& query, const Tensor<T>& memory, const core::Mask* mask,
                    core::AttentionTrace* capture) const;
  void register_parameters(core::ParameterSet<T>& params, const std::string& prefix) const;

  std::size_t heads = 1;
  Linear<T> wq, wk, wv, wo;
};

template <typename T>
class Mlp {
 public:
  Mlp() = default;
  Mlp(std::size_t dim, std::size_t hidden, std::mt19937_64& rng);
  Tensor<T> forward(const Tensor<T>& x, double dropout, const ForwardContext& ctx) const;
  void register_parameters(core::ParameterSet<T>& params, const std::string& prefix) const;

  Linear<T> fc1, fc2;
};

struct BlockConfig {
  std::size_t dim = 1024;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;
  double dropout = 0.1;
  double drop_path = 0.0;  // this block's residual-branch drop probability
};

/// Pre-norm encoder block: x += DropPath(Drop(MHA(LN x))); x += DropPath(MLP(LN x)).
template <typename T>
class EncoderBlock {
 public:
  EncoderBlock() = default;
  EncoderBlock(const BlockConfig& cfg, std::mt19937_64& rng);
  Tensor<T> forward(const Tensor<T>& x, const core::Mask* mask, const ForwardContext& ctx) const;
  void register_parameters(core::ParameterSet<T>& params, const std::string& prefix) const;

  BlockConfig config;
  LayerNorm<T> norm1, norm2;
  MultiHeadAttention<T> attn;
  Mlp<T> mlp;
};

/// Pre-norm decoder block: causal self-attention, cross-attention to `memory`, MLP.
template <typename T>
class DecoderBlock {
 public:
  DecoderBlock() = default;
  DecoderBlock(const BlockConfig& cfg, std::mt19937_64& rng);
  Tensor<T> forward(const Tensor<T>& x, const Tensor<T>& memory, const core::Mask* self_mask,
                    const core::Mask* cross_mask, const ForwardContext& ctx) const;
  void register_parameters(core::ParameterSet<T>& params, const std::string& prefix) const;

  BlockConfig config;
  LayerNorm<T> norm1, norm2, norm3;
  MultiHeadAttention<T> self_attn, cross_attn;
  Mlp<T> mlp;
};

/// Linear ramp of drop-path rates: block l (0-based) of L gets max_rate * (l + 1) / L.
double drop_path_rate(double max_rate, std::size_t block, std::size_t blocks);

/// Applies dropout then drop-path to a residual branch in training mode; identity otherwise.
template <typename T>
Tensor<T> regularize_branch(const Tensor<T>& branch, double dropout, double drop_path, const ForwardContext& ctx);

}  // namespace afft::nn
