#include "afft/model/layers.hpp"

namespace afft::nn {

using core::ParameterSet;

template <typename T>
Linear<T>::Linear(std::size_t in, std::size_t out, std::mt19937_64& rng, bool bias)
    : weight(core::trunc_normal<T>({in, out}, rng)), has_bias(bias) {
  if (bias) this->bias = Tensor<T>::zeros({out}, true);
}

template <typename T>
Tensor<T> Linear<T>::forward(const Tensor<T>& x) const {
  return core::linear(x, weight, has_bias ? &bias : nullptr);
}

template <typename T>
void Linear<T>::register_parameters(ParameterSet<T>& params, const std::string& prefix) const {
  params.add(prefix + ".weight", weight);
  if (has_bias) params.add(prefix + ".bias", bias);
}

template <typename T>
LayerNorm<T>::LayerNorm(std::size_t dim) : gamma(Tensor<T>::full({dim}, T(1), true)), beta(Tensor<T>::zeros({dim}, true)) {}

template <typename T>
void LayerNorm<T>::register_parameters(ParameterSet<T>& params, const std::string& prefix) const {
  params.add(prefix + ".gamma", gamma);
  params.add(prefix + ".beta", beta);
}

template <typename T>
MultiHeadAttention<T>::MultiHeadAttention(std::size_t dim, std::size_t heads, std::mt19937_64& rng)
    : heads(heads), wq(dim, dim, rng), wk(dim, dim, rng), wv(dim, dim, rng), wo(dim, dim, rng) {
  if (heads == 0 || dim % heads != 0) {
    throw ConfigError("dim " + std::to_string(dim) + " not divisible by " + std::to_string(heads) + " heads");
  }
}

template <typename T>
Tensor<T> MultiHeadAttention<T>::forward(const Tensor<T>& query, const Tensor<T>& memory, const core::Mask* mask,
                                         core::AttentionTrace* capture) const {
  auto q = wq.forward(query);
  auto k = wk.forward(memory);
  auto v = wv.forward(memory);
  return wo.forward(core::attention(q, k, v, heads, mask, capture));
}

template <typename T>
void MultiHeadAttention<T>::register_parameters(ParameterSet<T>& params, const std::string& prefix) const {
  wq.register_parameters(params, prefix + ".wq");
  wk.register_parameters(params, prefix + ".wk");
  wv.register_parameters(params, prefix + ".wv");
  wo.register_parameters(params, prefix + ".wo");
}

template <typename T>
Mlp<T>::Mlp(std::size_t dim, std::size_t hidden, std::mt19937_64& rng) : fc1(dim, hidden, rng), fc2(hidden, dim, rng) {}

template <typename T>
Tensor<T> Mlp<T>::forward(const Tensor<T>& x, double dropout, const ForwardContext& ctx) const {
  auto h = core::gelu(fc1.forward(x));
  if (ctx.training && dropout > 0) h = core::dropout(h, dropout, *ctx.rng);
  auto out = fc2.forward(h);
  if (ctx.training && dropout > 0) out = core::dropout(out, dropout, *ctx.rng);
  return out;
}

template <typename T>
void Mlp<T>::register_parameters(ParameterSet<T>& params, const std::string& prefix) const {
  fc1.register_parameters(params, prefix + ".fc1");
  fc2.register_parameters(params, prefix + ".fc2");
}

double drop_path_rate(double max_rate, std::size_t block, std::size_t blocks) {
  if (blocks == 0) return 0.0;
  return max_rate * static_cast<double>(block + 1) / static_cast<double>(blocks);
}

template <typename T>
Tensor<T> regularize_branch(const Tensor<T>& branch, double dropout, double drop_path, const ForwardContext& ctx) {
  if (!ctx.training) return branch;
  if ((dropout > 0 || drop_path > 0) && !ctx.rng) throw ConfigError("training forward requires an rng");
  Tensor<T> out = branch;
  if (dropout > 0) out = core::dropout(out, dropout, *ctx.rng);
  if (drop_path > 0) out = core::drop_path(out, drop_path, *ctx.rng);
  return out;
}

template <typename T>
EncoderBlock<T>::EncoderBlock(const BlockConfig& cfg, std::mt19937_64& rng)
    : config(cfg),
      norm1(cfg.dim),
      norm2(cfg.dim),
      attn(cfg.dim, cfg.heads, rng),
      mlp(cfg.dim, cfg.dim * cfg.mlp_ratio, rng) {}

template <typename T>
Tensor<T> EncoderBlock<T>::forward(const Tensor<T>& x, const core::Mask* mask, const ForwardContext& ctx) const {
  auto h = norm1.forward(x);
  auto a = attn.forward(h, h, mask, ctx.trace);
  auto y = core::add(x, regularize_branch(a, config.dropout, config.drop_path, ctx));
  auto m = mlp.forward(norm2.forward(y), config.dropout, ctx);
  return core::add(y, regularize_branch(m, 0.0, config.drop_path, ctx));
}

template <typename T>
void EncoderBlock<T>::register_parameters(ParameterSet<T>& params, const std::string& prefix) const {
  norm1.register_parameters(params, prefix + ".norm1");
  attn.register_parameters(params, prefix + ".attn");
  norm2.register_parameters(params, prefix + ".norm2");
  mlp.register_parameters(params, prefix + ".mlp");
}

template <typename T>
DecoderBlock<T>::DecoderBlock(const BlockConfig& cfg, std::mt19937_64& rng)
    : config(cfg),
      norm1(cfg.dim),
      norm2(cfg.dim),
      norm3(cfg.dim),
      self_attn(cfg.dim, cfg.heads, rng),
      cross_attn(cfg.dim, cfg.heads, rng),
      mlp(cfg.dim, cfg.dim * cfg.mlp_ratio, rng) {}

template <typename T>
Tensor<T> DecoderBlock<T>::forward(const Tensor<T>& x, const Tensor<T>& memory, const core::Mask* self_mask,
                                   const core::Mask* cross_mask, const ForwardContext& ctx) const {
  auto h = norm1.forward(x);
  auto s = self_attn.forward(h, h, self_mask, ctx.trace);
  auto y = core::add(x, regularize_branch(s, config.dropout, config.drop_path, ctx));
  auto c = cross_attn.forward(norm2.forward(y), memory, cross_mask, ctx.trace);
  y = core::add(y, regularize_branch(c, config.dropout, config.drop_path, ctx));
  auto m = mlp.forward(norm3.forward(y), config.dropout, ctx);
  return core::add(y, regularize_branch(m, 0.0, config.drop_path, ctx));
}

template <typename T>
void DecoderBlock<T>::register_parameters(ParameterSet<T>& params, const std::string& prefix) const {
  norm1.register_parameters(params, prefix + ".norm1");
  self_attn.register_parameters(params, prefix + ".self_attn");
  norm2.register_parameters(params, prefix + ".norm2");
  cross_attn.register_parameters(params, prefix + ".cross_attn");
  norm3.register_parameters(params, prefix + ".norm3");
  mlp.register_parameters(params, prefix + ".mlp");
}

#define AFFT_INSTANTIATE_LAYERS(T)                                                                           \
  template class Linear<T>;                                                                                  \
  template class LayerNorm<T>;                                                                               \
  template class MultiHeadAttention<T>;                                                                      \
  template class Mlp<T>;                                                                                     \
  template class EncoderBlock<T>;                                                                            \
  template class DecoderBlock<T>;                                                                            \
  template Tensor<T> regularize_branch(const Tensor<T>&, double, double, const ForwardContext&);

AFFT_INSTANTIATE_LAYERS(float)
AFFT_INSTANTIATE_LAYERS(double)

}  // namespace afft::nn
