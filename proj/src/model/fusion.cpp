#include "afft/model/fusion.hpp"

#include <algorithm>

#include "afft/core/error.hpp"

namespace afft::model {

using core::AttentionTrace;
using core::Mask;
using core::ParameterSet;
using core::TokenRole;

FuserKind parse_fuser_kind(const std::string& s) {
  if (s == "sa") return FuserKind::kSA;
  if (s == "sa_no_token") return FuserKind::kSANoToken;
  if (s == "tsa") return FuserKind::kTSA;
  if (s == "ca") return FuserKind::kCA;
  throw ConfigError("unknown fuser kind '" + s + "' (expected sa, sa_no_token, tsa, ca)");
}

std::string to_string(FuserKind kind) {
  switch (kind) {
    case FuserKind::kSA: return "sa";
    case FuserKind::kSANoToken: return "sa_no_token";
    case FuserKind::kTSA: return "tsa";
    case FuserKind::kCA: return "ca";
  }
  return "?";
}

ProjectionPolicy parse_projection(const std::string& s) {
  if (s == "sparse_linear") return ProjectionPolicy::kSparseLinear;
  if (s == "linear") return ProjectionPolicy::kLinear;
  if (s == "linear_relu") return ProjectionPolicy::kLinearRelu;
  if (s == "glu") return ProjectionPolicy::kGlu;
  throw ConfigError("unknown projection policy '" + s + "' (expected sparse_linear, linear, linear_relu, glu)");
}

std::string to_string(ProjectionPolicy policy) {
  switch (policy) {
    case ProjectionPolicy::kSparseLinear: return "sparse_linear";
    case ProjectionPolicy::kLinear: return "linear";
    case ProjectionPolicy::kLinearRelu: return "linear_relu";
    case ProjectionPolicy::kGlu: return "glu";
  }
  return "?";
}

void FuserConfig::validate(std::size_t modality_count) const {
  if (modality_count == 0) throw ConfigError("fuser needs at least one modality");
  if (dim == 0 || heads == 0 || dim % heads != 0) {
    throw ConfigError("fuser dim " + std::to_string(dim) + " not divisible by " + std::to_string(heads) + " heads");
  }
  if (kind != FuserKind::kCA && layers == 0) throw ConfigError("fuser needs at least one block");
  if (max_len == 0) throw ConfigError("fuser max_len must be positive");
  if (dropout < 0 || dropout >= 1 || drop_path < 0 || drop_path >= 1) throw ConfigError("fuser rates must be in [0, 1)");
}

template <typename T>
ModalityProjection<T>::ModalityProjection(ProjectionPolicy policy, std::size_t in_dim, std::size_t dim,
                                          std::mt19937_64& rng)
    : policy(policy) {
  if (policy == ProjectionPolicy::kSparseLinear && in_dim == dim) {
    identity_ = true;
    return;
  }
  value = nn::Linear<T>(in_dim, dim, rng);
  if (policy == ProjectionPolicy::kGlu) gate = nn::Linear<T>(in_dim, dim, rng);
}

template <typename T>
Tensor<T> ModalityProjection<T>::forward(const Tensor<T>& x) const {
  if (identity_) return x;
  switch (policy) {
    case ProjectionPolicy::kSparseLinear:
    case ProjectionPolicy::kLinear:
      return value.forward(x);
    case ProjectionPolicy::kLinearRelu:
      return core::relu(value.forward(x));
    case ProjectionPolicy::kGlu:
      return core::mul(core::sigmoid(gate.forward(x)), value.forward(x));
  }
  return x;
}

template <typename T>
void ModalityProjection<T>::register_parameters(ParameterSet<T>& params, const std::string& prefix) const {
  if (identity_) return;
  value.register_parameters(params, prefix + ".value");
  if (policy == ProjectionPolicy::kGlu) gate.register_parameters(params, prefix + ".gate");
}

template <typename T>
Tensor<T> add_positions(const Tensor<T>& x, const Tensor<T>& table) {
  const std::size_t steps = x.dim(1);
  if (steps > table.dim(0)) {
    throw ConfigError("sequence length " + std::to_string(steps) + " exceeds positional table size " +
                      std::to_string(table.dim(0)));
  }
  return core::add(x, core::slice(table, 0, 0, steps));
}

template <typename T>
Fuser<T>::Fuser(const FuserConfig& cfg, const std::vector<data::ModalitySpec>& modalities, std::mt19937_64& rng)
    : cfg_(cfg), modalities_(modalities) {
  cfg_.validate(modalities.size());
  for (const auto& m : modalities_) projections_.emplace_back(cfg_.projection, m.dim, cfg_.dim, rng);
  if (cfg_.out_dim && cfg_.out_dim != cfg_.dim) {
    has_post_ = true;
    post_ = nn::Linear<T>(cfg_.dim, cfg_.out_dim, rng);
  }
}

template <typename T>
std::vector<Tensor<T>> Fuser<T>::project(const std::vector<Tensor<T>>& inputs) const {
  if (inputs.size() != modalities_.size()) {
    throw ShapeError("fuser expects " + std::to_string(modalities_.size()) + " modalities, got " +
                     std::to_string(inputs.size()));
  }
  std::vector<Tensor<T>> out;
  for (std::size_t m = 0; m < inputs.size(); ++m) {
    const auto& x = inputs[m];
    if (x.rank() != 3 || x.dim(2) != modalities_[m].dim || x.dim(0) != inputs[0].dim(0) || x.dim(1) != inputs[0].dim(1)) {
      throw ShapeError("modality '" + modalities_[m].name + "' input has shape " + core::shape_str(x.shape()));
    }
    out.push_back(projections_[m].forward(x));
  }
  return out;
}

template <typename T>
Tensor<T> Fuser<T>::forward(const std::vector<Tensor<T>>& inputs, const ForwardContext& ctx) const {
  auto z = fuse_projected(project(inputs), ctx);
  return has_post_ ? post_.forward(z) : z;
}

template <typename T>
void Fuser<T>::register_parameters(ParameterSet<T>& params, const std::string& prefix) const {
  for (std::size_t m = 0; m < modalities_.size(); ++m) {
    projections_[m].register_parameters(params, prefix + ".proj." + modalities_[m].name);
  }
  register_fusion(params, prefix);
  if (has_post_) post_.register_parameters(params, prefix + ".post");
}

template <typename T>
nn::BlockConfig Fuser<T>::block_config(std::size_t block, std::size_t blocks) const {
  nn::BlockConfig b;
  b.dim = cfg_.dim;
  b.heads = cfg_.heads;
  b.dropout = cfg_.dropout;
  b.drop_path = nn::drop_path_rate(cfg_.drop_path, block, blocks);
  return b;
}

namespace {

void annotate_last(AttentionTrace* trace, std::size_t count, const std::string& label,
                   const std::vector<TokenRole>& queries, const std::vector<TokenRole>& keys) {
  if (!trace) return;
  for (std::size_t i = trace->layers.size() - count; i < trace->layers.size(); ++i) {
    trace->layers[i].label = label;
    trace->layers[i].query_roles = queries;
    trace->layers[i].key_roles = keys;
  }
}

TokenRole role(TokenRole::Kind kind, int modality, int timestep) { return TokenRole{kind, modality, timestep}; }

// Concatenates [B, T, d] inputs, each reshaped to [B*T, 1, d], along the token axis.
template <typename T>
std::vector<Tensor<T>> as_step_tokens(const std::vector<Tensor<T>>& projected) {
  std::vector<Tensor<T>> out;
  for (const auto& x : projected) out.push_back(core::reshape(x, {x.dim(0) * x.dim(1), 1, x.dim(2)}));
  return out;
}

}  // namespace

template <typename T>
SelfAttentionFuser<T>::SelfAttentionFuser(const FuserConfig& cfg, const std::vector<data::ModalitySpec>& modalities,
                                          std::mt19937_64& rng)
    : Fuser<T>(cfg, modalities, rng), norm(cfg.dim) {
  if (with_token()) token = core::trunc_normal<T>({1, cfg.dim}, rng);
  for (std::size_t l = 0; l < cfg.layers; ++l) blocks.emplace_back(this->block_config(l, cfg.layers), rng);
}

template <typename T>
Tensor<T> SelfAttentionFuser<T>::fuse_projected(const std::vector<Tensor<T>>& projected,
                                                const ForwardContext& ctx) const {
  const std::size_t B = projected[0].dim(0), steps = projected[0].dim(1), d = projected[0].dim(2);
  const std::size_t M = projected.size();
  auto parts = as_step_tokens(projected);
  std::vector<TokenRole> roles;
  if (with_token()) {
    parts.insert(parts.begin(), core::add(Tensor<T>::zeros({B * steps, 1, d}), token));
    roles.push_back(role(TokenRole::Kind::kFusionToken, -1, -1));
  }
  for (std::size_t m = 0; m < M; ++m) roles.push_back(role(TokenRole::Kind::kModality, static_cast<int>(m), -1));
  auto x = core::concat(parts, 1);
  if (!bypass_blocks) {
    for (std::size_t l = 0; l < blocks.size(); ++l) {
      x = blocks[l].forward(x, nullptr, ctx);
      annotate_last(ctx.trace, 1, "fuser.blocks." + std::to_string(l), roles, roles);
    }
  }
  if (ctx.trace) {
    ctx.trace->source = with_token() ? AttentionTrace::Source::kSelfAttentionFuserToken
                                     : AttentionTrace::Source::kSelfAttentionFuserTokenless;
  }
  Tensor<T> out = with_token() ? core::reshape(core::slice(x, 1, 0, 1), {B * steps, d}) : core::mean_axis(x, 1);
  if (this->cfg_.final_norm) out = norm.forward(out);
  return core::reshape(out, {B, steps, d});
}

template <typename T>
void SelfAttentionFuser<T>::register_fusion(ParameterSet<T>& params, const std::string& prefix) const {
  if (with_token()) params.add(prefix + ".token", token);
  for (std::size_t l = 0; l < blocks.size(); ++l) blocks[l].register_parameters(params, prefix + ".blocks." + std::to_string(l));
  if (this->cfg_.final_norm) norm.register_parameters(params, prefix + ".norm");
}

template <typename T>
TemporalFuser<T>::TemporalFuser(const FuserConfig& cfg, const std::vector<data::ModalitySpec>& modalities,
                                std::mt19937_64& rng)
    : Fuser<T>(cfg, modalities, rng),
      query_tokens(core::trunc_normal<T>({cfg.max_len, cfg.dim}, rng)),
      positions(core::trunc_normal<T>({cfg.max_len, cfg.dim}, rng)),
      norm(cfg.dim) {
  for (std::size_t l = 0; l < cfg.layers; ++l) blocks.emplace_back(this->block_config(l, cfg.layers), rng);
}

template <typename T>
Mask TemporalFuser<T>::attention_mask(std::size_t steps, std::size_t modality_count) {
  const std::size_t n = (modality_count + 1) * steps;
  Mask mask;
  mask.shape = {n, n};
  mask.allow.assign(n * n, 0);
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = 0; b < n; ++b) mask.allow[a * n + b] = (b % steps) <= (a % steps) ? 1 : 0;
  return mask;
}

template <typename T>
Tensor<T> TemporalFuser<T>::fuse_projected(const std::vector<Tensor<T>>& projected, const ForwardContext& ctx) const {
  const std::size_t B = projected[0].dim(0), steps = projected[0].dim(1), d = projected[0].dim(2);
  const std::size_t M = projected.size();
  if (steps > this->cfg_.max_len) {
    throw ConfigError("sequence length " + std::to_string(steps) + " exceeds fuser max_len " +
                      std::to_string(this->cfg_.max_len));
  }
  std::vector<Tensor<T>> parts;
  auto queries = core::add(Tensor<T>::zeros({B, steps, d}), core::slice(query_tokens, 0, 0, steps));
  parts.push_back(add_positions(queries, positions));
  for (const auto& x : projected) parts.push_back(add_positions(x, positions));
  auto x = core::concat(parts, 1);

  std::vector<TokenRole> roles;
  for (std::size_t t = 0; t < steps; ++t) roles.push_back(role(TokenRole::Kind::kQueryToken, -1, static_cast<int>(t)));
  for (std::size_t m = 0; m < M; ++m)
    for (std::size_t t = 0; t < steps; ++t)
      roles.push_back(role(TokenRole::Kind::kModality, static_cast<int>(m), static_cast<int>(t)));

  const Mask mask = attention_mask(steps, M);
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    x = blocks[l].forward(x, &mask, ctx);
    annotate_last(ctx.trace, 1, "fuser.blocks." + std::to_string(l), roles, roles);
  }
  if (ctx.trace) ctx.trace->source = AttentionTrace::Source::kTemporalFuser;
  auto out = core::slice(x, 1, 0, steps);
  if (this->cfg_.final_norm) out = norm.forward(out);
  return out;
}

template <typename T>
void TemporalFuser<T>::register_fusion(ParameterSet<T>& params, const std::string& prefix) const {
  params.add(prefix + ".query_tokens", query_tokens);
  params.add(prefix + ".positions", positions);
  for (std::size_t l = 0; l < blocks.size(); ++l) blocks[l].register_parameters(params, prefix + ".blocks." + std::to_string(l));
  if (this->cfg_.final_norm) norm.register_parameters(params, prefix + ".norm");
}

template <typename T>
CrossAttentionFuser<T>::CrossAttentionFuser(const FuserConfig& cfg, const std::vector<data::ModalitySpec>& modalities,
                                            std::mt19937_64& rng)
    : Fuser<T>(cfg, modalities, rng) {
  auto index_of = [&](const std::string& name) {
    for (std::size_t m = 0; m < modalities.size(); ++m)
      if (modalities[m].name == name) return m;
    throw ConfigError("CA fuser: modality '" + name + "' not present");
  };
  main_ = cfg.main_modality.empty() ? 0 : index_of(cfg.main_modality);
  if (cfg.modality_order.empty()) {
    for (std::size_t m = 0; m < modalities.size(); ++m)
      if (m != main_) others_.push_back(m);
  } else {
    for (const auto& name : cfg.modality_order) {
      const std::size_t m = index_of(name);
      if (m == main_) continue;
      if (std::find(others_.begin(), others_.end(), m) != others_.end()) {
        throw ConfigError("CA fuser: modality '" + name + "' listed twice");
      }
      others_.push_back(m);
    }
    if (others_.size() + 1 != modalities.size()) throw ConfigError("CA fuser: modality_order must list every modality");
  }
  const std::size_t tables = cfg.per_modality_positions ? modalities.size() : 1;
  for (std::size_t i = 0; i < tables; ++i) positions.push_back(core::trunc_normal<T>({cfg.max_len, cfg.dim}, rng));
  for (std::size_t j = 0; j < others_.size(); ++j) blocks.emplace_back(this->block_config(j, others_.size()), rng);
}

template <typename T>
const Tensor<T>& CrossAttentionFuser<T>::position_table(std::size_t modality) const {
  return positions.size() == 1 ? positions[0] : positions[modality];
}

template <typename T>
Tensor<T> CrossAttentionFuser<T>::fuse_projected(const std::vector<Tensor<T>>& projected,
                                                 const ForwardContext& ctx) const {
  const std::size_t steps = projected[0].dim(1);
  if (steps > this->cfg_.max_len) {
    throw ConfigError("sequence length " + std::to_string(steps) + " exceeds fuser max_len " +
                      std::to_string(this->cfg_.max_len));
  }
  auto x = add_positions(projected[main_], position_table(main_));
  // Cross-attention is masked like self-attention so z_i never sees another modality's future.
  const Mask causal = Mask::causal(steps);
  std::vector<TokenRole> stream;
  for (std::size_t t = 0; t < steps; ++t)
    stream.push_back(role(TokenRole::Kind::kModality, static_cast<int>(main_), static_cast<int>(t)));
  for (std::size_t j = 0; j < blocks.size(); ++j) {
    const std::size_t m = others_[j];
    auto memory = add_positions(projected[m], position_table(m));
    x = blocks[j].forward(x, memory, &causal, &causal, ctx);
    if (ctx.trace) {
      std::vector<TokenRole> keys;
      for (std::size_t t = 0; t < steps; ++t) keys.push_back(role(TokenRole::Kind::kModality, static_cast<int>(m), static_cast<int>(t)));
      const std::string label = "fuser.blocks." + std::to_string(j);
      auto& layers = ctx.trace->layers;
      layers[layers.size() - 2].label = label + ".self";
      layers[layers.size() - 2].query_roles = stream;
      layers[layers.size() - 2].key_roles = stream;
      layers.back().label = label + ".cross";
      layers.back().query_roles = stream;
      layers.back().key_roles = keys;
    }
  }
  if (ctx.trace) ctx.trace->source = AttentionTrace::Source::kCrossAttentionFuser;
  return x;
}

template <typename T>
void CrossAttentionFuser<T>::register_fusion(ParameterSet<T>& params, const std::string& prefix) const {
  if (positions.size() == 1) {
    params.add(prefix + ".positions", positions[0]);
  } else {
    for (std::size_t m = 0; m < positions.size(); ++m) params.add(prefix + ".positions." + this->modalities_[m].name, positions[m]);
  }
  for (std::size_t j = 0; j < blocks.size(); ++j) blocks[j].register_parameters(params, prefix + ".blocks." + std::to_string(j));
}

template <typename T>
std::unique_ptr<Fuser<T>> make_fuser(const FuserConfig& cfg, const std::vector<data::ModalitySpec>& modalities,
                                     std::mt19937_64& rng) {
  switch (cfg.kind) {
    case FuserKind::kSA:
    case FuserKind::kSANoToken:
      return std::make_unique<SelfAttentionFuser<T>>(cfg, modalities, rng);
    case FuserKind::kTSA:
      return std::make_unique<TemporalFuser<T>>(cfg, modalities, rng);
    case FuserKind::kCA:
      return std::make_unique<CrossAttentionFuser<T>>(cfg, modalities, rng);
  }
  throw ConfigError("unknown fuser kind");
}

#define AFFT_INSTANTIATE_FUSION(T)                                                                                 \
  template class ModalityProjection<T>;                                                                            \
  template class Fuser<T>;                                                                                         \
  template class SelfAttentionFuser<T>;                                                                            \
  template class TemporalFuser<T>;                                                                                 \
  template class CrossAttentionFuser<T>;                                                                           \
  template std::unique_ptr<Fuser<T>> make_fuser(const FuserConfig&, const std::vector<data::ModalitySpec>&,        \
                                                std::mt19937_64&);                                                 \
  template Tensor<T> add_positions(const Tensor<T>&, const Tensor<T>&);

AFFT_INSTANTIATE_FUSION(float)
AFFT_INSTANTIATE_FUSION(double)

}  // namespace afft::model
