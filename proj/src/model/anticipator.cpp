#include "afft/model/anticipator.hpp"

#include "afft/core/error.hpp"

namespace afft::model {

using core::Mask;
using core::ParameterSet;
using core::TokenRole;

void AnticipatorConfig::validate() const {
  if (layers == 0) throw ConfigError("anticipator needs at least one layer");
  if (dim == 0 || heads == 0 || dim % heads != 0) {
    throw ConfigError("anticipator dim " + std::to_string(dim) + " not divisible by " + std::to_string(heads) + " heads");
  }
  if (max_len == 0) throw ConfigError("anticipator max_len must be positive");
  if (dropout < 0 || dropout >= 1 || drop_path < 0 || drop_path >= 1) throw ConfigError("anticipator rates must be in [0, 1)");
}

template <typename T>
Anticipator<T>::Anticipator(const AnticipatorConfig& cfg, std::size_t classes, std::mt19937_64& rng)
    : positions(core::trunc_normal<T>({cfg.max_len, cfg.dim}, rng)), norm(cfg.dim), cfg_(cfg) {
  cfg.validate();
  if (classes == 0) throw ConfigError("anticipator needs at least one class");
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    nn::BlockConfig b;
    b.dim = cfg.dim;
    b.heads = cfg.heads;
    b.dropout = cfg.dropout;
    b.drop_path = nn::drop_path_rate(cfg.drop_path, l, cfg.layers);
    blocks.emplace_back(b, rng);
  }
  head = nn::Linear<T>(cfg.dim, classes, rng);
}

template <typename T>
AnticipationOutput<T> Anticipator<T>::forward(const Tensor<T>& z, const ForwardContext& ctx) const {
  if (z.rank() != 3 || z.dim(2) != cfg_.dim) {
    throw ShapeError("anticipator expects [B, T, " + std::to_string(cfg_.dim) + "], got " + core::shape_str(z.shape()));
  }
  const std::size_t steps = z.dim(1);
  if (steps > cfg_.max_len) {
    throw ConfigError("sequence length " + std::to_string(steps) + " exceeds anticipator max_len " +
                      std::to_string(cfg_.max_len));
  }
  auto x = add_positions(z, positions);
  if (ctx.training && cfg_.dropout > 0) x = core::dropout(x, cfg_.dropout, *ctx.rng);
  const Mask causal = Mask::causal(steps);
  std::vector<TokenRole> roles;
  for (std::size_t t = 0; t < steps; ++t) roles.push_back(TokenRole{TokenRole::Kind::kTimestep, -1, static_cast<int>(t)});
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    x = blocks[l].forward(x, &causal, ctx);
    if (ctx.trace) {
      auto& map = ctx.trace->layers.back();
      map.label = "anticipator.blocks." + std::to_string(l);
      map.query_roles = roles;
      map.key_roles = roles;
    }
  }
  if (ctx.trace) ctx.trace->source = core::AttentionTrace::Source::kAnticipator;
  AnticipationOutput<T> out;
  out.features = norm.forward(x);
  out.logits = head.forward(out.features);
  return out;
}

template <typename T>
void Anticipator<T>::register_parameters(ParameterSet<T>& params, const std::string& prefix) const {
  params.add(prefix + ".positions", positions);
  for (std::size_t l = 0; l < blocks.size(); ++l) blocks[l].register_parameters(params, prefix + ".blocks." + std::to_string(l));
  norm.register_parameters(params, prefix + ".norm");
  head.register_parameters(params, prefix + ".head");
}

BatchTargets hard_targets(const std::vector<int>& next_labels, const std::vector<std::vector<int>>& frame_labels,
                          std::size_t steps, std::size_t classes) {
  const std::size_t B = next_labels.size();
  auto one_hot = [&](core::SoftTargets& st, std::size_t row, int label) {
    if (label == data::kIgnoreLabel) return;
    if (label < 0 || static_cast<std::size_t>(label) >= classes) {
      throw ConfigError("label " + std::to_string(label) + " out of range for " + std::to_string(classes) + " classes");
    }
    st.probs[row * classes + static_cast<std::size_t>(label)] = 1.0;
    st.valid[row] = 1;
  };
  BatchTargets t;
  t.next = {B, classes, std::vector<double>(B * classes, 0.0), std::vector<std::uint8_t>(B, 0)};
  t.frames = {B * steps, classes, std::vector<double>(B * steps * classes, 0.0), std::vector<std::uint8_t>(B * steps, 0)};
  for (std::size_t b = 0; b < B; ++b) {
    one_hot(t.next, b, next_labels[b]);
    if (b < frame_labels.size() && !frame_labels[b].empty()) {
      if (frame_labels[b].size() != steps) throw DataError("frame label count does not match T");
      for (std::size_t s = 0; s < steps; ++s) one_hot(t.frames, b * steps + s, frame_labels[b][s]);
    }
  }
  return t;
}

template <typename T>
LossTerms<T> total_loss(const AnticipationOutput<T>& out, const Tensor<T>& z, const BatchTargets& targets,
                        const LossWeights& weights) {
  const std::size_t B = out.logits.dim(0), steps = out.logits.dim(1), C = out.logits.dim(2);
  if (targets.next.rows != B || targets.next.classes != C || targets.frames.rows != B * steps ||
      targets.frames.classes != C) {
    throw ShapeError("loss targets do not match logits " + core::shape_str(out.logits.shape()));
  }
  LossTerms<T> terms;
  terms.next = core::cross_entropy(core::reshape(core::slice(out.logits, 1, steps - 1, steps), {B, C}), targets.next);
  if (steps > 1) {
    const std::size_t n = B * (steps - 1);
    core::SoftTargets cls{n, C, std::vector<double>(n * C), std::vector<std::uint8_t>(n)};
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t s = 1; s < steps; ++s) {
        const std::size_t src = b * steps + s, dst = b * (steps - 1) + (s - 1);
        cls.valid[dst] = targets.frames.valid[src];
        std::copy_n(targets.frames.probs.begin() + static_cast<std::ptrdiff_t>(src * C), C,
                    cls.probs.begin() + static_cast<std::ptrdiff_t>(dst * C));
      }
    }
    terms.cls = core::cross_entropy(core::reshape(core::slice(out.logits, 1, 0, steps - 1), {n, C}), cls);
    terms.feat = core::mse(core::slice(out.features, 1, 0, steps - 1), core::slice(z, 1, 1, steps));
  } else {
    terms.cls = Tensor<T>::scalar(T(0));
    terms.feat = Tensor<T>::scalar(T(0));
  }
  terms.total = core::add(core::add(core::scale(terms.next, static_cast<T>(weights.next)),
                                    core::scale(terms.cls, static_cast<T>(weights.cls))),
                          core::scale(terms.feat, static_cast<T>(weights.feat)));
  return terms;
}

template <typename T>
AfftModel<T>::AfftModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  if (cfg_.classes == 0) throw ConfigError("model needs at least one class");
  if (cfg_.fuser.out_dim == 0) cfg_.fuser.out_dim = cfg_.anticipator.dim;
  std::mt19937_64 rng(seed);
  fuser_ = make_fuser<T>(cfg_.fuser, cfg_.modalities, rng);
  anticipator_ = Anticipator<T>(cfg_.anticipator, cfg_.classes, rng);
  fuser_->register_parameters(params_, "fuser");
  anticipator_.register_parameters(params_, "anticipator");
}

template <typename T>
ModelOutput<T> AfftModel<T>::forward(const std::vector<Tensor<T>>& inputs, const ForwardContext& ctx) const {
  ModelOutput<T> out;
  out.z = fuser_->forward(inputs, ctx);
  out.anticipation = anticipator_.forward(out.z, ctx);
  return out;
}

template <typename T>
ModelOutput<T> AfftModel<T>::forward_traced(const std::vector<Tensor<T>>& inputs, core::AttentionTrace& fuser_trace,
                                            core::AttentionTrace& anticipator_trace) const {
  ForwardContext fctx;
  fctx.trace = &fuser_trace;
  ForwardContext actx;
  actx.trace = &anticipator_trace;
  ModelOutput<T> out;
  out.z = fuser_->forward(inputs, fctx);
  out.anticipation = anticipator_.forward(out.z, actx);
  return out;
}

template class Anticipator<float>;
template class Anticipator<double>;
template class AfftModel<float>;
template class AfftModel<double>;
template LossTerms<float> total_loss(const AnticipationOutput<float>&, const Tensor<float>&, const BatchTargets&,
                                     const LossWeights&);
template LossTerms<double> total_loss(const AnticipationOutput<double>&, const Tensor<double>&, const BatchTargets&,
                                      const LossWeights&);

}  // namespace afft::model
