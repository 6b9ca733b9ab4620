#pragma once

#include <memory>
#include <random>
#include <string>
#include <vector>

#include "afft/data/sequence.hpp"
#include "afft/model/layers.hpp"

namespace afft::model {

using core::Tensor;
using nn::ForwardContext;

enum class FuserKind { kSA, kSANoToken, kTSA, kCA };
enum class ProjectionPolicy { kSparseLinear, kLinear, kLinearRelu, kGlu };

FuserKind parse_fuser_kind(const std::string& s);
std::string to_string(FuserKind kind);
ProjectionPolicy parse_projection(const std::string& s);
std::string to_string(ProjectionPolicy policy);

struct FuserConfig {
  FuserKind kind = FuserKind::kSA;
  std::size_t dim = 1024;
  std::size_t layers = 6;
  std::size_t heads = 4;
  double dropout = 0.1;
  double drop_path = 0.1;  // maximum stochastic-depth rate, reached by the last block
  ProjectionPolicy projection = ProjectionPolicy::kSparseLinear;
  std::string main_modality;                // CA; empty selects the first modality
  std::vector<std::string> modality_order;  // CA; order of the cross-attended modalities
  bool final_norm = true;                   // SA / TSA output LayerNorm
  bool per_modality_positions = false;      // CA positional tables
  std::size_t max_len = 32;
  std::size_t out_dim = 0;                  // 0 keeps `dim`; otherwise a post projection is added

  void validate(std::size_t modality_count) const;
};

/// Maps one modality from its native dim to the common dim.
template <typename T>
class ModalityProjection {
 public:
  ModalityProjection() = default;
  ModalityProjection(ProjectionPolicy policy, std::size_t in_dim, std::size_t dim, std::mt19937_64& rng);

  Tensor<T> forward(const Tensor<T>& x) const;
  void register_parameters(core::ParameterSet<T>& params, const std::string& prefix) const;
  bool is_identity() const { return identity_; }

  ProjectionPolicy policy = ProjectionPolicy::kSparseLinear;
  nn::Linear<T> value;
  nn::Linear<T> gate;  // glu only

 private:
  bool identity_ = false;
};

/// Common interface of the mid-level fusers: per-modality [B, T, d_m] in, [B, T, out_dim] out.
template <typename T>
class Fuser {
 public:
  Fuser(const FuserConfig& cfg, const std::vector<data::ModalitySpec>& modalities, std::mt19937_64& rng);
  virtual ~Fuser() = default;

  Tensor<T> forward(const std::vector<Tensor<T>>& inputs, const ForwardContext& ctx) const;
  std::vector<Tensor<T>> project(const std::vector<Tensor<T>>& inputs) const;
  /// Fusion proper, on already projected [B, T, dim] inputs (before the post projection).
  virtual Tensor<T> fuse_projected(const std::vector<Tensor<T>>& projected, const ForwardContext& ctx) const = 0;

  void register_parameters(core::ParameterSet<T>& params, const std::string& prefix) const;
  const FuserConfig& config() const { return cfg_; }
  const std::vector<data::ModalitySpec>& modalities() const { return modalities_; }
  std::size_t out_dim() const { return cfg_.out_dim ? cfg_.out_dim : cfg_.dim; }
  const std::vector<ModalityProjection<T>>& projections() const { return projections_; }

 protected:
  virtual void register_fusion(core::ParameterSet<T>& params, const std::string& prefix) const = 0;
  nn::BlockConfig block_config(std::size_t block, std::size_t blocks) const;

  FuserConfig cfg_;
  std::vector<data::ModalitySpec> modalities_;
  std::vector<ModalityProjection<T>> projections_;
  bool has_post_ = false;
  nn::Linear<T> post_;
};

/// Per-timestep self-attention over [token, m_1..m_M] (or [m_1..m_M] when tokenless).
template <typename T>
class SelfAttentionFuser : public Fuser<T> {
 public:
  SelfAttentionFuser(const FuserConfig& cfg, const std::vector<data::ModalitySpec>& modalities, std::mt19937_64& rng);
  Tensor<T> fuse_projected(const std::vector<Tensor<T>>& projected, const ForwardContext& ctx) const override;

  bool with_token() const { return this->cfg_.kind == FuserKind::kSA; }

  Tensor<T> token;  // [1, dim]
  std::vector<nn::EncoderBlock<T>> blocks;
  nn::LayerNorm<T> norm;
  bool bypass_blocks = false;  // test hook: blocks act as the identity

 protected:
  void register_fusion(core::ParameterSet<T>& params, const std::string& prefix) const override;
};

/// Joint attention over T query tokens and all M*T modality tokens under a temporal mask.
template <typename T>
class TemporalFuser : public Fuser<T> {
 public:
  TemporalFuser(const FuserConfig& cfg, const std::vector<data::ModalitySpec>& modalities, std::mt19937_64& rng);
  Tensor<T> fuse_projected(const std::vector<Tensor<T>>& projected, const ForwardContext& ctx) const override;

  /// Token layout [queries(T), m_1(T), ..., m_M(T)]; token a may attend b iff time(b) <= time(a).
  static core::Mask attention_mask(std::size_t steps, std::size_t modality_count);

  Tensor<T> query_tokens;  // [max_len, dim]
  Tensor<T> positions;     // [max_len, dim]
  std::vector<nn::EncoderBlock<T>> blocks;
  nn::LayerNorm<T> norm;

 protected:
  void register_fusion(core::ParameterSet<T>& params, const std::string& prefix) const override;
};

/// Main-modality stream refined by one decoder block per remaining modality.
template <typename T>
class CrossAttentionFuser : public Fuser<T> {
 public:
  CrossAttentionFuser(const FuserConfig& cfg, const std::vector<data::ModalitySpec>& modalities, std::mt19937_64& rng);
  Tensor<T> fuse_projected(const std::vector<Tensor<T>>& projected, const ForwardContext& ctx) const override;

  std::size_t main_index() const { return main_; }
  const std::vector<std::size_t>& others() const { return others_; }

  std::vector<Tensor<T>> positions;  // one [max_len, dim] table, or one per modality
  std::vector<nn::DecoderBlock<T>> blocks;

 protected:
  void register_fusion(core::ParameterSet<T>& params, const std::string& prefix) const override;

 private:
  const Tensor<T>& position_table(std::size_t modality) const;

  std::size_t main_ = 0;
  std::vector<std::size_t> others_;
};

template <typename T>
std::unique_ptr<Fuser<T>> make_fuser(const FuserConfig& cfg, const std::vector<data::ModalitySpec>& modalities,
                                     std::mt19937_64& rng);

/// Broadcasts the first `steps` rows of a [max_len, dim] table over a [B, steps, dim] input and adds it.
template <typename T>
Tensor<T> add_positions(const Tensor<T>& x, const Tensor<T>& table);

}  // namespace afft::model
