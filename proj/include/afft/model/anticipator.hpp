#pragma once

#include <memory>
#include <random>
#include <string>
#include <vector>

#include "afft/model/fusion.hpp"

namespace afft::model {

struct AnticipatorConfig {
  std::size_t layers = 6;
  std::size_t heads = 4;
  std::size_t dim = 1024;
  std::size_t max_len = 32;
  double dropout = 0.1;
  double drop_path = 0.1;

  void validate() const;
};

template <typename T>
struct AnticipationOutput {
  Tensor<T> features;  // [B, T, dim]; slot i predicts z_{i+1}
  Tensor<T> logits;    // [B, T, classes]; slot T-1 is the next-action prediction
};

/// Causal GPT-style predictor over the fused sequence with a shared linear classification head.
template <typename T>
class Anticipator {
 public:
  Anticipator() = default;
  Anticipator(const AnticipatorConfig& cfg, std::size_t classes, std::mt19937_64& rng);

  AnticipationOutput<T> forward(const Tensor<T>& z, const ForwardContext& ctx) const;
  void register_parameters(core::ParameterSet<T>& params, const std::string& prefix) const;
  const AnticipatorConfig& config() const { return cfg_; }

  Tensor<T> positions;  // [max_len, dim]
  std::vector<nn::EncoderBlock<T>> blocks;
  nn::LayerNorm<T> norm;
  nn::Linear<T> head;

 private:
  AnticipatorConfig cfg_;
};

struct LossWeights {
  double next = 1.0;
  double cls = 1.0;
  double feat = 1.0;
};

template <typename T>
struct LossTerms {
  Tensor<T> next;
  Tensor<T> cls;
  Tensor<T> feat;
  Tensor<T> total;
};

/// Per-sample targets for a batch. Soft rows allow mixup; invalid rows are ignored.
struct BatchTargets {
  core::SoftTargets next;    // [B, C]
  core::SoftTargets frames;  // [B * T, C], row b*T + t holds the label of step t
};

/// One-hot targets from hard labels; data::kIgnoreLabel marks an ignored row.
BatchTargets hard_targets(const std::vector<int>& next_labels, const std::vector<std::vector<int>>& frame_labels,
                          std::size_t steps, std::size_t classes);

/// L_next on slot T-1, L_cls on slots 0..T-2 against labels of steps 1..T-1,
/// L_feat = MSE(features[0..T-2], z[1..T-1]); both auxiliary terms vanish when T = 1.
template <typename T>
LossTerms<T> total_loss(const AnticipationOutput<T>& out, const Tensor<T>& z, const BatchTargets& targets,
                        const LossWeights& weights = {});

struct ModelConfig {
  std::vector<data::ModalitySpec> modalities;
  std::size_t classes = 0;
  FuserConfig fuser;
  AnticipatorConfig anticipator;
};

template <typename T>
struct ModelOutput {
  Tensor<T> z;
  AnticipationOutput<T> anticipation;
};

/// Fuser followed by anticipator; owns the named parameter registry.
template <typename T>
class AfftModel {
 public:
  AfftModel(const ModelConfig& cfg, std::uint64_t seed);

  ModelOutput<T> forward(const std::vector<Tensor<T>>& inputs, const ForwardContext& ctx) const;
  /// Separate traces for the fuser and the anticipator.
  ModelOutput<T> forward_traced(const std::vector<Tensor<T>>& inputs, core::AttentionTrace& fuser_trace,
                                core::AttentionTrace& anticipator_trace) const;

  const ModelConfig& config() const { return cfg_; }
  core::ParameterSet<T>& parameters() { return params_; }
  const core::ParameterSet<T>& parameters() const { return params_; }
  Fuser<T>& fuser() { return *fuser_; }
  const Fuser<T>& fuser() const { return *fuser_; }
  Anticipator<T>& anticipator() { return anticipator_; }

 private:
  ModelConfig cfg_;
  std::unique_ptr<Fuser<T>> fuser_;
  Anticipator<T> anticipator_;
  core::ParameterSet<T> params_;
};

}  // namespace afft::model
