#pragma once

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "afft/model/layers.hpp"

namespace afft::model {

using core::Tensor;

enum class ScoreStrategy { kAverage, kWeighted, kMatt };

using ProbVector = std::vector<double>;

/// Arithmetic mean of per-modality distributions.
ProbVector score_average(const std::vector<ProbVector>& per_modality);
/// Sum_m w_m p_m; weights must be non-negative and sum to 1.
ProbVector score_weighted(const std::vector<ProbVector>& per_modality, const std::vector<double>& weights);

/// Every weight vector on the simplex with coordinates in multiples of `step`, in lexicographic order.
std::vector<std::vector<double>> simplex_grid(std::size_t modalities, double step);

/// Picks the grid weights maximising `score` on validation predictions [modality][sample] -> distribution.
/// Ties keep the earliest grid point.
std::vector<double> grid_search_weights(const std::vector<std::vector<ProbVector>>& per_modality,
                                        const std::function<double(const std::vector<ProbVector>&)>& score,
                                        double step = 0.05);

/// Modality-attention score fusion: alpha = softmax(MLP(concat features)), output = sum_m alpha_m p_m.
template <typename T>
class MattHead {
 public:
  MattHead() = default;
  MattHead(std::size_t modalities, std::size_t feature_dim, std::mt19937_64& rng, std::size_t hidden = 256);

  /// features [B, M*F] -> alpha [B, M].
  Tensor<T> weights(const Tensor<T>& features) const;
  /// probs [B, M, C] (constant inputs) -> fused [B, C].
  Tensor<T> fuse(const Tensor<T>& features, const Tensor<T>& probs) const;
  void register_parameters(core::ParameterSet<T>& params, const std::string& prefix) const;

  std::size_t modalities = 0;
  nn::Linear<T> fc1, fc2;
};

/// Mean negative log-likelihood of soft targets [B, C] under fused distributions [B, C].
template <typename T>
Tensor<T> mixture_nll(const Tensor<T>& fused, const std::vector<double>& targets);

}  // namespace afft::model
