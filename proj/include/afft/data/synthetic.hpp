#pragma once

#include <cstdint>
#include <vector>

#include "afft/data/sequence.hpp"

namespace afft::data {

struct SyntheticModality {
  ModalitySpec spec;
  double sigma = 0.5;         // noise std; 0 gives noiseless frames
  std::vector<int> coverage;  // actions this modality can tell apart
};

/// Markov-chain world whose modalities each see only part of the action space.
struct SyntheticConfig {
  std::vector<SyntheticModality> modalities;
  std::size_t action_count = 0;
  std::vector<double> transition;  // action_count x action_count, row-stochastic
  std::size_t sequence_count = 0;
  std::size_t steps = 10;          // T
  double tau_a = 1.0;
  std::uint64_t seed = 0;          // fixes prototypes
  std::uint64_t path_seed = 0;     // fixes the sampled action paths and noise

  void validate() const;
};

/// Frozen class prototypes: per modality (action_count + 1) x dim; the last row is the
/// shared "uninformative" prototype used for actions outside the coverage set.
struct SyntheticWorld {
  std::vector<std::vector<float>> prototypes;
};

SyntheticWorld make_world(const SyntheticConfig& cfg);

/// Latent action paths of length T + 1 drawn from the chain; frame t of modality m shows the
/// prototype of the current action (or the uninformative one) plus N(0, sigma_m^2) noise.
FeatureDataset generate_synthetic(const SyntheticConfig& cfg);

struct ComplementaryPreset {
  std::size_t modality_count = 3;
  std::size_t action_count = 12;
  std::size_t dim = 16;
  double sigma = 0.5;
  std::size_t successors = 3;  // distinct next actions per action, equally likely
  std::size_t sequence_count = 256;
  std::size_t steps = 10;
  std::uint64_t seed = 0;
};

/// Disjoint contiguous coverage blocks (one per modality) over a sparse random chain.
SyntheticConfig complementary_config(const ComplementaryPreset& preset);

}  // namespace afft::data
