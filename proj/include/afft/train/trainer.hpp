#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "afft/data/sequence.hpp"
#include "afft/eval/metrics.hpp"
#include "afft/model/anticipator.hpp"
#include "afft/model/checkpoint.hpp"
#include "afft/model/score_fusion.hpp"

namespace afft::train {

struct TrainConfig {
  std::size_t epochs = 50;
  std::size_t warmup_epochs = 20;
  std::size_t decay_epochs = 30;
  double lr_max = 1e-3;
  double momentum = 0.9;
  double weight_decay = 1e-6;
  double mixup_alpha = 0.1;  // 0 disables mixup
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  double grad_clip = 0;      // global L2 norm; 0 disables
  model::LossWeights loss;

  void validate() const;
};

/// Linear warmup lr_max (e+1)/W for e < W, then cosine decay lr_max (1 + cos(pi (e-W)/D)) / 2.
double lr_at_epoch(std::size_t epoch, const TrainConfig& cfg);

/// lambda ~ Beta(alpha, alpha) from two Gamma draws; alpha = 0 gives 1.
double sample_beta(double alpha, std::mt19937_64& rng);

/// Dense batch: per-modality [B, T, d_m] values plus soft targets.
struct Batch {
  std::size_t size = 0;
  std::size_t steps = 0;
  std::vector<std::size_t> dims;
  std::vector<std::vector<float>> features;
  model::BatchTargets targets;

  template <typename T>
  std::vector<core::Tensor<T>> tensors() const;
};

Batch make_batch(const data::FeatureDataset& ds, std::span<const std::size_t> indices, std::size_t classes);

/// Mixes sample b with sample perm[b]: x <- lambda x_b + (1 - lambda) x_perm[b], the same for every
/// modality and timestep, and likewise for the soft targets. A row stays valid only if both sources are.
void mixup_batch(Batch& batch, double lambda, std::span<const std::size_t> perm);
/// Draws lambda and a permutation from `rng`, then mixes. Returns lambda (1 when skipped).
double mixup_batch(Batch& batch, double alpha, std::mt19937_64& rng);

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0;
  double train_loss = 0;
  double val_metric = std::numeric_limits<double>::quiet_NaN();  // class-mean top-5 recall, NaN without validation
  double wall_ms = 0;
};

std::string to_json_line(const EpochRecord& r);

struct FitOptions {
  const data::FeatureDataset* validation = nullptr;
  std::filesystem::path out_dir;      // empty: no checkpoints or log file
  std::string config_echo;
  bool resume = false;                // continue from out_dir/last.ckpt when present
  std::size_t stop_after = std::numeric_limits<std::size_t>::max();  // epochs to run in this call
  std::function<void(const EpochRecord&)> on_epoch;
};

template <typename T>
struct FitResult {
  model::TrainSnapshot<T> state;
  std::vector<EpochRecord> log;
};

template <typename T>
FitResult<T> fit(model::AfftModel<T>& net, const data::FeatureDataset& train, const TrainConfig& cfg,
                 const FitOptions& options = {});

/// Next-action probabilities (softmax of the last slot) in eval mode.
template <typename T>
eval::PredictionSet predict(const model::AfftModel<T>& net, const data::FeatureDataset& ds, std::size_t batch_size = 64);

/// Per-sample mean over time of the fused sequence z: [N, out_dim], row-major.
template <typename T>
std::vector<double> fused_means(const model::AfftModel<T>& net, const data::FeatureDataset& ds, std::size_t batch_size = 64);

/// Name of the first parameter whose value or gradient is not finite; empty when all are finite.
template <typename T>
std::string find_nonfinite(const core::ParameterSet<T>& params);

/// Inputs for MATT training: features [N, M*F], frozen per-modality probabilities [N, M, C].
struct MattData {
  std::size_t samples = 0;
  std::size_t modalities = 0;
  std::size_t feature_dim = 0;
  std::size_t classes = 0;
  std::vector<double> features;
  std::vector<double> probs;
  std::vector<int> labels;
};

/// Trains only the MATT head with the usual schedule and optimizer (mixup not applied).
template <typename T>
void fit_matt(model::MattHead<T>& head, const MattData& data, const TrainConfig& cfg);

template <typename T>
eval::PredictionSet predict_matt(const model::MattHead<T>& head, const MattData& data);

}  // namespace afft::train
