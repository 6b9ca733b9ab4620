#pragma once

#include <string>
#include <vector>

#include "afft/core/error.hpp"
#include "afft/data/sequence.hpp"

namespace afft::data {

/// Continuous per-modality features sampled at 1 fps; frame k is observed at start_time + k seconds.
struct FeatureStream {
  std::vector<ModalitySpec> modalities;
  double start_time = 0;
  std::size_t frame_count = 0;
  std::vector<std::vector<float>> frames;  // per modality, frame_count x dim
  std::vector<int> labels;                 // optional per-frame action ids
};

enum class HistoryPolicy { kPad, kDrop };

class InsufficientHistory : public DataError {
 public:
  InsufficientHistory(std::size_t deficit, const std::string& what) : DataError(what), deficit_(deficit) {}
  std::size_t deficit() const { return deficit_; }

 private:
  std::size_t deficit_;
};

struct WindowedSample {
  FeatureSequence sequence;
  std::size_t padded_frames = 0;
};

/// Sample times t_k = tau_s - tau_a - (T - k), k = 1..T, with T = round(tau_o).
std::vector<double> window_timestamps(double tau_s, double tau_a, double tau_o);

/// Cuts the observation window [tau_s - tau_a - tau_o, tau_s - tau_a] out of a stream.
/// Never reads frames later than tau_s - tau_a. Missing early history is either
/// left-padded with the stream's earliest frame (kPad) or rejected (kDrop).
WindowedSample window_features(const FeatureStream& stream, const std::string& id, double tau_s, double tau_a,
                               double tau_o, int next_label, HistoryPolicy policy = HistoryPolicy::kPad);

}  // namespace afft::data
