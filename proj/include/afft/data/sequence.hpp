#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace afft::data {

inline constexpr int kIgnoreLabel = -1;

struct ModalitySpec {
  std::string name;
  std::size_t dim = 0;
  friend bool operator==(const ModalitySpec&, const ModalitySpec&) = default;
};

/// One anticipation sample: T observed steps per modality and the action that follows them.
struct FeatureSequence {
  std::string id;
  std::size_t steps = 0;                     // T
  std::vector<std::vector<float>> features;  // per modality, steps x dim row-major
  std::vector<int> frame_labels;             // empty, or one action id (or kIgnoreLabel) per step
  int next_label = 0;                        // action at step T + 1
  double tau_s = 0;                          // action start (s)
  double tau_a = 0;                          // anticipation gap (s)
  double tau_o = 0;                          // observation length (s)

  bool has_frame_labels() const { return !frame_labels.empty(); }
};

/// Byte-level equality of every field; float payloads compared by bit pattern.
bool bitwise_equal(const FeatureSequence& a, const FeatureSequence& b);

struct FeatureDataset {
  std::vector<ModalitySpec> modalities;
  std::vector<FeatureSequence> samples;

  std::size_t modality_index(const std::string& name) const;
  /// Checks shared T across modalities, matrix sizes, T == round(tau_o) and label ranges.
  void validate(std::size_t action_count) const;
  /// Keeps only the named modalities, in the given order.
  FeatureDataset select_modalities(const std::vector<std::string>& names) const;
};

bool bitwise_equal(const FeatureDataset& a, const FeatureDataset& b);

}  // namespace afft::data
