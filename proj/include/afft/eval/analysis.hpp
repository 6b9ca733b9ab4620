#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "afft/core/attention_trace.hpp"
#include "afft/eval/metrics.hpp"

namespace afft::eval {

using Matrix = std::vector<std::vector<double>>;

struct RolloutResult {
  std::vector<double> modality_weights;  // distribution over the M modalities
  bool degenerate = false;               // token kept all mass on itself; weights are uniform
};

/// Per group: head-mean each layer, A' = rownorm(A + I), R = A'_L ... A'_1, read the token row,
/// drop its self column and renormalise over modalities. Requires a token-variant SA fuser trace.
std::vector<RolloutResult> attention_rollout(const core::AttentionTrace& trace);

/// Last-layer head-averaged T x T attention per group of an anticipator trace.
std::vector<Matrix> temporal_attention(const core::AttentionTrace& trace);

/// Type-7 (linear interpolation) sample quantile; q in [0, 1].
double quantile(std::vector<double> values, double q);

/// Canonical 9-significant-digit decimal used in every CSV cell.
std::string format_number(double v);

struct AnalysisResults {
  std::vector<ClassRecall> per_class_top1;
  std::vector<ClassRecall> per_class_top5;
  std::vector<std::string> modality_names;
  std::vector<RolloutResult> rollout;
  std::vector<Matrix> temporal;
};

inline const std::vector<double> kExportQuantiles{0.05, 0.25, 0.5, 0.75, 0.95};

/// Writes per_class.csv, modality_attention.csv and temporal_attention.csv into `dir`.
void export_analysis(const AnalysisResults& results, const std::filesystem::path& dir);

}  // namespace afft::eval
