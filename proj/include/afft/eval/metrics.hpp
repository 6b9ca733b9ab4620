#pragma once

#include <span>
#include <utility>
#include <vector>

#include "afft/data/vocabulary.hpp"

namespace afft::eval {

/// Row-major [N, C] class probabilities with one ground-truth id per row.
struct PredictionSet {
  std::size_t classes = 0;
  std::vector<double> probs;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::span<const double> row(std::size_t i) const { return {probs.data() + i * classes, classes}; }
  void add(std::span<const double> p, int label);
  /// Shapes, label range, and rows summing to 1 within `tol`.
  void validate(double tol = 1e-6) const;
};

/// True when `label` ranks within the first k of `probs`; ties go to the lower class id.
bool in_top_k(std::span<const double> probs, int label, std::size_t k);
/// Indices of the k highest entries, descending, ties by lower id.
std::vector<std::size_t> top_k(std::span<const double> probs, std::size_t k);

struct ClassRecall {
  int label = 0;
  std::size_t count = 0;
  std::size_t hits = 0;
  double recall() const { return count ? static_cast<double>(hits) / static_cast<double>(count) : 0.0; }
};

/// Per-class top-k hit counts for every class present in the ground truth, ascending by id.
std::vector<ClassRecall> per_class_recall(const PredictionSet& preds, std::size_t k);

/// Percentages in [0, 100].
double topk_accuracy(const PredictionSet& preds, std::size_t k);
double class_mean_topk_recall(const PredictionSet& preds, std::size_t k);
double class_mean_top1(const PredictionSet& preds);

/// Sums action probabilities into verb and noun distributions.
std::pair<std::vector<double>, std::vector<double>> marginalize(std::span<const double> action_probs,
                                                                const data::ActionVocabulary& vocab);

}  // namespace afft::eval
