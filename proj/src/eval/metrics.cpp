#include "afft/eval/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <string>

#include "afft/core/error.hpp"

namespace afft::eval {

namespace {

void check(const PredictionSet& preds, std::size_t k) {
  if (k == 0) throw ConfigError("k must be at least 1");
  if (preds.size() == 0) throw DataError("metric over an empty prediction set");
  if (preds.classes == 0 || preds.probs.size() != preds.size() * preds.classes) {
    throw ShapeError("prediction set has inconsistent shape");
  }
}

}  // namespace

void PredictionSet::add(std::span<const double> p, int label) {
  if (classes == 0) classes = p.size();
  if (p.size() != classes) throw ShapeError("prediction has " + std::to_string(p.size()) + " classes, expected " + std::to_string(classes));
  probs.insert(probs.end(), p.begin(), p.end());
  labels.push_back(label);
}

void PredictionSet::validate(double tol) const {
  if (probs.size() != labels.size() * classes) throw ShapeError("prediction set has inconsistent shape");
  for (std::size_t i = 0; i < size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes) {
      throw DataError("label " + std::to_string(labels[i]) + " out of range");
    }
    double s = 0;
    for (double v : row(i)) {
      if (!(v >= 0)) throw DataError("negative or NaN probability in row " + std::to_string(i));
      s += v;
    }
    if (std::abs(s - 1.0) > tol) throw DataError("probability row " + std::to_string(i) + " sums to " + std::to_string(s));
  }
}

bool in_top_k(std::span<const double> probs, int label, std::size_t k) {
  if (label < 0 || static_cast<std::size_t>(label) >= probs.size()) throw DataError("label out of range");
  const double p = probs[static_cast<std::size_t>(label)];
  std::size_t ahead = 0;
  for (std::size_t c = 0; c < probs.size(); ++c) {
    if (probs[c] > p || (probs[c] == p && c < static_cast<std::size_t>(label))) ++ahead;
  }
  return ahead < k;
}

std::vector<std::size_t> top_k(std::span<const double> probs, std::size_t k) {
  std::vector<std::size_t> idx(probs.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });
  idx.resize(std::min(k, idx.size()));
  return idx;
}

std::vector<ClassRecall> per_class_recall(const PredictionSet& preds, std::size_t k) {
  check(preds, k);
  std::map<int, ClassRecall> by_class;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    auto& c = by_class[preds.labels[i]];
    c.label = preds.labels[i];
    ++c.count;
    if (in_top_k(preds.row(i), preds.labels[i], k)) ++c.hits;
  }
  std::vector<ClassRecall> out;
  for (const auto& [label, c] : by_class) out.push_back(c);
  return out;
}

double topk_accuracy(const PredictionSet& preds, std::size_t k) {
  check(preds, k);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) hits += in_top_k(preds.row(i), preds.labels[i], k) ? 1 : 0;
  return 100.0 * static_cast<double>(hits) / static_cast<double>(preds.size());
}

double class_mean_topk_recall(const PredictionSet& preds, std::size_t k) {
  const auto classes = per_class_recall(preds, k);
  double s = 0;
  for (const auto& c : classes) s += c.recall();
  return 100.0 * s / static_cast<double>(classes.size());
}

double class_mean_top1(const PredictionSet& preds) { return class_mean_topk_recall(preds, 1); }

std::pair<std::vector<double>, std::vector<double>> marginalize(std::span<const double> action_probs,
                                                                const data::ActionVocabulary& vocab) {
  if (action_probs.size() != vocab.action_count()) {
    throw ShapeError("marginalize: " + std::to_string(action_probs.size()) + " probabilities for " +
                     std::to_string(vocab.action_count()) + " actions");
  }
  std::vector<double> verbs(vocab.verb_count(), 0.0), nouns(vocab.noun_count(), 0.0);
  for (std::size_t a = 0; a < action_probs.size(); ++a) {
    const auto& vn = vocab.pair(a);
    verbs[static_cast<std::size_t>(vn.verb)] += action_probs[a];
    nouns[static_cast<std::size_t>(vn.noun)] += action_probs[a];
  }
  return {verbs, nouns};
}

}  // namespace afft::eval
