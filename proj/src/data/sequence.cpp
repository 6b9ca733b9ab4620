#include "afft/data/sequence.hpp"

#include <cmath>
#include <cstring>
#include <set>

#include "afft/core/error.hpp"

namespace afft::data {

namespace {

bool same_bits(double a, double b) { return std::memcmp(&a, &b, sizeof(double)) == 0; }

}  // namespace

bool bitwise_equal(const FeatureSequence& a, const FeatureSequence& b) {
  if (a.id != b.id || a.steps != b.steps || a.frame_labels != b.frame_labels || a.next_label != b.next_label) return false;
  if (!same_bits(a.tau_s, b.tau_s) || !same_bits(a.tau_a, b.tau_a) || !same_bits(a.tau_o, b.tau_o)) return false;
  if (a.features.size() != b.features.size()) return false;
  for (std::size_t m = 0; m < a.features.size(); ++m) {
    if (a.features[m].size() != b.features[m].size()) return false;
    if (std::memcmp(a.features[m].data(), b.features[m].data(), a.features[m].size() * sizeof(float)) != 0) return false;
  }
  return true;
}

bool bitwise_equal(const FeatureDataset& a, const FeatureDataset& b) {
  if (a.modalities != b.modalities || a.samples.size() != b.samples.size()) return false;
  for (std::size_t i = 0; i < a.samples.size(); ++i)
    if (!bitwise_equal(a.samples[i], b.samples[i])) return false;
  return true;
}

std::size_t FeatureDataset::modality_index(const std::string& name) const {
  for (std::size_t m = 0; m < modalities.size(); ++m)
    if (modalities[m].name == name) return m;
  throw DataError("dataset has no modality named '" + name + "'");
}

void FeatureDataset::validate(std::size_t action_count) const {
  std::set<std::string> names;
  for (const auto& m : modalities) {
    if (m.dim == 0) throw DataError("modality '" + m.name + "' has zero dimension");
    if (!names.insert(m.name).second) throw DataError("duplicate modality name '" + m.name + "'");
  }
  for (const auto& s : samples) {
    if (s.features.size() != modalities.size()) throw DataError(s.id + ": modality count mismatch");
    if (s.steps == 0) throw DataError(s.id + ": empty observation window");
    if (static_cast<std::size_t>(std::lround(s.tau_o)) != s.steps) {
      throw DataError(s.id + ": T=" + std::to_string(s.steps) + " does not match tau_o=" + std::to_string(s.tau_o));
    }
    for (std::size_t m = 0; m < modalities.size(); ++m) {
      if (s.features[m].size() != s.steps * modalities[m].dim) throw DataError(s.id + ": feature matrix size mismatch");
    }
    if (s.next_label < 0 || static_cast<std::size_t>(s.next_label) >= action_count) {
      throw DataError(s.id + ": next label " + std::to_string(s.next_label) + " out of range");
    }
    if (s.has_frame_labels()) {
      if (s.frame_labels.size() != s.steps) throw DataError(s.id + ": frame label count mismatch");
      for (int l : s.frame_labels)
        if (l != kIgnoreLabel && (l < 0 || static_cast<std::size_t>(l) >= action_count))
          throw DataError(s.id + ": frame label out of range");
    }
  }
}

FeatureDataset FeatureDataset::select_modalities(const std::vector<std::string>& names) const {
  FeatureDataset out;
  std::vector<std::size_t> idx;
  for (const auto& n : names) {
    idx.push_back(modality_index(n));
    out.modalities.push_back(modalities[idx.back()]);
  }
  out.samples.reserve(samples.size());
  for (const auto& s : samples) {
    FeatureSequence c = s;
    c.features.clear();
    for (auto i : idx) c.features.push_back(s.features[i]);
    out.samples.push_back(std::move(c));
  }
  return out;
}

}  // namespace afft::data
