#include "afft/data/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>
#include <set>
#include <string>

#include "afft/core/error.hpp"

namespace afft::data {

void SyntheticConfig::validate() const {
  if (modalities.empty()) throw ConfigError("synthetic config needs at least one modality");
  if (action_count == 0) throw ConfigError("synthetic config needs at least one action");
  if (steps == 0) throw ConfigError("synthetic sequences need at least one step");
  if (transition.size() != action_count * action_count) throw ConfigError("transition matrix has wrong size");
  for (std::size_t i = 0; i < action_count; ++i) {
    double row = 0;
    for (std::size_t j = 0; j < action_count; ++j) {
      const double p = transition[i * action_count + j];
      if (p < 0 || !std::isfinite(p)) throw ConfigError("transition matrix has a negative or non-finite entry");
      row += p;
    }
    if (std::abs(row - 1.0) > 1e-9) throw ConfigError("transition row " + std::to_string(i) + " does not sum to 1");
  }
  std::set<int> covered;
  std::set<std::string> names;
  for (const auto& m : modalities) {
    if (m.spec.dim == 0) throw ConfigError("modality '" + m.spec.name + "' has zero dimension");
    if (!names.insert(m.spec.name).second) throw ConfigError("duplicate modality name '" + m.spec.name + "'");
    if (m.sigma < 0 || !std::isfinite(m.sigma)) throw ConfigError("modality noise std must be >= 0");
    for (int a : m.coverage) {
      if (a < 0 || static_cast<std::size_t>(a) >= action_count) throw ConfigError("coverage action out of range");
      covered.insert(a);
    }
  }
  if (covered.size() != action_count) throw ConfigError("coverage sets do not jointly cover every action");
}

SyntheticWorld make_world(const SyntheticConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  SyntheticWorld world;
  for (const auto& m : cfg.modalities) {
    std::vector<float> protos((cfg.action_count + 1) * m.spec.dim);
    for (auto& v : protos) v = static_cast<float>(std::normal_distribution<double>(0.0, 1.0)(rng));
    world.prototypes.push_back(std::move(protos));
  }
  return world;
}

FeatureDataset generate_synthetic(const SyntheticConfig& cfg) {
  const SyntheticWorld world = make_world(cfg);
  const std::size_t A = cfg.action_count;
  std::vector<std::vector<std::uint8_t>> visible;
  for (const auto& m : cfg.modalities) {
    std::vector<std::uint8_t> v(A, 0);
    for (int a : m.coverage) v[static_cast<std::size_t>(a)] = 1;
    visible.push_back(std::move(v));
  }

  FeatureDataset ds;
  for (const auto& m : cfg.modalities) ds.modalities.push_back(m.spec);
  std::mt19937_64 rng(cfg.path_seed);
  for (std::size_t n = 0; n < cfg.sequence_count; ++n) {
    std::vector<int> path(cfg.steps + 1);
    path[0] = static_cast<int>(std::uniform_int_distribution<std::size_t>(0, A - 1)(rng));
    for (std::size_t t = 1; t <= cfg.steps; ++t) {
      const double* row = cfg.transition.data() + static_cast<std::size_t>(path[t - 1]) * A;
      path[t] = std::discrete_distribution<int>(row, row + A)(rng);
    }
    FeatureSequence s;
    char id[32];
    std::snprintf(id, sizeof id, "syn-%06zu", n);
    s.id = id;
    s.steps = cfg.steps;
    s.frame_labels.assign(path.begin(), path.end() - 1);
    s.next_label = path.back();
    s.tau_o = static_cast<double>(cfg.steps);
    s.tau_a = cfg.tau_a;
    s.tau_s = s.tau_o + s.tau_a;
    for (std::size_t m = 0; m < cfg.modalities.size(); ++m) {
      const std::size_t dim = cfg.modalities[m].spec.dim;
      const double sigma = cfg.modalities[m].sigma;
      std::vector<float> frames(cfg.steps * dim);
      for (std::size_t t = 0; t < cfg.steps; ++t) {
        const auto a = static_cast<std::size_t>(path[t]);
        const std::size_t proto = visible[m][a] ? a : A;
        for (std::size_t j = 0; j < dim; ++j) {
          double v = world.prototypes[m][proto * dim + j];
          if (sigma > 0) v += std::normal_distribution<double>(0.0, sigma)(rng);
          frames[t * dim + j] = static_cast<float>(v);
        }
      }
      s.features.push_back(std::move(frames));
    }
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

SyntheticConfig complementary_config(const ComplementaryPreset& p) {
  if (p.modality_count == 0 || p.action_count < p.modality_count) {
    throw ConfigError("complementary preset needs at least one action per modality");
  }
  if (p.successors == 0 || p.successors > p.action_count) throw ConfigError("successor count out of range");
  SyntheticConfig cfg;
  cfg.action_count = p.action_count;
  cfg.sequence_count = p.sequence_count;
  cfg.steps = p.steps;
  cfg.seed = p.seed;
  cfg.path_seed = p.seed;
  const std::size_t block = (p.action_count + p.modality_count - 1) / p.modality_count;
  for (std::size_t m = 0; m < p.modality_count; ++m) {
    SyntheticModality mod;
    mod.spec = {"mod" + std::to_string(m), p.dim};
    mod.sigma = p.sigma;
    for (std::size_t a = m * block; a < std::min(p.action_count, (m + 1) * block); ++a) mod.coverage.push_back(static_cast<int>(a));
    cfg.modalities.push_back(std::move(mod));
  }
  // Chain structure uses its own stream so prototypes stay tied to `seed` alone.
  std::mt19937_64 rng(p.seed ^ 0x9e3779b97f4a7c15ULL);
  cfg.transition.assign(p.action_count * p.action_count, 0.0);
  std::vector<std::size_t> ids(p.action_count);
  std::iota(ids.begin(), ids.end(), 0);
  for (std::size_t i = 0; i < p.action_count; ++i) {
    std::shuffle(ids.begin(), ids.end(), rng);
    for (std::size_t k = 0; k < p.successors; ++k) cfg.transition[i * p.action_count + ids[k]] = 1.0 / static_cast<double>(p.successors);
  }
  return cfg;
}

}  // namespace afft::data
