#include "afft/model/score_fusion.hpp"

#include <cmath>

#include "afft/core/error.hpp"

namespace afft::model {

namespace {

void check_inputs(const std::vector<ProbVector>& per_modality) {
  if (per_modality.empty()) throw ConfigError("score fusion needs at least one modality");
  for (const auto& p : per_modality) {
    if (p.size() != per_modality[0].size()) throw ShapeError("score fusion inputs differ in class count");
  }
}

}  // namespace

ProbVector score_average(const std::vector<ProbVector>& per_modality) {
  check_inputs(per_modality);
  return score_weighted(per_modality, std::vector<double>(per_modality.size(), 1.0 / static_cast<double>(per_modality.size())));
}

ProbVector score_weighted(const std::vector<ProbVector>& per_modality, const std::vector<double>& weights) {
  check_inputs(per_modality);
  if (weights.size() != per_modality.size()) throw ConfigError("one score-fusion weight per modality required");
  double total = 0;
  for (double w : weights) {
    if (w < 0) throw ConfigError("score-fusion weights must be non-negative");
    total += w;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("score-fusion weights sum to " + std::to_string(total) + ", expected 1");
  ProbVector out(per_modality[0].size(), 0.0);
  for (std::size_t m = 0; m < per_modality.size(); ++m)
    for (std::size_t c = 0; c < out.size(); ++c) out[c] += weights[m] * per_modality[m][c];
  return out;
}

std::vector<std::vector<double>> simplex_grid(std::size_t modalities, double step) {
  if (modalities == 0) throw ConfigError("simplex grid needs at least one modality");
  const auto units = static_cast<long>(std::lround(1.0 / step));
  if (units <= 0 || std::abs(units * step - 1.0) > 1e-9) throw ConfigError("grid step must divide 1");
  std::vector<std::vector<double>> grid;
  std::vector<long> counts(modalities, 0);
  // Enumerate compositions of `units` into `modalities` parts.
  std::function<void(std::size_t, long)> rec = [&](std::size_t m, long left) {
    if (m + 1 == modalities) {
      counts[m] = left;
      std::vector<double> w(modalities);
      for (std::size_t i = 0; i < modalities; ++i) w[i] = static_cast<double>(counts[i]) / static_cast<double>(units);
      grid.push_back(std::move(w));
      return;
    }
    for (long c = 0; c <= left; ++c) {
      counts[m] = c;
      rec(m + 1, left - c);
    }
  };
  rec(0, units);
  return grid;
}

std::vector<double> grid_search_weights(const std::vector<std::vector<ProbVector>>& per_modality,
                                        const std::function<double(const std::vector<ProbVector>&)>& score,
                                        double step) {
  if (per_modality.empty()) throw ConfigError("grid search needs at least one modality");
  const std::size_t n = per_modality[0].size();
  std::vector<double> best;
  double best_score = -1;
  for (const auto& w : simplex_grid(per_modality.size(), step)) {
    std::vector<ProbVector> fused(n);
    std::vector<ProbVector> sample(per_modality.size());
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t m = 0; m < per_modality.size(); ++m) sample[m] = per_modality[m][i];
      fused[i] = score_weighted(sample, w);
    }
    const double s = score(fused);
    if (best.empty() || s > best_score) {
      best = w;
      best_score = s;
    }
  }
  return best;
}

template <typename T>
MattHead<T>::MattHead(std::size_t modalities, std::size_t feature_dim, std::mt19937_64& rng, std::size_t hidden)
    : modalities(modalities), fc1(modalities * feature_dim, hidden, rng), fc2(hidden, modalities, rng) {
  if (modalities == 0) throw ConfigError("MATT needs at least one modality");
}

template <typename T>
Tensor<T> MattHead<T>::weights(const Tensor<T>& features) const {
  return core::softmax(fc2.forward(core::relu(fc1.forward(features))), -1);
}

template <typename T>
Tensor<T> MattHead<T>::fuse(const Tensor<T>& features, const Tensor<T>& probs) const {
  if (probs.rank() != 3 || probs.dim(1) != modalities || probs.dim(0) != features.dim(0)) {
    throw ShapeError("MATT probabilities must be [B, M, C], got " + core::shape_str(probs.shape()));
  }
  const std::size_t B = probs.dim(0), C = probs.dim(2);
  auto alpha = core::reshape(weights(features), {B, 1, modalities});
  return core::reshape(core::bmm(alpha, probs), {B, C});
}

template <typename T>
void MattHead<T>::register_parameters(core::ParameterSet<T>& params, const std::string& prefix) const {
  fc1.register_parameters(params, prefix + ".fc1");
  fc2.register_parameters(params, prefix + ".fc2");
}

template <typename T>
Tensor<T> mixture_nll(const Tensor<T>& fused, const std::vector<double>& targets) {
  if (fused.rank() != 2 || targets.size() != fused.numel()) throw ShapeError("mixture_nll target shape mismatch");
  // Floor keeps log finite when a modality assigns exactly zero mass to the target.
  constexpr T kFloor = T(1e-12);
  auto safe = core::add(fused, Tensor<T>::full({fused.dim(1)}, kFloor));
  std::vector<T> t(targets.begin(), targets.end());
  auto weighted = core::mul(core::log(safe), Tensor<T>(fused.shape(), std::move(t)));
  return core::scale(core::sum(weighted), T(-1) / static_cast<T>(fused.dim(0)));
}

template class MattHead<float>;
template class MattHead<double>;
template Tensor<float> mixture_nll(const Tensor<float>&, const std::vector<double>&);
template Tensor<double> mixture_nll(const Tensor<double>&, const std::vector<double>&);

}  // namespace afft::model
