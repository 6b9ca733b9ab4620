#include "afft/data/windowing.hpp"

#include <cmath>

namespace afft::data {

std::vector<double> window_timestamps(double tau_s, double tau_a, double tau_o) {
  const long steps = std::lround(tau_o);
  if (steps <= 0) throw DataError("observation length must cover at least one frame");
  std::vector<double> ts(static_cast<std::size_t>(steps));
  for (long k = 1; k <= steps; ++k) ts[static_cast<std::size_t>(k - 1)] = tau_s - tau_a - static_cast<double>(steps - k);
  return ts;
}

WindowedSample window_features(const FeatureStream& stream, const std::string& id, double tau_s, double tau_a,
                               double tau_o, int next_label, HistoryPolicy policy) {
  if (stream.frame_count == 0) throw DataError(id + ": empty feature stream");
  if (stream.frames.size() != stream.modalities.size()) throw DataError(id + ": stream modality count mismatch");
  const auto ts = window_timestamps(tau_s, tau_a, tau_o);

  // Frame observed at or before t; negative means before the stream starts.
  std::vector<long> index(ts.size());
  std::size_t deficit = 0;
  for (std::size_t k = 0; k < ts.size(); ++k) {
    index[k] = static_cast<long>(std::floor(ts[k] - stream.start_time + 1e-9));
    if (index[k] < 0) ++deficit;
  }
  if (index.back() >= static_cast<long>(stream.frame_count)) {
    throw DataError(id + ": stream ends before the observation window (needs t=" + std::to_string(ts.back()) + ")");
  }
  if (deficit > 0 && policy == HistoryPolicy::kDrop) {
    throw InsufficientHistory(deficit, id + ": " + std::to_string(deficit) + " frame(s) of history missing");
  }

  WindowedSample out;
  out.padded_frames = deficit;
  FeatureSequence& seq = out.sequence;
  seq.id = id;
  seq.steps = ts.size();
  seq.next_label = next_label;
  seq.tau_s = tau_s;
  seq.tau_a = tau_a;
  seq.tau_o = tau_o;
  seq.features.resize(stream.modalities.size());
  for (std::size_t m = 0; m < stream.modalities.size(); ++m) {
    const std::size_t dim = stream.modalities[m].dim;
    auto& dst = seq.features[m];
    dst.reserve(seq.steps * dim);
    for (long idx : index) {
      const std::size_t src = static_cast<std::size_t>(std::max(idx, 0L));
      dst.insert(dst.end(), stream.frames[m].begin() + static_cast<std::ptrdiff_t>(src * dim),
                 stream.frames[m].begin() + static_cast<std::ptrdiff_t>((src + 1) * dim));
    }
  }
  if (!stream.labels.empty()) {
    for (long idx : index) seq.frame_labels.push_back(idx < 0 ? kIgnoreLabel : stream.labels[static_cast<std::size_t>(idx)]);
  }
  return out;
}

}  // namespace afft::data
