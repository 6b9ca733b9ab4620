#include "afft/train/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "afft/core/error.hpp"

namespace afft::train {

using core::Tensor;

void TrainConfig::validate() const {
  if (warmup_epochs + decay_epochs != epochs) {
    throw ConfigError("warmup_epochs + decay_epochs must equal epochs (" + std::to_string(warmup_epochs) + " + " +
                      std::to_string(decay_epochs) + " != " + std::to_string(epochs) + ")");
  }
  if (!(mixup_alpha >= 0)) throw ConfigError("mixup alpha must be >= 0");
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  if (!(lr_max >= 0)) throw ConfigError("learning rate must be >= 0");
  if (!(momentum >= 0 && momentum < 1)) throw ConfigError("momentum must be in [0, 1)");
  if (!(weight_decay >= 0)) throw ConfigError("weight decay must be >= 0");
  if (!(grad_clip >= 0)) throw ConfigError("grad clip must be >= 0");
}

double lr_at_epoch(std::size_t epoch, const TrainConfig& cfg) {
  if (epoch > cfg.epochs) {
    throw ConfigError("epoch " + std::to_string(epoch) + " outside schedule of " + std::to_string(cfg.epochs) + " epochs");
  }
  if (epoch < cfg.warmup_epochs) {
    return cfg.lr_max * static_cast<double>(epoch + 1) / static_cast<double>(cfg.warmup_epochs);
  }
  if (cfg.decay_epochs == 0) return cfg.lr_max;
  const double progress = static_cast<double>(epoch - cfg.warmup_epochs) / static_cast<double>(cfg.decay_epochs);
  return cfg.lr_max * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

double sample_beta(double alpha, std::mt19937_64& rng) {
  if (alpha < 0) throw ConfigError("beta parameter must be >= 0");
  if (alpha == 0) return 1.0;
  const double x = std::gamma_distribution<double>(alpha, 1.0)(rng);
  const double y = std::gamma_distribution<double>(alpha, 1.0)(rng);
  // Both draws can underflow for tiny alpha; the limit distribution puts mass 1/2 on each end.
  if (x + y == 0) return (rng() & 1) ? 1.0 : 0.0;
  return x / (x + y);
}

template <typename T>
std::vector<Tensor<T>> Batch::tensors() const {
  std::vector<Tensor<T>> out;
  for (std::size_t m = 0; m < features.size(); ++m) {
    out.emplace_back(core::Shape{size, steps, dims[m]}, std::vector<T>(features[m].begin(), features[m].end()));
  }
  return out;
}

Batch make_batch(const data::FeatureDataset& ds, std::span<const std::size_t> indices, std::size_t classes) {
  if (indices.empty()) throw DataError("empty batch");
  Batch b;
  b.size = indices.size();
  b.steps = ds.samples.at(indices[0]).steps;
  for (const auto& m : ds.modalities) b.dims.push_back(m.dim);
  b.features.resize(ds.modalities.size());
  std::vector<int> next;
  std::vector<std::vector<int>> frames;
  for (auto i : indices) {
    const auto& s = ds.samples.at(i);
    if (s.steps != b.steps) throw DataError("batch mixes sequence lengths (" + s.id + ")");
    if (s.features.size() != ds.modalities.size()) throw DataError(s.id + ": modality count mismatch");
    for (std::size_t m = 0; m < ds.modalities.size(); ++m) {
      b.features[m].insert(b.features[m].end(), s.features[m].begin(), s.features[m].end());
    }
    next.push_back(s.next_label);
    frames.push_back(s.frame_labels);
  }
  b.targets = model::hard_targets(next, frames, b.steps, classes);
  return b;
}

namespace {

void mix_targets(core::SoftTargets& t, std::size_t rows_per_sample, double lambda, std::span<const std::size_t> perm) {
  const auto src = t;
  const std::size_t C = t.classes;
  for (std::size_t b = 0; b < perm.size(); ++b) {
    for (std::size_t r = 0; r < rows_per_sample; ++r) {
      const std::size_t dst = b * rows_per_sample + r, other = perm[b] * rows_per_sample + r;
      t.valid[dst] = src.valid[dst] && src.valid[other];
      for (std::size_t c = 0; c < C; ++c) {
        t.probs[dst * C + c] = t.valid[dst] ? lambda * src.probs[dst * C + c] + (1 - lambda) * src.probs[other * C + c] : 0.0;
      }
    }
  }
}

}  // namespace

void mixup_batch(Batch& batch, double lambda, std::span<const std::size_t> perm) {
  if (perm.size() != batch.size) throw ShapeError("mixup permutation length differs from batch size");
  if (lambda == 1.0) return;
  for (std::size_t m = 0; m < batch.features.size(); ++m) {
    const std::size_t row = batch.steps * batch.dims[m];
    const auto src = batch.features[m];
    for (std::size_t b = 0; b < batch.size; ++b)
      for (std::size_t j = 0; j < row; ++j) {
        batch.features[m][b * row + j] =
            static_cast<float>(lambda * src[b * row + j] + (1 - lambda) * src[perm[b] * row + j]);
      }
  }
  mix_targets(batch.targets.next, 1, lambda, perm);
  mix_targets(batch.targets.frames, batch.steps, lambda, perm);
}

double mixup_batch(Batch& batch, double alpha, std::mt19937_64& rng) {
  if (alpha == 0 || batch.size < 2) return 1.0;
  const double lambda = sample_beta(alpha, rng);
  std::vector<std::size_t> perm(batch.size);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  mixup_batch(batch, lambda, perm);
  return lambda;
}

std::string to_json_line(const EpochRecord& r) {
  nlohmann::ordered_json j;
  j["epoch"] = r.epoch;
  j["lr"] = r.lr;
  j["train_loss"] = r.train_loss;
  if (std::isnan(r.val_metric)) {
    j["val_metric"] = nullptr;
  } else {
    j["val_metric"] = r.val_metric;
  }
  j["wall_ms"] = r.wall_ms;
  return j.dump();
}

template <typename T>
std::string find_nonfinite(const core::ParameterSet<T>& params) {
  for (const auto& p : params.items()) {
    for (T v : p.tensor.data())
      if (!std::isfinite(v)) return p.name + " (value)";
    if (p.tensor.has_grad()) {
      for (T g : p.tensor.grad())
        if (!std::isfinite(g)) return p.name + " (gradient)";
    }
  }
  return {};
}

namespace {

template <typename T>
void clip_gradients(const core::ParameterSet<T>& params, double max_norm) {
  double sq = 0;
  for (const auto& p : params.items())
    if (p.tensor.has_grad())
      for (T g : p.tensor.grad()) sq += static_cast<double>(g) * g;
  const double norm = std::sqrt(sq);
  if (norm <= max_norm || norm == 0) return;
  const T factor = static_cast<T>(max_norm / norm);
  for (const auto& p : params.items()) {
    if (!p.tensor.has_grad()) continue;
    auto& g = p.tensor.node()->grad;
    for (auto& v : g) v *= factor;
  }
}

std::string rng_to_string(const std::mt19937_64& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

void rng_from_string(std::mt19937_64& rng, const std::string& s) {
  std::istringstream is(s);
  is >> rng;
  if (!is) throw DataError("checkpoint carries an unreadable rng state");
}

// With every parameter still finite, the one of largest magnitude is the likeliest source of overflow.
template <typename T>
std::string largest_parameter(const core::ParameterSet<T>& params) {
  std::string name;
  double top = -1;
  for (const auto& p : params.items())
    for (T v : p.tensor.data())
      if (std::abs(static_cast<double>(v)) > top) {
        top = std::abs(static_cast<double>(v));
        name = p.name;
      }
  return name + " (max |value| " + std::to_string(top) + ")";
}

template <typename T>
[[noreturn]] void abort_nonfinite(const std::string& where, const core::ParameterSet<T>& params, const std::string& detail) {
  const auto culprit = find_nonfinite(params);
  if (!culprit.empty()) throw NumericError("non-finite " + where + ": offending parameter " + culprit);
  throw NumericError("non-finite " + where + " (" + detail + "): offending parameter " + largest_parameter(params));
}

}  // namespace

template <typename T>
FitResult<T> fit(model::AfftModel<T>& net, const data::FeatureDataset& train, const TrainConfig& cfg,
                 const FitOptions& options) {
  cfg.validate();
  if (train.samples.empty()) throw DataError("training set is empty");
  const std::size_t classes = net.config().classes;
  auto& params = net.parameters();

  FitResult<T> result;
  auto& state = result.state;
  std::mt19937_64 rng(cfg.seed);
  state.rng_state = rng_to_string(rng);

  const bool persist = !options.out_dir.empty();
  const auto last_path = options.out_dir / "last.ckpt";
  const auto best_path = options.out_dir / "best.ckpt";
  if (persist) std::filesystem::create_directories(options.out_dir);
  bool resumed = false;
  if (options.resume && persist && std::filesystem::exists(last_path)) {
    bool has_state = false;
    model::load_checkpoint(last_path, params, &state, &has_state);
    if (!has_state) throw DataError(last_path.string() + " carries no training state");
    rng_from_string(rng, state.rng_state);
    resumed = true;
  }
  std::ofstream log;
  if (persist) {
    log.open(options.out_dir / "train_log.jsonl", resumed ? std::ios::app : std::ios::trunc);
    if (!log) throw DataError("cannot open training log in " + options.out_dir.string());
  }

  const std::size_t n = train.samples.size();
  std::vector<std::size_t> order(n);
  std::size_t ran = 0;
  for (std::size_t epoch = state.epoch; epoch < cfg.epochs && ran < options.stop_after; ++epoch, ++ran) {
    const auto start = std::chrono::steady_clock::now();
    const double lr = lr_at_epoch(epoch, cfg);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0;
    nn::ForwardContext ctx;
    ctx.training = true;
    ctx.rng = &rng;
    for (std::size_t begin = 0; begin < n; begin += cfg.batch_size) {
      const std::size_t end = std::min(n, begin + cfg.batch_size);
      auto batch = make_batch(train, std::span<const std::size_t>(order).subspan(begin, end - begin), classes);
      mixup_batch(batch, cfg.mixup_alpha, rng);
      params.zero_grad();
      try {
        auto out = net.forward(batch.template tensors<T>(), ctx);
        auto loss = model::total_loss(out.anticipation, out.z, batch.targets, cfg.loss);
        core::backward(loss.total);
        loss_sum += static_cast<double>(loss.total.item()) * static_cast<double>(batch.size);
      } catch (const NumericError& e) {
        abort_nonfinite("loss at epoch " + std::to_string(epoch), params, e.what());
      }
      if (cfg.grad_clip > 0) clip_gradients(params, cfg.grad_clip);
      if (!find_nonfinite(params).empty()) abort_nonfinite("gradient at epoch " + std::to_string(epoch), params, "");
      core::sgd_momentum_step(params, lr, cfg.momentum, cfg.weight_decay, state.momentum);
      if (!find_nonfinite(params).empty()) abort_nonfinite("update at epoch " + std::to_string(epoch), params, "");
    }
    params.zero_grad();

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.train_loss = loss_sum / static_cast<double>(n);
    if (options.validation && !options.validation->samples.empty()) {
      rec.val_metric = eval::class_mean_topk_recall(predict(net, *options.validation), std::min<std::size_t>(5, classes));
    }
    const double score = std::isnan(rec.val_metric) ? -rec.train_loss : rec.val_metric;
    const bool improved = state.best_epoch < 0 || score > state.best_metric;
    if (improved) {
      state.best_metric = score;
      state.best_epoch = static_cast<std::int64_t>(epoch);
    }
    state.epoch = epoch + 1;
    state.rng_state = rng_to_string(rng);
    rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    if (persist) {
      model::save_checkpoint(last_path, options.config_echo, params, &state);
      if (improved) model::save_checkpoint(best_path, options.config_echo, params, &state);
      log << to_json_line(rec) << '\n' << std::flush;
    }
    result.log.push_back(rec);
    if (options.on_epoch) options.on_epoch(rec);
  }
  return result;
}

template <typename T>
eval::PredictionSet predict(const model::AfftModel<T>& net, const data::FeatureDataset& ds, std::size_t batch_size) {
  core::NoGradGuard guard;
  const std::size_t classes = net.config().classes;
  eval::PredictionSet preds;
  preds.classes = classes;
  std::vector<std::size_t> idx(ds.samples.size());
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t begin = 0; begin < idx.size(); begin += batch_size) {
    const std::size_t end = std::min(idx.size(), begin + batch_size);
    auto batch = make_batch(ds, std::span<const std::size_t>(idx).subspan(begin, end - begin), classes);
    auto out = net.forward(batch.template tensors<T>(), {});
    const auto& logits = out.anticipation.logits;
    const std::size_t steps = logits.dim(1);
    for (std::size_t b = 0; b < batch.size; ++b) {
      const T* row = logits.data().data() + (b * steps + steps - 1) * classes;
      double m = -std::numeric_limits<double>::infinity(), z = 0;
      for (std::size_t c = 0; c < classes; ++c) m = std::max(m, static_cast<double>(row[c]));
      std::vector<double> p(classes);
      for (std::size_t c = 0; c < classes; ++c) z += (p[c] = std::exp(static_cast<double>(row[c]) - m));
      for (auto& v : p) v /= z;
      preds.add(p, ds.samples[begin + b].next_label);
    }
  }
  return preds;
}

template <typename T>
std::vector<double> fused_means(const model::AfftModel<T>& net, const data::FeatureDataset& ds, std::size_t batch_size) {
  core::NoGradGuard guard;
  std::vector<double> out;
  std::vector<std::size_t> idx(ds.samples.size());
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t begin = 0; begin < idx.size(); begin += batch_size) {
    const std::size_t end = std::min(idx.size(), begin + batch_size);
    auto batch = make_batch(ds, std::span<const std::size_t>(idx).subspan(begin, end - begin), net.config().classes);
    auto z = core::mean_axis(net.fuser().forward(batch.template tensors<T>(), {}), 1);
    out.insert(out.end(), z.data().begin(), z.data().end());
  }
  return out;
}

template <typename T>
void fit_matt(model::MattHead<T>& head, const MattData& data, const TrainConfig& cfg) {
  cfg.validate();
  if (data.samples == 0) throw DataError("MATT training set is empty");
  core::ParameterSet<T> params;
  head.register_parameters(params, "matt");
  core::MomentumState<T> momentum;
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(data.samples);
  const std::size_t MF = data.modalities * data.feature_dim, MC = data.modalities * data.classes;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_at_epoch(epoch, cfg);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t begin = 0; begin < data.samples; begin += cfg.batch_size) {
      const std::size_t end = std::min(data.samples, begin + cfg.batch_size), B = end - begin;
      std::vector<T> f, p;
      std::vector<double> targets(B * data.classes, 0.0);
      for (std::size_t b = 0; b < B; ++b) {
        const std::size_t i = order[begin + b];
        f.insert(f.end(), data.features.begin() + static_cast<std::ptrdiff_t>(i * MF),
                 data.features.begin() + static_cast<std::ptrdiff_t>((i + 1) * MF));
        p.insert(p.end(), data.probs.begin() + static_cast<std::ptrdiff_t>(i * MC),
                 data.probs.begin() + static_cast<std::ptrdiff_t>((i + 1) * MC));
        targets[b * data.classes + static_cast<std::size_t>(data.labels[i])] = 1.0;
      }
      params.zero_grad();
      auto fused = head.fuse(Tensor<T>({B, MF}, std::move(f)), Tensor<T>({B, data.modalities, data.classes}, std::move(p)));
      core::backward(model::mixture_nll(fused, targets));
      core::sgd_momentum_step(params, lr, cfg.momentum, cfg.weight_decay, momentum);
    }
  }
  params.zero_grad();
}

template <typename T>
eval::PredictionSet predict_matt(const model::MattHead<T>& head, const MattData& data) {
  core::NoGradGuard guard;
  std::vector<T> f(data.features.begin(), data.features.end()), p(data.probs.begin(), data.probs.end());
  auto fused = head.fuse(Tensor<T>({data.samples, data.modalities * data.feature_dim}, std::move(f)),
                         Tensor<T>({data.samples, data.modalities, data.classes}, std::move(p)));
  eval::PredictionSet preds;
  preds.classes = data.classes;
  for (std::size_t i = 0; i < data.samples; ++i) {
    std::vector<double> row(data.classes);
    double s = 0;
    for (std::size_t c = 0; c < data.classes; ++c) s += (row[c] = static_cast<double>(fused.data()[i * data.classes + c]));
    for (auto& v : row) v /= s;
    preds.add(row, data.labels[i]);
  }
  return preds;
}

#define AFFT_INSTANTIATE_TRAIN(T)                                                                                  \
  template std::vector<Tensor<T>> Batch::tensors<T>() const;                                                       \
  template std::string find_nonfinite(const core::ParameterSet<T>&);                                               \
  template FitResult<T> fit(model::AfftModel<T>&, const data::FeatureDataset&, const TrainConfig&, const FitOptions&); \
  template eval::PredictionSet predict(const model::AfftModel<T>&, const data::FeatureDataset&, std::size_t);      \
  template std::vector<double> fused_means(const model::AfftModel<T>&, const data::FeatureDataset&, std::size_t);  \
  template void fit_matt(model::MattHead<T>&, const MattData&, const TrainConfig&);                               \
  template eval::PredictionSet predict_matt(const model::MattHead<T>&, const MattData&);

AFFT_INSTANTIATE_TRAIN(float)
AFFT_INSTANTIATE_TRAIN(double)

}  // namespace afft::train
