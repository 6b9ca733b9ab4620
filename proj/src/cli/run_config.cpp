#include "afft/cli/run_config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>

#include "afft/core/error.hpp"
#include "afft/data/feature_file.hpp"

namespace afft::cli {

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys{
      {"seed", "0", "seed for initialisation, shuffling, mixup and dropout"},
      {"out", "runs/afft", "output directory"},
      {"data.source", "synthetic", "synthetic or files"},
      {"data.train", "", "training feature file (data.source=files)"},
      {"data.val", "", "validation feature file (data.source=files)"},
      {"data.classes", "0", "action count for feature files; 0 infers max label + 1"},
      {"data.modalities", "", "comma list of modalities to keep, in order; empty keeps all"},
      {"data.vocabulary", "", "verb,noun list; when set, eval also reports verb and noun metrics"},
      {"synth.modalities", "3", "synthetic modality count"},
      {"synth.actions", "12", "synthetic action count"},
      {"synth.dim", "16", "synthetic feature dim per modality"},
      {"synth.sigma", "0.5", "synthetic noise std"},
      {"synth.successors", "3", "distinct next actions per action"},
      {"synth.train_sequences", "256", "synthetic training sequences"},
      {"synth.val_sequences", "128", "synthetic validation sequences"},
      {"synth.steps", "10", "observed steps T"},
      {"synth.seed", "0", "synthetic world seed"},
      {"fuser.kind", "sa", "sa, sa_no_token, tsa or ca"},
      {"fuser.dim", "1024", "common fusion dim"},
      {"fuser.layers", "6", "fuser blocks"},
      {"fuser.heads", "4", "fuser attention heads"},
      {"fuser.dropout", "0.1", "fuser dropout"},
      {"fuser.drop_path", "0.1", "fuser maximum stochastic-depth rate"},
      {"fuser.projection", "sparse_linear", "sparse_linear, linear, linear_relu or glu"},
      {"fuser.main", "", "CA main modality; empty selects the first"},
      {"fuser.order", "", "CA cross-attention order, comma list"},
      {"fuser.final_norm", "true", "output LayerNorm for SA and TSA"},
      {"fuser.per_modality_positions", "false", "CA positional table per modality"},
      {"fuser.max_len", "32", "fuser maximum T"},
      {"anticipator.layers", "6", "anticipator blocks"},
      {"anticipator.heads", "4", "anticipator attention heads"},
      {"anticipator.dim", "1024", "anticipator dim"},
      {"anticipator.max_len", "32", "anticipator maximum T"},
      {"anticipator.dropout", "0.1", "anticipator dropout"},
      {"anticipator.drop_path", "0.1", "anticipator maximum stochastic-depth rate"},
      {"train.epochs", "50", "total epochs"},
      {"train.warmup_epochs", "20", "linear warmup epochs"},
      {"train.decay_epochs", "30", "cosine decay epochs"},
      {"train.lr", "0.001", "peak learning rate"},
      {"train.momentum", "0.9", "SGD momentum"},
      {"train.weight_decay", "1e-06", "L2 weight decay"},
      {"train.mixup_alpha", "0.1", "mixup Beta parameter; 0 disables"},
      {"train.batch_size", "32", "batch size"},
      {"train.grad_clip", "0", "global gradient norm clip; 0 disables"},
      {"loss.next", "1", "next-action loss weight"},
      {"loss.cls", "1", "per-step action loss weight"},
      {"loss.feat", "1", "feature regression loss weight"},
      {"compare.seeds", "3", "seeds averaged by compare-fusion"},
      {"compare.weight_step", "0.05", "grid step for weighted score fusion"},
      {"compare.matt_hidden", "256", "MATT hidden width"},
  };
  return keys;
}

RunConfig::RunConfig() {
  for (const auto& k : config_keys()) values_[k.name] = k.default_value;
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

RunConfig RunConfig::parse(const std::string& text, const std::string& origin) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key = value");
    }
    try {
      cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return cfg;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path.string());
}

void RunConfig::set(const std::string& key, const std::string& value) {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  it->second = value;
}

const std::string& RunConfig::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second;
}

std::uint64_t RunConfig::u64(const std::string& key) const {
  const auto& s = get(key);
  std::uint64_t v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) {
    throw ConfigError(key + ": expected a non-negative integer, got '" + s + "'");
  }
  return v;
}

std::size_t RunConfig::size(const std::string& key) const { return static_cast<std::size_t>(u64(key)); }

double RunConfig::real(const std::string& key) const {
  const auto& s = get(key);
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used == s.size()) return v;
  } catch (const std::exception&) {
  }
  throw ConfigError(key + ": expected a number, got '" + s + "'");
}

bool RunConfig::flag(const std::string& key) const {
  const auto& s = get(key);
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ConfigError(key + ": expected true or false, got '" + s + "'");
}

std::vector<std::string> RunConfig::list(const std::string& key) const {
  std::vector<std::string> out;
  std::istringstream in(get(key));
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::string RunConfig::echo() const {
  std::string out;
  // The output location is not part of what a run computes, so it stays out of checkpoints.
  for (const auto& k : config_keys())
    if (k.name != "out") out += k.name + "=" + values_.at(k.name) + "\n";
  return out;
}

data::ComplementaryPreset RunConfig::synthetic_preset() const {
  data::ComplementaryPreset p;
  p.modality_count = size("synth.modalities");
  p.action_count = size("synth.actions");
  p.dim = size("synth.dim");
  p.sigma = real("synth.sigma");
  p.successors = size("synth.successors");
  p.sequence_count = size("synth.train_sequences");
  p.steps = size("synth.steps");
  p.seed = u64("synth.seed");
  return p;
}

train::TrainConfig RunConfig::train_config() const {
  train::TrainConfig t;
  t.epochs = size("train.epochs");
  t.warmup_epochs = size("train.warmup_epochs");
  t.decay_epochs = size("train.decay_epochs");
  t.lr_max = real("train.lr");
  t.momentum = real("train.momentum");
  t.weight_decay = real("train.weight_decay");
  t.mixup_alpha = real("train.mixup_alpha");
  t.batch_size = size("train.batch_size");
  t.grad_clip = real("train.grad_clip");
  t.seed = u64("seed");
  t.loss.next = real("loss.next");
  t.loss.cls = real("loss.cls");
  t.loss.feat = real("loss.feat");
  return t;
}

model::ModelConfig RunConfig::model_config(const std::vector<data::ModalitySpec>& modalities, std::size_t classes) const {
  model::ModelConfig m;
  m.modalities = modalities;
  m.classes = classes;
  auto& f = m.fuser;
  f.kind = model::parse_fuser_kind(get("fuser.kind"));
  f.dim = size("fuser.dim");
  f.layers = size("fuser.layers");
  f.heads = size("fuser.heads");
  f.dropout = real("fuser.dropout");
  f.drop_path = real("fuser.drop_path");
  f.projection = model::parse_projection(get("fuser.projection"));
  f.main_modality = get("fuser.main");
  f.modality_order = list("fuser.order");
  f.final_norm = flag("fuser.final_norm");
  f.per_modality_positions = flag("fuser.per_modality_positions");
  f.max_len = size("fuser.max_len");
  auto& a = m.anticipator;
  a.layers = size("anticipator.layers");
  a.heads = size("anticipator.heads");
  a.dim = size("anticipator.dim");
  a.max_len = size("anticipator.max_len");
  a.dropout = real("anticipator.dropout");
  a.drop_path = real("anticipator.drop_path");
  return m;
}

void RunConfig::validate() const {
  for (const auto& k : config_keys()) get(k.name);
  const auto source = get("data.source");
  if (source != "synthetic" && source != "files") throw ConfigError("data.source: expected synthetic or files, got '" + source + "'");
  train_config().validate();
  if (source == "synthetic") data::complementary_config(synthetic_preset()).validate();
  size("data.classes");
  size("synth.val_sequences");
  if (size("compare.seeds") == 0) throw ConfigError("compare.seeds must be positive");
  const double step = real("compare.weight_step");
  if (!(step > 0 && step <= 1)) throw ConfigError("compare.weight_step must be in (0, 1]");
  size("compare.matt_hidden");
  auto mc = model_config({}, 1);
  mc.anticipator.validate();
}

namespace {

std::size_t infer_classes(const std::vector<const data::FeatureDataset*>& sets) {
  int top = -1;
  for (const auto* ds : sets)
    for (const auto& s : ds->samples) {
      top = std::max(top, s.next_label);
      for (int l : s.frame_labels) top = std::max(top, l);
    }
  return static_cast<std::size_t>(top + 1);
}

}  // namespace

Splits load_splits(const RunConfig& cfg) {
  Splits out;
  if (cfg.get("data.source") == "synthetic") {
    auto syn = data::complementary_config(cfg.synthetic_preset());
    // Paths come from streams seeded apart from the world seed so train and val never coincide.
    syn.path_seed = syn.seed * 2 + 1;
    out.train = data::generate_synthetic(syn);
    syn.sequence_count = cfg.size("synth.val_sequences");
    syn.path_seed = syn.seed * 2 + 2;
    out.val = data::generate_synthetic(syn);
    out.classes = syn.action_count;
  } else {
    const auto train_path = cfg.get("data.train"), val_path = cfg.get("data.val");
    if (train_path.empty()) throw ConfigError("data.train is required when data.source=files");
    out.train = data::read_feature_file(train_path);
    out.val = val_path.empty() ? data::FeatureDataset{out.train.modalities, {}} : data::read_feature_file(val_path);
    out.classes = cfg.size("data.classes");
    if (out.classes == 0) out.classes = infer_classes({&out.train, &out.val});
  }
  if (auto keep = cfg.list("data.modalities"); !keep.empty()) {
    out.train = out.train.select_modalities(keep);
    out.val = out.val.select_modalities(keep);
  }
  out.train.validate(out.classes);
  out.val.validate(out.classes);
  return out;
}

}  // namespace afft::cli
