#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "afft/data/sequence.hpp"
#include "afft/data/synthetic.hpp"
#include "afft/model/anticipator.hpp"
#include "afft/train/trainer.hpp"

namespace afft::cli {

struct ConfigKey {
  std::string name;
  std::string default_value;
  std::string help;
};

/// Every recognised key with its default, in canonical order.
const std::vector<ConfigKey>& config_keys();

/// Flat dotted key=value configuration. Unknown keys are rejected on every path in.
class RunConfig {
 public:
  RunConfig();

  /// "key = value" lines; '#' starts a comment; blank lines ignored.
  static RunConfig parse(const std::string& text, const std::string& origin = "<string>");
  static RunConfig load(const std::filesystem::path& path);

  void set(const std::string& key, const std::string& value);
  const std::string& get(const std::string& key) const;
  std::string text(const std::string& key) const { return get(key); }
  std::size_t size(const std::string& key) const;
  double real(const std::string& key) const;
  bool flag(const std::string& key) const;
  std::uint64_t u64(const std::string& key) const;
  std::vector<std::string> list(const std::string& key) const;

  /// Canonical "key=value" lines in key order, without `out`; identical configs give identical echoes.
  std::string echo() const;

  data::ComplementaryPreset synthetic_preset() const;
  train::TrainConfig train_config() const;
  model::ModelConfig model_config(const std::vector<data::ModalitySpec>& modalities, std::size_t classes) const;
  /// Checks every value parses and the derived configs validate.
  void validate() const;

 private:
  std::map<std::string, std::string> values_;
};

struct Splits {
  data::FeatureDataset train;
  data::FeatureDataset val;
  std::size_t classes = 0;
};

/// Synthetic splits share one world (prototypes and chain) and differ only in their path seeds.
Splits load_splits(const RunConfig& cfg);

}  // namespace afft::cli
