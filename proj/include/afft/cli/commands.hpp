#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "afft/cli/run_config.hpp"
#include "afft/eval/metrics.hpp"

namespace afft::cli {

/// Exit codes of `dispatch`.
enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitData = 2, kExitNumeric = 3 };

/// The command-line tool computes in single precision.
using Real = float;

struct EvalReport {
  std::size_t samples = 0;
  double top1 = 0;
  double top5 = 0;
  double class_mean_top1 = 0;
  double class_mean_top5_recall = 0;
  bool has_verb_noun = false;
  double verb_class_mean_top5_recall = 0;
  double noun_class_mean_top5_recall = 0;
};

/// k is capped at the class count so small action spaces stay well defined.
EvalReport evaluate_predictions(const eval::PredictionSet& preds, const std::string& vocabulary_path = "");

struct StrategyRow {
  std::string name;
  std::vector<double> top5_recall;  // class-mean top-5 recall per seed
  std::vector<double> top1;         // top-1 accuracy per seed
  double mean_top5_recall() const;
  double mean_top1() const;
};

struct CompareReport {
  std::vector<std::uint64_t> seeds;
  std::vector<StrategyRow> rows;  // uni-modal rows first, then every fusion strategy
  const StrategyRow& row(const std::string& name) const;
};

/// Trains one uni-modal pipeline per modality and every fusion strategy for each seed, all
/// scored on the validation split. Weighted-average weights and the MATT head are fitted on the
/// training split with the uni-modal models frozen.
CompareReport compare_fusion(const RunConfig& cfg, std::ostream* progress = nullptr);

std::string format_compare_table(const CompareReport& report);
void write_compare_csv(const CompareReport& report, const std::filesystem::path& path);

/// Runs the `afft` command line; never throws.
int dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace afft::cli
