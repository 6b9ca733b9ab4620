#include "afft/cli/commands.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>

#include "afft/core/error.hpp"
#include "afft/data/feature_file.hpp"
#include "afft/data/vocabulary.hpp"
#include "afft/eval/analysis.hpp"
#include "afft/model/checkpoint.hpp"
#include "afft/model/score_fusion.hpp"
#include "afft/train/trainer.hpp"

namespace afft::cli {

namespace {

std::size_t capped_k(std::size_t classes) { return std::min<std::size_t>(5, classes); }

std::string fixed(double v, int digits = 2) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

double mean(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

EvalReport evaluate_predictions(const eval::PredictionSet& preds, const std::string& vocabulary_path) {
  EvalReport r;
  const std::size_t k = capped_k(preds.classes);
  r.samples = preds.size();
  r.top1 = eval::topk_accuracy(preds, 1);
  r.top5 = eval::topk_accuracy(preds, k);
  r.class_mean_top1 = eval::class_mean_top1(preds);
  r.class_mean_top5_recall = eval::class_mean_topk_recall(preds, k);
  if (!vocabulary_path.empty()) {
    const auto vocab = data::ActionVocabulary::load(vocabulary_path);
    if (vocab.action_count() != preds.classes) {
      throw DataError("vocabulary " + vocabulary_path + " has " + std::to_string(vocab.action_count()) +
                      " actions, model predicts " + std::to_string(preds.classes));
    }
    eval::PredictionSet verbs, nouns;
    verbs.classes = vocab.verb_count();
    nouns.classes = vocab.noun_count();
    for (std::size_t i = 0; i < preds.size(); ++i) {
      auto [v, n] = eval::marginalize(preds.row(i), vocab);
      const auto& pair = vocab.pair(static_cast<std::size_t>(preds.labels[i]));
      verbs.add(v, pair.verb);
      nouns.add(n, pair.noun);
    }
    r.has_verb_noun = true;
    r.verb_class_mean_top5_recall = eval::class_mean_topk_recall(verbs, capped_k(verbs.classes));
    r.noun_class_mean_top5_recall = eval::class_mean_topk_recall(nouns, capped_k(nouns.classes));
  }
  return r;
}

double StrategyRow::mean_top5_recall() const { return mean(top5_recall); }
double StrategyRow::mean_top1() const { return mean(top1); }

const StrategyRow& CompareReport::row(const std::string& name) const {
  for (const auto& r : rows)
    if (r.name == name) return r;
  throw ConfigError("no strategy row named '" + name + "'");
}

namespace {

struct TrainedPipeline {
  std::unique_ptr<model::AfftModel<Real>> net;
  eval::PredictionSet train_preds, val_preds;
};

TrainedPipeline train_pipeline(const RunConfig& cfg, const Splits& splits, const data::FeatureDataset& train,
                               const data::FeatureDataset& val, bool need_train_preds) {
  TrainedPipeline p;
  p.net = std::make_unique<model::AfftModel<Real>>(cfg.model_config(train.modalities, splits.classes), cfg.u64("seed"));
  train::fit(*p.net, train, cfg.train_config());
  p.val_preds = train::predict(*p.net, val);
  if (need_train_preds) p.train_preds = train::predict(*p.net, train);
  return p;
}

void record(StrategyRow& row, const eval::PredictionSet& preds) {
  row.top5_recall.push_back(eval::class_mean_topk_recall(preds, capped_k(preds.classes)));
  row.top1.push_back(eval::topk_accuracy(preds, 1));
}

std::vector<model::ProbVector> rows_of(const eval::PredictionSet& preds) {
  std::vector<model::ProbVector> out;
  for (std::size_t i = 0; i < preds.size(); ++i) out.emplace_back(preds.row(i).begin(), preds.row(i).end());
  return out;
}

eval::PredictionSet from_rows(const std::vector<model::ProbVector>& rows, const std::vector<int>& labels, std::size_t classes) {
  eval::PredictionSet p;
  p.classes = classes;
  for (std::size_t i = 0; i < rows.size(); ++i) p.add(rows[i], labels[i]);
  return p;
}

train::MattData matt_data(const std::vector<TrainedPipeline>& uni, const std::vector<data::FeatureDataset>& splits_m,
                          bool use_train, std::size_t classes) {
  train::MattData d;
  d.modalities = uni.size();
  d.classes = classes;
  const auto& first = use_train ? uni[0].train_preds : uni[0].val_preds;
  d.samples = first.size();
  d.labels = first.labels;
  std::vector<std::vector<double>> feats;
  for (std::size_t m = 0; m < uni.size(); ++m) feats.push_back(train::fused_means(*uni[m].net, splits_m[m]));
  d.feature_dim = feats[0].size() / d.samples;
  for (std::size_t i = 0; i < d.samples; ++i) {
    for (std::size_t m = 0; m < uni.size(); ++m) {
      d.features.insert(d.features.end(), feats[m].begin() + static_cast<std::ptrdiff_t>(i * d.feature_dim),
                        feats[m].begin() + static_cast<std::ptrdiff_t>((i + 1) * d.feature_dim));
      const auto& preds = use_train ? uni[m].train_preds : uni[m].val_preds;
      d.probs.insert(d.probs.end(), preds.row(i).begin(), preds.row(i).end());
    }
  }
  return d;
}

}  // namespace

CompareReport compare_fusion(const RunConfig& base, std::ostream* progress) {
  base.validate();
  const Splits splits = load_splits(base);
  if (splits.val.samples.empty()) throw DataError("compare-fusion needs a non-empty validation split");
  const std::size_t M = splits.train.modalities.size();
  const std::vector<std::string> kinds{"sa", "sa_no_token", "tsa", "ca"};
  const std::vector<std::string> score_rows{"score_average", "score_weighted", "matt"};

  CompareReport report;
  for (const auto& m : splits.train.modalities) report.rows.push_back({"uni:" + m.name, {}, {}});
  for (const auto& s : score_rows) report.rows.push_back({s, {}, {}});
  for (const auto& k : kinds) report.rows.push_back({k, {}, {}});
  auto row = [&](const std::string& name) -> StrategyRow& {
    return const_cast<StrategyRow&>(std::as_const(report).row(name));
  };
  auto note = [&](const std::string& msg) {
    if (progress) *progress << msg << std::endl;
  };

  std::vector<data::FeatureDataset> uni_train, uni_val;
  for (const auto& m : splits.train.modalities) {
    uni_train.push_back(splits.train.select_modalities({m.name}));
    uni_val.push_back(splits.val.select_modalities({m.name}));
  }
  const std::size_t C = splits.classes;
  const auto score = [C](const std::vector<model::ProbVector>& fused, const std::vector<int>& labels) {
    return eval::class_mean_topk_recall(from_rows(fused, labels, C), capped_k(C));
  };

  const std::uint64_t first_seed = base.u64("seed");
  for (std::size_t si = 0; si < base.size("compare.seeds"); ++si) {
    const std::uint64_t seed = first_seed + si;
    report.seeds.push_back(seed);
    RunConfig cfg = base;
    cfg.set("seed", std::to_string(seed));

    RunConfig uni_cfg = cfg;
    uni_cfg.set("fuser.kind", "sa");
    uni_cfg.set("fuser.projection", "sparse_linear");
    uni_cfg.set("fuser.main", "");
    uni_cfg.set("fuser.order", "");
    std::vector<TrainedPipeline> uni;
    for (std::size_t m = 0; m < M; ++m) {
      uni.push_back(train_pipeline(uni_cfg, splits, uni_train[m], uni_val[m], true));
      record(row("uni:" + splits.train.modalities[m].name), uni.back().val_preds);
      note("seed " + std::to_string(seed) + " uni:" + splits.train.modalities[m].name + " " +
           fixed(row("uni:" + splits.train.modalities[m].name).top5_recall.back()));
    }

    std::vector<std::vector<model::ProbVector>> val_rows, train_rows;
    for (const auto& u : uni) {
      val_rows.push_back(rows_of(u.val_preds));
      train_rows.push_back(rows_of(u.train_preds));
    }
    const auto& val_labels = uni[0].val_preds.labels;
    const auto& train_labels = uni[0].train_preds.labels;
    auto fuse_all = [&](const std::function<model::ProbVector(const std::vector<model::ProbVector>&)>& f,
                        const std::vector<std::vector<model::ProbVector>>& per_modality) {
      std::vector<model::ProbVector> out;
      for (std::size_t i = 0; i < per_modality[0].size(); ++i) {
        std::vector<model::ProbVector> sample;
        for (const auto& m : per_modality) sample.push_back(m[i]);
        out.push_back(f(sample));
      }
      return out;
    };

    record(row("score_average"), from_rows(fuse_all(model::score_average, val_rows), val_labels, C));
    const auto weights = model::grid_search_weights(
        train_rows, [&](const std::vector<model::ProbVector>& fused) { return score(fused, train_labels); },
        base.real("compare.weight_step"));
    record(row("score_weighted"),
           from_rows(fuse_all([&](const auto& s) { return model::score_weighted(s, weights); }, val_rows), val_labels, C));

    const auto matt_train = matt_data(uni, uni_train, true, C);
    const auto matt_val = matt_data(uni, uni_val, false, C);
    std::mt19937_64 matt_rng(seed);
    model::MattHead<Real> head(M, matt_train.feature_dim, matt_rng, base.size("compare.matt_hidden"));
    train::fit_matt(head, matt_train, cfg.train_config());
    record(row("matt"), train::predict_matt(head, matt_val));
    note("seed " + std::to_string(seed) + " score fusion avg " + fixed(row("score_average").top5_recall.back()) +
         " weighted " + fixed(row("score_weighted").top5_recall.back()) + " matt " + fixed(row("matt").top5_recall.back()));

    for (const auto& kind : kinds) {
      RunConfig fcfg = cfg;
      fcfg.set("fuser.kind", kind);
      auto p = train_pipeline(fcfg, splits, splits.train, splits.val, false);
      record(row(kind), p.val_preds);
      note("seed " + std::to_string(seed) + " " + kind + " " + fixed(row(kind).top5_recall.back()));
    }
  }
  return report;
}

std::string format_compare_table(const CompareReport& report) {
  std::ostringstream os;
  char line[256];
  std::snprintf(line, sizeof line, "%-16s %16s %10s\n", "strategy", "cm_top5_recall", "top1");
  os << line;
  for (const auto& r : report.rows) {
    std::snprintf(line, sizeof line, "%-16s %16.2f %10.2f\n", r.name.c_str(), r.mean_top5_recall(), r.mean_top1());
    os << line;
  }
  return os.str();
}

void write_compare_csv(const CompareReport& report, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw DataError("cannot write " + path.string());
  os << "strategy,metric";
  for (auto s : report.seeds) os << ",seed_" << s;
  os << ",mean\n";
  for (const auto& r : report.rows) {
    for (const auto& [metric, values] : {std::pair{"cm_top5_recall", &r.top5_recall}, std::pair{"top1", &r.top1}}) {
      os << r.name << ',' << metric;
      for (double v : *values) os << ',' << eval::format_number(v);
      os << ',' << eval::format_number(mean(*values)) << '\n';
    }
  }
  if (!os) throw DataError("write failed for " + path.string());
}

namespace {

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  return s;
}

void check_thread_env() {
  const char* v = std::getenv("AFFT_NUM_THREADS");
  if (!v) return;
  const std::string s(v);
  if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos || std::stoull(s) == 0) {
    throw ConfigError("AFFT_NUM_THREADS must be a positive integer, got '" + s + "'");
  }
  // Execution is serial, which satisfies any positive cap.
}

std::unique_ptr<model::AfftModel<Real>> load_model(const RunConfig& cfg, const Splits& splits,
                                                   const std::filesystem::path& checkpoint) {
  auto net = std::make_unique<model::AfftModel<Real>>(cfg.model_config(splits.train.modalities, splits.classes), 0);
  model::load_checkpoint<Real>(checkpoint, net->parameters());
  return net;
}

const data::FeatureDataset& pick_split(const Splits& s, const std::string& name) {
  if (name == "train") return s.train;
  if (name == "val") return s.val;
  throw ConfigError("--split must be train or val, got '" + name + "'");
}

void print_eval(std::ostream& out, const std::string& split, const EvalReport& r) {
  out << "split=" << split << " samples=" << r.samples << " top1=" << fixed(r.top1) << " top5=" << fixed(r.top5)
      << " class_mean_top1=" << fixed(r.class_mean_top1) << " class_mean_top5_recall=" << fixed(r.class_mean_top5_recall);
  if (r.has_verb_noun) {
    out << " verb_class_mean_top5_recall=" << fixed(r.verb_class_mean_top5_recall)
        << " noun_class_mean_top5_recall=" << fixed(r.noun_class_mean_top5_recall);
  }
  out << '\n';
}

int run_synth_gen(const RunConfig& cfg, std::ostream& out) {
  if (cfg.get("data.source") != "synthetic") throw ConfigError("synth-gen needs data.source=synthetic");
  const auto splits = load_splits(cfg);
  const std::filesystem::path dir = cfg.get("out");
  std::filesystem::create_directories(dir);
  for (const auto& [name, ds] : {std::pair{"train", &splits.train}, std::pair{"val", &splits.val}}) {
    const auto file = dir / (std::string(name) + ".afft");
    data::write_manifest(dir / (std::string(name) + ".manifest"), data::write_feature_file(file, *ds));
    out << "wrote " << file.string() << " samples=" << ds->samples.size() << '\n';
  }
  std::ofstream(dir / "synth.conf") << cfg.echo();
  return kExitOk;
}

int run_train(const RunConfig& cfg, bool resume, std::ostream& out) {
  const auto splits = load_splits(cfg);
  const std::filesystem::path dir = cfg.get("out");
  model::AfftModel<Real> net(cfg.model_config(splits.train.modalities, splits.classes), cfg.u64("seed"));
  train::FitOptions opts;
  if (!splits.val.samples.empty()) opts.validation = &splits.val;
  opts.out_dir = dir;
  opts.config_echo = cfg.echo();
  opts.resume = resume;
  opts.on_epoch = [&out](const train::EpochRecord& r) { out << train::to_json_line(r) << '\n'; };
  std::filesystem::create_directories(dir);
  std::ofstream(dir / "run.conf") << cfg.echo();
  const auto result = train::fit(net, splits.train, cfg.train_config(), opts);
  out << "best_epoch=" << result.state.best_epoch << " best_metric=" << fixed(result.state.best_metric)
      << " checkpoint=" << (dir / "best.ckpt").string() << '\n';
  return kExitOk;
}

int run_eval(const RunConfig& cfg, const std::filesystem::path& checkpoint, const std::string& split, std::ostream& out) {
  const auto splits = load_splits(cfg);
  const auto& ds = pick_split(splits, split);
  if (ds.samples.empty()) throw DataError(split + " split is empty");
  const auto net = load_model(cfg, splits, checkpoint);
  print_eval(out, split, evaluate_predictions(train::predict(*net, ds), cfg.get("data.vocabulary")));
  return kExitOk;
}

int run_attn_export(const RunConfig& cfg, const std::filesystem::path& checkpoint, const std::string& split,
                    std::ostream& out) {
  const auto splits = load_splits(cfg);
  const auto& ds = pick_split(splits, split);
  if (ds.samples.empty()) throw DataError(split + " split is empty");
  const auto net = load_model(cfg, splits, checkpoint);
  const bool token_fuser = net->config().fuser.kind == model::FuserKind::kSA;

  eval::AnalysisResults results;
  for (const auto& m : ds.modalities) results.modality_names.push_back(m.name);
  std::vector<std::size_t> idx(ds.samples.size());
  std::iota(idx.begin(), idx.end(), 0);
  core::NoGradGuard guard;
  for (std::size_t begin = 0; begin < idx.size(); begin += 64) {
    const std::size_t n = std::min<std::size_t>(64, idx.size() - begin);
    auto batch = train::make_batch(ds, std::span<const std::size_t>(idx).subspan(begin, n), splits.classes);
    core::AttentionTrace fuser_trace, ant_trace;
    net->forward_traced(batch.tensors<Real>(), fuser_trace, ant_trace);
    if (token_fuser) {
      auto r = eval::attention_rollout(fuser_trace);
      results.rollout.insert(results.rollout.end(), r.begin(), r.end());
    }
    auto t = eval::temporal_attention(ant_trace);
    results.temporal.insert(results.temporal.end(), t.begin(), t.end());
  }
  const auto preds = train::predict(*net, ds);
  results.per_class_top1 = eval::per_class_recall(preds, 1);
  results.per_class_top5 = eval::per_class_recall(preds, capped_k(preds.classes));
  const auto dir = std::filesystem::path(cfg.get("out")) / "analysis";
  eval::export_analysis(results, dir);
  std::size_t degenerate = 0;
  for (const auto& r : results.rollout) degenerate += r.degenerate;
  out << "wrote " << dir.string() << " rollout_groups=" << results.rollout.size() << " degenerate=" << degenerate
      << " temporal_groups=" << results.temporal.size() << '\n';
  if (!token_fuser) out << "note: modality rollout needs fuser.kind=sa; modality_attention.csv holds only the header\n";
  if (degenerate) out << "warning: " << degenerate << " rollout groups were degenerate and reported as uniform\n";
  return kExitOk;
}

int run_compare(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  const auto report = compare_fusion(cfg, &err);
  out << format_compare_table(report);
  const auto path = std::filesystem::path(cfg.get("out")) / "compare_fusion.csv";
  write_compare_csv(report, path);
  out << "wrote " << path.string() << '\n';
  return kExitOk;
}

}  // namespace

int dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Anticipative feature fusion: synthetic data, training, evaluation and analysis"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  struct Common {
    std::string config;
    std::map<std::string, std::string> overrides;
    std::map<std::string, CLI::Option*> options;
  };
  std::map<std::string, Common> common;
  std::string checkpoint, split = "val";
  bool resume = false;

  auto add_sub = [&](const std::string& name, const std::string& help) {
    auto* sub = app.add_subcommand(name, help);
    auto& c = common[name];
    sub->add_option("--config", c.config, "key=value config file");
    for (const auto& k : config_keys()) {
      c.options[k.name] = sub->add_option("--" + k.name, c.overrides[k.name], k.help);
    }
    return sub;
  };
  add_sub("synth-gen", "Write the synthetic train and val splits as feature files");
  add_sub("train", "Fit a model and write checkpoints and the epoch log")
      ->add_flag("--resume", resume, "continue from <out>/last.ckpt");
  auto* ev = add_sub("eval", "Report metrics of a checkpoint on a split");
  ev->add_option("--checkpoint", checkpoint, "checkpoint path (default <out>/best.ckpt)");
  ev->add_option("--split", split, "train or val");
  add_sub("compare-fusion", "Train uni-modal pipelines and every fusion strategy, then tabulate");
  auto* ax = add_sub("attn-export", "Write modality rollout, temporal attention and per-class CSVs");
  ax->add_option("--checkpoint", checkpoint, "checkpoint path (default <out>/best.ckpt)");
  ax->add_option("--split", split, "train or val");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: usage: " << one_line(e.what()) << '\n';
    return kExitUsage;
  }

  const auto* sub = app.get_subcommands().front();
  const std::string name = sub->get_name();
  if (sub->get_help_ptr() && sub->get_help_ptr()->count()) {
    out << sub->help();
    return kExitOk;
  }
  try {
    check_thread_env();
    const auto& c = common[name];
    const bool needs_checkpoint = name == "eval" || name == "attn-export";
    RunConfig cfg;
    if (!c.config.empty()) {
      cfg = RunConfig::load(c.config);
    } else if (needs_checkpoint && !checkpoint.empty()) {
      cfg = RunConfig::parse(model::read_checkpoint_config(checkpoint), checkpoint);
    }
    for (const auto& [key, opt] : c.options)
      if (opt->count() > 0) cfg.set(key, c.overrides.at(key));
    cfg.validate();
    if (needs_checkpoint && checkpoint.empty()) checkpoint = (std::filesystem::path(cfg.get("out")) / "best.ckpt").string();

    if (name == "synth-gen") return run_synth_gen(cfg, out);
    if (name == "train") return run_train(cfg, resume, out);
    if (name == "eval") return run_eval(cfg, checkpoint, split, out);
    if (name == "compare-fusion") return run_compare(cfg, out, err);
    return run_attn_export(cfg, checkpoint, split, out);
  } catch (const ConfigError& e) {
    err << "error: config: " << one_line(e.what()) << '\n';
    return kExitUsage;
  } catch (const NumericError& e) {
    err << "error: numeric: " << one_line(e.what()) << '\n';
    return kExitNumeric;
  } catch (const std::exception& e) {
    err << "error: data: " << one_line(e.what()) << '\n';
    return kExitData;
  }
}

}  // namespace afft::cli
