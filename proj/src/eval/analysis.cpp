#include "afft/eval/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "afft/core/error.hpp"

namespace afft::eval {

using core::AttentionMap;
using core::AttentionTrace;

namespace {

Matrix head_mean(const AttentionMap& map, std::size_t g) {
  Matrix a(map.queries, std::vector<double>(map.keys, 0.0));
  for (std::size_t h = 0; h < map.heads; ++h)
    for (std::size_t q = 0; q < map.queries; ++q)
      for (std::size_t k = 0; k < map.keys; ++k) a[q][k] += map.at(g, h, q, k) / static_cast<double>(map.heads);
  return a;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  Matrix c(a.size(), std::vector<double>(b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t p = 0; p < b.size(); ++p)
      for (std::size_t j = 0; j < b[0].size(); ++j) c[i][j] += a[i][p] * b[p][j];
  return c;
}

std::ofstream open_csv(const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DataError("cannot open " + path.string() + " for writing");
  return os;
}

}  // namespace

std::vector<RolloutResult> attention_rollout(const AttentionTrace& trace) {
  if (trace.source != AttentionTrace::Source::kSelfAttentionFuserToken) {
    throw ConfigError("attention rollout needs a trace from the token-variant SA fuser");
  }
  if (trace.layers.empty()) throw ConfigError("attention rollout over an empty trace");
  const auto& first = trace.layers.front();
  const std::size_t n = first.keys, groups = first.groups;
  for (const auto& map : trace.layers) {
    if (map.groups != groups || map.queries != n || map.keys != n) throw ShapeError("rollout layers differ in shape");
  }
  if (n < 2) throw ShapeError("rollout needs the token plus at least one modality");
  std::vector<RolloutResult> out;
  for (std::size_t g = 0; g < groups; ++g) {
    Matrix rollout;
    for (const auto& map : trace.layers) {
      Matrix a = head_mean(map, g);
      for (std::size_t i = 0; i < n; ++i) {
        a[i][i] += 1.0;
        double s = 0;
        for (double v : a[i]) s += v;
        for (double& v : a[i]) v /= s;
      }
      rollout = rollout.empty() ? a : matmul(a, rollout);
    }
    RolloutResult r;
    double mass = 0;
    for (std::size_t k = 1; k < n; ++k) mass += rollout[0][k];
    // Token kept (numerically) all of its mass: no modality attribution exists.
    if (mass <= 1e-12) {
      r.degenerate = true;
      r.modality_weights.assign(n - 1, 1.0 / static_cast<double>(n - 1));
    } else {
      for (std::size_t k = 1; k < n; ++k) r.modality_weights.push_back(rollout[0][k] / mass);
    }
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<Matrix> temporal_attention(const AttentionTrace& trace) {
  if (trace.layers.empty()) throw ConfigError("temporal attention over an empty trace");
  const auto& last = trace.layers.back();
  std::vector<Matrix> out;
  for (std::size_t g = 0; g < last.groups; ++g) out.push_back(head_mean(last, g));
  return out;
}

double quantile(std::vector<double> values, double q) {
  if (values.empty()) throw DataError("quantile of an empty sample");
  if (q < 0 || q > 1) throw ConfigError("quantile level must be in [0, 1]");
  std::sort(values.begin(), values.end());
  const double h = (static_cast<double>(values.size()) - 1.0) * q;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (h - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

void export_analysis(const AnalysisResults& results, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  {
    auto os = open_csv(dir / "per_class.csv");
    os << "class,count,top1_recall,top5_recall\n";
    if (results.per_class_top1.size() != results.per_class_top5.size()) throw ShapeError("per-class tables differ in length");
    for (std::size_t i = 0; i < results.per_class_top1.size(); ++i) {
      const auto& a = results.per_class_top1[i];
      os << a.label << ',' << a.count << ',' << format_number(a.recall()) << ','
         << format_number(results.per_class_top5[i].recall()) << '\n';
    }
    if (!os) throw DataError("write failed: per_class.csv");
  }
  {
    auto os = open_csv(dir / "modality_attention.csv");
    os << "group,degenerate";
    for (const auto& name : results.modality_names) os << ',' << name;
    os << '\n';
    for (std::size_t g = 0; g < results.rollout.size(); ++g) {
      const auto& r = results.rollout[g];
      if (r.modality_weights.size() != results.modality_names.size()) throw ShapeError("rollout width differs from modality list");
      os << g << ',' << (r.degenerate ? 1 : 0);
      for (double w : r.modality_weights) os << ',' << format_number(w);
      os << '\n';
    }
    if (!os) throw DataError("write failed: modality_attention.csv");
  }
  {
    auto os = open_csv(dir / "temporal_attention.csv");
    os << "query,key,mean";
    for (double q : kExportQuantiles) os << ",q" << format_number(q);
    os << '\n';
    if (!results.temporal.empty()) {
      const std::size_t steps = results.temporal[0].size();
      for (std::size_t i = 0; i < steps; ++i) {
        for (std::size_t j = 0; j <= i; ++j) {
          std::vector<double> values;
          for (const auto& m : results.temporal) values.push_back(m.at(i).at(j));
          double mean = 0;
          for (double v : values) mean += v;
          mean /= static_cast<double>(values.size());
          os << i << ',' << j << ',' << format_number(mean);
          for (double q : kExportQuantiles) os << ',' << format_number(quantile(values, q));
          os << '\n';
        }
      }
    }
    if (!os) throw DataError("write failed: temporal_attention.csv");
  }
}

}  // namespace afft::eval
