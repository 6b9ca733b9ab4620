#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "afft/core/error.hpp"
#include "afft/data/binary_io.hpp"
#include "afft/model/anticipator.hpp"
#include "afft/model/checkpoint.hpp"
#include "gradcheck.hpp"
#include "oracle.hpp"

using namespace afft;
using namespace afft::model;
using afft::core::Tensor;
using afft::testing::random_tensor;

namespace {

AnticipatorConfig tiny_anticipator(std::size_t dim = 4, std::size_t layers = 1, std::size_t heads = 1) {
  AnticipatorConfig c;
  c.dim = dim;
  c.layers = layers;
  c.heads = heads;
  c.max_len = 6;
  c.dropout = 0;
  c.drop_path = 0;
  return c;
}

void randomize(const core::ParameterSet<double>& params, std::mt19937_64& rng, double scale = 0.5) {
  std::normal_distribution<double> n(0.0, scale);
  for (const auto& p : params.items()) {
    auto t = p.tensor;
    for (auto& v : t.mutable_data()) v = n(rng);
  }
}

ModelConfig tiny_model(FuserKind kind) {
  ModelConfig c;
  c.modalities = {{"rgb", 8}, {"obj", 5}};
  c.classes = 4;
  c.fuser.kind = kind;
  c.fuser.dim = 8;
  c.fuser.layers = 1;
  c.fuser.heads = 2;
  c.fuser.dropout = 0;
  c.fuser.drop_path = 0;
  c.fuser.max_len = 3;
  c.anticipator = tiny_anticipator(8, 1, 2);
  c.anticipator.max_len = 3;
  return c;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("afft_test_" + name);
}

}  // namespace

TEST(Anticipator, SingleStepGivesOnePrediction) {
  std::mt19937_64 rng(1);
  Anticipator<double> a(tiny_anticipator(), 5, rng);
  auto out = a.forward(random_tensor({2, 1, 4}, rng, 1.0, false), {});
  EXPECT_EQ(out.features.shape(), (core::Shape{2, 1, 4}));
  EXPECT_EQ(out.logits.shape(), (core::Shape{2, 1, 5}));
}

TEST(Anticipator, PerturbingLastStepOnlyChangesLastSlot) {
  std::mt19937_64 rng(2);
  Anticipator<double> a(tiny_anticipator(6, 2, 3), 5, rng);
  core::ParameterSet<double> ps;
  a.register_parameters(ps, "a");
  randomize(ps, rng);
  const std::size_t T = 5;
  auto z = random_tensor({2, T, 6}, rng, 1.0, false);
  auto base = a.forward(z, {});
  auto d = z.mutable_data();
  for (std::size_t b = 0; b < 2; ++b) d[(b * T + T - 1) * 6 + 2] += 1.5;
  auto out = a.forward(z, {});
  for (std::size_t b = 0; b < 2; ++b) {
    for (std::size_t t = 0; t < T; ++t) {
      const auto lo = ((b * T + t) * 5), fo = ((b * T + t) * 6);
      const bool same_logits = std::equal(out.logits.data().begin() + lo, out.logits.data().begin() + lo + 5,
                                          base.logits.data().begin() + lo);
      const bool same_feats = std::equal(out.features.data().begin() + fo, out.features.data().begin() + fo + 6,
                                         base.features.data().begin() + fo);
      EXPECT_EQ(same_logits, t + 1 < T) << t;
      EXPECT_EQ(same_feats, t + 1 < T) << t;
    }
  }
}

TEST(Anticipator, MatchesHandOracleOneLayerOneHead) {
  std::mt19937_64 rng(3);
  Anticipator<double> a(tiny_anticipator(4, 1, 1), 3, rng);
  core::ParameterSet<double> ps;
  a.register_parameters(ps, "a");
  randomize(ps, rng);
  auto z = random_tensor({1, 2, 4}, rng, 1.0, false);
  core::AttentionTrace trace;
  nn::ForwardContext ctx;
  ctx.trace = &trace;
  auto out = a.forward(z, ctx);
  auto x = oracle::add(oracle::rows_of(z), oracle::rows_of(core::slice(a.positions, 0, 0, 2)));
  std::vector<oracle::Mat> weights;
  auto h = oracle::layer_norm(oracle::encoder(a.blocks[0], x, oracle::causal(), &weights), a.norm);
  auto logits = oracle::linear(h, a.head);
  for (std::size_t t = 0; t < 2; ++t) {
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(out.features.data()[t * 4 + j], h[t][j], 1e-12);
    for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(out.logits.data()[t * 3 + c], logits[t][c], 1e-12);
  }
  ASSERT_EQ(trace.layers.size(), 1u);
  EXPECT_EQ(trace.source, core::AttentionTrace::Source::kAnticipator);
  EXPECT_EQ(trace.layers[0].at(0, 0, 0, 1), 0.0);
  EXPECT_NEAR(trace.layers[0].at(0, 0, 1, 0), weights[0][1][0], 1e-12);
}

TEST(Anticipator, RejectsOverlongSequence) {
  std::mt19937_64 rng(4);
  Anticipator<double> a(tiny_anticipator(), 2, rng);
  EXPECT_THROW(a.forward(random_tensor({1, 7, 4}, rng, 1.0, false), {}), ConfigError);
}

TEST(Loss, SingleStepHasOnlyNextTerm) {
  std::mt19937_64 rng(5);
  AnticipationOutput<double> out{random_tensor({2, 1, 3}, rng), random_tensor({2, 1, 4}, rng)};
  auto z = random_tensor({2, 1, 3}, rng);
  auto targets = hard_targets({1, 3}, {{0}, {2}}, 1, 4);
  auto l = total_loss(out, z, targets);
  EXPECT_EQ(l.cls.item(), 0.0);
  EXPECT_EQ(l.feat.item(), 0.0);
  EXPECT_EQ(l.total.item(), l.next.item());
}

TEST(Loss, PerfectFeaturePredictionZeroesFeatureTerm) {
  std::mt19937_64 rng(6);
  auto z = random_tensor({1, 3, 2}, rng, 1.0, false);
  // features slot i = z_{i+1}; last slot unconstrained.
  std::vector<double> f(z.data().begin() + 2, z.data().end());
  f.push_back(9);
  f.push_back(9);
  AnticipationOutput<double> out{Tensor<double>({1, 3, 2}, f), random_tensor({1, 3, 3}, rng)};
  auto l = total_loss(out, z, hard_targets({0}, {{0, 1, 2}}, 3, 3));
  EXPECT_EQ(l.feat.item(), 0.0);
}

TEST(Loss, MatchesIndependentSummationOracle) {
  std::mt19937_64 rng(7);
  const std::size_t B = 3, T = 4, C = 5, D = 2;
  auto feats = random_tensor({B, T, D}, rng), logits = random_tensor({B, T, C}, rng), z = random_tensor({B, T, D}, rng);
  std::vector<int> next{4, 0, 2};
  std::vector<std::vector<int>> frames{{1, 2, data::kIgnoreLabel, 3}, {0, 0, 0, 0}, {}};
  auto l = total_loss<double>({feats, logits}, z, hard_targets(next, frames, T, C), {1.0, 0.5, 2.0});

  auto ce = [&](std::size_t b, std::size_t t, int y) {
    double m = -1e300, s = 0;
    for (std::size_t c = 0; c < C; ++c) m = std::max(m, logits.at({b, t, c}));
    for (std::size_t c = 0; c < C; ++c) s += std::exp(logits.at({b, t, c}) - m);
    return m + std::log(s) - logits.at({b, t, static_cast<std::size_t>(y)});
  };
  double next_sum = 0;
  for (std::size_t b = 0; b < B; ++b) next_sum += ce(b, T - 1, next[b]);
  double cls_sum = 0;
  int cls_n = 0;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 1; t < T; ++t) {
      if (frames[b].empty() || frames[b][t] == data::kIgnoreLabel) continue;
      cls_sum += ce(b, t - 1, frames[b][t]);
      ++cls_n;
    }
  double feat_sum = 0;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t + 1 < T; ++t)
      for (std::size_t d = 0; d < D; ++d) {
        const double e = feats.at({b, t, d}) - z.at({b, t + 1, d});
        feat_sum += e * e;
      }
  const double l_next = next_sum / B, l_cls = cls_sum / cls_n, l_feat = feat_sum / (B * (T - 1) * D);
  EXPECT_EQ(cls_n, 5);
  EXPECT_NEAR(l.next.item(), l_next, 1e-12);
  EXPECT_NEAR(l.cls.item(), l_cls, 1e-12);
  EXPECT_NEAR(l.feat.item(), l_feat, 1e-12);
  EXPECT_NEAR(l.total.item(), l_next + 0.5 * l_cls + 2.0 * l_feat, 1e-12);
  EXPECT_GE(l.next.item(), 0.0);
  EXPECT_GE(l.cls.item(), 0.0);
  EXPECT_GE(l.feat.item(), 0.0);
}

TEST(Loss, AllFramesIgnoredContributesZero) {
  std::mt19937_64 rng(8);
  AnticipationOutput<double> out{random_tensor({1, 3, 2}, rng), random_tensor({1, 3, 3}, rng)};
  auto l = total_loss(out, random_tensor({1, 3, 2}, rng), hard_targets({1}, {{-1, -1, -1}}, 3, 3));
  EXPECT_EQ(l.cls.item(), 0.0);
  EXPECT_THROW(hard_targets({3}, {}, 1, 3), ConfigError);
}

TEST(EndToEnd, GradientsMatchFiniteDifferencesForEveryFuser) {
  for (auto kind : {FuserKind::kSA, FuserKind::kSANoToken, FuserKind::kTSA, FuserKind::kCA}) {
    AfftModel<double> model(tiny_model(kind), 11);
    std::mt19937_64 rng(12);
    randomize(model.parameters(), rng, 0.4);
    std::vector<Tensor<double>> xs{random_tensor({2, 3, 8}, rng, 1.0, false), random_tensor({2, 3, 5}, rng, 1.0, false)};
    auto targets = hard_targets({1, 3}, {{0, 2, 1}, {3, -1, 0}}, 3, 4);
    std::vector<Tensor<double>> inputs;
    for (const auto& p : model.parameters().items()) inputs.push_back(p.tensor);
    auto loss = [&] {
      auto out = model.forward(xs, {});
      return total_loss(out.anticipation, out.z, targets).total;
    };
    EXPECT_LT(afft::testing::max_gradient_error(loss, inputs), 1e-4) << to_string(kind);
  }
}

TEST(EndToEnd, ParameterNamesAreUniqueAndPrefixed) {
  AfftModel<double> model(tiny_model(FuserKind::kTSA), 1);
  for (const auto& p : model.parameters().items()) {
    EXPECT_TRUE(p.name.rfind("fuser.", 0) == 0 || p.name.rfind("anticipator.", 0) == 0) << p.name;
  }
  EXPECT_TRUE(model.parameters().contains("fuser.proj.obj.value.weight"));
  EXPECT_FALSE(model.parameters().contains("fuser.proj.rgb.value.weight"));
  EXPECT_TRUE(model.parameters().contains("anticipator.head.weight"));
}

TEST(Checkpoint, RoundTripIsBitwise) {
  AfftModel<float> a(tiny_model(FuserKind::kSA), 1), b(tiny_model(FuserKind::kSA), 2);
  TrainSnapshot<float> snap;
  snap.epoch = 7;
  snap.best_metric = 42.5;
  snap.best_epoch = 3;
  snap.rng_state = "1 2 3";
  snap.momentum.velocity["anticipator.head.bias"] = {0.25f, -1.0f, 3.0f, 0.0f};
  const auto path = temp_path("ckpt_roundtrip.bin");
  save_checkpoint(path, "fuser.kind=sa\n", a.parameters(), &snap);
  TrainSnapshot<float> back;
  bool has_state = false;
  EXPECT_EQ(load_checkpoint(path, b.parameters(), &back, &has_state), "fuser.kind=sa\n");
  EXPECT_TRUE(has_state);
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    auto x = a.parameters().items()[i].tensor.data(), y = b.parameters().items()[i].tensor.data();
    EXPECT_TRUE(std::equal(x.begin(), x.end(), y.begin())) << a.parameters().items()[i].name;
  }
  EXPECT_EQ(back.epoch, 7u);
  EXPECT_EQ(back.best_metric, 42.5);
  EXPECT_EQ(back.best_epoch, 3);
  EXPECT_EQ(back.rng_state, "1 2 3");
  EXPECT_EQ(back.momentum.velocity, snap.momentum.velocity);
  const auto again = temp_path("ckpt_roundtrip2.bin");
  save_checkpoint(again, "fuser.kind=sa\n", b.parameters(), &back);
  std::ifstream f1(path, std::ios::binary), f2(again, std::ios::binary);
  std::string s1((std::istreambuf_iterator<char>(f1)), {}), s2((std::istreambuf_iterator<char>(f2)), {});
  EXPECT_EQ(s1, s2);
  EXPECT_EQ(read_checkpoint_config(path), "fuser.kind=sa\n");
  std::filesystem::remove(path);
  std::filesystem::remove(again);
}

TEST(Checkpoint, CorruptionYieldsTypedErrors) {
  AfftModel<float> a(tiny_model(FuserKind::kCA), 1);
  const auto path = temp_path("ckpt_corrupt.bin");
  save_checkpoint(path, "x", a.parameters());
  std::string bytes;
  {
    std::ifstream in(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }
  auto expect_kind = [&](const std::string& content, data::FormatError::Kind kind) {
    {
      std::ofstream out(path, std::ios::binary | std::ios::trunc);
      out << content;
    }
    try {
      load_checkpoint(path, a.parameters());
      ADD_FAILURE() << "no error";
    } catch (const data::FormatError& e) {
      EXPECT_EQ(e.kind(), kind) << e.what();
    }
  };
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  expect_kind(bad_magic, data::FormatError::Kind::kBadMagic);
  auto bad_version = bytes;
  bad_version[4] = 9;
  expect_kind(bad_version, data::FormatError::Kind::kVersionMismatch);
  expect_kind(bytes.substr(0, bytes.size() - 3), data::FormatError::Kind::kTruncated);
  AfftModel<double> wide(tiny_model(FuserKind::kCA), 1);
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << bytes;
  }
  EXPECT_THROW(load_checkpoint(path, wide.parameters()), data::FormatError);
  AfftModel<float> other(tiny_model(FuserKind::kSA), 1);
  EXPECT_THROW(load_checkpoint(path, other.parameters()), data::FormatError);
  std::filesystem::remove(path);
}

TEST(Checkpoint, DamagedStateTailIsCaughtWithoutRequestingState) {
  AfftModel<float> a(tiny_model(FuserKind::kSA), 1);
  TrainSnapshot<float> snap;
  snap.rng_state = "4 5 6";
  snap.momentum.velocity["anticipator.head.bias"] = {1.0f, 2.0f, 3.0f, 4.0f};
  const auto path = temp_path("ckpt_tail.bin");
  save_checkpoint(path, "x", a.parameters(), &snap);
  std::string bytes;
  {
    std::ifstream in(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }
  auto write = [&](const std::string& content) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << content;
  };
  write(bytes.substr(0, bytes.size() - 5));
  try {
    load_checkpoint(path, a.parameters());
    ADD_FAILURE() << "no error";
  } catch (const data::FormatError& e) {
    EXPECT_EQ(e.kind(), data::FormatError::Kind::kTruncated);
  }
  write(bytes + "junk");
  EXPECT_THROW(load_checkpoint(path, a.parameters()), data::FormatError);
  std::filesystem::remove(path);
}
