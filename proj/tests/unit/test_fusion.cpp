#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "afft/core/error.hpp"
#include "afft/model/fusion.hpp"
#include "afft/model/score_fusion.hpp"
#include "gradcheck.hpp"
#include "oracle.hpp"

using namespace afft;
using namespace afft::model;
using afft::core::Tensor;
using afft::testing::random_tensor;

namespace {

std::vector<data::ModalitySpec> specs(std::vector<std::size_t> dims) {
  std::vector<data::ModalitySpec> out;
  for (std::size_t m = 0; m < dims.size(); ++m) out.push_back({"m" + std::to_string(m), dims[m]});
  return out;
}

FuserConfig small_config(FuserKind kind, std::size_t dim = 8, std::size_t layers = 1, std::size_t heads = 1) {
  FuserConfig c;
  c.kind = kind;
  c.dim = dim;
  c.layers = layers;
  c.heads = heads;
  c.dropout = 0;
  c.drop_path = 0;
  c.max_len = 8;
  return c;
}

// Replaces every parameter with N(0, scale^2) values so no block is near-trivial.
void randomize(const core::ParameterSet<double>& params, std::mt19937_64& rng, double scale = 0.5) {
  std::normal_distribution<double> n(0.0, scale);
  for (const auto& p : params.items()) {
    auto t = p.tensor;
    for (auto& v : t.mutable_data()) v = n(rng);
  }
}

core::ParameterSet<double> params_of(const Fuser<double>& f) {
  core::ParameterSet<double> ps;
  f.register_parameters(ps, "fuser");
  return ps;
}

std::vector<Tensor<double>> inputs_for(const std::vector<data::ModalitySpec>& mods, std::size_t B, std::size_t T,
                                       std::mt19937_64& rng, double scale = 1.0) {
  std::vector<Tensor<double>> xs;
  for (const auto& m : mods) xs.push_back(random_tensor({B, T, m.dim}, rng, scale, false));
  return xs;
}

// Rows [b, t, :] of a [B, T, d] tensor.
std::vector<double> row(const Tensor<double>& x, std::size_t b, std::size_t t) {
  const std::size_t d = x.dim(2);
  auto s = x.data().subspan((b * x.dim(1) + t) * d, d);
  return {s.begin(), s.end()};
}

oracle::Mat step_rows(const Tensor<double>& x, std::size_t b) {
  oracle::Mat m;
  for (std::size_t t = 0; t < x.dim(1); ++t) m.push_back(row(x, b, t));
  return m;
}

}  // namespace

TEST(Projection, SparseLinearPassesMatchingDimBitwise) {
  std::mt19937_64 rng(1);
  ModalityProjection<double> same(ProjectionPolicy::kSparseLinear, 1024, 1024, rng);
  ModalityProjection<double> other(ProjectionPolicy::kSparseLinear, 352, 1024, rng);
  EXPECT_TRUE(same.is_identity());
  EXPECT_FALSE(other.is_identity());
  auto x = random_tensor({1, 2, 1024}, rng, 1.0, false);
  auto y = same.forward(x);
  EXPECT_TRUE(std::equal(x.data().begin(), x.data().end(), y.data().begin()));
  auto a = random_tensor({1, 2, 352}, rng, 1.0, false);
  auto b = other.forward(a);
  EXPECT_EQ(b.shape(), (core::Shape{1, 2, 1024}));
  auto ref = core::linear(a, other.value.weight, &other.value.bias);
  EXPECT_TRUE(std::equal(ref.data().begin(), ref.data().end(), b.data().begin()));
  core::ParameterSet<double> ps;
  same.register_parameters(ps, "p");
  EXPECT_EQ(ps.size(), 0u);
}

TEST(Projection, GluWithZeroGateHalvesValuePath) {
  std::mt19937_64 rng(2);
  ModalityProjection<double> glu(ProjectionPolicy::kGlu, 5, 4, rng);
  for (auto& v : glu.gate.weight.mutable_data()) v = 0;
  for (auto& v : glu.gate.bias.mutable_data()) v = 0;
  for (auto& v : glu.value.bias.mutable_data()) v = 0.3;
  auto x = random_tensor({2, 3, 5}, rng, 1.0, false);
  auto y = glu.forward(x);
  auto ref = core::linear(x, glu.value.weight, &glu.value.bias);
  for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_DOUBLE_EQ(y.data()[i], 0.5 * ref.data()[i]);
}

TEST(Projection, LinearWithIdentityWeightIsIdentity) {
  std::mt19937_64 rng(3);
  ModalityProjection<double> lin(ProjectionPolicy::kLinear, 4, 4, rng);
  EXPECT_FALSE(lin.is_identity());
  auto w = lin.value.weight.mutable_data();
  std::fill(w.begin(), w.end(), 0.0);
  for (std::size_t i = 0; i < 4; ++i) w[i * 4 + i] = 1.0;
  auto x = random_tensor({1, 3, 4}, rng, 1.0, false);
  auto y = lin.forward(x);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y.data()[i], x.data()[i]);
}

TEST(Projection, LinearReluRectifies) {
  std::mt19937_64 rng(4);
  ModalityProjection<double> p(ProjectionPolicy::kLinearRelu, 3, 6, rng);
  auto y = p.forward(random_tensor({4, 2, 3}, rng, 5.0, false));
  for (double v : y.data()) EXPECT_GE(v, 0.0);
}

TEST(Projection, PolicyNamesRoundTrip) {
  for (auto p : {ProjectionPolicy::kSparseLinear, ProjectionPolicy::kLinear, ProjectionPolicy::kLinearRelu,
                 ProjectionPolicy::kGlu})
    EXPECT_EQ(parse_projection(to_string(p)), p);
  for (auto k : {FuserKind::kSA, FuserKind::kSANoToken, FuserKind::kTSA, FuserKind::kCA})
    EXPECT_EQ(parse_fuser_kind(to_string(k)), k);
  EXPECT_THROW(parse_fuser_kind("bogus"), ConfigError);
}

TEST(SaFuser, TokenOutputInvariantToModalityPermutation) {
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t M = 2 + rng() % 4, heads = 1 + rng() % 2, dim = 4 * heads, layers = 1 + rng() % 3;
    auto mods = specs(std::vector<std::size_t>(M, dim));
    SelfAttentionFuser<double> f(small_config(FuserKind::kSA, dim, layers, heads), mods, rng);
    randomize(params_of(f), rng);
    auto xs = inputs_for(mods, 2, 3, rng);
    nn::ForwardContext ctx;
    auto base = f.fuse_projected(xs, ctx);
    std::vector<std::size_t> perm(M);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<Tensor<double>> permuted;
    for (auto i : perm) permuted.push_back(xs[i]);
    auto out = f.fuse_projected(permuted, ctx);
    for (std::size_t i = 0; i < base.numel(); ++i) EXPECT_NEAR(out.data()[i], base.data()[i], 1e-6);
  }
}

TEST(SaFuser, TokenlessWithIdentityBlocksAveragesInputs) {
  std::mt19937_64 rng(11);
  auto cfg = small_config(FuserKind::kSANoToken, 6, 2, 2);
  cfg.final_norm = false;
  auto mods = specs({6, 6, 6});
  SelfAttentionFuser<double> f(cfg, mods, rng);
  f.bypass_blocks = true;
  auto xs = inputs_for(mods, 2, 4, rng);
  auto z = f.fuse_projected(xs, {});
  for (std::size_t i = 0; i < z.numel(); ++i) {
    const double mean = (xs[0].data()[i] + xs[1].data()[i] + xs[2].data()[i]) / 3.0;
    EXPECT_NEAR(z.data()[i], mean, 1e-15);
  }
}

TEST(SaFuser, MatchesHandOracleTwoModalitiesOneBlockOneHead) {
  std::mt19937_64 rng(12);
  auto mods = specs({4, 4});
  SelfAttentionFuser<double> f(small_config(FuserKind::kSA, 4, 1, 1), mods, rng);
  randomize(params_of(f), rng);
  auto xs = inputs_for(mods, 1, 2, rng);
  auto z = f.forward(xs, {});
  for (std::size_t t = 0; t < 2; ++t) {
    oracle::Mat tokens{{f.token.data().begin(), f.token.data().end()}, row(xs[0], 0, t), row(xs[1], 0, t)};
    auto out = oracle::encoder(f.blocks[0], tokens, nullptr);
    auto ref = oracle::layer_norm({out[0]}, f.norm)[0];
    auto got = row(z, 0, t);
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(got[j], ref[j], 1e-12);
  }
}

TEST(SaFuser, TimestepsAreIndependent) {
  std::mt19937_64 rng(13);
  for (auto kind : {FuserKind::kSA, FuserKind::kSANoToken}) {
    auto mods = specs({5, 3});
    SelfAttentionFuser<double> f(small_config(kind, 4, 2, 2), mods, rng);
    randomize(params_of(f), rng);
    auto xs = inputs_for(mods, 2, 4, rng);
    auto base = f.forward(xs, {});
    auto d = xs[1].mutable_data();
    d[(1 * 4 + 2) * 3 + 1] += 0.7;  // sample 1, step 2
    auto out = f.forward(xs, {});
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t t = 0; t < 4; ++t) {
        const bool touched = b == 1 && t == 2;
        EXPECT_EQ(row(out, b, t) == row(base, b, t), !touched) << b << "," << t;
      }
  }
}

TEST(SaFuser, RejectsZeroModalities) {
  std::mt19937_64 rng(14);
  EXPECT_THROW(SelfAttentionFuser<double>(small_config(FuserKind::kSA), {}, rng), ConfigError);
}

TEST(SaFuser, TraceCarriesRolesAndRowSums) {
  std::mt19937_64 rng(15);
  auto mods = specs({4, 4, 4});
  SelfAttentionFuser<double> f(small_config(FuserKind::kSA, 4, 2, 2), mods, rng);
  randomize(params_of(f), rng);
  core::AttentionTrace trace;
  nn::ForwardContext ctx;
  ctx.trace = &trace;
  f.forward(inputs_for(mods, 2, 3, rng), ctx);
  EXPECT_EQ(trace.source, core::AttentionTrace::Source::kSelfAttentionFuserToken);
  ASSERT_EQ(trace.layers.size(), 2u);
  for (const auto& map : trace.layers) {
    EXPECT_EQ(map.groups, 6u);
    EXPECT_EQ(map.heads, 2u);
    ASSERT_EQ(map.key_roles.size(), 4u);
    EXPECT_EQ(map.key_roles[0].kind, core::TokenRole::Kind::kFusionToken);
    EXPECT_EQ(map.key_roles[3].modality, 2);
    for (std::size_t g = 0; g < map.groups; ++g)
      for (std::size_t h = 0; h < map.heads; ++h)
        for (std::size_t q = 0; q < map.queries; ++q) {
          double s = 0;
          for (std::size_t k = 0; k < map.keys; ++k) s += map.at(g, h, q, k);
          EXPECT_NEAR(s, 1.0, 1e-12);
        }
  }
}

TEST(TsaFuser, MaskMatchesEnumeratedPairs) {
  const std::size_t T = 3, M = 2;
  auto mask = TemporalFuser<double>::attention_mask(T, M);
  // Token a: kind = a / T (0 = query, 1.. = modality), time = a % T.
  std::vector<std::pair<std::size_t, std::size_t>> allowed;
  for (std::size_t ka = 0; ka <= M; ++ka)
    for (std::size_t ta = 0; ta < T; ++ta)
      for (std::size_t kb = 0; kb <= M; ++kb)
        for (std::size_t tb = 0; tb <= ta; ++tb) allowed.emplace_back(ka * T + ta, kb * T + tb);
  const std::size_t n = (M + 1) * T;
  ASSERT_EQ(mask.shape, (core::Shape{n, n}));
  std::size_t count = 0;
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = 0; b < n; ++b) {
      const bool expect = std::find(allowed.begin(), allowed.end(), std::make_pair(a, b)) != allowed.end();
      EXPECT_EQ(mask.allow[a * n + b] != 0, expect) << a << "->" << b;
      count += mask.allow[a * n + b];
    }
  EXPECT_EQ(count, allowed.size());
  EXPECT_EQ(count, 54u);
}

TEST(TsaFuser, FutureInputsDoNotReachPastOutputs) {
  std::mt19937_64 rng(20);
  auto mods = specs({4, 6});
  TemporalFuser<double> f(small_config(FuserKind::kTSA, 4, 2, 2), mods, rng);
  randomize(params_of(f), rng);
  const std::size_t T = 5;
  auto xs = inputs_for(mods, 2, T, rng);
  auto base = f.forward(xs, {});
  for (auto& x : xs) {
    auto d = x.mutable_data();
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t j = 0; j < x.dim(2); ++j) d[(b * T + T - 1) * x.dim(2) + j] += 3.0;
  }
  auto out = f.forward(xs, {});
  for (std::size_t b = 0; b < 2; ++b) {
    for (std::size_t t = 0; t + 1 < T; ++t) EXPECT_EQ(row(out, b, t), row(base, b, t));
    EXPECT_NE(row(out, b, T - 1), row(base, b, T - 1));
  }
}

TEST(TsaFuser, SingleStepReducesToSaFuser) {
  std::mt19937_64 rng(21);
  auto mods = specs({4, 4, 4});
  auto cfg = small_config(FuserKind::kSA, 4, 2, 2);
  SelfAttentionFuser<double> sa(cfg, mods, rng);
  randomize(params_of(sa), rng);
  cfg.kind = FuserKind::kTSA;
  TemporalFuser<double> tsa(cfg, mods, rng);
  auto sa_params = params_of(sa);
  auto tsa_params = params_of(tsa);
  for (const auto& p : tsa_params.items()) {
    auto dst = p.tensor;
    if (sa_params.contains(p.name)) {
      auto src = sa_params.get(p.name).data();
      std::copy(src.begin(), src.end(), dst.mutable_data().begin());
    }
  }
  for (auto& v : tsa.positions.mutable_data()) v = 0;
  std::copy(sa.token.data().begin(), sa.token.data().end(), tsa.query_tokens.mutable_data().begin());
  auto xs = inputs_for(mods, 3, 1, rng);
  auto a = sa.forward(xs, {});
  auto b = tsa.forward(xs, {});
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a.data()[i], b.data()[i], 1e-12);
}

TEST(TsaFuser, RejectsOverlongSequence) {
  std::mt19937_64 rng(22);
  auto mods = specs({4});
  TemporalFuser<double> f(small_config(FuserKind::kTSA, 4), mods, rng);
  EXPECT_THROW(f.forward(inputs_for(mods, 1, 9, rng), {}), ConfigError);
}

TEST(CaFuser, SingleModalityIsProjectionPlusPositions) {
  std::mt19937_64 rng(30);
  auto mods = specs({3});
  auto cfg = small_config(FuserKind::kCA, 4, 6, 2);
  cfg.projection = ProjectionPolicy::kLinear;
  CrossAttentionFuser<double> f(cfg, mods, rng);
  EXPECT_TRUE(f.blocks.empty());
  auto xs = inputs_for(mods, 2, 3, rng);
  auto z = f.forward(xs, {});
  auto ref = core::add(f.projections()[0].forward(xs[0]), core::slice(f.positions[0], 0, 0, 3));
  for (std::size_t i = 0; i < z.numel(); ++i) EXPECT_EQ(z.data()[i], ref.data()[i]);
}

TEST(CaFuser, UsesOneBlockPerOtherModalityRegardlessOfLayers) {
  std::mt19937_64 rng(31);
  auto cfg = small_config(FuserKind::kCA, 4, 6, 1);
  cfg.main_modality = "m2";
  cfg.modality_order = {"m1", "m0"};
  CrossAttentionFuser<double> f(cfg, specs({4, 4, 4}), rng);
  EXPECT_EQ(f.blocks.size(), 2u);
  EXPECT_EQ(f.main_index(), 2u);
  EXPECT_EQ(f.others(), (std::vector<std::size_t>{1, 0}));
  cfg.main_modality = "rgb";
  EXPECT_THROW(CrossAttentionFuser<double>(cfg, specs({4, 4, 4}), rng), ConfigError);
}

TEST(CaFuser, CrossAttentionRowsSumToOne) {
  std::mt19937_64 rng(32);
  auto mods = specs({4, 5, 6});
  CrossAttentionFuser<double> f(small_config(FuserKind::kCA, 4, 1, 2), mods, rng);
  randomize(params_of(f), rng);
  core::AttentionTrace trace;
  nn::ForwardContext ctx;
  ctx.trace = &trace;
  f.forward(inputs_for(mods, 2, 4, rng), ctx);
  ASSERT_EQ(trace.layers.size(), 4u);
  for (const auto& map : trace.layers) {
    for (std::size_t g = 0; g < map.groups; ++g)
      for (std::size_t h = 0; h < map.heads; ++h)
        for (std::size_t q = 0; q < map.queries; ++q) {
          double s = 0;
          for (std::size_t k = 0; k < map.keys; ++k) s += map.at(g, h, q, k);
          EXPECT_NEAR(s, 1.0, 1e-12);
        }
  }
  EXPECT_EQ(trace.layers[1].label, "fuser.blocks.0.cross");
  EXPECT_EQ(trace.layers[1].key_roles[0].modality, 1);
}

TEST(CaFuser, MatchesHandDecoderOracle) {
  std::mt19937_64 rng(33);
  auto mods = specs({4, 4});
  auto cfg = small_config(FuserKind::kCA, 4, 1, 1);
  CrossAttentionFuser<double> f(cfg, mods, rng);
  randomize(params_of(f), rng);
  auto xs = inputs_for(mods, 1, 2, rng);
  auto z = f.forward(xs, {});
  auto pos = oracle::rows_of(core::slice(f.positions[0], 0, 0, 2));
  auto stream = oracle::add(step_rows(xs[0], 0), pos);
  auto memory = oracle::add(step_rows(xs[1], 0), pos);
  auto ref = oracle::decoder(f.blocks[0], stream, memory, oracle::causal(), oracle::causal());
  for (std::size_t t = 0; t < 2; ++t)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(row(z, 0, t)[j], ref[t][j], 1e-12);
}

TEST(CaFuser, FutureInputsDoNotReachPastOutputs) {
  std::mt19937_64 rng(34);
  for (bool per_modality : {false, true}) {
    auto mods = specs({4, 3, 5});
    auto cfg = small_config(FuserKind::kCA, 4, 1, 2);
    cfg.per_modality_positions = per_modality;
    CrossAttentionFuser<double> f(cfg, mods, rng);
    EXPECT_EQ(f.positions.size(), per_modality ? 3u : 1u);
    randomize(params_of(f), rng);
    const std::size_t T = 4;
    auto xs = inputs_for(mods, 1, T, rng);
    auto base = f.forward(xs, {});
    for (auto& x : xs) x.mutable_data()[(T - 1) * x.dim(2)] -= 2.0;
    auto out = f.forward(xs, {});
    for (std::size_t t = 0; t + 1 < T; ++t) EXPECT_EQ(row(out, 0, t), row(base, 0, t));
    EXPECT_NE(row(out, 0, T - 1), row(base, 0, T - 1));
  }
}

TEST(Fusers, FiniteOnLargeRandomInputsAndPostProjection) {
  std::mt19937_64 rng(40);
  for (auto kind : {FuserKind::kSA, FuserKind::kSANoToken, FuserKind::kTSA, FuserKind::kCA}) {
    for (auto policy : {ProjectionPolicy::kSparseLinear, ProjectionPolicy::kLinear, ProjectionPolicy::kLinearRelu,
                        ProjectionPolicy::kGlu}) {
      auto mods = specs({8, 5, 3});
      auto cfg = small_config(kind, 8, 2, 4);
      cfg.projection = policy;
      cfg.out_dim = 6;
      auto f = make_fuser<double>(cfg, mods, rng);
      std::uniform_real_distribution<double> u(-10, 10);
      std::vector<Tensor<double>> xs;
      for (const auto& m : mods) {
        std::vector<double> v(2 * 4 * m.dim);
        for (auto& e : v) e = u(rng);
        xs.emplace_back(core::Shape{2, 4, m.dim}, v);
      }
      auto z = f->forward(xs, {});
      EXPECT_EQ(z.shape(), (core::Shape{2, 4, 6}));
      for (double v : z.data()) EXPECT_TRUE(std::isfinite(v));
    }
  }
}

TEST(Fusers, DropPathRampAndTrainingModeRuns) {
  std::mt19937_64 rng(41);
  auto cfg = small_config(FuserKind::kSA, 8, 4, 2);
  cfg.drop_path = 0.1;
  cfg.dropout = 0.1;
  SelfAttentionFuser<double> f(cfg, specs({8, 8}), rng);
  EXPECT_DOUBLE_EQ(f.blocks[0].config.drop_path, 0.025);
  EXPECT_DOUBLE_EQ(f.blocks[3].config.drop_path, 0.1);
  std::mt19937_64 train_rng(5);
  nn::ForwardContext ctx;
  ctx.training = true;
  ctx.rng = &train_rng;
  auto xs = inputs_for(f.modalities(), 2, 3, rng);
  auto a = f.forward(xs, ctx);
  auto b = f.forward(xs, {});
  EXPECT_NE(std::vector<double>(a.data().begin(), a.data().end()), std::vector<double>(b.data().begin(), b.data().end()));
}

TEST(Fusers, RejectIndivisibleHeads) {
  std::mt19937_64 rng(42);
  EXPECT_THROW(make_fuser<double>(small_config(FuserKind::kSA, 6, 1, 4), specs({6}), rng), ConfigError);
}

TEST(ScoreFusion, IdenticalInputsAreAFixedPoint) {
  std::vector<double> p{0.1, 0.6, 0.3};
  EXPECT_EQ(score_average({p, p, p}), p);
  auto w = score_weighted({p, p}, {0.25, 0.75});
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(w[i], p[i], 1e-15);
}

TEST(ScoreFusion, AverageOfOneHots) {
  EXPECT_EQ(score_average({{1, 0}, {0, 1}}), (std::vector<double>{0.5, 0.5}));
}

TEST(ScoreFusion, WeightSumViolationIsRejected) {
  EXPECT_THROW(score_weighted({{1, 0}, {0, 1}}, {0.5, 0.6}), ConfigError);
  EXPECT_THROW(score_weighted({{1, 0}, {0, 1}}, {1.5, -0.5}), ConfigError);
}

TEST(ScoreFusion, OutputsAreDistributions) {
  std::mt19937_64 rng(50);
  std::gamma_distribution<double> g(1.0, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::vector<double>> ps(3, std::vector<double>(7));
    for (auto& p : ps) {
      double s = 0;
      for (auto& v : p) s += (v = g(rng));
      for (auto& v : p) v /= s;
    }
    for (const auto& out : {score_average(ps), score_weighted(ps, {0.2, 0.3, 0.5})}) {
      double s = 0;
      for (double v : out) {
        EXPECT_GE(v, 0.0);
        s += v;
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
}

TEST(ScoreFusion, SimplexGridEnumeratesCompositions) {
  auto grid = simplex_grid(3, 0.05);
  EXPECT_EQ(grid.size(), 231u);  // C(22, 2)
  for (const auto& w : grid) EXPECT_NEAR(std::accumulate(w.begin(), w.end(), 0.0), 1.0, 1e-12);
  EXPECT_EQ(simplex_grid(1, 0.05).size(), 1u);
  EXPECT_THROW(simplex_grid(2, 0.3), ConfigError);
}

TEST(ScoreFusion, GridSearchFindsInformativeModality) {
  // Modality 1 is always right, modality 0 always wrong: accuracy peaks once w1 > w0.
  std::vector<std::vector<std::vector<double>>> per(2);
  std::vector<int> labels;
  for (int i = 0; i < 10; ++i) {
    labels.push_back(i % 2);
    per[0].push_back(i % 2 ? std::vector<double>{0.9, 0.1} : std::vector<double>{0.1, 0.9});
    per[1].push_back(i % 2 ? std::vector<double>{0.2, 0.8} : std::vector<double>{0.8, 0.2});
  }
  auto acc = [&](const std::vector<std::vector<double>>& fused) {
    double hits = 0;
    for (std::size_t i = 0; i < fused.size(); ++i) hits += (fused[i][1] > fused[i][0]) == (labels[i] == 1);
    return hits / static_cast<double>(fused.size());
  };
  auto w = grid_search_weights(per, acc, 0.05);
  // First grid point (lexicographic) reaching full accuracy: w0 must satisfy 0.9 w0 + 0.2 (1-w0) < 0.5.
  EXPECT_NEAR(w[0], 0.0, 1e-12);
  EXPECT_DOUBLE_EQ(acc({score_weighted({per[0][0], per[1][0]}, w)}), 1.0);
}

TEST(Matt, SingleModalityReturnsInput) {
  std::mt19937_64 rng(60);
  MattHead<double> head(1, 5, rng);
  auto feats = random_tensor({3, 5}, rng, 1.0, false);
  std::vector<double> probs{0.2, 0.5, 0.3, 0.6, 0.1, 0.3, 1.0, 0.0, 0.0};
  auto out = head.fuse(feats, Tensor<double>({3, 1, 3}, probs));
  for (std::size_t i = 0; i < probs.size(); ++i) EXPECT_DOUBLE_EQ(out.data()[i], probs[i]);
}

TEST(Matt, IdenticalInputsFixedPointAndValidDistribution) {
  std::mt19937_64 rng(61);
  MattHead<double> head(3, 4, rng);
  core::ParameterSet<double> ps;
  head.register_parameters(ps, "matt");
  randomize(ps, rng, 1.0);
  auto feats = random_tensor({2, 12}, rng, 1.0, false);
  std::vector<double> p{0.1, 0.2, 0.7};
  std::vector<double> probs;
  for (int b = 0; b < 2; ++b)
    for (int m = 0; m < 3; ++m) probs.insert(probs.end(), p.begin(), p.end());
  auto out = head.fuse(feats, Tensor<double>({2, 3, 3}, probs));
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(out.data()[b * 3 + c], p[c], 1e-12);
  auto alpha = head.weights(feats);
  for (std::size_t b = 0; b < 2; ++b) EXPECT_NEAR(alpha.data()[b * 3] + alpha.data()[b * 3 + 1] + alpha.data()[b * 3 + 2], 1.0, 1e-12);
}

TEST(Matt, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(62);
  MattHead<double> head(2, 3, rng, 5);
  core::ParameterSet<double> ps;
  head.register_parameters(ps, "matt");
  randomize(ps, rng, 0.7);
  auto feats = random_tensor({2, 6}, rng, 1.0, false);
  Tensor<double> probs({2, 2, 3}, {0.2, 0.5, 0.3, 0.6, 0.1, 0.3, 0.1, 0.1, 0.8, 0.3, 0.3, 0.4});
  std::vector<double> targets{0, 1, 0, 0.5, 0, 0.5};
  std::vector<Tensor<double>> inputs;
  for (const auto& p : ps.items()) inputs.push_back(p.tensor);
  auto loss = [&] { return mixture_nll(head.fuse(feats, probs), targets); };
  EXPECT_LT(afft::testing::max_gradient_error(loss, inputs), 1e-5);
}
