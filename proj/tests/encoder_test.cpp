#include <gtest/gtest.h>

#include <cmath>

#include "armformer/encoder.hpp"
#include "armformer/errors.hpp"
#include "armformer/gradcheck.hpp"
#include "armformer/gradsuite.hpp"
#include "armformer/ops.hpp"
#include "armformer/random.hpp"
#include "test_util.hpp"

using namespace armformer;
using armformer::testing::probe_weights;

namespace {

std::array<CbamSpec, 4> default_cbam() { return {CbamSpec{}, CbamSpec{}, CbamSpec{}, CbamSpec{}}; }

PatchEmbedWeights random_patch(const StageConfig& cfg, std::int64_t cin, std::uint64_t seed) {
  const std::int64_t c = cfg.embed_channels, k = cfg.patch_kernel;
  return {Tensor::uniform({c, cin, k, k}, seed, -0.3, 0.3), Tensor::uniform({c}, seed + 1, -0.1, 0.1),
          Tensor::uniform({c}, seed + 2, 0.5, 1.5), Tensor::uniform({c}, seed + 3, -0.2, 0.2)};
}

AttentionWeights random_attention(std::int64_t c, std::int64_t sr, std::uint64_t seed, double scale = 0.4) {
  AttentionWeights a;
  a.q_weight = Tensor::uniform({c, c}, seed, -scale, scale);
  a.q_bias = Tensor::uniform({c}, seed + 1, -0.1, 0.1);
  a.k_weight = Tensor::uniform({c, c}, seed + 2, -scale, scale);
  a.k_bias = Tensor::uniform({c}, seed + 3, -0.1, 0.1);
  a.v_weight = Tensor::uniform({c, c}, seed + 4, -scale, scale);
  a.v_bias = Tensor::uniform({c}, seed + 5, -0.1, 0.1);
  a.proj_weight = Tensor::uniform({c, c}, seed + 6, -scale, scale);
  a.proj_bias = Tensor::uniform({c}, seed + 7, -0.1, 0.1);
  if (sr > 1) {
    a.sr_weight = Tensor::uniform({c, c, sr, sr}, seed + 8, -scale, scale);
    a.sr_bias = Tensor::uniform({c}, seed + 9, -0.1, 0.1);
    a.sr_norm_gamma = Tensor::uniform({c}, seed + 10, 0.5, 1.5);
    a.sr_norm_beta = Tensor::uniform({c}, seed + 11, -0.2, 0.2);
  }
  return a;
}

MixFfnWeights random_ffn(std::int64_t c, std::int64_t e, std::uint64_t seed) {
  return {Tensor::uniform({c * e, c}, seed, -0.4, 0.4),         Tensor::uniform({c * e}, seed + 1, -0.1, 0.1),
          Tensor::uniform({c * e, 1, 3, 3}, seed + 2, -0.4, 0.4), Tensor::uniform({c * e}, seed + 3, -0.1, 0.1),
          Tensor::uniform({c, c * e}, seed + 4, -0.4, 0.4),     Tensor::uniform({c}, seed + 5, -0.1, 0.1)};
}

MitEncoder make_encoder(const StageConfigs& stages, ParameterRegistry& reg, std::uint64_t seed = 0) {
  ParamFactory f(reg, seed);
  return MitEncoder::create(stages, default_cbam(), 3, f);
}

}  // namespace

TEST(PatchEmbed, FirstStageQuartersResolution) {
  const auto cfg = default_stage_configs()[0];
  auto x = Tensor::uniform({1, 3, 64, 64}, 1, 0.0, 1.0);
  auto out = overlap_patch_embed(x, cfg, random_patch(cfg, 3, 2));
  EXPECT_EQ(out.height, 16);
  EXPECT_EQ(out.width, 16);
  EXPECT_EQ(out.tokens.shape(), (Shape{1, 256, 32}));
}

TEST(PatchEmbed, LaterStageHalvesResolution) {
  const auto cfg = default_stage_configs()[1];
  auto x = Tensor::uniform({2, 32, 16, 16}, 3, -1.0, 1.0);
  auto out = overlap_patch_embed(x, cfg, random_patch(cfg, 32, 4));
  EXPECT_EQ(out.height, 8);
  EXPECT_EQ(out.width, 8);
  EXPECT_EQ(out.tokens.shape(), (Shape{2, 64, 64}));
}

TEST(PatchEmbed, ZeroInputGivesBetaTokens) {
  // Zero image, zero bias: every token is constant so LN returns beta.
  const auto cfg = default_stage_configs()[0];
  auto w = random_patch(cfg, 3, 5);
  w.proj_bias = Tensor::zeros({32});
  auto out = overlap_patch_embed(Tensor::zeros({1, 3, 32, 32}), cfg, w);
  for (std::int64_t t = 0; t < 64; ++t)
    for (std::int64_t c = 0; c < 32; ++c) EXPECT_DOUBLE_EQ(out.tokens.at({0, t, c}), w.norm_beta.data()[c]);
}

TEST(TokenLayout, MapRoundTrip) {
  auto m = Tensor::uniform({2, 3, 4, 5}, 6, -1.0, 1.0);
  auto tokens = map_to_tokens(m);
  EXPECT_EQ(tokens.shape(), (Shape{2, 20, 3}));
  EXPECT_DOUBLE_EQ(tokens.at({1, 7, 2}), m.at({1, 2, 1, 2}));
  auto back = tokens_to_map(tokens, 4, 5);
  EXPECT_EQ(back.shape(), m.shape());
  for (std::int64_t i = 0; i < m.numel(); ++i) EXPECT_EQ(back.data()[i], m.data()[i]);
  EXPECT_THROW(tokens_to_map(tokens, 5, 5), ShapeError);
}

TEST(Attention, SingleTokenPassesValueThrough) {
  // One token: softmax is exactly 1, so out = proj(v(x)).
  const std::int64_t c = 4;
  auto w = random_attention(c, 1, 10);
  auto x = Tensor::uniform({1, 1, c}, 11, -1.0, 1.0);
  Tensor probs;
  auto out = efficient_self_attention(x, 1, 1, 2, 1, w, &probs);
  for (double p : probs.data()) EXPECT_DOUBLE_EQ(p, 1.0);
  auto expected = linear(linear(x, w.v_weight, w.v_bias), w.proj_weight, w.proj_bias);
  for (std::int64_t i = 0; i < c; ++i) EXPECT_NEAR(out.data()[i], expected.data()[i], 1e-14);
}

TEST(Attention, RowsSumToOneWithReduction) {
  const std::int64_t c = 8;
  auto w = random_attention(c, 2, 20, 1.5);
  auto x = Tensor::uniform({2, 64, c}, 21, -2.0, 2.0);
  Tensor probs;
  auto out = efficient_self_attention(x, 8, 8, 2, 2, w, &probs);
  EXPECT_EQ(out.shape(), (Shape{2, 64, c}));
  // [B*heads, N, N/sr^2]
  ASSERT_EQ(probs.shape(), (Shape{4, 64, 16}));
  auto p = probs.data();
  for (std::int64_t row = 0; row < 4 * 64; ++row) {
    double s = 0.0;
    for (std::int64_t j = 0; j < 16; ++j) {
      EXPECT_GT(p[row * 16 + j], 0.0);
      s += p[row * 16 + j];
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Attention, TwoTokenHandComputed) {
  // Identity q/k/v/proj, C=1, one head: scores x_i * x_j, scale 1.
  AttentionWeights w;
  w.q_weight = w.k_weight = w.v_weight = w.proj_weight = Tensor::constant({1, 1}, 1.0);
  w.q_bias = w.k_bias = w.v_bias = w.proj_bias = Tensor::zeros({1});
  auto x = Tensor({1, 2, 1}, {1.0, 2.0});
  auto out = efficient_self_attention(x, 1, 2, 1, 1, w);
  // token 0: softmax(1, 2) . (1, 2); token 1: softmax(2, 4) . (1, 2)
  const double p0 = 1.0 / (1.0 + std::exp(1.0));
  const double p1 = 1.0 / (1.0 + std::exp(2.0));
  EXPECT_NEAR(out.data()[0], p0 * 1.0 + (1 - p0) * 2.0, 1e-14);
  EXPECT_NEAR(out.data()[1], p1 * 1.0 + (1 - p1) * 2.0, 1e-14);
}

TEST(Attention, RejectsIndivisibleHeads) {
  auto w = random_attention(6, 1, 30);
  auto x = Tensor::uniform({1, 4, 6}, 31, -1.0, 1.0);
  EXPECT_THROW(efficient_self_attention(x, 2, 2, 4, 1, w), ShapeError);
  EXPECT_THROW(efficient_self_attention(x, 3, 2, 2, 1, w), ShapeError);
}

TEST(MixFfn, ZeroWeightsGiveZero) {
  const std::int64_t c = 4;
  MixFfnWeights w{Tensor::zeros({16, c}), Tensor::zeros({16}), Tensor::zeros({16, 1, 3, 3}),
                  Tensor::zeros({16}),    Tensor::zeros({c, 16}), Tensor::zeros({c})};
  auto out = mix_ffn(Tensor::uniform({1, 9, c}, 40, -1.0, 1.0), 3, 3, w);
  for (double v : out.data()) EXPECT_EQ(v, 0.0);
}

TEST(MixFfn, ConstantTokensGiveConstantInterior) {
  // Every token equal: only the padded border of the depthwise conv differs.
  const std::int64_t c = 3;
  auto w = random_ffn(c, 2, 50);
  std::vector<double> v(6 * 6 * c);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = 0.1 * static_cast<double>(i % c) - 0.05;
  auto out = mix_ffn(Tensor({1, 36, c}, v), 6, 6, w);
  for (std::int64_t y = 1; y < 5; ++y)
    for (std::int64_t x = 1; x < 5; ++x)
      for (std::int64_t k = 0; k < c; ++k) {
        EXPECT_NEAR(out.at({0, y * 6 + x, k}), out.at({0, 7, k}), 1e-14);
      }
}

TEST(MixFfn, SingleTokenScalarOracle) {
  // C=1, e=1, 1x1 map: only the depthwise centre tap sees data.
  MixFfnWeights w{Tensor({1, 1}, {2.0}), Tensor({1}, {0.5}),
                  Tensor({1, 1, 3, 3}, {9, 9, 9, 9, 3.0, 9, 9, 9, 9}), Tensor({1}, {-1.0}),
                  Tensor({1, 1}, {-0.5}), Tensor({1}, {0.25})};
  const double x = 0.3;
  const double h = 3.0 * (2.0 * x + 0.5) - 1.0;
  const double g = 0.5 * h * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (h + 0.044715 * h * h * h)));
  auto out = mix_ffn(Tensor({1, 1, 1}, {x}), 1, 1, w);
  EXPECT_NEAR(out.item(), -0.5 * g + 0.25, 1e-14);
}

TEST(MitEncoder, PyramidShapesAt64) {
  ParameterRegistry reg;
  auto enc = make_encoder(default_stage_configs(), reg);
  auto p = enc.forward(Tensor::uniform({2, 3, 64, 64}, 60, 0.0, 1.0));
  EXPECT_EQ(p[0].shape(), (Shape{2, 32, 16, 16}));
  EXPECT_EQ(p[1].shape(), (Shape{2, 64, 8, 8}));
  EXPECT_EQ(p[2].shape(), (Shape{2, 160, 4, 4}));
  EXPECT_EQ(p[3].shape(), (Shape{2, 256, 2, 2}));
}

TEST(MitEncoder, PyramidShapesAt640) {
  ParameterRegistry reg;
  auto enc = make_encoder(default_stage_configs(), reg);
  NoGradGuard guard;
  auto p = enc.forward(Tensor::uniform({1, 3, 640, 640}, 61, 0.0, 1.0));
  EXPECT_EQ(p[0].shape(), (Shape{1, 32, 160, 160}));
  EXPECT_EQ(p[1].shape(), (Shape{1, 64, 80, 80}));
  EXPECT_EQ(p[2].shape(), (Shape{1, 160, 40, 40}));
  EXPECT_EQ(p[3].shape(), (Shape{1, 256, 20, 20}));
}

TEST(MitEncoder, DeterministicAcrossConstruction) {
  ParameterRegistry r1, r2;
  auto e1 = make_encoder(default_stage_configs(), r1, 7);
  auto e2 = make_encoder(default_stage_configs(), r2, 7);
  auto x = Tensor::uniform({1, 3, 32, 32}, 62, 0.0, 1.0);
  auto a = e1.forward(x), b = e2.forward(x);
  for (int s = 0; s < 4; ++s) {
    ASSERT_EQ(a[s].numel(), b[s].numel());
    for (std::int64_t i = 0; i < a[s].numel(); ++i) ASSERT_EQ(a[s].data()[i], b[s].data()[i]);
  }
}

TEST(MitEncoder, RejectsBadInput) {
  ParameterRegistry reg;
  auto enc = make_encoder(default_stage_configs(), reg);
  EXPECT_THROW(enc.forward(Tensor::zeros({1, 3, 48, 64})), ShapeError);
  EXPECT_THROW(enc.forward(Tensor::zeros({1, 1, 64, 64})), ShapeError);
  EXPECT_THROW(enc.forward(Tensor::zeros({3, 64, 64})), ShapeError);
}

TEST(MitEncoder, RejectsHeadsNotDividingChannels) {
  auto stages = default_stage_configs();
  stages[2].heads = 3;
  ParameterRegistry reg;
  EXPECT_THROW(make_encoder(stages, reg), ConfigError);
}

TEST(MitEncoder, ParameterNamesAreStable) {
  ParameterRegistry reg;
  make_encoder(default_stage_configs(), reg);
  EXPECT_EQ(reg.entries().front().name, "encoder.stage1.patch_embed.proj.weight");
  EXPECT_NO_THROW(reg.at("encoder.stage1.block2.attn.sr.weight"));
  EXPECT_EQ(reg.at("encoder.stage1.block2.attn.sr.weight").shape(), (Shape{32, 32, 8, 8}));
  EXPECT_THROW(reg.at("encoder.stage4.block1.attn.sr.weight"), ContractError);
  EXPECT_EQ(reg.entries().back().name, "encoder.stage4.cbam.spatial.weight");
}

TEST(MitEncoder, StageGradientMatchesFiniteDifferences) {
  auto problem = encoder_stage_problem();
  EXPECT_GT(problem.params.size(), 10u);
  auto report = grad_check(problem.loss, problem.params, problem.options);
  EXPECT_TRUE(report.pass) << report.summary();
}
