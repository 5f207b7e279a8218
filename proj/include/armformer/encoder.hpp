#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "armformer/cbam.hpp"
#include "armformer/params.hpp"
#include "armformer/tensor.hpp"

namespace armformer {

struct StageConfig {
  std::int64_t embed_channels = 32;
  std::int64_t depth = 2;
  std::int64_t heads = 1;
  std::int64_t sr_ratio = 1;  // key/value spatial reduction
  std::int64_t patch_kernel = 3;
  std::int64_t patch_stride = 2;
  std::int64_t patch_padding = 1;
  std::int64_t ffn_expansion = 4;

  bool operator==(const StageConfig&) const = default;
};

using StageConfigs = std::array<StageConfig, 4>;

/// Channels 32/64/160/256, depths 2, heads 1/2/5/8, sr 8/4/2/1. Stage 1
/// embeds with k7 s4 p3, later stages with k3 s2 p1.
StageConfigs default_stage_configs();

/// Throws ConfigError on invalid values (e.g. channels not divisible by heads).
void validate_stage(const StageConfig& cfg, int index);

/// The four stage outputs F1..F4.
struct FeaturePyramid {
  std::array<Tensor, 4> levels;

  const Tensor& operator[](std::size_t i) const { return levels[i]; }
};

struct PatchEmbedWeights {
  Tensor proj_weight;  // [C', Cin, k, k]
  Tensor proj_bias;
  Tensor norm_gamma;
  Tensor norm_beta;
};

struct AttentionWeights {
  Tensor q_weight, q_bias;
  Tensor k_weight, k_bias;
  Tensor v_weight, v_bias;
  Tensor proj_weight, proj_bias;
  // Present only when sr_ratio > 1.
  std::optional<Tensor> sr_weight, sr_bias;
  std::optional<Tensor> sr_norm_gamma, sr_norm_beta;
};

struct MixFfnWeights {
  Tensor fc1_weight, fc1_bias;  // C -> eC
  Tensor dw_weight, dw_bias;    // [eC, 1, 3, 3]
  Tensor fc2_weight, fc2_bias;  // eC -> C
};

struct BlockWeights {
  Tensor norm1_gamma, norm1_beta;
  AttentionWeights attention;
  Tensor norm2_gamma, norm2_beta;
  MixFfnWeights ffn;
};

struct StageWeights {
  StageConfig config;
  PatchEmbedWeights patch_embed;
  std::vector<BlockWeights> blocks;
  Tensor norm_gamma, norm_beta;
  CbamParams cbam;
};

struct PatchTokens {
  Tensor tokens;  // [B, H*W, C]
  std::int64_t height;
  std::int64_t width;
};

/// [B,N,C] <-> [B,C,H,W].
Tensor tokens_to_map(const Tensor& tokens, std::int64_t h, std::int64_t w);
Tensor map_to_tokens(const Tensor& map);

/// Strided convolution, flatten to tokens, LayerNorm per token.
PatchTokens overlap_patch_embed(const Tensor& x, const StageConfig& cfg, const PatchEmbedWeights& w);

/// Multi-head scaled dot-product attention whose keys and values come from
/// the token map downsampled by an sr x sr strided convolution (then
/// LayerNorm) when sr_ratio > 1. When `probabilities` is given it receives
/// the [B*heads, N, M] attention weights.
Tensor efficient_self_attention(const Tensor& tokens, std::int64_t h, std::int64_t w,
                                std::int64_t heads, std::int64_t sr_ratio, const AttentionWeights& weights,
                                Tensor* probabilities = nullptr);

/// fc1 -> depthwise 3x3 -> GELU -> fc2. Residual is added by the caller.
Tensor mix_ffn(const Tensor& tokens, std::int64_t h, std::int64_t w, const MixFfnWeights& weights);

/// One transformer block: x + attn(LN(x)), then + ffn(LN(.)).
Tensor transformer_block(const Tensor& tokens, std::int64_t h, std::int64_t w, const StageConfig& cfg,
                         const BlockWeights& weights);

/// Patch embed, blocks, LayerNorm, reshape to a map, CBAM.
Tensor stage_forward(const Tensor& x, const StageWeights& stage);

class MitEncoder {
 public:
  MitEncoder() = default;

  static MitEncoder create(const StageConfigs& stages, const std::array<CbamSpec, 4>& cbam,
                           std::int64_t in_channels, ParamFactory& factory,
                           const std::string& prefix = "encoder");

  /// H0 and W0 must be divisible by 32. Each CBAM output is both the pyramid
  /// entry and the next stage's input.
  FeaturePyramid forward(const Tensor& image) const;

  const std::array<StageWeights, 4>& stages() const { return stages_; }

 private:
  std::array<StageWeights, 4> stages_;
};

}  // namespace armformer
