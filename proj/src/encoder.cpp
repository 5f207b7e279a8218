#include "armformer/encoder.hpp"

#include <cmath>

#include "armformer/errors.hpp"
#include "armformer/ops.hpp"

namespace armformer {

StageConfigs default_stage_configs() {
  return {{
      {32, 2, 1, 8, 7, 4, 3, 4},
      {64, 2, 2, 4, 3, 2, 1, 4},
      {160, 2, 5, 2, 3, 2, 1, 4},
      {256, 2, 8, 1, 3, 2, 1, 4},
  }};
}

void validate_stage(const StageConfig& c, int index) {
  const std::string where = "stage " + std::to_string(index + 1) + ": ";
  if (c.embed_channels < 1 || c.depth < 0 || c.heads < 1 || c.sr_ratio < 1 || c.patch_kernel < 1 ||
      c.patch_stride < 1 || c.patch_padding < 0 || c.ffn_expansion < 1) {
    throw ConfigError(where + "all sizes must be positive");
  }
  if (c.embed_channels % c.heads != 0) {
    throw ConfigError(where + "embed_channels " + std::to_string(c.embed_channels) +
                      " not divisible by heads " + std::to_string(c.heads));
  }
}

Tensor tokens_to_map(const Tensor& tokens, std::int64_t h, std::int64_t w) {
  const std::int64_t b = tokens.dim(0), n = tokens.dim(1), c = tokens.dim(2);
  if (n != h * w) {
    throw ShapeError("token count " + std::to_string(n) + " != " + std::to_string(h) + "x" + std::to_string(w));
  }
  return reshape(permute(tokens, {0, 2, 1}), {b, c, h, w});
}

Tensor map_to_tokens(const Tensor& map) {
  const std::int64_t b = map.dim(0), c = map.dim(1), hw = map.dim(2) * map.dim(3);
  return permute(reshape(map, {b, c, hw}), {0, 2, 1});
}

PatchTokens overlap_patch_embed(const Tensor& x, const StageConfig& cfg, const PatchEmbedWeights& w) {
  auto y = conv2d(x, w.proj_weight, w.proj_bias, {.stride = cfg.patch_stride, .padding = cfg.patch_padding});
  const std::int64_t h = y.dim(2), wd = y.dim(3);
  return {layer_norm(map_to_tokens(y), w.norm_gamma, w.norm_beta), h, wd};
}

namespace {

// [B, N, C] -> [B*heads, N, C/heads]
Tensor split_heads(const Tensor& t, std::int64_t heads) {
  const std::int64_t b = t.dim(0), n = t.dim(1), c = t.dim(2), d = c / heads;
  return reshape(permute(reshape(t, {b, n, heads, d}), {0, 2, 1, 3}), {b * heads, n, d});
}

Tensor merge_heads(const Tensor& t, std::int64_t batch, std::int64_t heads) {
  const std::int64_t n = t.dim(1), d = t.dim(2);
  return reshape(permute(reshape(t, {batch, heads, n, d}), {0, 2, 1, 3}), {batch, n, heads * d});
}

}  // namespace

Tensor efficient_self_attention(const Tensor& tokens, std::int64_t h, std::int64_t w, std::int64_t heads,
                                std::int64_t sr_ratio, const AttentionWeights& weights, Tensor* probabilities) {
  if (tokens.rank() != 3) throw ShapeError("attention: tokens must be [B,N,C]");
  const std::int64_t b = tokens.dim(0), n = tokens.dim(1), c = tokens.dim(2);
  if (n != h * w) throw ShapeError("attention: N=" + std::to_string(n) + " but H*W=" + std::to_string(h * w));
  if (heads < 1 || c % heads != 0) throw ShapeError("attention: channels not divisible by heads");

  const double scale = 1.0 / std::sqrt(static_cast<double>(c / heads));
  auto q = split_heads(mul_scalar(linear(tokens, weights.q_weight, weights.q_bias), scale), heads);
  Tensor kv_source = tokens;
  if (sr_ratio > 1) {
    if (!weights.sr_weight) throw ContractError("attention: sr_ratio > 1 but no reduction weights");
    auto reduced = conv2d(tokens_to_map(tokens, h, w), *weights.sr_weight, weights.sr_bias,
                          {.stride = sr_ratio, .padding = 0});
    kv_source = layer_norm(map_to_tokens(reduced), *weights.sr_norm_gamma, *weights.sr_norm_beta);
  }
  auto k = split_heads(linear(kv_source, weights.k_weight, weights.k_bias), heads);
  auto v = split_heads(linear(kv_source, weights.v_weight, weights.v_bias), heads);
  auto attn = softmax(matmul(q, transpose(k)), -1);
  if (probabilities) *probabilities = attn;
  auto out = merge_heads(matmul(attn, v), b, heads);
  return linear(out, weights.proj_weight, weights.proj_bias);
}

Tensor mix_ffn(const Tensor& tokens, std::int64_t h, std::int64_t w, const MixFfnWeights& weights) {
  if (tokens.rank() != 3 || tokens.dim(1) != h * w) throw ShapeError("mix_ffn: token count mismatch");
  auto hidden = linear(tokens, weights.fc1_weight, weights.fc1_bias);
  const std::int64_t hc = hidden.dim(2);
  auto mapped = conv2d(tokens_to_map(hidden, h, w), weights.dw_weight, weights.dw_bias,
                       {.stride = 1, .padding = 1, .groups = hc});
  return linear(map_to_tokens(gelu(mapped)), weights.fc2_weight, weights.fc2_bias);
}

Tensor transformer_block(const Tensor& tokens, std::int64_t h, std::int64_t w, const StageConfig& cfg,
                         const BlockWeights& bw) {
  auto x = add(tokens, efficient_self_attention(layer_norm(tokens, bw.norm1_gamma, bw.norm1_beta), h, w,
                                                cfg.heads, cfg.sr_ratio, bw.attention));
  return add(x, mix_ffn(layer_norm(x, bw.norm2_gamma, bw.norm2_beta), h, w, bw.ffn));
}

Tensor stage_forward(const Tensor& x, const StageWeights& stage) {
  auto embedded = overlap_patch_embed(x, stage.config, stage.patch_embed);
  Tensor tokens = embedded.tokens;
  for (const auto& block : stage.blocks) {
    tokens = transformer_block(tokens, embedded.height, embedded.width, stage.config, block);
  }
  tokens = layer_norm(tokens, stage.norm_gamma, stage.norm_beta);
  return cbam_apply(tokens_to_map(tokens, embedded.height, embedded.width), stage.cbam).refined;
}

MitEncoder MitEncoder::create(const StageConfigs& stages, const std::array<CbamSpec, 4>& cbam,
                              std::int64_t in_channels, ParamFactory& f, const std::string& prefix) {
  MitEncoder enc;
  std::int64_t cin = in_channels;
  for (int s = 0; s < 4; ++s) {
    const StageConfig& cfg = stages[s];
    validate_stage(cfg, s);
    const std::string p = prefix + ".stage" + std::to_string(s + 1);
    const std::int64_t c = cfg.embed_channels;
    const std::int64_t k = cfg.patch_kernel;
    StageWeights& st = enc.stages_[s];
    st.config = cfg;
    st.patch_embed = {f.conv_weight(p + ".patch_embed.proj.weight", {c, cin, k, k}),
                      f.zeros(p + ".patch_embed.proj.bias", {c}), f.ones(p + ".patch_embed.norm.gamma", {c}),
                      f.zeros(p + ".patch_embed.norm.beta", {c})};
    for (std::int64_t d = 0; d < cfg.depth; ++d) {
      const std::string bp = p + ".block" + std::to_string(d + 1);
      BlockWeights bw;
      bw.norm1_gamma = f.ones(bp + ".norm1.gamma", {c});
      bw.norm1_beta = f.zeros(bp + ".norm1.beta", {c});
      auto& a = bw.attention;
      a.q_weight = f.weight(bp + ".attn.q.weight", {c, c});
      a.q_bias = f.zeros(bp + ".attn.q.bias", {c});
      a.k_weight = f.weight(bp + ".attn.k.weight", {c, c});
      a.k_bias = f.zeros(bp + ".attn.k.bias", {c});
      a.v_weight = f.weight(bp + ".attn.v.weight", {c, c});
      a.v_bias = f.zeros(bp + ".attn.v.bias", {c});
      if (cfg.sr_ratio > 1) {
        a.sr_weight = f.conv_weight(bp + ".attn.sr.weight", {c, c, cfg.sr_ratio, cfg.sr_ratio});
        a.sr_bias = f.zeros(bp + ".attn.sr.bias", {c});
        a.sr_norm_gamma = f.ones(bp + ".attn.sr_norm.gamma", {c});
        a.sr_norm_beta = f.zeros(bp + ".attn.sr_norm.beta", {c});
      }
      a.proj_weight = f.weight(bp + ".attn.proj.weight", {c, c});
      a.proj_bias = f.zeros(bp + ".attn.proj.bias", {c});
      bw.norm2_gamma = f.ones(bp + ".norm2.gamma", {c});
      bw.norm2_beta = f.zeros(bp + ".norm2.beta", {c});
      const std::int64_t hc = c * cfg.ffn_expansion;
      bw.ffn = {f.weight(bp + ".ffn.fc1.weight", {hc, c}), f.zeros(bp + ".ffn.fc1.bias", {hc}),
                f.conv_weight(bp + ".ffn.dw.weight", {hc, 1, 3, 3}, hc), f.zeros(bp + ".ffn.dw.bias", {hc}),
                f.weight(bp + ".ffn.fc2.weight", {c, hc}), f.zeros(bp + ".ffn.fc2.bias", {c})};
      st.blocks.push_back(std::move(bw));
    }
    st.norm_gamma = f.ones(p + ".norm.gamma", {c});
    st.norm_beta = f.zeros(p + ".norm.beta", {c});
    st.cbam = CbamParams::create(c, cbam[s], f, p + ".cbam");
    cin = c;
  }
  return enc;
}

FeaturePyramid MitEncoder::forward(const Tensor& image) const {
  if (image.rank() != 4) throw ShapeError("encoder: image must be [B,C,H,W], got " + shape_str(image.shape()));
  if (image.dim(2) % 32 != 0 || image.dim(3) % 32 != 0) {
    throw ShapeError("encoder: input size " + std::to_string(image.dim(2)) + "x" + std::to_string(image.dim(3)) +
                     " is not divisible by 32");
  }
  if (image.dim(1) != stages_[0].patch_embed.proj_weight.dim(1)) {
    throw ShapeError("encoder: expected " + std::to_string(stages_[0].patch_embed.proj_weight.dim(1)) +
                     " input channels, got " + std::to_string(image.dim(1)));
  }
  FeaturePyramid pyramid;
  Tensor x = image;
  for (int s = 0; s < 4; ++s) {
    x = stage_forward(x, stages_[s]);
    pyramid.levels[s] = x;
  }
  return pyramid;
}

}  // namespace armformer
