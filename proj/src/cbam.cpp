#include "armformer/cbam.hpp"

#include <algorithm>

#include "armformer/errors.hpp"
#include "armformer/ops.hpp"

namespace armformer {

std::int64_t cbam_hidden_width(std::int64_t channels, int reduction_ratio) {
  if (reduction_ratio < 1) throw ConfigError("CBAM reduction ratio must be >= 1");
  return std::max<std::int64_t>(1, channels / reduction_ratio);
}

namespace {

void validate_spec(std::int64_t channels, const CbamSpec& spec) {
  if (channels < 1) throw ConfigError("CBAM channels must be >= 1");
  if (spec.reduction_ratio < 1) throw ConfigError("CBAM reduction ratio must be >= 1");
  if (spec.spatial_kernel < 1 || spec.spatial_kernel % 2 == 0) {
    throw ConfigError("CBAM spatial kernel must be odd and positive, got " +
                      std::to_string(spec.spatial_kernel));
  }
}

Tensor shared_mlp(const Tensor& pooled, const CbamParams& p) {
  const std::int64_t b = pooled.dim(0);
  auto v = reshape(pooled, {b, p.channels});
  return linear(relu(linear(v, p.mlp_reduce, std::nullopt)), p.mlp_expand, std::nullopt);
}

}  // namespace

CbamParams CbamParams::create(std::int64_t channels, CbamSpec spec, ParamFactory& factory,
                              const std::string& prefix) {
  validate_spec(channels, spec);
  const std::int64_t hidden = cbam_hidden_width(channels, spec.reduction_ratio);
  const std::int64_t k = spec.spatial_kernel;
  CbamParams p;
  p.channels = channels;
  p.spec = spec;
  p.mlp_reduce = factory.weight(prefix + ".mlp.reduce", {hidden, channels});
  p.mlp_expand = factory.weight(prefix + ".mlp.expand", {channels, hidden});
  p.spatial_weight = factory.weight(prefix + ".spatial.weight", {1, 2, k, k});
  return p;
}

CbamParams CbamParams::from_tensors(std::int64_t channels, CbamSpec spec, Tensor mlp_reduce,
                                    Tensor mlp_expand, Tensor spatial_weight) {
  validate_spec(channels, spec);
  const std::int64_t hidden = cbam_hidden_width(channels, spec.reduction_ratio);
  const std::int64_t k = spec.spatial_kernel;
  if (mlp_reduce.shape() != Shape{hidden, channels} || mlp_expand.shape() != Shape{channels, hidden} ||
      spatial_weight.shape() != Shape{1, 2, k, k}) {
    throw ShapeError("CBAM weights do not match channels/spec");
  }
  return {channels, spec, std::move(mlp_reduce), std::move(mlp_expand), std::move(spatial_weight)};
}

Tensor channel_attention(const Tensor& f, const CbamParams& p) {
  if (f.rank() != 4 || f.dim(1) != p.channels) {
    throw ShapeError("channel_attention: expected " + std::to_string(p.channels) +
                     " channels, got " + shape_str(f.shape()));
  }
  auto avg = shared_mlp(pool2d(f, PoolKind::Avg), p);
  auto mx = shared_mlp(pool2d(f, PoolKind::Max), p);
  return reshape(sigmoid(add(avg, mx)), {f.dim(0), p.channels, 1, 1});
}

Tensor spatial_attention(const Tensor& f_prime, const CbamParams& p) {
  if (f_prime.rank() != 4) throw ShapeError("spatial_attention: expected [B,C,H,W]");
  auto pooled = concat({reduce_channel(f_prime, PoolKind::Avg), reduce_channel(f_prime, PoolKind::Max)}, 1);
  const std::int64_t pad = (p.spec.spatial_kernel - 1) / 2;
  return sigmoid(conv2d(pooled, p.spatial_weight, std::nullopt, {.stride = 1, .padding = pad}));
}

CbamResult cbam_apply(const Tensor& f, const CbamParams& p) {
  CbamResult r;
  r.maps.channel = channel_attention(f, p);
  auto refined_c = mul(f, r.maps.channel);
  r.maps.spatial = spatial_attention(refined_c, p);
  r.refined = mul(refined_c, r.maps.spatial);
  return r;
}

}  // namespace armformer
