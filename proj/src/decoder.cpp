#include "armformer/decoder.hpp"

#include <algorithm>
#include <limits>

#include "armformer/errors.hpp"
#include "armformer/ops.hpp"
#include "armformer/random.hpp"

namespace armformer {

void validate_ham(const HamConfig& cfg) {
  if (cfg.latent_rank < 1 || cfg.mu_iterations < 1) throw ConfigError("ham: rank and iterations must be >= 1");
  if (cfg.context_channels < 1) throw ConfigError("ham: context_channels must be >= 1");
  if (cfg.latent_rank >= cfg.context_channels) {
    throw ConfigError("ham: latent_rank " + std::to_string(cfg.latent_rank) + " must be below context_channels " +
                      std::to_string(cfg.context_channels));
  }
  if (!(cfg.eps > 0)) throw ConfigError("ham: eps must be positive");
}

Tensor fuse_pyramid(const FeaturePyramid& p) {
  const auto& f1 = p[0];
  if (f1.rank() != 4) throw ShapeError("fuse_pyramid: F1 must be [B,C,H,W]");
  const std::int64_t b = f1.dim(0), h = f1.dim(2), w = f1.dim(3);
  std::vector<Tensor> parts{f1};
  for (int i = 1; i < 4; ++i) {
    if (p[i].rank() != 4 || p[i].dim(0) != b) {
      throw ShapeError("fuse_pyramid: level " + std::to_string(i + 1) + " batch differs from F1");
    }
    parts.push_back(bilinear_resize(p[i], h, w));
  }
  return concat(parts, 1);
}

namespace {

double squared_error(const Tensor& z, const Tensor& d, const Tensor& c, std::int64_t item) {
  const std::int64_t ch = z.dim(1), n = z.dim(2);
  auto recon = matmul(d, c);
  double e = 0.0;
  for (std::int64_t i = 0; i < ch * n; ++i) {
    const double r = z.data()[item * ch * n + i] - recon.data()[item * ch * n + i];
    e += r * r;
  }
  return e;
}

void record(NmfTrace* trace, const Tensor& z, const Tensor& d, const Tensor& c) {
  if (!trace) return;
  NoGradGuard guard;
  for (std::int64_t b = 0; b < z.dim(0); ++b) trace->errors[b].push_back(squared_error(z, d, c, b));
  for (double v : d.data()) trace->min_factor_entry = std::min(trace->min_factor_entry, v);
  for (double v : c.data()) trace->min_factor_entry = std::min(trace->min_factor_entry, v);
}

void mu_step(const Tensor& z, Tensor& d, Tensor& c, double eps) {
  auto dt = transpose(d);
  c = mul(c, div(matmul(dt, z), add_scalar(matmul(matmul(dt, d), c), eps)));
  auto ct = transpose(c);
  d = mul(d, div(matmul(z, ct), add_scalar(matmul(d, matmul(c, ct)), eps)));
}

}  // namespace

NmfFactors nmf_multiplicative(const Tensor& z, const HamConfig& cfg, NmfTrace* trace) {
  if (z.rank() != 3) throw ShapeError("nmf: Z must be [B, C, N], got " + shape_str(z.shape()));
  if (cfg.latent_rank < 1 || cfg.mu_iterations < 1) throw ConfigError("nmf: rank and iterations must be >= 1");
  const std::int64_t b = z.dim(0), ch = z.dim(1), n = z.dim(2), r = cfg.latent_rank;
  for (double v : z.data()) {
    if (v < 0) throw DataError("nmf: Z must be nonnegative");
  }
  // Same initial factors for every batch item.
  auto d0 = Tensor::uniform({ch, r}, derive_seed(cfg.seed, "ham.bases"), 0.0, 1.0);
  auto c0 = Tensor::uniform({r, n}, derive_seed(cfg.seed, "ham.codes"), 0.0, 1.0);
  std::vector<double> dv, cv;
  dv.reserve(b * ch * r);
  cv.reserve(b * r * n);
  for (std::int64_t i = 0; i < b; ++i) {
    dv.insert(dv.end(), d0.data().begin(), d0.data().end());
    cv.insert(cv.end(), c0.data().begin(), c0.data().end());
  }
  Tensor d({b, ch, r}, std::move(dv));
  Tensor c({b, r, n}, std::move(cv));
  if (trace) {
    trace->errors.assign(b, {});
    trace->min_factor_entry = std::numeric_limits<double>::infinity();
  }
  record(trace, z, d, c);

  if (!cfg.one_step_grad) {
    for (std::int64_t k = 0; k < cfg.mu_iterations; ++k) {
      mu_step(z, d, c, cfg.eps);
      record(trace, z, d, c);
    }
    return {d, c};
  }
  {
    NoGradGuard guard;
    auto zd = z.detach();
    for (std::int64_t k = 0; k + 1 < cfg.mu_iterations; ++k) {
      mu_step(zd, d, c, cfg.eps);
      record(trace, z, d, c);
    }
  }
  d = d.detach();
  c = c.detach();
  mu_step(z, d, c, cfg.eps);
  record(trace, z, d, c);
  return {d, c};
}

Tensor ham_global_context(const Tensor& x, const HamConfig& cfg, const HamWeights& weights, NmfTrace* trace) {
  if (x.rank() != 4) throw ShapeError("ham: expected [B,C,H,W], got " + shape_str(x.shape()));
  const std::int64_t b = x.dim(0), ch = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (ch != cfg.context_channels) {
    throw ShapeError("ham: expected " + std::to_string(cfg.context_channels) + " channels, got " +
                     std::to_string(ch));
  }
  auto z = reshape(relu(x), {b, ch, h * w});
  auto f = nmf_multiplicative(z, cfg, trace);
  auto recon = reshape(matmul(f.bases, f.codes), {b, ch, h, w});
  return add(x, conv2d(recon, weights.out_weight, std::nullopt));
}

HamDecoder HamDecoder::create(const std::array<std::int64_t, 4>& pyramid_channels, std::int64_t num_classes,
                              CbamSpec cbam1, CbamSpec cbam2, const HamConfig& ham, ParamFactory& f,
                              const std::string& prefix) {
  validate_ham(ham);
  if (num_classes < 1) throw ConfigError("decoder: num_classes must be >= 1");
  std::int64_t fused = 0;
  for (auto c : pyramid_channels) fused += c;
  const std::int64_t ctx = ham.context_channels;
  HamDecoder dec;
  dec.ham_ = ham;
  auto& w = dec.weights_;
  w.cbam1 = CbamParams::create(fused, cbam1, f, prefix + ".cbam1");
  w.squeeze_weight = f.conv_weight(prefix + ".squeeze.weight", {ctx, fused, 1, 1});
  w.squeeze_bias = f.zeros(prefix + ".squeeze.bias", {ctx});
  w.ham.out_weight = f.conv_weight(prefix + ".ham.out.weight", {ctx, ctx, 1, 1});
  w.cbam2 = CbamParams::create(ctx, cbam2, f, prefix + ".cbam2");
  w.cls_weight = f.weight(prefix + ".cls.weight", {num_classes, ctx, 1, 1}, 0.01);
  w.cls_bias = f.zeros(prefix + ".cls.bias", {num_classes});
  return dec;
}

Tensor HamDecoder::forward(const FeaturePyramid& pyramid, std::int64_t out_h, std::int64_t out_w,
                           const DecodeOptions& options) const {
  const auto& w = weights_;
  auto x = fuse_pyramid(pyramid);
  if (x.dim(1) != w.cbam1.channels) {
    throw ShapeError("decoder: fused pyramid has " + std::to_string(x.dim(1)) + " channels, expected " +
                     std::to_string(w.cbam1.channels));
  }
  if (!options.bypass_cbam1) x = cbam_apply(x, w.cbam1).refined;
  x = relu(conv2d(x, w.squeeze_weight, w.squeeze_bias));
  if (!options.bypass_ham) x = ham_global_context(x, ham_, w.ham);
  if (!options.bypass_cbam2) x = cbam_apply(x, w.cbam2).refined;
  auto logits = conv2d(x, w.cls_weight, w.cls_bias);
  return bilinear_resize(logits, out_h, out_w);
}

}  // namespace armformer
