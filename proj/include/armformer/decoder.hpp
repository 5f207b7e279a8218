#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "armformer/cbam.hpp"
#include "armformer/encoder.hpp"
#include "armformer/params.hpp"
#include "armformer/tensor.hpp"

namespace armformer {

/// Matrix-decomposition settings for the global-context block.
struct HamConfig {
  std::int64_t latent_rank = 64;       // R
  std::int64_t mu_iterations = 6;      // K
  std::int64_t context_channels = 256;
  std::uint64_t seed = 0;              // bases/codes initialization
  /// Differentiate only the last update instead of the whole unrolled loop.
  bool one_step_grad = false;
  double eps = 1e-7;                   // multiplicative-update denominators

  bool operator==(const HamConfig&) const = default;
};

void validate_ham(const HamConfig& cfg);

/// Concatenation of F1..F4 after bilinear upsampling of F2..F4 to F1's size,
/// channel order F1, F2, F3, F4.
Tensor fuse_pyramid(const FeaturePyramid& pyramid);

/// Per-iteration squared reconstruction errors ||Z - D C||_F^2, one row per
/// batch item: entry 0 is the error of the initialization, entry k the
/// error after the k-th (codes, bases) update.
struct NmfTrace {
  std::vector<std::vector<double>> errors;
  /// Smallest entry of D and C seen after any update.
  double min_factor_entry = 0.0;
};

struct NmfFactors {
  Tensor bases;  // [B, C, R]
  Tensor codes;  // [B, R, N]
};

/// Nonnegative factorization of Z [B, C, N] by K rounds of Lee-Seung
/// multiplicative updates:
///   codes <- codes * (D^T Z) / (D^T D codes + eps)
///   bases <- bases * (Z codes^T) / (D codes codes^T + eps)
/// from seeded uniform(0,1) initial factors. Differentiable through all
/// updates unless cfg.one_step_grad.
NmfFactors nmf_multiplicative(const Tensor& z, const HamConfig& cfg, NmfTrace* trace = nullptr);

struct HamWeights {
  Tensor out_weight;  // [C, C, 1, 1], no bias
};

/// x + conv1x1(D C) with Z = relu(x) flattened to [B, C, H*W].
Tensor ham_global_context(const Tensor& x, const HamConfig& cfg, const HamWeights& weights,
                          NmfTrace* trace = nullptr);

struct DecoderWeights {
  CbamParams cbam1;
  Tensor squeeze_weight, squeeze_bias;  // [ctx, fused, 1, 1]
  HamWeights ham;
  CbamParams cbam2;
  Tensor cls_weight, cls_bias;          // [classes, ctx, 1, 1]
};

/// Switches for wiring checks; all stages run by default.
struct DecodeOptions {
  bool bypass_cbam1 = false;
  bool bypass_ham = false;
  bool bypass_cbam2 = false;
};

class HamDecoder {
 public:
  HamDecoder() = default;

  static HamDecoder create(const std::array<std::int64_t, 4>& pyramid_channels, std::int64_t num_classes,
                           CbamSpec cbam1, CbamSpec cbam2, const HamConfig& ham, ParamFactory& factory,
                           const std::string& prefix = "decoder");

  /// fuse -> CBAM1 -> squeeze (1x1 + relu) -> Ham -> CBAM2 -> 1x1 classifier
  /// -> bilinear upsample to out_h x out_w.
  Tensor forward(const FeaturePyramid& pyramid, std::int64_t out_h, std::int64_t out_w,
                 const DecodeOptions& options = {}) const;

  const DecoderWeights& weights() const { return weights_; }
  const HamConfig& ham_config() const { return ham_; }

 private:
  DecoderWeights weights_;
  HamConfig ham_;
};

}  // namespace armformer
