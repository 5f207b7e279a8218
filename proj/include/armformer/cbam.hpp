#pragma once

#include <cstdint>
#include <string>

#include "armformer/params.hpp"
#include "armformer/tensor.hpp"

namespace armformer {

/// Hyperparameters of one attention site.
struct CbamSpec {
  int reduction_ratio = 16;
  int spatial_kernel = 7;

  bool operator==(const CbamSpec&) const = default;
};

/// Lightweight variant: r = 32, k = 3.
inline constexpr CbamSpec kLightweightCbam{32, 3};

/// Bottleneck width of the shared MLP: max(1, channels / r).
std::int64_t cbam_hidden_width(std::int64_t channels, int reduction_ratio);

/// Weights of one CBAM block. The MLP is bias-free, W2 * relu(W1 * v), and
/// shared between the average- and max-pooled descriptors; the k x k spatial
/// convolution maps the 2-channel [avg; max] map to one bias-free logit.
struct CbamParams {
  std::int64_t channels = 0;
  CbamSpec spec;
  Tensor mlp_reduce;      // [hidden, C]
  Tensor mlp_expand;      // [C, hidden]
  Tensor spatial_weight;  // [1, 2, k, k]

  /// Registers the weights under `prefix` (e.g. "encoder.stage1.cbam").
  static CbamParams create(std::int64_t channels, CbamSpec spec, ParamFactory& factory,
                           const std::string& prefix);
  /// Unregistered parameters, for tests and tools.
  static CbamParams from_tensors(std::int64_t channels, CbamSpec spec, Tensor mlp_reduce,
                                 Tensor mlp_expand, Tensor spatial_weight);

  std::int64_t hidden() const { return cbam_hidden_width(channels, spec.reduction_ratio); }
};

/// Channel gate M_c = sigmoid(MLP(avgpool(f)) + MLP(maxpool(f))), [B,C,1,1].
Tensor channel_attention(const Tensor& f, const CbamParams& p);

/// Spatial gate M_s = sigmoid(conv_k([avg_c(f'); max_c(f')])), [B,1,H,W].
Tensor spatial_attention(const Tensor& f_prime, const CbamParams& p);

struct AttentionMaps {
  Tensor channel;  // [B,C,1,1]
  Tensor spatial;  // [B,1,H,W]
};

struct CbamResult {
  Tensor refined;
  AttentionMaps maps;
};

/// F' = M_c (x) F, then F_out = M_s (x) F'. Channel gate first, always.
CbamResult cbam_apply(const Tensor& f, const CbamParams& p);

}  // namespace armformer
