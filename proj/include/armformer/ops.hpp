#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "armformer/tensor.hpp"

namespace armformer {

// Elementwise arithmetic. Binary ops broadcast numpy-style (shapes aligned
// from the right, size-1 dimensions stretch).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& x, double c);
Tensor mul_scalar(const Tensor& x, double c);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);

enum class Activation { Sigmoid, Relu, Gelu };

/// GELU uses the tanh approximation
/// 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
Tensor activation(const Tensor& x, Activation kind);
inline Tensor sigmoid(const Tensor& x) { return activation(x, Activation::Sigmoid); }
inline Tensor relu(const Tensor& x) { return activation(x, Activation::Relu); }
inline Tensor gelu(const Tensor& x) { return activation(x, Activation::Gelu); }

/// Sum / mean of all elements, returned with shape [1].
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

/// Counts multiply-accumulates of matmul, linear and conv2d forwards run on
/// this thread while alive. Tallies nest; backward passes are not counted.
class MacTally {
 public:
  MacTally();
  ~MacTally();
  MacTally(const MacTally&) = delete;
  MacTally& operator=(const MacTally&) = delete;

  std::int64_t count() const { return count_; }

 private:
  std::int64_t count_ = 0;
  MacTally* outer_;
  friend void record_macs(std::int64_t n);
};

void record_macs(std::int64_t n);

/// [M,K]x[K,N], batched [B,M,K]x[B,K,N], or [B,M,K]x[K,N] with a shared
/// right operand.
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor reshape(const Tensor& x, const Shape& shape);
Tensor permute(const Tensor& x, const std::vector<int>& order);
/// Swaps the last two dimensions.
Tensor transpose(const Tensor& x);
Tensor concat(const std::vector<Tensor>& parts, int axis);

/// y = x W^T + b over the last dimension of x. W is [out, in].
Tensor linear(const Tensor& x, const Tensor& weight, const std::optional<Tensor>& bias);

struct Conv2dOptions {
  std::int64_t stride = 1;
  std::int64_t padding = 0;
  std::int64_t groups = 1;
};

std::int64_t conv_output_size(std::int64_t in, std::int64_t kernel, std::int64_t stride,
                              std::int64_t padding);

/// Cross-correlation with zero padding. x [B,Cin,H,W], w [Cout,Cin/groups,kh,kw].
Tensor conv2d(const Tensor& x, const Tensor& weight, const std::optional<Tensor>& bias,
              Conv2dOptions options = {});

enum class PoolKind { Avg, Max };

struct PoolWindow {
  std::int64_t kernel_h;
  std::int64_t kernel_w;
  std::int64_t stride;
};

/// Global pooling (B x C x 1 x 1) when `window` is empty, otherwise unpadded
/// windowed pooling. Max routes its gradient to the first maximal element.
Tensor pool2d(const Tensor& x, PoolKind kind, std::optional<PoolWindow> window = std::nullopt);

/// Per-pixel reduction across channels: [B,C,H,W] -> [B,1,H,W].
Tensor reduce_channel(const Tensor& x, PoolKind kind);

/// Bilinear resampling with half-pixel centers (align_corners = false).
Tensor bilinear_resize(const Tensor& x, std::int64_t out_h, std::int64_t out_w);

/// Max-subtracted softmax along `axis` (negative counts from the back).
Tensor softmax(const Tensor& x, int axis);

/// Normalizes over the last dimension with biased variance.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-6);

}  // namespace armformer
