#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "armformer/model.hpp"

namespace armformer {

// Complexity counts use 1 MAC = 1 FLOP. Only matmul-like work is counted;
// elementwise ops, normalization, pooling, softmax and resizing are free.

std::int64_t conv2d_params(std::int64_t cin, std::int64_t cout, std::int64_t kernel, std::int64_t groups, bool bias);
std::int64_t conv2d_macs(std::int64_t cin, std::int64_t cout, std::int64_t kernel, std::int64_t groups,
                         std::int64_t out_h, std::int64_t out_w);
std::int64_t linear_params(std::int64_t in, std::int64_t out, bool bias);
std::int64_t linear_macs(std::int64_t in, std::int64_t out, std::int64_t tokens);
/// QK^T plus AV over all heads: 2 * queries * keys * channels.
std::int64_t attention_macs(std::int64_t queries, std::int64_t keys, std::int64_t channels);
/// K multiplicative-update rounds on a C x N matrix at rank R, each
/// 2RCN + 2R^2 N + 2R^2 C, plus the final C x R x N reconstruction.
std::int64_t nmf_macs(std::int64_t channels, std::int64_t tokens, std::int64_t rank, std::int64_t iterations);

struct ModuleCost {
  std::string name;
  std::int64_t params = 0;
  std::int64_t flops = 0;
};

struct ComplexityReport {
  std::int64_t total_params = 0;
  std::int64_t total_flops = 0;
  std::int64_t input_height = 0;
  std::int64_t input_width = 0;
  std::vector<ModuleCost> modules;
};

/// Parameters per layer (registry name without its last component).
ComplexityReport count_params(const ParameterRegistry& registry);
ComplexityReport count_params(const Model& model);

/// Per-layer analytic MACs for one image of h x w (multiples of 32).
ComplexityReport count_flops(const ModelConfig& cfg, std::int64_t h, std::int64_t w);
ComplexityReport count_flops(const Model& model, std::int64_t h, std::int64_t w);

/// Parameters and MACs merged per layer.
ComplexityReport profile_complexity(const Model& model, std::int64_t h, std::int64_t w);

/// Sums modules sharing their first `depth` name components.
ComplexityReport group_modules(const ComplexityReport& report, int depth);

struct SpeedReport {
  int warmup = 0;
  int iterations = 0;
  double mean_ms = 0.0;
  double std_ms = 0.0;
  double total_ms = 0.0;
  double fps = 0.0;
  std::int64_t input_height = 0;
  std::int64_t input_width = 0;
  std::string host;
};

/// Operating system, CPU model and BLAS thread count.
std::string host_descriptor();

/// Batch-1 inference forwards on a fixed random image without graph
/// recording. Throws ConfigError when iterations < 10 or warmup < 0.
SpeedReport measure_fps(const Model& model, std::int64_t h, std::int64_t w, int warmup = 10, int iterations = 50);

std::string format_complexity(const ComplexityReport& report);
std::string format_complexity_keyvalues(const ComplexityReport& report);
std::string format_speed(const SpeedReport& report);
std::string format_speed_keyvalues(const SpeedReport& report);

}  // namespace armformer
