#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>

#include "armformer/cbam.hpp"
#include "armformer/decoder.hpp"
#include "armformer/encoder.hpp"

namespace armformer {

/// Every architectural hyperparameter of the segmentation network.
struct ModelConfig {
  StageConfigs stages = default_stage_configs();
  std::array<CbamSpec, 4> encoder_cbam{};
  CbamSpec decoder_cbam1{};
  CbamSpec decoder_cbam2{};
  HamConfig ham{};
  std::int64_t num_classes = 6;
  std::int64_t input_size = 640;
  std::int64_t in_channels = 3;
  std::uint64_t seed = 0;

  /// Channels 32/64/160/256, r = 16 and k = 7 at all six attention sites.
  static ModelConfig defaults() { return {}; }
  /// Desk-scale network: channels 8/16/24/32, depth 1, one head, R = 4,
  /// K = 2, 32 context channels, 64 x 64 input.
  static ModelConfig reduced();
  /// Same network with r = 32, k = 3 at every attention site.
  ModelConfig with_lightweight_cbam() const;

  std::array<std::int64_t, 4> pyramid_channels() const;
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

/// Optimization settings for fit().
struct TrainSchedule {
  std::int64_t steps = 300;
  std::int64_t batch_size = 8;
  double learning_rate = 1e-3;
  double weight_decay = 0.01;
  std::uint64_t seed = 0;
  /// Evaluate every this many steps (0 disables).
  std::int64_t eval_every = 0;

  void validate() const;

  bool operator==(const TrainSchedule&) const = default;
};

/// Contents of a run configuration file.
struct RunConfig {
  ModelConfig model;
  TrainSchedule train;
};

/// Flat `section.key = value` text. Blank lines and `#` comments are
/// ignored; keys not listed in format_run_config() are rejected.
RunConfig parse_run_config(const std::string& text);
std::string format_run_config(const RunConfig& cfg);

/// Model section only, as embedded in checkpoints.
std::string format_model_config(const ModelConfig& cfg);
ModelConfig parse_model_config(const std::string& text);

RunConfig load_run_config_file(const std::string& path);

}  // namespace armformer
