#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "armformer/config.hpp"
#include "armformer/datapipe.hpp"
#include "armformer/decoder.hpp"
#include "armformer/encoder.hpp"
#include "armformer/params.hpp"
#include "armformer/tensor.hpp"

namespace armformer {

class Model {
 public:
  static Model create(const ModelConfig& cfg);

  Model(Model&&) = default;
  Model& operator=(Model&&) = default;
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  /// Logits [B, num_classes, H, W]; H and W must be multiples of 32.
  Tensor forward(const Tensor& images, const DecodeOptions& options = {}) const;
  FeaturePyramid encode(const Tensor& images) const;

  /// Per-pixel argmax of forward() without graph recording, row-major [B,H,W].
  std::vector<int> predict(const Tensor& images) const;

  const ModelConfig& config() const { return config_; }
  ParameterRegistry& parameters() { return *registry_; }
  const ParameterRegistry& parameters() const { return *registry_; }
  const MitEncoder& encoder() const { return encoder_; }
  const HamDecoder& decoder() const { return decoder_; }

 private:
  Model() = default;

  ModelConfig config_;
  std::unique_ptr<ParameterRegistry> registry_;
  MitEncoder encoder_;
  HamDecoder decoder_;
};

/// Mean over all B*H*W pixels of -log softmax(logits)[label]. Fused
/// log-sum-exp forward; backward is (softmax - onehot) / (B*H*W).
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);

struct AdamWOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with decoupled weight decay:
///   m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2
///   p <- p - lr (m/(1-b1^t)) / (sqrt(v/(1-b2^t)) + eps) - lr wd p
class AdamW {
 public:
  explicit AdamW(AdamWOptions options = {}) : options_(options) {}

  /// One optimizer step over every registry entry that holds a gradient.
  void step(ParameterRegistry& registry, double lr, double weight_decay);
  /// One optimizer step for a single tensor with an explicit gradient.
  void step_one(const std::string& key, Tensor& param, std::span<const double> grad, double lr,
                double weight_decay);

  std::int64_t steps_taken() const { return t_; }

 private:
  struct Moments {
    std::vector<double> m, v;
  };
  AdamWOptions options_;
  std::int64_t t_ = 0;
  std::vector<std::pair<std::string, Moments>> state_;
  Moments& moments(const std::string& key, std::size_t n);
  void update(const std::string& key, Tensor& param, std::span<const double> grad, double lr, double weight_decay);
};

/// Forward, loss, backward, optimizer update, gradient clear. Throws
/// TrainingError when the loss is not finite.
double train_step(Model& model, const SegmentationBatch& batch, AdamW& optimizer, const TrainSchedule& sched);

struct EvalSummary {
  double pixel_accuracy = 0.0;
  double mean_iou = 0.0;
};

struct HistoryEntry {
  std::int64_t step = 0;
  double loss = 0.0;
  std::optional<EvalSummary> eval;
};

using EvalHook = std::function<EvalSummary(const Model&)>;
using StepCallback = std::function<void(const HistoryEntry&)>;

/// Runs sched.steps optimizer steps. Each epoch visits the dataset in an
/// order drawn from sched.seed; batches take consecutive indices and a
/// trailing partial batch is dropped unless it is the only batch.
std::vector<HistoryEntry> fit(Model& model, std::span<const Sample> data, const TrainSchedule& sched,
                              const EvalHook& eval = {}, const StepCallback& on_step = {});

/// Checkpoint bytes: "ARMF", u32 version, u64 length + model config text,
/// u64 parameter count, then per parameter (u64 name length, name, u32 rank,
/// rank x i64 dims, f64 payload), then the FNV-1a 64 checksum of everything
/// before it. All integers and floats little-endian.
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::uint8_t> checkpoint_save(const Model& model);
/// Rebuilds the model from the embedded config and copies all parameters.
Model checkpoint_load(std::span<const std::uint8_t> bytes);
/// As above, additionally requiring the embedded config to equal `expected`.
Model checkpoint_load(std::span<const std::uint8_t> bytes, const ModelConfig& expected);

void write_file_bytes(const std::string& path, std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> read_file_bytes(const std::string& path);

}  // namespace armformer
