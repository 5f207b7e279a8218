#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "armformer/gradcheck.hpp"

namespace armformer {

// Fixed gradient-check problems shared by the unit tests, the `gradcheck`
// command and the acceptance run. Each problem owns its tensors; the loss
// closure rebuilds the graph on every call.

struct GradProblem {
  std::vector<NamedTensor> params;
  std::function<Tensor()> loss;
  GradCheckOptions options;
};

/// Names of the primitive-op problems ("matmul", "conv2d", ...).
std::vector<std::string> primitive_problem_names();
/// Random small shapes (dims <= 6) drawn from `seed`.
GradProblem primitive_problem(const std::string& name, std::uint64_t seed);

/// CBAM block (C=4, r=2, k=3) on a [2,4,5,5] input with distinct values.
GradProblem cbam_block_problem();
/// First encoder stage (8 channels, k7 s4 patch embed, one block, sr 2) on 32x32.
GradProblem encoder_stage_problem();
/// Ham decoder with K=2 and R=8 on a random 32x32 pyramid.
GradProblem decoder_problem();
/// Reduced model, cross-entropy on a 32x32 toy image, all parameters and the image.
GradProblem end_to_end_problem();

struct GradSuiteEntry {
  std::string name;
  GradCheckReport report;
  double seconds = 0.0;
};

enum class GradSuiteLevel { Quick, Full };

/// Quick: every primitive op at 3 seeds plus the CBAM block. Full: 10 seeds
/// per primitive op plus all composite problems.
std::vector<GradSuiteEntry> run_grad_suite(GradSuiteLevel level,
                                           const std::function<void(const GradSuiteEntry&)>& on_entry = {});

}  // namespace armformer
