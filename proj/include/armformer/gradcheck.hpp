#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "armformer/tensor.hpp"

namespace armformer {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct GradCheckOptions {
  double epsilon = 1e-3;
  double tolerance = 1e-4;
  /// 0 checks every coordinate; otherwise a seeded subset of this size per
  /// parameter (always including the first and last coordinate).
  std::size_t max_coords_per_param = 0;
  std::uint64_t seed = 0;
  /// Lower bound of the relative-error denominator; gradients smaller than
  /// this are compared in absolute terms (|a - n| <= tolerance * floor).
  double denominator_floor = 1e-8;
};

struct ParamGradCheck {
  std::string name;
  std::size_t coords_checked = 0;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  /// One-sided slopes at the worst coordinate; a large gap between them
  /// points at a non-differentiable point rather than a wrong gradient.
  double forward_slope = 0.0;
  double backward_slope = 0.0;
};

struct GradCheckReport {
  std::vector<ParamGradCheck> params;
  double max_rel_error = 0.0;
  double epsilon = 0.0;
  double tolerance = 0.0;
  bool pass = false;

  std::string summary() const;
};

/// Compares reverse-mode gradients against central differences
/// (f(t+e) - f(t-e)) / 2e for every listed parameter. `loss_fn` must rebuild
/// the graph from the current parameter values on each call and return a
/// scalar. Relative error is |a - n| / max(|a|, |n|, denominator_floor).
///
/// Throws ContractError when two baseline evaluations disagree.
GradCheckReport grad_check(const std::function<Tensor()>& loss_fn,
                           const std::vector<NamedTensor>& params,
                           const GradCheckOptions& options = {});

}  // namespace armformer
