#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "armformer/gradcheck.hpp"
#include "armformer/tensor.hpp"

namespace armformer {

/// Ordered (name, tensor) list of trainable parameters. Tensors are shared
/// with the modules that own them, so writes through the registry (optimizer,
/// checkpoint load) are seen by the forward pass.
class ParameterRegistry {
 public:
  /// Registers `value` as trainable under `name`; names must be unique.
  Tensor add(const std::string& name, Tensor value);

  const std::vector<NamedTensor>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  std::int64_t total_elements() const;
  /// Throws ContractError for unknown names.
  const Tensor& at(const std::string& name) const;
  void zero_grad();

 private:
  std::vector<NamedTensor> entries_;
};

/// Deterministic parameter factory: each tensor's stream is derived from the
/// base seed and the parameter name, so adding a layer never perturbs the
/// values of the others.
class ParamFactory {
 public:
  ParamFactory(ParameterRegistry& registry, std::uint64_t seed) : registry_(registry), seed_(seed) {}

  /// Truncated normal, std 0.02.
  Tensor weight(const std::string& name, const Shape& shape, double stddev = 0.02);
  /// Conv weight [Cout, Cin/groups, kh, kw]: normal with std sqrt(2 / fan_out),
  /// fan_out = kh * kw * Cout / groups, truncated at two standard deviations.
  Tensor conv_weight(const std::string& name, const Shape& shape, std::int64_t groups = 1);
  Tensor zeros(const std::string& name, const Shape& shape);
  Tensor ones(const std::string& name, const Shape& shape);

 private:
  ParameterRegistry& registry_;
  std::uint64_t seed_;
};

}  // namespace armformer
