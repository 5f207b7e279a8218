#include "armformer/params.hpp"

#include <cmath>

#include "armformer/errors.hpp"
#include "armformer/random.hpp"

namespace armformer {

Tensor ParameterRegistry::add(const std::string& name, Tensor value) {
  for (const auto& e : entries_) {
    if (e.name == name) throw ContractError("duplicate parameter name '" + name + "'");
  }
  value.set_requires_grad(true);
  entries_.push_back({name, value});
  return value;
}

std::int64_t ParameterRegistry::total_elements() const {
  std::int64_t n = 0;
  for (const auto& e : entries_) n += e.tensor.numel();
  return n;
}

const Tensor& ParameterRegistry::at(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return e.tensor;
  }
  throw ContractError("unknown parameter '" + name + "'");
}

void ParameterRegistry::zero_grad() {
  for (auto& e : entries_) e.tensor.zero_grad();
}

Tensor ParamFactory::weight(const std::string& name, const Shape& shape, double stddev) {
  return registry_.add(name, Tensor::truncated_normal(shape, derive_seed(seed_, name), stddev));
}

Tensor ParamFactory::conv_weight(const std::string& name, const Shape& shape, std::int64_t groups) {
  if (shape.size() != 4 || groups < 1) throw ContractError("conv_weight: expected [Cout, Cin/g, kh, kw] for '" + name + "'");
  const double fan_out = static_cast<double>(shape[0] * shape[2] * shape[3]) / static_cast<double>(groups);
  return weight(name, shape, std::sqrt(2.0 / fan_out));
}

Tensor ParamFactory::zeros(const std::string& name, const Shape& shape) {
  return registry_.add(name, Tensor::zeros(shape));
}

Tensor ParamFactory::ones(const std::string& name, const Shape& shape) {
  return registry_.add(name, Tensor::constant(shape, 1.0));
}

}  // namespace armformer
