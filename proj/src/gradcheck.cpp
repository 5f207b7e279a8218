#include "armformer/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "armformer/errors.hpp"
#include "armformer/random.hpp"

namespace armformer {

namespace {

double evaluate(const std::function<Tensor()>& loss_fn) {
  NoGradGuard guard;
  Tensor loss = loss_fn();
  if (loss.numel() != 1) throw ContractError("grad_check: loss must be scalar");
  return loss.item();
}

std::vector<std::size_t> pick_coords(std::size_t n, const GradCheckOptions& opt,
                                     const std::string& name) {
  std::vector<std::size_t> idx;
  if (opt.max_coords_per_param == 0 || n <= opt.max_coords_per_param) {
    idx.resize(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    return idx;
  }
  Rng rng(derive_seed(opt.seed, name));
  idx.push_back(0);
  idx.push_back(n - 1);
  while (idx.size() < opt.max_coords_per_param) idx.push_back(rng.below(n));
  std::sort(idx.begin(), idx.end());
  idx.erase(std::unique(idx.begin(), idx.end()), idx.end());
  return idx;
}

}  // namespace

std::string GradCheckReport::summary() const {
  std::ostringstream os;
  os << (pass ? "PASS" : "FAIL") << " max_rel_error=" << max_rel_error << " tolerance=" << tolerance
     << " epsilon=" << epsilon;
  for (const auto& p : params) {
    os << "\n  " << p.name << ": rel=" << p.max_rel_error << " coords=" << p.coords_checked
       << " worst[" << p.worst_index << "] analytic=" << p.analytic << " numeric=" << p.numeric;
    if (p.max_rel_error > tolerance) {
      os << " one-sided=(" << p.backward_slope << ", " << p.forward_slope << ")";
    }
  }
  return os.str();
}

GradCheckReport grad_check(const std::function<Tensor()>& loss_fn,
                           const std::vector<NamedTensor>& params,
                           const GradCheckOptions& options) {
  GradCheckReport report;
  report.epsilon = options.epsilon;
  report.tolerance = options.tolerance;

  const double base_a = evaluate(loss_fn);
  const double base_b = evaluate(loss_fn);
  if (!(base_a == base_b)) {
    throw ContractError("grad_check: loss function is not deterministic");
  }

  std::vector<Tensor> tensors;
  for (const auto& p : params) {
    Tensor t = p.tensor;
    if (!t.is_leaf()) throw ContractError("grad_check: parameter '" + p.name + "' is not a leaf");
    t.set_requires_grad(true);
    t.zero_grad();
    tensors.push_back(t);
  }
  Tensor loss = loss_fn();
  if (loss.requires_grad()) backward(loss);

  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor t = tensors[k];
    std::vector<double> analytic(t.numel(), 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());

    ParamGradCheck pc;
    pc.name = params[k].name;
    for (std::size_t i : pick_coords(analytic.size(), options, pc.name)) {
      auto data = t.mutable_data();
      const double orig = data[i];
      data[i] = orig + options.epsilon;
      const double up = evaluate(loss_fn);
      data[i] = orig - options.epsilon;
      const double down = evaluate(loss_fn);
      data[i] = orig;
      const double numeric = (up - down) / (2.0 * options.epsilon);
      const double a = analytic[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), options.denominator_floor});
      const double rel = std::abs(a - numeric) / denom;
      ++pc.coords_checked;
      if (rel > pc.max_rel_error || pc.coords_checked == 1) {
        pc.max_rel_error = std::max(pc.max_rel_error, rel);
        if (rel >= pc.max_rel_error) {
          pc.worst_index = i;
          pc.analytic = a;
          pc.numeric = numeric;
          pc.forward_slope = (up - base_a) / options.epsilon;
          pc.backward_slope = (base_a - down) / options.epsilon;
        }
      }
    }
    report.max_rel_error = std::max(report.max_rel_error, pc.max_rel_error);
    report.params.push_back(std::move(pc));
    t.zero_grad();
  }
  report.pass = report.max_rel_error <= options.tolerance;
  return report;
}

}  // namespace armformer
