#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace armformer {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tensor;

namespace detail {

struct TensorImpl;

/// One recorded operation: its inputs and the rule that pushes the output
/// gradient back into them.
struct GradFn {
  std::string op;
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  /// Reads `out.grad` and accumulates into the inputs' grad buffers.
  std::function<void(const TensorImpl& out)> backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::optional<std::vector<double>> grad;
  std::shared_ptr<GradFn> grad_fn;

  /// Grad buffer, allocated (zeroed) on first use.
  std::vector<double>& grad_buffer();
};

}  // namespace detail

/// Dense row-major float64 tensor. Copies share storage; use clone() for a
/// deep copy. A tensor is an autodiff node when it requires grad.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(const Shape& shape);
  static Tensor constant(const Shape& shape, double value);
  /// Seeded uniform draw in [lo, hi).
  static Tensor uniform(const Shape& shape, std::uint64_t seed, double lo,
                        double hi);
  /// Seeded normal draw with std `stddev`, resampled outside +-2 stddev.
  static Tensor truncated_normal(const Shape& shape, std::uint64_t seed,
                                 double stddev);
  static Tensor scalar(double value);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  int rank() const { return static_cast<int>(shape().size()); }
  /// Size of dimension `i`; negative indices count from the back.
  std::int64_t dim(int i) const;
  std::int64_t numel() const;

  std::span<const double> data() const;
  /// Writable view. Only valid on tensors that are not part of a recorded
  /// graph (leaves), e.g. parameters between optimizer steps.
  std::span<double> mutable_data();

  double item() const;
  double at(std::initializer_list<std::int64_t> index) const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool value);
  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  /// True when produced by a recorded operation.
  bool is_leaf() const;
  std::string op_name() const;

  /// Same values, no graph history, requires_grad false.
  Tensor detach() const;
  Tensor clone() const;

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl)
      : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

/// Disables graph recording on this thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_mode_enabled();

/// Builds an op output. If recording is on and any input requires grad, the
/// output is attached to the graph with `backward`; otherwise it is a plain
/// value and `backward` is dropped.
Tensor make_result(std::string op, Shape shape, std::vector<double> data,
                   std::vector<Tensor> inputs,
                   std::function<void(const detail::TensorImpl& out)> backward);

/// Topologically ordered view of the graph that produced a tensor.
class ComputeGraph {
 public:
  struct NodeRecord {
    std::string op;
    std::vector<std::size_t> inputs;  // indices of earlier nodes
    std::shared_ptr<detail::TensorImpl> tensor;
  };

  /// Collects every node reachable from `root`, inputs before consumers.
  static ComputeGraph trace(const Tensor& root);

  const std::vector<NodeRecord>& nodes() const { return nodes_; }
  std::size_t size() const { return nodes_.size(); }

 private:
  std::vector<NodeRecord> nodes_;
};

/// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
/// requires-grad tensor reachable from `loss`.
void backward(const Tensor& loss);
void backward(const ComputeGraph& graph, const Tensor& loss);

}  // namespace armformer
