#include "armformer/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <unordered_map>

#include "armformer/errors.hpp"
#include "armformer/random.hpp"

namespace armformer {

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = 0.0;
  do {
    u1 = uniform();
  } while (u1 <= 0.0);
  const double u2 = uniform();
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * std::numbers::pi * u2;
  spare_ = radius * std::sin(angle);
  has_spare_ = true;
  return radius * std::cos(angle);
}

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

void validate_shape(const Shape& shape) {
  if (shape.empty()) throw ShapeError("tensor shape must be nonempty");
  for (auto d : shape) {
    if (d < 1) throw ShapeError("tensor dimension must be >= 1, got " + shape_str(shape));
  }
}

thread_local bool g_grad_enabled = true;

}  // namespace

namespace detail {

std::vector<double>& TensorImpl::grad_buffer() {
  if (!grad) grad.emplace(data.size(), 0.0);
  return *grad;
}

}  // namespace detail

Tensor::Tensor(Shape shape, std::vector<double> data) {
  validate_shape(shape);
  if (shape_numel(shape) != static_cast<std::int64_t>(data.size())) {
    throw ShapeError("data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_str(shape));
  }
  impl_ = std::make_shared<detail::TensorImpl>();
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
}

Tensor Tensor::zeros(const Shape& shape) { return constant(shape, 0.0); }

Tensor Tensor::constant(const Shape& shape, double value) {
  validate_shape(shape);
  return Tensor(shape, std::vector<double>(shape_numel(shape), value));
}

Tensor Tensor::uniform(const Shape& shape, std::uint64_t seed, double lo, double hi) {
  validate_shape(shape);
  Rng rng(seed);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor(shape, std::move(v));
}

Tensor Tensor::truncated_normal(const Shape& shape, std::uint64_t seed, double stddev) {
  validate_shape(shape);
  Rng rng(seed);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) {
    double z = 0.0;
    do {
      z = rng.normal();
    } while (std::abs(z) > 2.0);
    x = z * stddev;
  }
  return Tensor(shape, std::move(v));
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

const Shape& Tensor::shape() const {
  if (!impl_) throw ContractError("use of undefined tensor");
  return impl_->shape;
}

std::int64_t Tensor::dim(int i) const {
  const auto& s = shape();
  const int r = static_cast<int>(s.size());
  if (i < 0) i += r;
  if (i < 0 || i >= r) throw ShapeError("dimension index out of range for " + shape_str(s));
  return s[i];
}

std::int64_t Tensor::numel() const { return shape_numel(shape()); }

std::span<const double> Tensor::data() const {
  shape();
  return impl_->data;
}

std::span<double> Tensor::mutable_data() {
  shape();
  if (impl_->grad_fn) throw ContractError("mutable_data() on a recorded graph node");
  return impl_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() needs a single-element tensor, got " + shape_str(shape()));
  return impl_->data[0];
}

double Tensor::at(std::initializer_list<std::int64_t> index) const {
  const auto& s = shape();
  if (index.size() != s.size()) throw ShapeError("index rank mismatch for " + shape_str(s));
  std::int64_t flat = 0;
  std::size_t k = 0;
  for (auto i : index) {
    if (i < 0 || i >= s[k]) throw ShapeError("index out of range for " + shape_str(s));
    flat = flat * s[k] + i;
    ++k;
  }
  return impl_->data[flat];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool value) {
  shape();
  if (impl_->grad_fn && !value) throw ContractError("cannot clear requires_grad on a graph node");
  impl_->requires_grad = value;
  return *this;
}

bool Tensor::has_grad() const { return impl_ && impl_->grad.has_value(); }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) throw ContractError("tensor has no gradient");
  return *impl_->grad;
}

std::span<double> Tensor::mutable_grad() {
  shape();
  return impl_->grad_buffer();
}

void Tensor::zero_grad() {
  if (impl_) impl_->grad.reset();
}

bool Tensor::is_leaf() const { return !impl_ || !impl_->grad_fn; }

std::string Tensor::op_name() const {
  return impl_ && impl_->grad_fn ? impl_->grad_fn->op : std::string("leaf");
}

Tensor Tensor::detach() const { return Tensor(shape(), impl_->data); }

Tensor Tensor::clone() const {
  Tensor t = detach();
  t.impl_->requires_grad = impl_->requires_grad && !impl_->grad_fn;
  return t;
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_mode_enabled() { return g_grad_enabled; }

Tensor make_result(std::string op, Shape shape, std::vector<double> data,
                   std::vector<Tensor> inputs,
                   std::function<void(const detail::TensorImpl& out)> backward) {
  Tensor out(std::move(shape), std::move(data));
  if (!g_grad_enabled) return out;
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return out;
  auto fn = std::make_shared<detail::GradFn>();
  fn->op = std::move(op);
  fn->inputs.reserve(inputs.size());
  for (auto& in : inputs) fn->inputs.push_back(in.impl());
  fn->backward = std::move(backward);
  out.impl()->requires_grad = true;
  out.impl()->grad_fn = std::move(fn);
  return out;
}

ComputeGraph ComputeGraph::trace(const Tensor& root) {
  ComputeGraph g;
  if (!root.defined()) return g;
  std::unordered_map<const detail::TensorImpl*, std::size_t> index;
  // Iterative post-order DFS; deep unrolled graphs would overflow recursion.
  struct Frame {
    std::shared_ptr<detail::TensorImpl> node;
    std::size_t next_input;
  };
  std::vector<Frame> stack;
  std::unordered_map<const detail::TensorImpl*, bool> on_stack;
  stack.push_back({root.impl(), 0});
  on_stack[root.impl().get()] = true;
  while (!stack.empty()) {
    Frame& top = stack.back();
    const auto& fn = top.node->grad_fn;
    if (fn && top.next_input < fn->inputs.size()) {
      auto child = fn->inputs[top.next_input++];
      if (!child->requires_grad) continue;
      if (index.count(child.get()) || on_stack[child.get()]) continue;
      on_stack[child.get()] = true;
      stack.push_back({child, 0});
      continue;
    }
    NodeRecord rec;
    rec.op = fn ? fn->op : "leaf";
    rec.tensor = top.node;
    if (fn) {
      for (const auto& in : fn->inputs) {
        auto it = index.find(in.get());
        if (it != index.end()) rec.inputs.push_back(it->second);
      }
    }
    index[top.node.get()] = g.nodes_.size();
    on_stack[top.node.get()] = false;
    g.nodes_.push_back(std::move(rec));
    stack.pop_back();
  }
  return g;
}

void backward(const Tensor& loss) { backward(ComputeGraph::trace(loss), loss); }

void backward(const ComputeGraph& graph, const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
  }
  if (!loss.requires_grad()) throw ContractError("loss does not require grad");
  const auto& nodes = graph.nodes();
  if (nodes.empty() || nodes.back().tensor != loss.impl()) {
    throw ContractError("loss is not the root of the given graph");
  }
  loss.impl()->grad_buffer()[0] += 1.0;
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    const auto& impl = *it->tensor;
    if (!impl.grad_fn || !impl.grad) continue;
    impl.grad_fn->backward(impl);
  }
  // Intermediate gradients are only needed during the sweep.
  for (const auto& rec : nodes) {
    if (rec.tensor->grad_fn && rec.tensor != loss.impl()) rec.tensor->grad.reset();
  }
}

}  // namespace armformer
