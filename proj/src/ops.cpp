#include "armformer/ops.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <string>

#include "armformer/errors.hpp"
#include "gemm.hpp"

namespace armformer {

using detail::TensorImpl;
using ImplPtr = std::shared_ptr<TensorImpl>;

namespace {

void accumulate(const ImplPtr& target, const std::vector<double>& delta) {
  if (!target->requires_grad) return;
  auto& g = target->grad_buffer();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += delta[i];
}

// ---------------------------------------------------------------------------
// Broadcasting

struct Broadcast {
  Shape out;
  std::vector<std::int64_t> stride_a;  // per output dim, 0 where broadcast
  std::vector<std::int64_t> stride_b;
};

std::vector<std::int64_t> strides_of(const Shape& s) {
  std::vector<std::int64_t> st(s.size());
  std::int64_t acc = 1;
  for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
    st[i] = acc;
    acc *= s[i];
  }
  return st;
}

Broadcast plan_broadcast(const Shape& a, const Shape& b, const char* op) {
  const std::size_t r = std::max(a.size(), b.size());
  Broadcast p;
  p.out.assign(r, 1);
  p.stride_a.assign(r, 0);
  p.stride_b.assign(r, 0);
  const auto sa = strides_of(a);
  const auto sb = strides_of(b);
  for (std::size_t i = 0; i < r; ++i) {
    const std::int64_t ia = static_cast<std::int64_t>(i) - static_cast<std::int64_t>(r - a.size());
    const std::int64_t ib = static_cast<std::int64_t>(i) - static_cast<std::int64_t>(r - b.size());
    const std::int64_t da = ia >= 0 ? a[ia] : 1;
    const std::int64_t db = ib >= 0 ? b[ib] : 1;
    if (da != db && da != 1 && db != 1) {
      throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " +
                       shape_str(b));
    }
    p.out[i] = std::max(da, db);
    if (ia >= 0 && da != 1) p.stride_a[i] = sa[ia];
    if (ib >= 0 && db != 1) p.stride_b[i] = sb[ib];
  }
  return p;
}

/// Calls fn(out_index, a_index, b_index) over the broadcast output,
/// innermost dimension in a tight loop.
template <typename Fn>
void for_each_broadcast(const Broadcast& p, Fn&& fn) {
  const int r = static_cast<int>(p.out.size());
  if (r == 0) {
    fn(0, 0, 0);
    return;
  }
  const std::int64_t inner = p.out[r - 1];
  const std::int64_t n = shape_numel(p.out);
  if (n == 0) return;
  const std::int64_t sa = p.stride_a[r - 1], sb = p.stride_b[r - 1];
  std::vector<std::int64_t> idx(r, 0);
  std::int64_t ia = 0, ib = 0;
  for (std::int64_t o = 0; o < n; o += inner) {
    for (std::int64_t j = 0; j < inner; ++j) fn(o + j, ia + j * sa, ib + j * sb);
    for (int d = r - 2; d >= 0; --d) {
      ++idx[d];
      ia += p.stride_a[d];
      ib += p.stride_b[d];
      if (idx[d] < p.out[d]) break;
      ia -= p.stride_a[d] * p.out[d];
      ib -= p.stride_b[d] * p.out[d];
      idx[d] = 0;
    }
  }
}

enum class BinOp { Add, Sub, Mul, Div };

Tensor binary(const Tensor& a, const Tensor& b, BinOp op) {
  static const char* names[] = {"add", "sub", "mul", "div"};
  const char* name = names[static_cast<int>(op)];
  const auto& da = a.data();
  const auto& db = b.data();

  ImplPtr ai = a.impl(), bi = b.impl();

  if (a.shape() == b.shape()) {
    std::vector<double> out(da.size());
    auto run = [&](auto f) {
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(da[i], db[i]);
    };
    switch (op) {
      case BinOp::Add: run(std::plus<>()); break;
      case BinOp::Sub: run(std::minus<>()); break;
      case BinOp::Mul: run(std::multiplies<>()); break;
      case BinOp::Div: run(std::divides<>()); break;
    }
    return make_result(name, a.shape(), std::move(out), {a, b}, [ai, bi, op](const TensorImpl& o) {
      const auto& g = *o.grad;
      const std::size_t n = g.size();
      if (ai->requires_grad) {
        auto& ga = ai->grad_buffer();
        for (std::size_t i = 0; i < n; ++i) {
          switch (op) {
            case BinOp::Add:
            case BinOp::Sub: ga[i] += g[i]; break;
            case BinOp::Mul: ga[i] += g[i] * bi->data[i]; break;
            case BinOp::Div: ga[i] += g[i] / bi->data[i]; break;
          }
        }
      }
      if (bi->requires_grad) {
        auto& gb = bi->grad_buffer();
        for (std::size_t i = 0; i < n; ++i) {
          switch (op) {
            case BinOp::Add: gb[i] += g[i]; break;
            case BinOp::Sub: gb[i] -= g[i]; break;
            case BinOp::Mul: gb[i] += g[i] * ai->data[i]; break;
            case BinOp::Div: gb[i] -= g[i] * o.data[i] / bi->data[i]; break;
          }
        }
      }
    });
  }

  Broadcast plan = plan_broadcast(a.shape(), b.shape(), name);
  std::vector<double> out(shape_numel(plan.out));
  auto run = [&](auto f) {
    for_each_broadcast(plan, [&](std::int64_t o, std::int64_t i, std::int64_t j) { out[o] = f(da[i], db[j]); });
  };
  switch (op) {
    case BinOp::Add: run(std::plus<>()); break;
    case BinOp::Sub: run(std::minus<>()); break;
    case BinOp::Mul: run(std::multiplies<>()); break;
    case BinOp::Div: run(std::divides<>()); break;
  }
  Shape out_shape = plan.out;
  return make_result(name, std::move(out_shape), std::move(out), {a, b},
                     [ai, bi, op, plan](const TensorImpl& o) {
                       const auto& g = *o.grad;
                       std::vector<double>* ga = ai->requires_grad ? &ai->grad_buffer() : nullptr;
                       std::vector<double>* gb = bi->requires_grad ? &bi->grad_buffer() : nullptr;
                       for_each_broadcast(plan, [&](std::int64_t k, std::int64_t i, std::int64_t j) {
                         const double x = ai->data[i], y = bi->data[j];
                         switch (op) {
                           case BinOp::Add:
                             if (ga) (*ga)[i] += g[k];
                             if (gb) (*gb)[j] += g[k];
                             break;
                           case BinOp::Sub:
                             if (ga) (*ga)[i] += g[k];
                             if (gb) (*gb)[j] -= g[k];
                             break;
                           case BinOp::Mul:
                             if (ga) (*ga)[i] += g[k] * y;
                             if (gb) (*gb)[j] += g[k] * x;
                             break;
                           case BinOp::Div:
                             if (ga) (*ga)[i] += g[k] / y;
                             if (gb) (*gb)[j] -= g[k] * x / (y * y);
                             break;
                         }
                       });
                     });
}

template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& x, const char* name, Fwd fwd, Deriv deriv) {
  const auto& d = x.data();
  std::vector<double> out(d.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(d[i]);
  ImplPtr xi = x.impl();
  // deriv(x, y) returns dy/dx.
  return make_result(name, x.shape(), std::move(out), {x}, [xi, deriv](const TensorImpl& o) {
    auto& gx = xi->grad_buffer();
    const auto& g = *o.grad;
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * deriv(xi->data[i], o.data[i]);
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Add); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Sub); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Mul); }
Tensor div(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Div); }

Tensor add_scalar(const Tensor& x, double c) {
  return unary(x, "add_scalar", [c](double v) { return v + c; },
               [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& x, double c) {
  return unary(x, "mul_scalar", [c](double v) { return v * c; },
               [c](double, double) { return c; });
}

Tensor exp(const Tensor& x) {
  return unary(x, "exp", [](double v) { return std::exp(v); },
               [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary(x, "log", [](double v) { return std::log(v); },
               [](double v, double) { return 1.0 / v; });
}

Tensor activation(const Tensor& x, Activation kind) {
  switch (kind) {
    case Activation::Sigmoid:
      return unary(x, "sigmoid",
                   [](double v) {
                     if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
                     const double e = std::exp(v);
                     return e / (1.0 + e);
                   },
                   [](double, double y) { return y * (1.0 - y); });
    case Activation::Relu:
      return unary(x, "relu", [](double v) { return v > 0 || std::isnan(v) ? v : 0.0; },
                   [](double v, double) { return v > 0 ? 1.0 : 0.0; });
    case Activation::Gelu: {
      constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
      constexpr double c = 0.044715;
      return unary(x, "gelu",
                   [](double v) { return 0.5 * v * (1.0 + std::tanh(k * (v + c * v * v * v))); },
                   [](double v, double) {
                     const double t = std::tanh(k * (v + c * v * v * v));
                     return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * k * (1.0 + 3.0 * c * v * v);
                   });
    }
  }
  throw ContractError("unknown activation");
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  ImplPtr xi = x.impl();
  return make_result("sum", {1}, {s}, {x}, [xi](const TensorImpl& o) {
    auto& gx = xi->grad_buffer();
    const double g = (*o.grad)[0];
    for (auto& v : gx) v += g;
  });
}

Tensor mean(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  const double n = static_cast<double>(x.numel());
  ImplPtr xi = x.impl();
  return make_result("mean", {1}, {s / n}, {x}, [xi, n](const TensorImpl& o) {
    auto& gx = xi->grad_buffer();
    const double g = (*o.grad)[0] / n;
    for (auto& v : gx) v += g;
  });
}

// ---------------------------------------------------------------------------
// Matrix products and layout

namespace {
thread_local MacTally* active_tally = nullptr;
}

MacTally::MacTally() : outer_(active_tally) { active_tally = this; }
MacTally::~MacTally() { active_tally = outer_; }

void record_macs(std::int64_t n) {
  for (auto* t = active_tally; t; t = t->outer_) t->count_ += n;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  std::int64_t batch = 1, m, k, n;
  bool shared_b = false;
  if (sa.size() == 2 && sb.size() == 2) {
    m = sa[0], k = sa[1], n = sb[1];
    if (sb[0] != k) throw ShapeError("matmul: inner dims differ " + shape_str(sa) + " x " + shape_str(sb));
  } else if (sa.size() == 3 && sb.size() == 3) {
    batch = sa[0], m = sa[1], k = sa[2], n = sb[2];
    if (sb[0] != batch || sb[1] != k) {
      throw ShapeError("matmul: batched dims differ " + shape_str(sa) + " x " + shape_str(sb));
    }
  } else if (sa.size() == 3 && sb.size() == 2) {
    batch = sa[0], m = sa[1], k = sa[2], n = sb[1];
    shared_b = true;
    if (sb[0] != k) throw ShapeError("matmul: inner dims differ " + shape_str(sa) + " x " + shape_str(sb));
  } else {
    throw ShapeError("matmul: unsupported ranks " + shape_str(sa) + " x " + shape_str(sb));
  }
  if (shared_b) {
    // Fold the batch into rows.
    m *= batch;
    batch = 1;
  }
  record_macs(batch * m * k * n);
  const std::int64_t stride_b = shared_b ? 0 : k * n;
  std::vector<double> out(batch * m * n);
  for (std::int64_t t = 0; t < batch; ++t) {
    detail::gemm(false, false, m, n, k, 1.0, a.data().data() + t * m * k, k,
                 b.data().data() + t * stride_b, n, 0.0, out.data() + t * m * n, n);
  }
  Shape out_shape = sa.size() == 2 ? Shape{m, n} : Shape{sa[0], sa[1], n};
  ImplPtr ai = a.impl(), bi = b.impl();
  return make_result("matmul", std::move(out_shape), std::move(out), {a, b},
                     [ai, bi, batch, m, n, k, stride_b](const TensorImpl& o) {
                       const double* g = o.grad->data();
                       if (ai->requires_grad) {
                         double* ga = ai->grad_buffer().data();
                         for (std::int64_t t = 0; t < batch; ++t) {
                           detail::gemm(false, true, m, k, n, 1.0, g + t * m * n, n,
                                        bi->data.data() + t * stride_b, n, 1.0, ga + t * m * k, k);
                         }
                       }
                       if (bi->requires_grad) {
                         double* gb = bi->grad_buffer().data();
                         for (std::int64_t t = 0; t < batch; ++t) {
                           detail::gemm(true, false, k, n, m, 1.0, ai->data.data() + t * m * k, k,
                                        g + t * m * n, n, 1.0, gb + t * stride_b, n);
                         }
                       }
                     });
}

Tensor reshape(const Tensor& x, const Shape& shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  ImplPtr xi = x.impl();
  return make_result("reshape", shape, std::vector<double>(x.data().begin(), x.data().end()), {x},
                     [xi](const TensorImpl& o) { accumulate(xi, *o.grad); });
}

/// Calls fn(out_index, src_index) for a row-major walk of `shape` where
/// source offsets advance by `step` per dimension.
template <typename Fn>
void for_each_strided(const Shape& shape, const std::vector<std::int64_t>& step, Fn&& fn) {
  const int r = static_cast<int>(shape.size());
  const std::int64_t n = shape_numel(shape);
  if (n == 0) return;
  if (r == 0) {
    fn(0, 0);
    return;
  }
  const std::int64_t inner = shape[r - 1], si = step[r - 1];
  std::vector<std::int64_t> idx(r, 0);
  std::int64_t src = 0;
  for (std::int64_t o = 0; o < n; o += inner) {
    for (std::int64_t j = 0; j < inner; ++j) fn(o + j, src + j * si);
    for (int d = r - 2; d >= 0; --d) {
      ++idx[d];
      src += step[d];
      if (idx[d] < shape[d]) break;
      src -= step[d] * shape[d];
      idx[d] = 0;
    }
  }
}

struct PermutePlan {
  Shape shape;
  std::vector<std::int64_t> step;
};

// Drops unit dims and merges output dims that are also adjacent in the source.
PermutePlan simplify_permute(const Shape& shape, const std::vector<std::int64_t>& step) {
  PermutePlan p;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == 1) continue;
    if (!p.shape.empty() && p.step.back() == step[i] * shape[i]) {
      p.shape.back() *= shape[i];
      p.step.back() = step[i];
    } else {
      p.shape.push_back(shape[i]);
      p.step.push_back(step[i]);
    }
  }
  return p;
}

// Row-major walk of the output; with `scatter` the roles flip and the
// output-ordered buffer `a` is accumulated into source-ordered `b`.
void run_permute(const PermutePlan& p, const double* a, double* b, bool scatter) {
  const std::int64_t n = shape_numel(p.shape);
  const int r = static_cast<int>(p.shape.size());
  if (r == 0 || (r == 1 && p.step[0] == 1)) {
    for (std::int64_t i = 0; i < n; ++i) {
      if (scatter) b[i] += a[i];
      else b[i] = a[i];
    }
    return;
  }
  if ((r == 2 || r == 3) && p.step[r - 2] == 1) {
    // Blocked transpose of [rows, cols] planes: out[i][j] = src[j][i].
    const std::int64_t outer = r == 3 ? p.shape[0] : 1;
    const std::int64_t ostep = r == 3 ? p.step[0] : 0;
    const std::int64_t rows = p.shape[r - 2], cols = p.shape[r - 1], cstep = p.step[r - 1];
    constexpr std::int64_t kTile = 32;
    for (std::int64_t o = 0; o < outer; ++o) {
      const std::int64_t obase = o * rows * cols, sbase = o * ostep;
      for (std::int64_t i0 = 0; i0 < rows; i0 += kTile)
        for (std::int64_t j0 = 0; j0 < cols; j0 += kTile) {
          const std::int64_t i1 = std::min(rows, i0 + kTile), j1 = std::min(cols, j0 + kTile);
          for (std::int64_t i = i0; i < i1; ++i)
            for (std::int64_t j = j0; j < j1; ++j) {
              const std::int64_t oi = obase + i * cols + j, si = sbase + i + j * cstep;
              if (scatter) b[si] += a[oi];
              else b[oi] = a[si];
            }
        }
    }
    return;
  }
  if (scatter) {
    for_each_strided(p.shape, p.step, [&](std::int64_t k, std::int64_t src) { b[src] += a[k]; });
  } else {
    for_each_strided(p.shape, p.step, [&](std::int64_t k, std::int64_t src) { b[k] = a[src]; });
  }
}

Tensor permute(const Tensor& x, const std::vector<int>& order) {
  const auto& s = x.shape();
  const int r = static_cast<int>(s.size());
  if (static_cast<int>(order.size()) != r) throw ShapeError("permute: order rank mismatch");
  std::vector<bool> seen(r, false);
  for (int d : order) {
    if (d < 0 || d >= r || seen[d]) throw ShapeError("permute: invalid order");
    seen[d] = true;
  }
  Shape out_shape(r);
  for (int i = 0; i < r; ++i) out_shape[i] = s[order[i]];
  const auto in_strides = strides_of(s);
  std::vector<std::int64_t> step(r);
  for (int i = 0; i < r; ++i) step[i] = in_strides[order[i]];
  std::vector<double> out(x.numel());
  const PermutePlan plan = simplify_permute(out_shape, step);
  run_permute(plan, x.data().data(), out.data(), false);
  ImplPtr xi = x.impl();
  return make_result("permute", std::move(out_shape), std::move(out), {x}, [xi, plan](const TensorImpl& o) {
    run_permute(plan, o.grad->data(), xi->grad_buffer().data(), true);
  });
}

Tensor transpose(const Tensor& x) {
  const int r = x.rank();
  if (r < 2) throw ShapeError("transpose needs rank >= 2");
  std::vector<int> order(r);
  for (int i = 0; i < r; ++i) order[i] = i;
  std::swap(order[r - 1], order[r - 2]);
  return permute(x, order);
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const Shape& first = parts[0].shape();
  const int r = static_cast<int>(first.size());
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("concat: axis out of range");
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const auto& s = p.shape();
    if (static_cast<int>(s.size()) != r) throw ShapeError("concat: rank mismatch");
    for (int i = 0; i < r; ++i) {
      if (i != axis && s[i] != first[i]) {
        throw ShapeError("concat: " + shape_str(s) + " incompatible with " + shape_str(first));
      }
    }
    out_shape[axis] += s[axis];
  }
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= first[i];
  for (int i = axis + 1; i < r; ++i) inner *= first[i];
  const std::int64_t out_row = out_shape[axis] * inner;
  std::vector<double> out(shape_numel(out_shape));
  std::vector<std::int64_t> offsets;
  std::int64_t off = 0;
  for (const auto& p : parts) {
    const std::int64_t row = p.shape()[axis] * inner;
    const auto& d = p.data();
    for (std::int64_t o = 0; o < outer; ++o) {
      std::copy_n(d.data() + o * row, row, out.data() + o * out_row + off);
    }
    offsets.push_back(off);
    off += row;
  }
  std::vector<ImplPtr> impls;
  for (const auto& p : parts) impls.push_back(p.impl());
  return make_result("concat", std::move(out_shape), std::move(out), parts,
                     [impls, offsets, outer, out_row, inner, axis](const TensorImpl& o) {
                       const auto& g = *o.grad;
                       for (std::size_t t = 0; t < impls.size(); ++t) {
                         if (!impls[t]->requires_grad) continue;
                         auto& gp = impls[t]->grad_buffer();
                         const std::int64_t row = impls[t]->shape[axis] * inner;
                         for (std::int64_t r0 = 0; r0 < outer; ++r0) {
                           for (std::int64_t i = 0; i < row; ++i) {
                             gp[r0 * row + i] += g[r0 * out_row + offsets[t] + i];
                           }
                         }
                       }
                     });
}

Tensor linear(const Tensor& x, const Tensor& weight, const std::optional<Tensor>& bias) {
  const auto& sx = x.shape();
  const auto& sw = weight.shape();
  if (sw.size() != 2) throw ShapeError("linear: weight must be [out,in]");
  const std::int64_t in = sw[1], out_f = sw[0];
  if (sx.back() != in) {
    throw ShapeError("linear: input " + shape_str(sx) + " vs weight " + shape_str(sw));
  }
  if (bias && (bias->rank() != 1 || bias->dim(0) != out_f)) throw ShapeError("linear: bias shape");
  const std::int64_t rows = x.numel() / in;
  record_macs(rows * in * out_f);
  std::vector<double> out(rows * out_f);
  if (bias) {
    const auto& b = bias->data();
    for (std::int64_t r = 0; r < rows; ++r) std::copy(b.begin(), b.end(), out.begin() + r * out_f);
  }
  detail::gemm(false, true, rows, out_f, in, 1.0, x.data().data(), in, weight.data().data(), in,
               bias ? 1.0 : 0.0, out.data(), out_f);
  Shape out_shape = sx;
  out_shape.back() = out_f;
  ImplPtr xi = x.impl(), wi = weight.impl();
  ImplPtr bi = bias ? bias->impl() : nullptr;
  std::vector<Tensor> inputs{x, weight};
  if (bias) inputs.push_back(*bias);
  return make_result("linear", std::move(out_shape), std::move(out), std::move(inputs),
                     [xi, wi, bi, rows, in, out_f](const TensorImpl& o) {
                       const double* g = o.grad->data();
                       if (xi->requires_grad) {
                         detail::gemm(false, false, rows, in, out_f, 1.0, g, out_f, wi->data.data(),
                                      in, 1.0, xi->grad_buffer().data(), in);
                       }
                       if (wi->requires_grad) {
                         detail::gemm(true, false, out_f, in, rows, 1.0, g, out_f, xi->data.data(),
                                      in, 1.0, wi->grad_buffer().data(), in);
                       }
                       if (bi && bi->requires_grad) {
                         auto& gb = bi->grad_buffer();
                         for (std::int64_t r = 0; r < rows; ++r) {
                           for (std::int64_t j = 0; j < out_f; ++j) gb[j] += g[r * out_f + j];
                         }
                       }
                     });
}

// ---------------------------------------------------------------------------
// Convolution

std::int64_t conv_output_size(std::int64_t in, std::int64_t kernel, std::int64_t stride,
                              std::int64_t padding) {
  if (stride < 1) throw ShapeError("stride must be >= 1");
  const std::int64_t span = in + 2 * padding - kernel;
  if (span < 0) return 0;
  return span / stride + 1;
}

namespace {

struct ConvGeom {
  std::int64_t batch, cin, h, w, cout, kh, kw, stride, pad, groups, ho, wo;
  std::int64_t cin_g() const { return cin / groups; }
  std::int64_t cout_g() const { return cout / groups; }
  std::int64_t col_rows() const { return cin_g() * kh * kw; }
  std::int64_t spatial_out() const { return ho * wo; }
  bool depthwise() const { return cin_g() == 1 && cout_g() == 1; }
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
};

// col[(c*kh + i)*kw + j][oy*wo + ox] = x[c][oy*s - p + i][ox*s - p + j]
void im2col(const ConvGeom& g, const double* x, double* col) {
  for (std::int64_t c = 0; c < g.cin_g(); ++c) {
    const double* xc = x + c * g.h * g.w;
    for (std::int64_t i = 0; i < g.kh; ++i) {
      for (std::int64_t j = 0; j < g.kw; ++j) {
        double* row = col + ((c * g.kh + i) * g.kw + j) * g.spatial_out();
        for (std::int64_t oy = 0; oy < g.ho; ++oy) {
          const std::int64_t y = oy * g.stride - g.pad + i;
          double* dst = row + oy * g.wo;
          if (y < 0 || y >= g.h) {
            std::fill_n(dst, g.wo, 0.0);
            continue;
          }
          for (std::int64_t ox = 0; ox < g.wo; ++ox) {
            const std::int64_t xx = ox * g.stride - g.pad + j;
            dst[ox] = (xx < 0 || xx >= g.w) ? 0.0 : xc[y * g.w + xx];
          }
        }
      }
    }
  }
}

void col2im(const ConvGeom& g, const double* col, double* dx) {
  for (std::int64_t c = 0; c < g.cin_g(); ++c) {
    double* xc = dx + c * g.h * g.w;
    for (std::int64_t i = 0; i < g.kh; ++i) {
      for (std::int64_t j = 0; j < g.kw; ++j) {
        const double* row = col + ((c * g.kh + i) * g.kw + j) * g.spatial_out();
        for (std::int64_t oy = 0; oy < g.ho; ++oy) {
          const std::int64_t y = oy * g.stride - g.pad + i;
          if (y < 0 || y >= g.h) continue;
          for (std::int64_t ox = 0; ox < g.wo; ++ox) {
            const std::int64_t xx = ox * g.stride - g.pad + j;
            if (xx >= 0 && xx < g.w) xc[y * g.w + xx] += row[oy * g.wo + ox];
          }
        }
      }
    }
  }
}

void depthwise_forward(const ConvGeom& g, const double* x, const double* w, double* out) {
  for (std::int64_t b = 0; b < g.batch; ++b) {
    for (std::int64_t c = 0; c < g.cout; ++c) {
      const double* xc = x + (b * g.cin + c) * g.h * g.w;
      const double* wc = w + c * g.kh * g.kw;
      double* oc = out + (b * g.cout + c) * g.spatial_out();
      for (std::int64_t oy = 0; oy < g.ho; ++oy) {
        for (std::int64_t ox = 0; ox < g.wo; ++ox) {
          double acc = 0.0;
          for (std::int64_t i = 0; i < g.kh; ++i) {
            const std::int64_t y = oy * g.stride - g.pad + i;
            if (y < 0 || y >= g.h) continue;
            for (std::int64_t j = 0; j < g.kw; ++j) {
              const std::int64_t xx = ox * g.stride - g.pad + j;
              if (xx < 0 || xx >= g.w) continue;
              acc += xc[y * g.w + xx] * wc[i * g.kw + j];
            }
          }
          oc[oy * g.wo + ox] += acc;
        }
      }
    }
  }
}

void depthwise_backward(const ConvGeom& g, const double* x, const double* w, const double* gout,
                        double* gx, double* gw) {
  for (std::int64_t b = 0; b < g.batch; ++b) {
    for (std::int64_t c = 0; c < g.cout; ++c) {
      const double* xc = x + (b * g.cin + c) * g.h * g.w;
      const double* wc = w + c * g.kh * g.kw;
      const double* goc = gout + (b * g.cout + c) * g.spatial_out();
      double* gxc = gx ? gx + (b * g.cin + c) * g.h * g.w : nullptr;
      double* gwc = gw ? gw + c * g.kh * g.kw : nullptr;
      for (std::int64_t oy = 0; oy < g.ho; ++oy) {
        for (std::int64_t ox = 0; ox < g.wo; ++ox) {
          const double go = goc[oy * g.wo + ox];
          for (std::int64_t i = 0; i < g.kh; ++i) {
            const std::int64_t y = oy * g.stride - g.pad + i;
            if (y < 0 || y >= g.h) continue;
            for (std::int64_t j = 0; j < g.kw; ++j) {
              const std::int64_t xx = ox * g.stride - g.pad + j;
              if (xx < 0 || xx >= g.w) continue;
              if (gxc) gxc[y * g.w + xx] += go * wc[i * g.kw + j];
              if (gwc) gwc[i * g.kw + j] += go * xc[y * g.w + xx];
            }
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const std::optional<Tensor>& bias,
              Conv2dOptions opt) {
  const auto& sx = x.shape();
  const auto& sw = weight.shape();
  if (sx.size() != 4 || sw.size() != 4) {
    throw ShapeError("conv2d: expected 4-d input and weight, got " + shape_str(sx) + ", " +
                     shape_str(sw));
  }
  ConvGeom g{sx[0], sx[1], sx[2], sx[3], sw[0], sw[2], sw[3], opt.stride, opt.padding, opt.groups, 0, 0};
  if (g.groups < 1 || g.cin % g.groups != 0 || g.cout % g.groups != 0) {
    throw ShapeError("conv2d: channels " + std::to_string(g.cin) + "->" + std::to_string(g.cout) +
                     " not divisible by groups " + std::to_string(g.groups));
  }
  if (sw[1] != g.cin_g()) {
    throw ShapeError("conv2d: weight " + shape_str(sw) + " does not match input " + shape_str(sx));
  }
  if (g.pad < 0) throw ShapeError("conv2d: negative padding");
  g.ho = conv_output_size(g.h, g.kh, g.stride, g.pad);
  g.wo = conv_output_size(g.w, g.kw, g.stride, g.pad);
  if (g.ho < 1 || g.wo < 1) throw ShapeError("conv2d: empty output for input " + shape_str(sx));
  if (bias && (bias->rank() != 1 || bias->dim(0) != g.cout)) throw ShapeError("conv2d: bias shape");
  record_macs(g.batch * g.cout * g.ho * g.wo * g.cin_g() * g.kh * g.kw);

  const std::int64_t so = g.spatial_out();
  std::vector<double> out(g.batch * g.cout * so, 0.0);
  if (bias) {
    const auto& bd = bias->data();
    for (std::int64_t b = 0; b < g.batch; ++b)
      for (std::int64_t c = 0; c < g.cout; ++c)
        std::fill_n(out.data() + (b * g.cout + c) * so, so, bd[c]);
  }
  const double* xd = x.data().data();
  const double* wd = weight.data().data();
  if (g.depthwise()) {
    depthwise_forward(g, xd, wd, out.data());
  } else {
    std::vector<double> col(g.pointwise() ? 0 : g.col_rows() * so);
    for (std::int64_t b = 0; b < g.batch; ++b) {
      for (std::int64_t gr = 0; gr < g.groups; ++gr) {
        const double* xin = xd + (b * g.cin + gr * g.cin_g()) * g.h * g.w;
        const double* src = xin;
        if (!g.pointwise()) {
          im2col(g, xin, col.data());
          src = col.data();
        }
        detail::gemm(false, false, g.cout_g(), so, g.col_rows(), 1.0,
                     wd + gr * g.cout_g() * g.col_rows(), g.col_rows(), src, so, 1.0,
                     out.data() + (b * g.cout + gr * g.cout_g()) * so, so);
      }
    }
  }

  ImplPtr xi = x.impl(), wi = weight.impl();
  ImplPtr bi = bias ? bias->impl() : nullptr;
  std::vector<Tensor> inputs{x, weight};
  if (bias) inputs.push_back(*bias);
  return make_result(
      "conv2d", {g.batch, g.cout, g.ho, g.wo}, std::move(out), std::move(inputs),
      [xi, wi, bi, g](const TensorImpl& o) {
        const double* go = o.grad->data();
        const std::int64_t so = g.spatial_out();
        double* gx = xi->requires_grad ? xi->grad_buffer().data() : nullptr;
        double* gw = wi->requires_grad ? wi->grad_buffer().data() : nullptr;
        if (bi && bi->requires_grad) {
          auto& gb = bi->grad_buffer();
          for (std::int64_t b = 0; b < g.batch; ++b)
            for (std::int64_t c = 0; c < g.cout; ++c) {
              const double* p = go + (b * g.cout + c) * so;
              double s = 0.0;
              for (std::int64_t i = 0; i < so; ++i) s += p[i];
              gb[c] += s;
            }
        }
        if (!gx && !gw) return;
        if (g.depthwise()) {
          depthwise_backward(g, xi->data.data(), wi->data.data(), go, gx, gw);
          return;
        }
        std::vector<double> col(g.pointwise() ? 0 : g.col_rows() * so);
        std::vector<double> dcol(g.pointwise() || !gx ? 0 : g.col_rows() * so);
        for (std::int64_t b = 0; b < g.batch; ++b) {
          for (std::int64_t gr = 0; gr < g.groups; ++gr) {
            const std::int64_t xoff = (b * g.cin + gr * g.cin_g()) * g.h * g.w;
            const double* gout = go + (b * g.cout + gr * g.cout_g()) * so;
            const double* wg = wi->data.data() + gr * g.cout_g() * g.col_rows();
            if (gw) {
              const double* src = xi->data.data() + xoff;
              if (!g.pointwise()) {
                im2col(g, src, col.data());
                src = col.data();
              }
              detail::gemm(false, true, g.cout_g(), g.col_rows(), so, 1.0, gout, so, src, so, 1.0,
                           gw + gr * g.cout_g() * g.col_rows(), g.col_rows());
            }
            if (gx) {
              if (g.pointwise()) {
                detail::gemm(true, false, g.col_rows(), so, g.cout_g(), 1.0, wg, g.col_rows(), gout,
                             so, 1.0, gx + xoff, so);
              } else {
                detail::gemm(true, false, g.col_rows(), so, g.cout_g(), 1.0, wg, g.col_rows(), gout,
                             so, 0.0, dcol.data(), so);
                col2im(g, dcol.data(), gx + xoff);
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Pooling and resampling

Tensor pool2d(const Tensor& x, PoolKind kind, std::optional<PoolWindow> window) {
  const auto& s = x.shape();
  if (s.size() != 4) throw ShapeError("pool2d: expected [B,C,H,W], got " + shape_str(s));
  const std::int64_t planes = s[0] * s[1], h = s[2], w = s[3];
  std::int64_t kh = h, kw = w, stride = 1;
  if (window) {
    kh = window->kernel_h, kw = window->kernel_w, stride = window->stride;
    if (kh < 1 || kw < 1 || stride < 1) throw ShapeError("pool2d: invalid window");
  }
  const std::int64_t ho = conv_output_size(h, kh, stride, 0);
  const std::int64_t wo = conv_output_size(w, kw, stride, 0);
  if (ho < 1 || wo < 1) throw ShapeError("pool2d: window larger than input " + shape_str(s));
  const auto& d = x.data();
  std::vector<double> out(planes * ho * wo);
  std::vector<std::int64_t> argmax(kind == PoolKind::Max ? out.size() : 0);
  for (std::int64_t p = 0; p < planes; ++p) {
    const double* xp = d.data() + p * h * w;
    for (std::int64_t oy = 0; oy < ho; ++oy) {
      for (std::int64_t ox = 0; ox < wo; ++ox) {
        const std::int64_t oi = (p * ho + oy) * wo + ox;
        if (kind == PoolKind::Avg) {
          double acc = 0.0;
          for (std::int64_t i = 0; i < kh; ++i)
            for (std::int64_t j = 0; j < kw; ++j) acc += xp[(oy * stride + i) * w + ox * stride + j];
          out[oi] = acc / static_cast<double>(kh * kw);
        } else {
          std::int64_t best = (oy * stride) * w + ox * stride;
          for (std::int64_t i = 0; i < kh; ++i)
            for (std::int64_t j = 0; j < kw; ++j) {
              const std::int64_t k = (oy * stride + i) * w + ox * stride + j;
              if (xp[k] > xp[best] || std::isnan(xp[k])) best = k;
            }
          out[oi] = xp[best];
          argmax[oi] = p * h * w + best;
        }
      }
    }
  }
  ImplPtr xi = x.impl();
  return make_result(kind == PoolKind::Avg ? "avg_pool" : "max_pool", {s[0], s[1], ho, wo},
                     std::move(out), {x},
                     [xi, kind, argmax = std::move(argmax), planes, h, w, ho, wo, kh, kw,
                      stride](const TensorImpl& o) {
                       auto& gx = xi->grad_buffer();
                       const auto& g = *o.grad;
                       if (kind == PoolKind::Max) {
                         for (std::size_t i = 0; i < g.size(); ++i) gx[argmax[i]] += g[i];
                         return;
                       }
                       const double inv = 1.0 / static_cast<double>(kh * kw);
                       for (std::int64_t p = 0; p < planes; ++p)
                         for (std::int64_t oy = 0; oy < ho; ++oy)
                           for (std::int64_t ox = 0; ox < wo; ++ox) {
                             const double v = g[(p * ho + oy) * wo + ox] * inv;
                             for (std::int64_t i = 0; i < kh; ++i)
                               for (std::int64_t j = 0; j < kw; ++j)
                                 gx[p * h * w + (oy * stride + i) * w + ox * stride + j] += v;
                           }
                     });
}

Tensor reduce_channel(const Tensor& x, PoolKind kind) {
  const auto& s = x.shape();
  if (s.size() != 4) throw ShapeError("reduce_channel: expected [B,C,H,W], got " + shape_str(s));
  const std::int64_t b = s[0], c = s[1], hw = s[2] * s[3];
  const auto& d = x.data();
  std::vector<double> out(b * hw);
  std::vector<std::int64_t> argmax(kind == PoolKind::Max ? out.size() : 0);
  for (std::int64_t n = 0; n < b; ++n) {
    double* o = out.data() + n * hw;
    const double* plane = d.data() + n * c * hw;
    if (kind == PoolKind::Avg) {
      for (std::int64_t k = 0; k < c; ++k)
        for (std::int64_t p = 0; p < hw; ++p) o[p] += plane[k * hw + p];
      for (std::int64_t p = 0; p < hw; ++p) o[p] /= static_cast<double>(c);
    } else {
      std::int64_t* am = argmax.data() + n * hw;
      for (std::int64_t p = 0; p < hw; ++p) {
        o[p] = plane[p];
        am[p] = n * c * hw + p;
      }
      for (std::int64_t k = 1; k < c; ++k)
        for (std::int64_t p = 0; p < hw; ++p)
          if (plane[k * hw + p] > o[p] || std::isnan(plane[k * hw + p])) {
            o[p] = plane[k * hw + p];
            am[p] = n * c * hw + k * hw + p;
          }
    }
  }
  ImplPtr xi = x.impl();
  return make_result(kind == PoolKind::Avg ? "channel_avg" : "channel_max", {b, 1, s[2], s[3]},
                     std::move(out), {x},
                     [xi, kind, argmax = std::move(argmax), b, c, hw](const TensorImpl& o) {
                       auto& gx = xi->grad_buffer();
                       const auto& g = *o.grad;
                       if (kind == PoolKind::Max) {
                         for (std::size_t i = 0; i < g.size(); ++i) gx[argmax[i]] += g[i];
                         return;
                       }
                       const double inv = 1.0 / static_cast<double>(c);
                       for (std::int64_t n = 0; n < b; ++n)
                         for (std::int64_t k = 0; k < c; ++k)
                           for (std::int64_t p = 0; p < hw; ++p)
                             gx[(n * c + k) * hw + p] += g[n * hw + p] * inv;
                     });
}

namespace {

struct LerpTap {
  std::int64_t i0, i1;
  double frac;  // weight of i1
};

std::vector<LerpTap> lerp_taps(std::int64_t in, std::int64_t out) {
  std::vector<LerpTap> taps(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::int64_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    auto i0 = static_cast<std::int64_t>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const std::int64_t i1 = i0 < in - 1 ? i0 + 1 : i0;
    taps[o] = {i0, i1, src - static_cast<double>(i0)};
  }
  return taps;
}

}  // namespace

Tensor bilinear_resize(const Tensor& x, std::int64_t out_h, std::int64_t out_w) {
  const auto& s = x.shape();
  if (s.size() != 4) throw ShapeError("bilinear_resize: expected [B,C,H,W], got " + shape_str(s));
  if (out_h < 1 || out_w < 1) throw ShapeError("bilinear_resize: output size must be >= 1");
  const std::int64_t planes = s[0] * s[1], h = s[2], w = s[3];
  auto ty = lerp_taps(h, out_h);
  auto tx = lerp_taps(w, out_w);
  const auto& d = x.data();
  std::vector<double> out(planes * out_h * out_w);
  for (std::int64_t p = 0; p < planes; ++p) {
    const double* xp = d.data() + p * h * w;
    double* op = out.data() + p * out_h * out_w;
    for (std::int64_t oy = 0; oy < out_h; ++oy) {
      const auto& a = ty[oy];
      for (std::int64_t ox = 0; ox < out_w; ++ox) {
        const auto& bt = tx[ox];
        const double top = xp[a.i0 * w + bt.i0] * (1 - bt.frac) + xp[a.i0 * w + bt.i1] * bt.frac;
        const double bot = xp[a.i1 * w + bt.i0] * (1 - bt.frac) + xp[a.i1 * w + bt.i1] * bt.frac;
        op[oy * out_w + ox] = top * (1 - a.frac) + bot * a.frac;
      }
    }
  }
  ImplPtr xi = x.impl();
  return make_result("bilinear_resize", {s[0], s[1], out_h, out_w}, std::move(out), {x},
                     [xi, ty = std::move(ty), tx = std::move(tx), planes, h, w, out_h,
                      out_w](const TensorImpl& o) {
                       auto& gx = xi->grad_buffer();
                       const auto& g = *o.grad;
                       for (std::int64_t p = 0; p < planes; ++p) {
                         double* gp = gx.data() + p * h * w;
                         const double* go = g.data() + p * out_h * out_w;
                         for (std::int64_t oy = 0; oy < out_h; ++oy) {
                           const auto& a = ty[oy];
                           for (std::int64_t ox = 0; ox < out_w; ++ox) {
                             const auto& bt = tx[ox];
                             const double v = go[oy * out_w + ox];
                             gp[a.i0 * w + bt.i0] += v * (1 - a.frac) * (1 - bt.frac);
                             gp[a.i0 * w + bt.i1] += v * (1 - a.frac) * bt.frac;
                             gp[a.i1 * w + bt.i0] += v * a.frac * (1 - bt.frac);
                             gp[a.i1 * w + bt.i1] += v * a.frac * bt.frac;
                           }
                         }
                       }
                     });
}

// ---------------------------------------------------------------------------
// Normalization

Tensor softmax(const Tensor& x, int axis) {
  const auto& s = x.shape();
  const int r = static_cast<int>(s.size());
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("softmax: axis out of range for " + shape_str(s));
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[i];
  for (int i = axis + 1; i < r; ++i) inner *= s[i];
  const std::int64_t n = s[axis];
  const auto& d = x.data();
  std::vector<double> out(d.size());
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t in = 0; in < inner; ++in) {
      const std::int64_t base = o * n * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::int64_t k = 0; k < n; ++k) mx = std::max(mx, d[base + k * inner]);
      double z = 0.0;
      for (std::int64_t k = 0; k < n; ++k) {
        const double e = std::exp(d[base + k * inner] - mx);
        out[base + k * inner] = e;
        z += e;
      }
      for (std::int64_t k = 0; k < n; ++k) out[base + k * inner] /= z;
    }
  }
  ImplPtr xi = x.impl();
  return make_result("softmax", s, std::move(out), {x}, [xi, outer, inner, n](const TensorImpl& o) {
    auto& gx = xi->grad_buffer();
    const auto& g = *o.grad;
    const auto& y = o.data;
    for (std::int64_t oo = 0; oo < outer; ++oo) {
      for (std::int64_t in = 0; in < inner; ++in) {
        const std::int64_t base = oo * n * inner + in;
        double dot = 0.0;
        for (std::int64_t k = 0; k < n; ++k) dot += g[base + k * inner] * y[base + k * inner];
        for (std::int64_t k = 0; k < n; ++k) {
          const std::int64_t i = base + k * inner;
          gx[i] += y[i] * (g[i] - dot);
        }
      }
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const auto& s = x.shape();
  const std::int64_t dim = s.back();
  if (gamma.rank() != 1 || gamma.dim(0) != dim || beta.rank() != 1 || beta.dim(0) != dim) {
    throw ShapeError("layer_norm: gamma/beta must be [" + std::to_string(dim) + "]");
  }
  const std::int64_t rows = x.numel() / dim;
  const auto& d = x.data();
  const auto& ga = gamma.data();
  const auto& be = beta.data();
  std::vector<double> out(d.size());
  std::vector<double> xhat(d.size());
  std::vector<double> inv_std(rows);
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* xr = d.data() + r * dim;
    double mu = 0.0;
    for (std::int64_t i = 0; i < dim; ++i) mu += xr[i];
    mu /= static_cast<double>(dim);
    double var = 0.0;
    for (std::int64_t i = 0; i < dim; ++i) var += (xr[i] - mu) * (xr[i] - mu);
    var /= static_cast<double>(dim);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::int64_t i = 0; i < dim; ++i) {
      const double xh = (xr[i] - mu) * is;
      xhat[r * dim + i] = xh;
      out[r * dim + i] = xh * ga[i] + be[i];
    }
  }
  ImplPtr xi = x.impl(), gi = gamma.impl(), bi = beta.impl();
  return make_result(
      "layer_norm", s, std::move(out), {x, gamma, beta},
      [xi, gi, bi, xhat = std::move(xhat), inv_std = std::move(inv_std), rows,
       dim](const TensorImpl& o) {
        const auto& g = *o.grad;
        if (gi->requires_grad || bi->requires_grad) {
          std::vector<double>* gg = gi->requires_grad ? &gi->grad_buffer() : nullptr;
          std::vector<double>* gb = bi->requires_grad ? &bi->grad_buffer() : nullptr;
          for (std::int64_t r = 0; r < rows; ++r)
            for (std::int64_t i = 0; i < dim; ++i) {
              if (gg) (*gg)[i] += g[r * dim + i] * xhat[r * dim + i];
              if (gb) (*gb)[i] += g[r * dim + i];
            }
        }
        if (!xi->requires_grad) return;
        auto& gx = xi->grad_buffer();
        const auto& gam = gi->data;
        const double inv_n = 1.0 / static_cast<double>(dim);
        for (std::int64_t r = 0; r < rows; ++r) {
          double m1 = 0.0, m2 = 0.0;
          for (std::int64_t i = 0; i < dim; ++i) {
            const double dxh = g[r * dim + i] * gam[i];
            m1 += dxh;
            m2 += dxh * xhat[r * dim + i];
          }
          m1 *= inv_n;
          m2 *= inv_n;
          for (std::int64_t i = 0; i < dim; ++i) {
            const double dxh = g[r * dim + i] * gam[i];
            gx[r * dim + i] += inv_std[r] * (dxh - m1 - xhat[r * dim + i] * m2);
          }
        }
      });
}

}  // namespace armformer
