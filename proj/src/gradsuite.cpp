#include "armformer/gradsuite.hpp"

#include <chrono>
#include <memory>

#include "armformer/cbam.hpp"
#include "armformer/decoder.hpp"
#include "armformer/encoder.hpp"
#include "armformer/errors.hpp"
#include "armformer/model.hpp"
#include "armformer/ops.hpp"
#include "armformer/random.hpp"

namespace armformer {

namespace {

std::int64_t small_dim(Rng& rng, std::int64_t lo = 1) { return lo + static_cast<std::int64_t>(rng.below(7 - lo)); }

Tensor rand_tensor(Rng& rng, const Shape& s, double lo = -1, double hi = 1) {
  return Tensor::uniform(s, rng.next_u64(), lo, hi).set_requires_grad(true);
}

// Values 0.02 apart in shuffled order: no max ties within epsilon.
Tensor separated_tensor(Rng& rng, const Shape& s) {
  const std::int64_t n = shape_numel(s);
  std::vector<double> v(n);
  for (std::int64_t i = 0; i < n; ++i) v[i] = 0.02 * static_cast<double>(i) - 0.01 * static_cast<double>(n);
  for (std::int64_t i = n - 1; i > 0; --i) std::swap(v[i], v[rng.below(i + 1)]);
  return Tensor(s, std::move(v)).set_requires_grad(true);
}

Tensor probe(const Shape& shape, std::uint64_t seed) { return Tensor::uniform(shape, seed ^ 0xABCDEFULL, -1.0, 1.0); }

Tensor weighted(const Tensor& y, std::uint64_t seed) { return sum(mul(y, probe(y.shape(), seed))); }

using Builder = std::function<void(Rng&, GradProblem&)>;

struct PrimitiveCase {
  const char* name;
  Builder build;
};

const std::vector<PrimitiveCase>& primitive_cases() {
  static const std::vector<PrimitiveCase> cases = {
      {"add_broadcast",
       [](Rng& r, GradProblem& p) {
         auto a = rand_tensor(r, {small_dim(r), small_dim(r), small_dim(r)});
         auto b = rand_tensor(r, {a.dim(0), 1, a.dim(2)});
         p.params = {{"a", a}, {"b", b}};
         p.loss = [a, b] { return weighted(add(a, b), 1); };
       }},
      {"sub_mul_div",
       [](Rng& r, GradProblem& p) {
         auto a = rand_tensor(r, {small_dim(r), small_dim(r)});
         auto b = rand_tensor(r, a.shape(), 0.5, 2.0);
         auto c = rand_tensor(r, {1, a.dim(1)}, 0.5, 2.0);
         p.params = {{"a", a}, {"b", b}, {"c", c}};
         p.loss = [a, b, c] { return weighted(div(mul(sub(a, b), b), c), 2); };
       }},
      {"scalar_exp_log",
       [](Rng& r, GradProblem& p) {
         auto a = rand_tensor(r, {small_dim(r), small_dim(r)}, 0.5, 2.0);
         p.params = {{"a", a}};
         p.loss = [a] { return weighted(log(add_scalar(exp(mul_scalar(a, 0.7)), 1.5)), 3); };
       }},
      {"activations",
       [](Rng& r, GradProblem& p) {
         auto a = rand_tensor(r, {small_dim(r), small_dim(r)}, -2, 2);
         p.params = {{"a", a}};
         p.loss = [a] { return weighted(add(add(sigmoid(a), gelu(a)), relu(a)), 4); };
       }},
      {"matmul",
       [](Rng& r, GradProblem& p) {
         auto a = rand_tensor(r, {small_dim(r), small_dim(r), small_dim(r)});
         auto b = rand_tensor(r, {a.dim(0), a.dim(2), small_dim(r)});
         auto c = rand_tensor(r, {b.dim(2), small_dim(r)});
         p.params = {{"a", a}, {"b", b}, {"c", c}};
         p.loss = [a, b, c] { return weighted(matmul(matmul(a, b), c), 5); };
       }},
      {"layout",
       [](Rng& r, GradProblem& p) {
         auto a = rand_tensor(r, {small_dim(r), small_dim(r), small_dim(r)});
         auto b = rand_tensor(r, {a.dim(0), small_dim(r), a.dim(2)});
         p.params = {{"a", a}, {"b", b}};
         p.loss = [a, b] {
           auto c = concat({a, b}, 1);
           auto t = transpose(permute(c, {2, 0, 1}));
           return weighted(reshape(t, {t.numel()}), 6);
         };
       }},
      {"linear",
       [](Rng& r, GradProblem& p) {
         auto x = rand_tensor(r, {small_dim(r), small_dim(r), small_dim(r)});
         auto w = rand_tensor(r, {small_dim(r), x.dim(2)});
         auto b = rand_tensor(r, {w.dim(0)});
         p.params = {{"x", x}, {"w", w}, {"b", b}};
         p.loss = [x, w, b] { return weighted(linear(x, w, b), 7); };
       }},
      {"conv2d",
       [](Rng& r, GradProblem& p) {
         const auto groups = static_cast<std::int64_t>(1 + r.below(2));
         const auto k = static_cast<std::int64_t>(1 + r.below(3));
         auto x = rand_tensor(r, {static_cast<std::int64_t>(1 + r.below(2)),
                                  groups * static_cast<std::int64_t>(1 + r.below(2)), small_dim(r, k),
                                  small_dim(r, k)});
         auto w = rand_tensor(r, {groups * static_cast<std::int64_t>(1 + r.below(3)), x.dim(1) / groups, k, k});
         auto b = rand_tensor(r, {w.dim(0)});
         const auto stride = static_cast<std::int64_t>(1 + r.below(2));
         const auto pad = static_cast<std::int64_t>(r.below(k));
         p.params = {{"x", x}, {"w", w}, {"b", b}};
         p.loss = [=] { return weighted(conv2d(x, w, b, {stride, pad, groups}), 8); };
       }},
      {"depthwise_conv2d",
       [](Rng& r, GradProblem& p) {
         auto x = rand_tensor(r, {2, small_dim(r), small_dim(r, 3), small_dim(r, 3)});
         auto w = rand_tensor(r, {x.dim(1), 1, 3, 3});
         auto b = rand_tensor(r, {x.dim(1)});
         p.params = {{"x", x}, {"w", w}, {"b", b}};
         p.loss = [=] { return weighted(conv2d(x, w, b, {1, 1, x.dim(1)}), 9); };
       }},
      {"pool2d",
       [](Rng& r, GradProblem& p) {
         auto x = separated_tensor(r, {small_dim(r), small_dim(r), small_dim(r, 2), small_dim(r, 2)});
         p.params = {{"x", x}};
         p.loss = [x] {
           auto a = pool2d(x, PoolKind::Avg);
           auto m = pool2d(x, PoolKind::Max);
           auto wa = pool2d(x, PoolKind::Avg, PoolWindow{2, 2, 1});
           auto wm = pool2d(x, PoolKind::Max, PoolWindow{2, 2, 2});
           return add(add(weighted(a, 10), weighted(m, 11)), add(weighted(wa, 12), weighted(wm, 13)));
         };
       }},
      {"reduce_channel",
       [](Rng& r, GradProblem& p) {
         auto x = separated_tensor(r, {small_dim(r), small_dim(r), small_dim(r), small_dim(r)});
         p.params = {{"x", x}};
         p.loss = [x] {
           return add(weighted(reduce_channel(x, PoolKind::Avg), 14), weighted(reduce_channel(x, PoolKind::Max), 15));
         };
       }},
      {"bilinear_resize",
       [](Rng& r, GradProblem& p) {
         auto x = rand_tensor(r, {small_dim(r), small_dim(r), small_dim(r), small_dim(r)});
         const std::int64_t oh = small_dim(r);
         const auto ow = static_cast<std::int64_t>(1 + r.below(12));
         p.params = {{"x", x}};
         p.loss = [=] { return weighted(bilinear_resize(x, oh, ow), 16); };
       }},
      {"softmax",
       [](Rng& r, GradProblem& p) {
         auto x = rand_tensor(r, {small_dim(r), small_dim(r, 2), small_dim(r)}, -3, 3);
         const int axis = static_cast<int>(r.below(3));
         p.params = {{"x", x}};
         p.loss = [=] { return weighted(softmax(x, axis), 17); };
       }},
      {"layer_norm",
       [](Rng& r, GradProblem& p) {
         auto x = rand_tensor(r, {small_dim(r), small_dim(r), small_dim(r, 3)}, -4, 4);
         auto g = rand_tensor(r, {x.dim(2)});
         auto b = rand_tensor(r, {x.dim(2)});
         p.params = {{"x", x}, {"gamma", g}, {"beta", b}};
         p.loss = [=] { return weighted(layer_norm(x, g, b), 18); };
       }},
      {"sum_mean",
       [](Rng& r, GradProblem& p) {
         auto x = rand_tensor(r, {small_dim(r), small_dim(r)});
         p.params = {{"x", x}};
         p.loss = [x] { return add(mean(x), mul_scalar(sum(mul(x, x)), 0.5)); };
       }},
      {"cross_entropy",
       [](Rng& r, GradProblem& p) {
         const std::int64_t b = small_dim(r), k = small_dim(r, 2), h = small_dim(r), w = small_dim(r);
         auto x = rand_tensor(r, {b, k, h, w}, -3, 3);
         std::vector<int> labels(b * h * w);
         for (int& l : labels) l = static_cast<int>(r.below(static_cast<std::uint64_t>(k)));
         p.params = {{"logits", x}};
         p.loss = [x, labels] { return cross_entropy(x, labels); };
       }},
  };
  return cases;
}

// Overwrites every non-LayerNorm parameter with uniform(-scale, scale) keyed by name.
void redraw(ParameterRegistry& reg, double scale) {
  for (const auto& e : reg.entries()) {
    if (e.name.find("gamma") != std::string::npos || e.name.find("beta") != std::string::npos) continue;
    Tensor t = e.tensor;
    auto fresh = Tensor::uniform(t.shape(), fnv1a64(e.name), -scale, scale);
    std::copy(fresh.data().begin(), fresh.data().end(), t.mutable_data().begin());
  }
}

GradCheckOptions sampled(std::size_t coords) {
  GradCheckOptions o;
  o.max_coords_per_param = coords;
  return o;
}

}  // namespace

std::vector<std::string> primitive_problem_names() {
  std::vector<std::string> out;
  for (const auto& c : primitive_cases()) out.emplace_back(c.name);
  return out;
}

GradProblem primitive_problem(const std::string& name, std::uint64_t seed) {
  for (const auto& c : primitive_cases()) {
    if (name == c.name) {
      Rng rng(derive_seed(seed, c.name));
      GradProblem p;
      c.build(rng, p);
      return p;
    }
  }
  throw ContractError("unknown primitive gradient problem '" + name + "'");
}

GradProblem cbam_block_problem() {
  const CbamSpec spec{2, 3};
  auto cbam = CbamParams::from_tensors(4, spec, Tensor::uniform({2, 4}, 50, -0.5, 0.5),
                                       Tensor::uniform({4, 2}, 51, -0.5, 0.5),
                                       Tensor::uniform({1, 2, 3, 3}, 52, -0.5, 0.5));
  std::vector<double> v(2 * 4 * 5 * 5);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = -1.0 + 0.01 * static_cast<double>(i);
  Rng rng(51);
  for (std::size_t i = v.size() - 1; i > 0; --i) std::swap(v[i], v[rng.below(i + 1)]);
  Tensor f({2, 4, 5, 5}, v);
  f.set_requires_grad(true);
  auto w = probe(f.shape(), 52);
  GradProblem p;
  p.params = {{"f", f}, {"mlp_reduce", cbam.mlp_reduce}, {"mlp_expand", cbam.mlp_expand},
              {"spatial", cbam.spatial_weight}};
  p.loss = [f, cbam, w] { return sum(mul(cbam_apply(f, cbam).refined, w)); };
  return p;
}

GradProblem encoder_stage_problem() {
  struct State {
    ParameterRegistry reg;
    MitEncoder enc;
  };
  auto st = std::make_shared<State>();
  ParamFactory f(st->reg, 3);
  StageConfig cfg{8, 1, 2, 2, 3, 2, 1, 2};
  std::array<StageConfig, 4> all{cfg, cfg, cfg, cfg};
  all[0].patch_kernel = 7;
  all[0].patch_stride = 4;
  all[0].patch_padding = 3;
  st->enc = MitEncoder::create(all, {CbamSpec{4, 3}, CbamSpec{4, 3}, CbamSpec{4, 3}, CbamSpec{4, 3}}, 3, f);
  redraw(st->reg, 0.3);
  auto image = Tensor::uniform({1, 3, 32, 32}, 70, 0.0, 1.0);
  auto w = Tensor::uniform({1, 8, 8, 8}, 71, -1.0, 1.0);
  GradProblem p;
  for (const auto& e : st->reg.entries()) {
    if (e.name.rfind("encoder.stage1.", 0) == 0) p.params.push_back(e);
  }
  p.params.push_back({"image", image.set_requires_grad(true)});
  p.loss = [st, image, w] { return mean(mul(stage_forward(image, st->enc.stages()[0]), w)); };
  p.options = sampled(12);
  return p;
}

GradProblem decoder_problem() {
  struct State {
    ParameterRegistry reg;
    HamDecoder dec;
    FeaturePyramid pyramid;
  };
  auto st = std::make_shared<State>();
  ParamFactory f(st->reg, 0);
  HamConfig ham;
  ham.latent_rank = 8;
  ham.mu_iterations = 2;
  ham.context_channels = 16;
  const std::array<std::int64_t, 4> ch{4, 6, 8, 8};
  st->dec = HamDecoder::create(ch, 6, CbamSpec{4, 3}, CbamSpec{4, 3}, ham, f);
  for (const auto& e : st->reg.entries()) {
    Tensor t = e.tensor;
    auto fresh = Tensor::uniform(t.shape(), fnv1a64(e.name), -0.5, 0.5);
    std::copy(fresh.data().begin(), fresh.data().end(), t.mutable_data().begin());
  }
  // Squeeze pre-activations stay >= 0.5 from the relu hinge: |W x| <= 26 * 0.02 while |bias| >= 1.
  {
    Tensor w = st->dec.weights().squeeze_weight;
    for (double& v : w.mutable_data()) v *= 0.04;
    Tensor b = st->dec.weights().squeeze_bias;
    auto bd = b.mutable_data();
    for (std::size_t c = 0; c < bd.size(); ++c) bd[c] = (c % 2 == 0 ? 1.0 : -1.0) * (1.0 + 0.1 * static_cast<double>(c));
  }
  for (int i = 0; i < 4; ++i) {
    const std::int64_t s = 32 / (4 << i);
    st->pyramid.levels[i] = Tensor::uniform({1, ch[i], s, s}, 40 + i, -1.0, 1.0);
  }
  auto w = probe({1, 6, 32, 32}, 41);
  GradProblem p;
  p.params = st->reg.entries();
  for (int i = 0; i < 4; ++i) {
    p.params.push_back({"F" + std::to_string(i + 1), st->pyramid.levels[i].set_requires_grad(true)});
  }
  p.loss = [st, w] { return mean(mul(st->dec.forward(st->pyramid, 32, 32), w)); };
  p.options = sampled(10);
  return p;
}

GradProblem end_to_end_problem() {
  auto model = std::make_shared<Model>(Model::create(ModelConfig::reduced()));
  redraw(model->parameters(), 0.3);
  {
    Tensor w = model->decoder().weights().squeeze_weight;
    for (double& v : w.mutable_data()) v *= 0.3;
    Tensor b = model->decoder().weights().squeeze_bias;
    auto bd = b.mutable_data();
    for (std::size_t c = 0; c < bd.size(); ++c) bd[c] = (c % 2 == 0 ? 1.0 : -1.0) * (1.0 + 0.05 * static_cast<double>(c));
  }
  // A bright square of class 1 on dark noise.
  const std::int64_t size = 32;
  std::vector<double> px(3 * size * size);
  std::vector<int> labels(size * size, 0);
  Rng rng(13);
  for (std::int64_t y = 0; y < size; ++y)
    for (std::int64_t x = 0; x < size; ++x) {
      const bool inside = y >= size / 4 && y < 3 * size / 4 && x >= size / 4 && x < 3 * size / 4;
      if (inside) labels[y * size + x] = 1;
      for (std::int64_t c = 0; c < 3; ++c) {
        const double base = inside ? 0.3 + 0.3 * static_cast<double>(c % 3) : 0.1;
        px[(c * size + y) * size + x] = base + 0.05 * rng.uniform();
      }
    }
  Tensor image({1, 3, size, size}, std::move(px));
  GradProblem p;
  p.params = model->parameters().entries();
  p.params.push_back({"image", image.set_requires_grad(true)});
  p.loss = [model, image, labels] { return cross_entropy(model->forward(image), labels); };
  p.options = sampled(6);
  return p;
}

std::vector<GradSuiteEntry> run_grad_suite(GradSuiteLevel level,
                                           const std::function<void(const GradSuiteEntry&)>& on_entry) {
  std::vector<GradSuiteEntry> out;
  auto run = [&](const std::string& name, const GradProblem& p) {
    const auto t0 = std::chrono::steady_clock::now();
    GradSuiteEntry e{name, grad_check(p.loss, p.params, p.options), 0.0};
    e.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (on_entry) on_entry(e);
    out.push_back(std::move(e));
  };
  const int seeds = level == GradSuiteLevel::Quick ? 3 : 10;
  for (const auto& name : primitive_problem_names()) {
    for (int s = 0; s < seeds; ++s) run("op." + name + ".seed" + std::to_string(s), primitive_problem(name, s));
  }
  run("cbam_block", cbam_block_problem());
  if (level == GradSuiteLevel::Full) {
    run("encoder_stage", encoder_stage_problem());
    run("decoder", decoder_problem());
    run("end_to_end", end_to_end_problem());
  }
  return out;
}

}  // namespace armformer
