// Acceptance run: one PASS/FAIL line per criterion. A criterion passes only
// when its checks hold and it finishes inside its time bound.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <set>
#include <sstream>
#include <string>

#include "armformer/cbam.hpp"
#include "armformer/cli.hpp"
#include "armformer/datapipe.hpp"
#include "armformer/gradsuite.hpp"
#include "armformer/metrics.hpp"
#include "armformer/model.hpp"
#include "armformer/ops.hpp"
#include "armformer/profiler.hpp"
#include "armformer/random.hpp"
#include "metric_oracle.hpp"

using namespace armformer;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool ok = true;
  std::string detail;

  void check(bool cond, const std::string& what) {
    if (!cond && ok) detail = what;
    ok = ok && cond;
  }
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// Shared between the overfit and determinism criteria.
struct OverfitRun {
  std::vector<std::uint8_t> checkpoint;
  std::vector<HistoryEntry> history;
  double seconds = 0.0;
};

OverfitRun overfit_run() {
  const auto t0 = std::chrono::steady_clock::now();
  auto data = synth_dataset(0, 8, 64);
  auto model = Model::create(ModelConfig::reduced());
  TrainSchedule sched;
  sched.steps = 300;
  sched.batch_size = 8;
  sched.seed = 0;
  OverfitRun r;
  r.history = fit(model, data, sched);
  r.checkpoint = checkpoint_save(model);
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

Tensor permute_pixels(const Tensor& f, Rng& rng) {
  const auto& s = f.shape();
  const std::int64_t hw = s[2] * s[3];
  std::vector<std::int64_t> perm(hw);
  for (std::int64_t i = 0; i < hw; ++i) perm[i] = i;
  for (std::int64_t i = hw - 1; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
  std::vector<double> out(f.numel());
  for (std::int64_t p = 0; p < s[0] * s[1]; ++p)
    for (std::int64_t i = 0; i < hw; ++i) out[p * hw + i] = f.data()[p * hw + perm[i]];
  return Tensor(s, out);
}

Tensor permute_channels(const Tensor& f, Rng& rng) {
  const auto& s = f.shape();
  const std::int64_t c = s[1], hw = s[2] * s[3];
  std::vector<std::int64_t> perm(c);
  for (std::int64_t i = 0; i < c; ++i) perm[i] = i;
  for (std::int64_t i = c - 1; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
  std::vector<double> out(f.numel());
  for (std::int64_t b = 0; b < s[0]; ++b)
    for (std::int64_t k = 0; k < c; ++k)
      for (std::int64_t i = 0; i < hw; ++i) out[(b * c + k) * hw + i] = f.data()[(b * c + perm[k]) * hw + i];
  return Tensor(s, out);
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

Outcome shape_contract() {
  Outcome o;
  auto model = Model::create(ModelConfig::defaults());
  NoGradGuard guard;
  const std::array<std::int64_t, 4> channels{32, 64, 160, 256}, strides{4, 8, 16, 32};
  for (std::int64_t s : {64, 640}) {
    const std::int64_t b = s == 64 ? 2 : 1;
    auto x = Tensor::uniform({b, 3, s, s}, 1, 0.0, 1.0);
    auto pyr = model.encode(x);
    for (int i = 0; i < 4; ++i) {
      o.check(pyr[i].shape() == Shape{b, channels[i], s / strides[i], s / strides[i]},
              "pyramid level " + std::to_string(i + 1) + " at " + std::to_string(s) + " is " + shape_str(pyr[i].shape()));
    }
    auto logits = model.decoder().forward(pyr, s, s);
    o.check(logits.shape() == Shape{b, 6, s, s}, "logits at " + std::to_string(s) + " are " + shape_str(logits.shape()));
  }
  if (o.ok) o.detail = "pyramid (32,64,160,256) at 1/4..1/32 and logits [B,6,H,W] at 64 and 640";
  return o;
}

Outcome cbam_invariants() {
  Outcome o;
  double worst_perm = 0.0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    const std::int64_t c = 1 + static_cast<std::int64_t>(rng.below(24));
    const CbamSpec spec{1 + static_cast<int>(rng.below(16)), 1 + 2 * static_cast<int>(rng.below(4))};
    const std::int64_t hidden = cbam_hidden_width(c, spec.reduction_ratio), k = spec.spatial_kernel;
    auto p = CbamParams::from_tensors(c, spec, Tensor::uniform({hidden, c}, seed * 5 + 1, -1, 1),
                                      Tensor::uniform({c, hidden}, seed * 5 + 2, -1, 1),
                                      Tensor::uniform({1, 2, k, k}, seed * 5 + 3, -1, 1));
    const std::int64_t b = 1 + static_cast<std::int64_t>(rng.below(2));
    const std::int64_t h = 1 + static_cast<std::int64_t>(rng.below(8)), w = 1 + static_cast<std::int64_t>(rng.below(8));
    auto f = Tensor::uniform({b, c, h, w}, seed * 5 + 4, -3, 3);
    auto r = cbam_apply(f, p);
    for (double v : r.maps.channel.data()) o.check(v > 0.0 && v < 1.0, "channel gate outside (0,1) at seed " + std::to_string(seed));
    for (double v : r.maps.spatial.data()) o.check(v > 0.0 && v < 1.0, "spatial gate outside (0,1) at seed " + std::to_string(seed));
    for (std::int64_t i = 0; i < f.numel(); ++i)
      o.check(std::abs(r.refined.data()[i]) <= std::abs(f.data()[i]), "|F_out| > |F| at seed " + std::to_string(seed));

    const double dc = max_abs_diff(channel_attention(f, p), channel_attention(permute_pixels(f, rng), p));
    // Spatial gate of F' = M_c (x) F under a channel permutation of F'.
    std::vector<double> fp(f.numel());
    const std::int64_t hw = h * w;
    for (std::int64_t i = 0; i < f.numel(); ++i) fp[i] = f.data()[i] * r.maps.channel.data()[i / hw];
    Tensor f_prime(f.shape(), fp);
    const double ds = max_abs_diff(spatial_attention(f_prime, p), spatial_attention(permute_channels(f_prime, rng), p));
    worst_perm = std::max({worst_perm, dc, ds});
    o.check(dc <= 1e-12, "M_c not spatial-permutation invariant at seed " + std::to_string(seed) + ": " + fmt("%.2e", dc));
    o.check(ds <= 1e-12, "M_s not channel-permutation invariant at seed " + std::to_string(seed) + ": " + fmt("%.2e", ds));
  }
  if (o.ok) o.detail = "100 seeds, gates in (0,1), attenuation holds, max permutation deviation " + fmt("%.1e", worst_perm);
  return o;
}

Outcome gradient_suite() {
  Outcome o;
  int n = 0;
  double worst = 0.0;
  std::string worst_name;
  run_grad_suite(GradSuiteLevel::Full, [&](const GradSuiteEntry& e) {
    ++n;
    o.check(e.report.pass, e.name + " failed: " + e.report.summary());
    if (e.report.max_rel_error >= worst) {
      worst = e.report.max_rel_error;
      worst_name = e.name;
    }
  });
  if (o.ok) o.detail = std::to_string(n) + " checks at eps 1e-3, tol 1e-4; worst " + worst_name + " " + fmt("%.2e", worst);
  return o;
}

Outcome loss_identities() {
  Outcome o;
  std::vector<int> labels(2 * 4 * 4);
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>(i % 6);
  const double uniform = cross_entropy(Tensor::zeros({2, 6, 4, 4}), labels).item();
  o.check(std::abs(uniform - std::log(6.0)) <= 1e-9, "uniform logits give " + fmt("%.17g", uniform));

  std::vector<double> v(2 * 6 * 16, 0.0);
  for (std::int64_t n = 0; n < 2; ++n)
    for (std::int64_t p = 0; p < 16; ++p) v[(n * 6 + labels[n * 16 + p]) * 16 + p] = 40.0;
  const double saturated = cross_entropy(Tensor({2, 6, 4, 4}, v), labels).item();
  o.check(saturated < 1e-12, "saturated logits give " + fmt("%.3e", saturated));

  const double hand = cross_entropy(Tensor({1, 2, 1, 1}, {0.0, std::log(3.0)}), std::vector<int>{1}).item();
  o.check(std::abs(hand + std::log(0.75)) <= 1e-9, "2-class case gives " + fmt("%.17g", hand));
  if (o.ok) o.detail = "ln 6, saturated " + fmt("%.1e", saturated) + ", -ln 0.75";
  return o;
}

Outcome metrics_oracle() {
  Outcome o;
  Rng rng(2024);
  double worst_identity = 0.0;
  for (int k = 0; k < 200; ++k) {
    std::vector<int> gt(256), pred(256);
    const int classes = 1 + static_cast<int>(rng.below(kNumClasses));
    for (auto& g : gt) g = static_cast<int>(rng.below(classes));
    for (std::size_t i = 0; i < gt.size(); ++i) pred[i] = rng.uniform() < 0.7 ? gt[i] : static_cast<int>(rng.below(classes));
    for (bool bg : {true, false}) {
      auto report = compute_metrics(confusion_accumulate(ConfusionMatrix{}, pred, gt), bg);
      auto oracle = armformer::testing::brute_force_metrics({pred}, {gt}, kNumClasses, bg);
      for (int c = 0; c < kNumClasses; ++c) {
        const auto& m = report.classes[c];
        o.check(m.iou == oracle.classes[c].iou && m.acc == oracle.classes[c].acc && m.fscore == oracle.classes[c].fscore,
                "pair " + std::to_string(k) + " class " + std::to_string(c) + " differs from oracle");
        if (m.iou) worst_identity = std::max(worst_identity, std::abs(*m.fscore - 2 * *m.iou / (1 + *m.iou)));
      }
      o.check(report.mean_iou == oracle.miou && report.mean_acc == oracle.macc && report.mean_fscore == oracle.mfscore,
              "pair " + std::to_string(k) + " means differ from oracle");
    }
  }
  o.check(worst_identity <= 1e-12, "F = 2 IoU/(1+IoU) off by " + fmt("%.2e", worst_identity));
  if (o.ok) o.detail = "200 pairs exact; max |F - 2IoU/(1+IoU)| " + fmt("%.1e", worst_identity);
  return o;
}

Outcome nmf_monotone() {
  Outcome o;
  HamConfig cfg;
  cfg.latent_rank = 8;
  cfg.mu_iterations = 6;
  cfg.context_channels = 32;
  double min_entry = std::numeric_limits<double>::infinity();
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    cfg.seed = seed;
    auto z = Tensor::uniform({2, 32, 48}, 5000 + seed, 0.0, 1.0);
    NmfTrace trace;
    nmf_multiplicative(z, cfg, &trace);
    for (const auto& e : trace.errors) {
      o.check(e.size() == 7, "expected K+1 errors");
      for (std::size_t k = 1; k < e.size(); ++k)
        o.check(e[k] <= e[k - 1] + 1e-9, "error rose at seed " + std::to_string(seed) + " step " + std::to_string(k));
    }
    min_entry = std::min(min_entry, trace.min_factor_entry);
  }
  o.check(min_entry >= 0.0, "negative factor entry " + fmt("%.3e", min_entry));
  if (o.ok) o.detail = "100 seeds, K=6, R=8; min factor entry " + fmt("%.2e", min_entry);
  return o;
}

Outcome mask_codec(const fs::path& scratch) {
  Outcome o;
  std::vector<int> ids{0, 1, 2, 3, 4, 5};
  auto bytes = encode_mask(ids);
  o.check(bytes == std::vector<std::uint8_t>{0, 51, 102, 153, 204, 255}, "palette bytes wrong");
  o.check(decode_mask(bytes) == ids, "palette round trip failed");

  const auto root = scratch / "codec";
  fs::remove_all(root);
  write_dataset(DatasetLayout{root.string()}, synth_dataset(0, 10, 64), default_split(10));
  for (const auto& s : load_split(DatasetLayout{root.string()}, "train", 64))
    for (int l : s.labels) o.check(l >= 0 && l < kNumClasses, "decoded synthetic label out of range");

  const auto ckpt = (scratch / "codec.ckpt").string();
  write_file_bytes(ckpt, checkpoint_save(Model::create(ModelConfig::reduced())));
  const auto out = (scratch / "codec.pgm").string();
  std::ostringstream sink;
  const int code = cli::run({"infer", "--ckpt", ckpt, "--image", DatasetLayout{root.string()}.image_path("0003"), "--out", out},
                            sink, sink);
  o.check(code == 0, "infer exited " + std::to_string(code) + ": " + sink.str());
  if (code == 0) {
    const std::set<int> palette{0, 51, 102, 153, 204, 255};
    for (auto b : read_pgm(out).pixels) o.check(palette.count(b) == 1, "infer wrote byte " + std::to_string(b));
  }
  if (o.ok) o.detail = "palette exact, synthetic ids in [0,6), infer bytes within palette";
  return o;
}

Outcome overfit(const OverfitRun& run) {
  Outcome o;
  auto model = checkpoint_load(run.checkpoint);
  auto data = synth_dataset(0, 8, 64);
  auto cm = evaluate_confusion(model, data);
  const double loss = run.history.back().loss, acc = pixel_accuracy(cm), miou = compute_metrics(cm).mean_iou;
  o.check(loss < 0.05, "final loss " + fmt("%.4f", loss) + " >= 0.05");
  o.check(acc >= 0.98, "pixel accuracy " + fmt("%.4f", acc) + " < 0.98");
  o.check(miou >= 0.90, "mIoU " + fmt("%.4f", miou) + " < 0.90");
  o.detail = (o.ok ? "" : o.detail + "; ") + "loss " + fmt("%.4f", loss) + ", pixel acc " + fmt("%.4f", acc) + ", mIoU " +
             fmt("%.4f", miou);
  return o;
}

Outcome complexity() {
  Outcome o;
  o.check(conv2d_params(512, 256, 1, 1, true) == 131328, "1x1 conv 512->256 params");
  o.check(conv2d_macs(1, 1, 3, 1, 8, 8) == 576, "3x3 conv 8x8 MACs");
  {
    MacTally t;
    conv2d(Tensor::uniform({1, 1, 8, 8}, 1, -1, 1), Tensor::uniform({1, 1, 3, 3}, 2, -1, 1), std::nullopt,
           {.stride = 1, .padding = 1});
    o.check(t.count() == 576, "executed 3x3 conv MACs " + std::to_string(t.count()));
  }
  auto model = Model::create(ModelConfig::defaults());
  const auto a = count_flops(model, 128, 128), b = count_flops(model, 256, 256);
  for (const auto& m : a.modules) {
    if (m.name == "decoder.squeeze" || m.name == "decoder.cls" || m.name.ends_with(".dw") || m.name.ends_with("patch_embed.proj")) {
      auto it = std::find_if(b.modules.begin(), b.modules.end(), [&](const ModuleCost& x) { return x.name == m.name; });
      o.check(it != b.modules.end() && it->flops == 4 * m.flops, m.name + " does not scale by 4");
    }
  }
  {
    NoGradGuard guard;
    MacTally t;
    model.forward(Tensor::uniform({1, 3, 64, 64}, 3, 0, 1));
    o.check(t.count() == count_flops(model, 64, 64).total_flops, "analytic FLOPs differ from executed MACs at 64");
  }
  const auto params = count_params(model).total_params;
  const auto flops = count_flops(model, 640, 640).total_flops;
  o.check(params >= 3'000'000 && params <= 4'500'000, "params " + std::to_string(params) + " outside [3.0M, 4.5M]");
  o.check(flops >= 2'000'000'000LL && flops <= 10'000'000'000LL, "FLOPs at 640 " + fmt("%.3fG", flops / 1e9) + " outside [2G, 10G]");
  o.detail = (o.ok ? "fixtures exact; " : o.detail + "; ") + "params " + fmt("%.3fM", params / 1e6) + ", FLOPs@640 " +
             fmt("%.3fG", flops / 1e9);
  return o;
}

Outcome determinism(const OverfitRun& first) {
  Outcome o;
  auto second = overfit_run();
  o.check(first.checkpoint == second.checkpoint, "checkpoints differ");
  bool same = first.history.size() == second.history.size();
  for (std::size_t i = 0; same && i < first.history.size(); ++i)
    same = std::memcmp(&first.history[i].loss, &second.history[i].loss, sizeof(double)) == 0;
  o.check(same, "loss histories differ");
  if (o.ok) o.detail = "checkpoints (" + std::to_string(first.checkpoint.size()) + " bytes) and 300-step histories bit-identical";
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  auto wanted = [&](int n) { return only.empty() || only.count(n) > 0; };

  const fs::path scratch = fs::temp_directory_path() / "armformer_acceptance";
  fs::create_directories(scratch);

  int failures = 0;
  double overfit_seconds = 0.0;
  std::optional<OverfitRun> overfit_result;
  auto report = [&](int n, const char* name, double limit_s, const std::function<Outcome()>& body) {
    if (!wanted(n)) return;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = body();
    } catch (const std::exception& e) {
      o.ok = false;
      o.detail = std::string("exception: ") + e.what();
    }
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = s <= limit_s;
    const bool pass = o.ok && in_time;
    failures += pass ? 0 : 1;
    std::printf("criterion %2d %s  %-22s %s; %.2f s (limit %.0f s)%s\n", n, pass ? "PASS" : "FAIL", name, o.detail.c_str(), s,
                limit_s, in_time ? "" : " TIME EXCEEDED");
    std::fflush(stdout);
  };

  report(1, "shape contract", 1.0, shape_contract);
  report(2, "cbam invariants", 10.0, cbam_invariants);
  report(3, "gradient suite", 300.0, gradient_suite);
  report(4, "loss identities", 1.0, loss_identities);
  report(5, "metrics oracle", 30.0, metrics_oracle);
  report(6, "ham/nmf", 30.0, nmf_monotone);
  report(7, "mask codec", 5.0, [&] { return mask_codec(scratch); });
  report(8, "overfit reproduction", 600.0, [&] {
    overfit_result = overfit_run();
    overfit_seconds = overfit_result->seconds;
    return overfit(*overfit_result);
  });
  report(9, "complexity accounting", 30.0, complexity);
  if (wanted(10)) {
    if (!overfit_result) {
      overfit_result = overfit_run();
      overfit_seconds = overfit_result->seconds;
    }
    report(10, "determinism", 2.0 * overfit_seconds, [&] { return determinism(*overfit_result); });
  }
  fs::remove_all(scratch);
  std::printf("%d criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
