#include "armformer/profiler.hpp"

#include <sys/utsname.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>

#include "armformer/errors.hpp"
#include "armformer/ops.hpp"

namespace armformer {

std::int64_t conv2d_params(std::int64_t cin, std::int64_t cout, std::int64_t kernel, std::int64_t groups, bool bias) {
  return kernel * kernel * (cin / groups) * cout + (bias ? cout : 0);
}

std::int64_t conv2d_macs(std::int64_t cin, std::int64_t cout, std::int64_t kernel, std::int64_t groups,
                         std::int64_t out_h, std::int64_t out_w) {
  return kernel * kernel * (cin / groups) * cout * out_h * out_w;
}

std::int64_t linear_params(std::int64_t in, std::int64_t out, bool bias) { return in * out + (bias ? out : 0); }

std::int64_t linear_macs(std::int64_t in, std::int64_t out, std::int64_t tokens) { return in * out * tokens; }

std::int64_t attention_macs(std::int64_t queries, std::int64_t keys, std::int64_t channels) {
  return 2 * queries * keys * channels;
}

std::int64_t nmf_macs(std::int64_t channels, std::int64_t tokens, std::int64_t rank, std::int64_t iterations) {
  const std::int64_t c = channels, n = tokens, r = rank;
  const std::int64_t per_round = 2 * r * c * n + 2 * r * r * n + 2 * r * r * c;
  return iterations * per_round + c * r * n;
}

namespace {

std::string layer_of(const std::string& param_name) {
  const auto dot = param_name.rfind('.');
  return dot == std::string::npos ? param_name : param_name.substr(0, dot);
}

void finish_totals(ComplexityReport& r) {
  r.total_params = 0;
  r.total_flops = 0;
  for (const auto& m : r.modules) {
    r.total_params += m.params;
    r.total_flops += m.flops;
  }
}

class FlopSheet {
 public:
  void add(const std::string& name, std::int64_t flops) { rows_.push_back({name, 0, flops}); }
  std::vector<ModuleCost> take() { return std::move(rows_); }

 private:
  std::vector<ModuleCost> rows_;
};

void cbam_flops(FlopSheet& s, const std::string& prefix, std::int64_t c, CbamSpec spec, std::int64_t h,
                std::int64_t w) {
  const std::int64_t hidden = cbam_hidden_width(c, spec.reduction_ratio);
  // Average- and max-pooled descriptors each pass through the shared MLP.
  s.add(prefix + ".mlp", 2 * (linear_macs(c, hidden, 1) + linear_macs(hidden, c, 1)));
  s.add(prefix + ".spatial", conv2d_macs(2, 1, spec.spatial_kernel, 1, h, w));
}

}  // namespace

ComplexityReport count_params(const ParameterRegistry& registry) {
  ComplexityReport r;
  std::map<std::string, std::size_t> index;
  for (const auto& e : registry.entries()) {
    const auto layer = layer_of(e.name);
    auto [it, inserted] = index.try_emplace(layer, r.modules.size());
    if (inserted) r.modules.push_back({layer, 0, 0});
    r.modules[it->second].params += e.tensor.numel();
  }
  finish_totals(r);
  return r;
}

ComplexityReport count_params(const Model& model) { return count_params(model.parameters()); }

ComplexityReport count_flops(const ModelConfig& cfg, std::int64_t h, std::int64_t w) {
  cfg.validate();
  if (h <= 0 || w <= 0 || h % 32 != 0 || w % 32 != 0)
    throw ShapeError("count_flops: input " + std::to_string(h) + "x" + std::to_string(w) +
                     " is not a positive multiple of 32");
  FlopSheet s;
  std::int64_t cin = cfg.in_channels, hh = h, ww = w;
  std::array<std::int64_t, 4> stage_h{}, stage_w{};
  for (int i = 0; i < 4; ++i) {
    const auto& st = cfg.stages[i];
    const std::string sp = "encoder.stage" + std::to_string(i + 1);
    const std::int64_t c = st.embed_channels;
    const std::int64_t ho = conv_output_size(hh, st.patch_kernel, st.patch_stride, st.patch_padding);
    const std::int64_t wo = conv_output_size(ww, st.patch_kernel, st.patch_stride, st.patch_padding);
    s.add(sp + ".patch_embed.proj", conv2d_macs(cin, c, st.patch_kernel, 1, ho, wo));
    const std::int64_t n = ho * wo;
    for (std::int64_t b = 0; b < st.depth; ++b) {
      const std::string bp = sp + ".block" + std::to_string(b + 1);
      std::int64_t keys = n;
      s.add(bp + ".attn.q", linear_macs(c, c, n));
      if (st.sr_ratio > 1) {
        const std::int64_t rh = conv_output_size(ho, st.sr_ratio, st.sr_ratio, 0);
        const std::int64_t rw = conv_output_size(wo, st.sr_ratio, st.sr_ratio, 0);
        s.add(bp + ".attn.sr", conv2d_macs(c, c, st.sr_ratio, 1, rh, rw));
        keys = rh * rw;
      }
      s.add(bp + ".attn.k", linear_macs(c, c, keys));
      s.add(bp + ".attn.v", linear_macs(c, c, keys));
      s.add(bp + ".attn.scores", attention_macs(n, keys, c));
      s.add(bp + ".attn.proj", linear_macs(c, c, n));
      const std::int64_t hidden = c * st.ffn_expansion;
      s.add(bp + ".ffn.fc1", linear_macs(c, hidden, n));
      s.add(bp + ".ffn.dw", conv2d_macs(hidden, hidden, 3, hidden, ho, wo));
      s.add(bp + ".ffn.fc2", linear_macs(hidden, c, n));
    }
    cbam_flops(s, sp + ".cbam", c, cfg.encoder_cbam[i], ho, wo);
    stage_h[i] = ho;
    stage_w[i] = wo;
    cin = c;
    hh = ho;
    ww = wo;
  }

  const auto pc = cfg.pyramid_channels();
  const std::int64_t fused = pc[0] + pc[1] + pc[2] + pc[3];
  const std::int64_t ctx = cfg.ham.context_channels;
  const std::int64_t dh = stage_h[0], dw = stage_w[0], dn = dh * dw;
  cbam_flops(s, "decoder.cbam1", fused, cfg.decoder_cbam1, dh, dw);
  s.add("decoder.squeeze", conv2d_macs(fused, ctx, 1, 1, dh, dw));
  s.add("decoder.ham.nmf", nmf_macs(ctx, dn, cfg.ham.latent_rank, cfg.ham.mu_iterations));
  s.add("decoder.ham.out", conv2d_macs(ctx, ctx, 1, 1, dh, dw));
  cbam_flops(s, "decoder.cbam2", ctx, cfg.decoder_cbam2, dh, dw);
  s.add("decoder.cls", conv2d_macs(ctx, cfg.num_classes, 1, 1, dh, dw));

  ComplexityReport r;
  r.input_height = h;
  r.input_width = w;
  r.modules = s.take();
  finish_totals(r);
  return r;
}

ComplexityReport count_flops(const Model& model, std::int64_t h, std::int64_t w) {
  return count_flops(model.config(), h, w);
}

ComplexityReport profile_complexity(const Model& model, std::int64_t h, std::int64_t w) {
  auto r = count_flops(model, h, w);
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < r.modules.size(); ++i) index[r.modules[i].name] = i;
  for (const auto& m : count_params(model).modules) {
    auto it = index.find(m.name);
    if (it == index.end()) {
      index[m.name] = r.modules.size();
      r.modules.push_back(m);
    } else {
      r.modules[it->second].params += m.params;
    }
  }
  finish_totals(r);
  return r;
}

ComplexityReport group_modules(const ComplexityReport& report, int depth) {
  ComplexityReport r = report;
  r.modules.clear();
  std::map<std::string, std::size_t> index;
  for (const auto& m : report.modules) {
    std::size_t pos = std::string::npos;
    for (int d = 0; d < depth; ++d) {
      pos = m.name.find('.', d == 0 ? 0 : pos + 1);
      if (pos == std::string::npos) break;
    }
    const auto key = pos == std::string::npos ? m.name : m.name.substr(0, pos);
    auto [it, inserted] = index.try_emplace(key, r.modules.size());
    if (inserted) r.modules.push_back({key, 0, 0});
    r.modules[it->second].params += m.params;
    r.modules[it->second].flops += m.flops;
  }
  finish_totals(r);
  return r;
}

std::string host_descriptor() {
  std::string cpu = "unknown cpu";
  std::ifstream info("/proc/cpuinfo");
  for (std::string line; std::getline(info, line);) {
    if (line.rfind("model name", 0) == 0) {
      const auto colon = line.find(':');
      if (colon != std::string::npos) cpu = line.substr(line.find_first_not_of(' ', colon + 1));
      break;
    }
  }
  std::string os = "unknown os";
  utsname u{};
  if (uname(&u) == 0) os = std::string(u.sysname) + " " + u.release + " " + u.machine;
  return os + "; " + cpu + "; 1 BLAS thread";
}

SpeedReport measure_fps(const Model& model, std::int64_t h, std::int64_t w, int warmup, int iterations) {
  if (iterations < 10) throw ConfigError("measure_fps: need at least 10 timed iterations");
  if (warmup < 0) throw ConfigError("measure_fps: warmup must be >= 0");
  using clock = std::chrono::steady_clock;
  NoGradGuard guard;
  const auto image = Tensor::uniform({1, model.config().in_channels, h, w}, 0x5EEDULL, 0.0, 1.0);
  for (int i = 0; i < warmup; ++i) model.forward(image);

  std::vector<double> ms(iterations);
  const auto start = clock::now();
  auto prev = start;
  for (int i = 0; i < iterations; ++i) {
    model.forward(image);
    const auto now = clock::now();
    ms[i] = std::chrono::duration<double, std::milli>(now - prev).count();
    prev = now;
  }
  SpeedReport r;
  r.warmup = warmup;
  r.iterations = iterations;
  r.input_height = h;
  r.input_width = w;
  r.total_ms = std::chrono::duration<double, std::milli>(prev - start).count();
  r.mean_ms = r.total_ms / iterations;
  double var = 0.0;
  for (double v : ms) var += (v - r.mean_ms) * (v - r.mean_ms);
  r.std_ms = std::sqrt(var / iterations);
  r.fps = 1000.0 / r.mean_ms;
  r.host = host_descriptor();
  return r;
}

std::string format_complexity(const ComplexityReport& report) {
  std::string out;
  char line[160];
  std::snprintf(line, sizeof line, "%-40s %12s %16s\n", "module", "params", "flops");
  out += line;
  for (const auto& m : report.modules) {
    std::snprintf(line, sizeof line, "%-40s %12lld %16lld\n", m.name.c_str(), static_cast<long long>(m.params),
                  static_cast<long long>(m.flops));
    out += line;
  }
  std::snprintf(line, sizeof line, "%-40s %12lld %16lld\n", "total", static_cast<long long>(report.total_params),
                static_cast<long long>(report.total_flops));
  out += line;
  std::snprintf(line, sizeof line, "params %.3fM, flops %.3fG at %lldx%lld (1 MAC = 1 FLOP)\n",
                report.total_params / 1e6, report.total_flops / 1e9, static_cast<long long>(report.input_height),
                static_cast<long long>(report.input_width));
  out += line;
  return out;
}

std::string format_complexity_keyvalues(const ComplexityReport& report) {
  std::string out;
  out += "params=" + std::to_string(report.total_params) + "\n";
  out += "flops=" + std::to_string(report.total_flops) + "\n";
  out += "input=" + std::to_string(report.input_height) + "x" + std::to_string(report.input_width) + "\n";
  for (const auto& m : report.modules) {
    out += "params." + m.name + "=" + std::to_string(m.params) + "\n";
    out += "flops." + m.name + "=" + std::to_string(m.flops) + "\n";
  }
  return out;
}

std::string format_speed(const SpeedReport& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%lldx%lld batch 1: %.2f ms +- %.2f over %d iters (warmup %d), %.2f FPS\nhost: %s\n",
                static_cast<long long>(r.input_height), static_cast<long long>(r.input_width), r.mean_ms, r.std_ms,
                r.iterations, r.warmup, r.fps, r.host.c_str());
  return buf;
}

std::string format_speed_keyvalues(const SpeedReport& r) {
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "input=%lldx%lld\nwarmup=%d\niterations=%d\nmean_ms=%.6f\nstd_ms=%.6f\ntotal_ms=%.6f\nfps=%.6f\nhost=%s\n",
                static_cast<long long>(r.input_height), static_cast<long long>(r.input_width), r.warmup, r.iterations,
                r.mean_ms, r.std_ms, r.total_ms, r.fps, r.host.c_str());
  return buf;
}

}  // namespace armformer
