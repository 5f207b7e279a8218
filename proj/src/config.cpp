#include "armformer/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>
#include <vector>

#include "armformer/errors.hpp"

namespace armformer {

ModelConfig ModelConfig::reduced() {
  ModelConfig c;
  const std::array<std::int64_t, 4> ch{8, 16, 24, 32};
  for (int s = 0; s < 4; ++s) {
    c.stages[s].embed_channels = ch[s];
    c.stages[s].depth = 1;
    c.stages[s].heads = 1;
  }
  c.ham.latent_rank = 4;
  c.ham.mu_iterations = 2;
  c.ham.context_channels = 32;
  c.input_size = 64;
  return c;
}

ModelConfig ModelConfig::with_lightweight_cbam() const {
  ModelConfig c = *this;
  c.encoder_cbam.fill(kLightweightCbam);
  c.decoder_cbam1 = kLightweightCbam;
  c.decoder_cbam2 = kLightweightCbam;
  return c;
}

std::array<std::int64_t, 4> ModelConfig::pyramid_channels() const {
  return {stages[0].embed_channels, stages[1].embed_channels, stages[2].embed_channels,
          stages[3].embed_channels};
}

void ModelConfig::validate() const {
  for (int s = 0; s < 4; ++s) validate_stage(stages[s], s);
  auto check_cbam = [](const CbamSpec& spec, const std::string& site) {
    if (spec.reduction_ratio < 1) throw ConfigError(site + ": reduction_ratio must be >= 1");
    if (spec.spatial_kernel < 1 || spec.spatial_kernel % 2 == 0) {
      throw ConfigError(site + ": spatial_kernel must be odd and positive");
    }
  };
  for (int s = 0; s < 4; ++s) check_cbam(encoder_cbam[s], "cbam_enc" + std::to_string(s + 1));
  check_cbam(decoder_cbam1, "cbam_dec1");
  check_cbam(decoder_cbam2, "cbam_dec2");
  validate_ham(ham);
  if (num_classes < 2 || num_classes > 255) throw ConfigError("num_classes must be in [2, 255]");
  if (in_channels < 1) throw ConfigError("in_channels must be >= 1");
  if (input_size < 32 || input_size % 32 != 0) throw ConfigError("input_size must be a positive multiple of 32");
}

void TrainSchedule::validate() const {
  if (steps < 1) throw ConfigError("train.steps must be >= 1");
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (!(learning_rate > 0)) throw ConfigError("train.learning_rate must be > 0");
  if (!(weight_decay >= 0)) throw ConfigError("train.weight_decay must be >= 0");
  if (eval_every < 0) throw ConfigError("train.eval_every must be >= 0");
}

namespace {

std::string fmt_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

// One table drives both directions so formatting and parsing cannot drift.
struct Field {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

std::int64_t parse_int(const std::string& key, const std::string& v) {
  std::int64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError("'" + key + "': expected integer, got '" + v + "'");
  return out;
}

std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError("'" + key + "': expected unsigned integer, got '" + v + "'");
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  double out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError("'" + key + "': expected number, got '" + v + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("'" + key + "': expected true/false, got '" + v + "'");
}

template <typename Member>
Field int_field(std::string key, Member m) {
  return {key, [m](const RunConfig& c) { return std::to_string(m(const_cast<RunConfig&>(c))); },
          [m, key](RunConfig& c, const std::string& v) { m(c) = parse_int(key, v); }};
}

template <typename Member>
Field uint_field(std::string key, Member m) {
  return {key, [m](const RunConfig& c) { return std::to_string(m(const_cast<RunConfig&>(c))); },
          [m, key](RunConfig& c, const std::string& v) { m(c) = parse_uint(key, v); }};
}

template <typename Member>
Field double_field(std::string key, Member m) {
  return {key, [m](const RunConfig& c) { return fmt_double(m(const_cast<RunConfig&>(c))); },
          [m, key](RunConfig& c, const std::string& v) { m(c) = parse_double(key, v); }};
}

template <typename Member>
Field bool_field(std::string key, Member m) {
  return {key, [m](const RunConfig& c) { return std::string(m(const_cast<RunConfig&>(c)) ? "true" : "false"); },
          [m, key](RunConfig& c, const std::string& v) { m(c) = parse_bool(key, v); }};
}

const std::vector<Field>& model_fields() {
  static const std::vector<Field> fields = [] {
    std::vector<Field> f;
    f.push_back(int_field("model.num_classes", [](RunConfig& c) -> auto& { return c.model.num_classes; }));
    f.push_back(int_field("model.input_size", [](RunConfig& c) -> auto& { return c.model.input_size; }));
    f.push_back(int_field("model.in_channels", [](RunConfig& c) -> auto& { return c.model.in_channels; }));
    f.push_back(uint_field("model.seed", [](RunConfig& c) -> auto& { return c.model.seed; }));
    for (int s = 0; s < 4; ++s) {
      const std::string p = "stage" + std::to_string(s + 1) + ".";
      f.push_back(int_field(p + "embed_channels", [s](RunConfig& c) -> auto& { return c.model.stages[s].embed_channels; }));
      f.push_back(int_field(p + "depth", [s](RunConfig& c) -> auto& { return c.model.stages[s].depth; }));
      f.push_back(int_field(p + "heads", [s](RunConfig& c) -> auto& { return c.model.stages[s].heads; }));
      f.push_back(int_field(p + "sr_ratio", [s](RunConfig& c) -> auto& { return c.model.stages[s].sr_ratio; }));
      f.push_back(int_field(p + "patch_kernel", [s](RunConfig& c) -> auto& { return c.model.stages[s].patch_kernel; }));
      f.push_back(int_field(p + "patch_stride", [s](RunConfig& c) -> auto& { return c.model.stages[s].patch_stride; }));
      f.push_back(int_field(p + "patch_padding", [s](RunConfig& c) -> auto& { return c.model.stages[s].patch_padding; }));
      f.push_back(int_field(p + "ffn_expansion", [s](RunConfig& c) -> auto& { return c.model.stages[s].ffn_expansion; }));
    }
    auto cbam_site = [&f](const std::string& name, std::function<CbamSpec&(RunConfig&)> site) {
      f.push_back({name + ".reduction_ratio",
                   [site](const RunConfig& c) { return std::to_string(site(const_cast<RunConfig&>(c)).reduction_ratio); },
                   [site, name](RunConfig& c, const std::string& v) {
                     site(c).reduction_ratio = static_cast<int>(parse_int(name + ".reduction_ratio", v));
                   }});
      f.push_back({name + ".spatial_kernel",
                   [site](const RunConfig& c) { return std::to_string(site(const_cast<RunConfig&>(c)).spatial_kernel); },
                   [site, name](RunConfig& c, const std::string& v) {
                     site(c).spatial_kernel = static_cast<int>(parse_int(name + ".spatial_kernel", v));
                   }});
    };
    for (int s = 0; s < 4; ++s) {
      cbam_site("cbam_enc" + std::to_string(s + 1), [s](RunConfig& c) -> CbamSpec& { return c.model.encoder_cbam[s]; });
    }
    cbam_site("cbam_dec1", [](RunConfig& c) -> CbamSpec& { return c.model.decoder_cbam1; });
    cbam_site("cbam_dec2", [](RunConfig& c) -> CbamSpec& { return c.model.decoder_cbam2; });
    f.push_back(int_field("ham.latent_rank", [](RunConfig& c) -> auto& { return c.model.ham.latent_rank; }));
    f.push_back(int_field("ham.mu_iterations", [](RunConfig& c) -> auto& { return c.model.ham.mu_iterations; }));
    f.push_back(int_field("ham.context_channels", [](RunConfig& c) -> auto& { return c.model.ham.context_channels; }));
    f.push_back(uint_field("ham.seed", [](RunConfig& c) -> auto& { return c.model.ham.seed; }));
    f.push_back(bool_field("ham.one_step_grad", [](RunConfig& c) -> auto& { return c.model.ham.one_step_grad; }));
    f.push_back(double_field("ham.eps", [](RunConfig& c) -> auto& { return c.model.ham.eps; }));
    return f;
  }();
  return fields;
}

const std::vector<Field>& train_fields() {
  static const std::vector<Field> fields = [] {
    std::vector<Field> f;
    f.push_back(int_field("train.steps", [](RunConfig& c) -> auto& { return c.train.steps; }));
    f.push_back(int_field("train.batch_size", [](RunConfig& c) -> auto& { return c.train.batch_size; }));
    f.push_back(double_field("train.learning_rate", [](RunConfig& c) -> auto& { return c.train.learning_rate; }));
    f.push_back(double_field("train.weight_decay", [](RunConfig& c) -> auto& { return c.train.weight_decay; }));
    f.push_back(uint_field("train.seed", [](RunConfig& c) -> auto& { return c.train.seed; }));
    f.push_back(int_field("train.eval_every", [](RunConfig& c) -> auto& { return c.train.eval_every; }));
    return f;
  }();
  return fields;
}

std::string format_fields(const RunConfig& cfg, const std::vector<Field>& fields) {
  std::ostringstream os;
  std::string section;
  for (const auto& field : fields) {
    const std::string s = field.key.substr(0, field.key.find('.'));
    if (s != section) {
      if (!section.empty()) os << '\n';
      section = s;
    }
    os << field.key << " = " << field.get(cfg) << '\n';
  }
  return os.str();
}

void parse_into(RunConfig& cfg, const std::string& text, bool allow_train) {
  std::map<std::string, const Field*> lookup;
  for (const auto& f : model_fields()) lookup[f.key] = &f;
  if (allow_train) {
    for (const auto& f : train_fields()) lookup[f.key] = &f;
  }
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    auto it = lookup.find(key);
    if (it == lookup.end()) throw ConfigError("line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    it->second->set(cfg, value);
  }
}

}  // namespace

RunConfig parse_run_config(const std::string& text) {
  RunConfig cfg;
  parse_into(cfg, text, true);
  cfg.model.validate();
  cfg.train.validate();
  return cfg;
}

std::string format_run_config(const RunConfig& cfg) {
  return format_fields(cfg, model_fields()) + "\n" + format_fields(cfg, train_fields());
}

std::string format_model_config(const ModelConfig& cfg) {
  RunConfig rc;
  rc.model = cfg;
  return format_fields(rc, model_fields());
}

ModelConfig parse_model_config(const std::string& text) {
  RunConfig cfg;
  parse_into(cfg, text, false);
  cfg.model.validate();
  return cfg.model;
}

RunConfig load_run_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

}  // namespace armformer
