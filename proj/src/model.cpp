#include "armformer/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "armformer/errors.hpp"
#include "armformer/ops.hpp"
#include "armformer/random.hpp"

namespace armformer {

Model Model::create(const ModelConfig& cfg) {
  cfg.validate();
  Model m;
  m.config_ = cfg;
  m.registry_ = std::make_unique<ParameterRegistry>();
  ParamFactory factory(*m.registry_, cfg.seed);
  m.encoder_ = MitEncoder::create(cfg.stages, cfg.encoder_cbam, cfg.in_channels, factory);
  m.decoder_ = HamDecoder::create(cfg.pyramid_channels(), cfg.num_classes, cfg.decoder_cbam1, cfg.decoder_cbam2,
                                  cfg.ham, factory);
  return m;
}

FeaturePyramid Model::encode(const Tensor& images) const { return encoder_.forward(images); }

Tensor Model::forward(const Tensor& images, const DecodeOptions& options) const {
  return decoder_.forward(encoder_.forward(images), images.dim(2), images.dim(3), options);
}

std::vector<int> Model::predict(const Tensor& images) const {
  NoGradGuard guard;
  auto logits = forward(images);
  const std::int64_t b = logits.dim(0), k = logits.dim(1), hw = logits.dim(2) * logits.dim(3);
  auto d = logits.data();
  std::vector<int> out(b * hw);
  for (std::int64_t n = 0; n < b; ++n)
    for (std::int64_t p = 0; p < hw; ++p) {
      int best = 0;
      double best_v = d[(n * k) * hw + p];
      for (std::int64_t c = 1; c < k; ++c) {
        const double v = d[(n * k + c) * hw + p];
        if (v > best_v) {
          best_v = v;
          best = static_cast<int>(c);
        }
      }
      out[n * hw + p] = best;
    }
  return out;
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 4) throw ShapeError("cross_entropy: logits must be [B,K,H,W], got " + shape_str(logits.shape()));
  const std::int64_t b = logits.dim(0), k = logits.dim(1), hw = logits.dim(2) * logits.dim(3);
  if (static_cast<std::int64_t>(labels.size()) != b * hw) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(b * hw) +
                     " pixels");
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= k) {
      throw DataError("cross_entropy: label " + std::to_string(labels[i]) + " at pixel " + std::to_string(i) +
                      " outside [0, " + std::to_string(k) + ")");
    }
  }
  auto x = logits.data();
  const double inv = 1.0 / static_cast<double>(b * hw);
  // probs kept for backward
  auto probs = std::make_shared<std::vector<double>>(x.size());
  double total = 0.0;
  for (std::int64_t n = 0; n < b; ++n)
    for (std::int64_t p = 0; p < hw; ++p) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::int64_t c = 0; c < k; ++c) mx = std::max(mx, x[(n * k + c) * hw + p]);
      double s = 0.0;
      for (std::int64_t c = 0; c < k; ++c) {
        const double e = std::exp(x[(n * k + c) * hw + p] - mx);
        (*probs)[(n * k + c) * hw + p] = e;
        s += e;
      }
      for (std::int64_t c = 0; c < k; ++c) (*probs)[(n * k + c) * hw + p] /= s;
      const int y = labels[n * hw + p];
      total += (mx + std::log(s)) - x[(n * k + y) * hw + p];
    }
  std::vector<int> lab(labels.begin(), labels.end());
  auto li = logits.impl();
  return make_result("cross_entropy", {1}, {total * inv}, {logits},
                     [li, probs, lab = std::move(lab), b, k, hw, inv](const detail::TensorImpl& o) {
                       const double g = (*o.grad)[0] * inv;
                       auto& gx = li->grad_buffer();
                       for (std::int64_t n = 0; n < b; ++n)
                         for (std::int64_t c = 0; c < k; ++c)
                           for (std::int64_t p = 0; p < hw; ++p) {
                             const std::int64_t i = (n * k + c) * hw + p;
                             gx[i] += g * ((*probs)[i] - (lab[n * hw + p] == c ? 1.0 : 0.0));
                           }
                     });
}

AdamW::Moments& AdamW::moments(const std::string& key, std::size_t n) {
  for (auto& [k, m] : state_) {
    if (k == key) return m;
  }
  state_.push_back({key, {std::vector<double>(n, 0.0), std::vector<double>(n, 0.0)}});
  return state_.back().second;
}

void AdamW::step_one(const std::string& key, Tensor& param, std::span<const double> grad, double lr,
                     double weight_decay) {
  ++t_;
  update(key, param, grad, lr, weight_decay);
}

void AdamW::update(const std::string& key, Tensor& param, std::span<const double> grad, double lr,
                   double weight_decay) {
  auto p = param.mutable_data();
  if (grad.size() != p.size()) throw ShapeError("adamw: gradient size mismatch for '" + key + "'");
  Moments& st = moments(key, p.size());
  const std::int64_t t = t_;
  const double b1 = options_.beta1, b2 = options_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
  for (std::size_t i = 0; i < p.size(); ++i) {
    st.m[i] = b1 * st.m[i] + (1.0 - b1) * grad[i];
    st.v[i] = b2 * st.v[i] + (1.0 - b2) * grad[i] * grad[i];
    const double mhat = st.m[i] / c1;
    const double vhat = st.v[i] / c2;
    p[i] -= lr * mhat / (std::sqrt(vhat) + options_.eps) + lr * weight_decay * p[i];
  }
}

void AdamW::step(ParameterRegistry& registry, double lr, double weight_decay) {
  ++t_;
  for (const auto& entry : registry.entries()) {
    if (!entry.tensor.has_grad()) continue;
    Tensor param = entry.tensor;
    update(entry.name, param, param.grad(), lr, weight_decay);
  }
}

double train_step(Model& model, const SegmentationBatch& batch, AdamW& optimizer, const TrainSchedule& sched) {
  auto& params = model.parameters();
  params.zero_grad();
  auto loss = cross_entropy(model.forward(batch.images), batch.labels);
  const double value = loss.item();
  if (!std::isfinite(value)) {
    params.zero_grad();
    throw TrainingError("non-finite loss " + std::to_string(value) + " at optimizer step " +
                        std::to_string(optimizer.steps_taken() + 1) + " (batch of " + std::to_string(batch.batch()) +
                        "); try a smaller learning rate");
  }
  backward(loss);
  optimizer.step(params, sched.learning_rate, sched.weight_decay);
  params.zero_grad();
  return value;
}

std::vector<HistoryEntry> fit(Model& model, std::span<const Sample> data, const TrainSchedule& sched,
                              const EvalHook& eval, const StepCallback& on_step) {
  sched.validate();
  if (data.empty()) throw DataError("fit: dataset is empty");
  const std::size_t n = data.size();
  const std::size_t bs = std::min<std::size_t>(static_cast<std::size_t>(sched.batch_size), n);
  AdamW optimizer;
  std::vector<HistoryEntry> history;
  std::vector<std::size_t> order;
  std::size_t cursor = n;  // forces a reshuffle on the first step
  std::uint64_t epoch = 0;
  for (std::int64_t step = 1; step <= sched.steps; ++step) {
    if (cursor + bs > n) {
      order.resize(n);
      for (std::size_t i = 0; i < n; ++i) order[i] = i;
      Rng rng(derive_seed(sched.seed, "epoch" + std::to_string(epoch++)));
      for (std::size_t i = n - 1; i > 0; --i) std::swap(order[i], order[rng.below(i + 1)]);
      cursor = 0;
    }
    auto batch = make_batch(data, std::span(order).subspan(cursor, bs));
    cursor += bs;
    HistoryEntry entry{step, train_step(model, batch, optimizer, sched), std::nullopt};
    if (eval && sched.eval_every > 0 && (step % sched.eval_every == 0 || step == sched.steps)) {
      entry.eval = eval(model);
    }
    history.push_back(entry);
    if (on_step) on_step(entry);
  }
  return history;
}

namespace {

constexpr char kMagic[4] = {'A', 'R', 'M', 'F'};

std::uint64_t fnv1a(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (auto b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

class Writer {
 public:
  template <typename T>
  void put(T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    std::uint8_t raw[sizeof(T)];
    std::memcpy(raw, &value, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
    out.insert(out.end(), raw, raw + sizeof(T));
  }
  void put_string(const std::string& s) {
    put<std::uint64_t>(s.size());
    out.insert(out.end(), s.begin(), s.end());
  }
  std::vector<std::uint8_t> out;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}
  template <typename T>
  T get() {
    need(sizeof(T));
    std::uint8_t raw[sizeof(T)];
    std::memcpy(raw, bytes_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
    pos_ += sizeof(T);
    T value;
    std::memcpy(&value, raw, sizeof(T));
    return value;
  }
  std::string get_string() {
    const auto n = get<std::uint64_t>();
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::uint64_t n) const {
    if (n > bytes_.size() - pos_) throw LoadError("checkpoint truncated at byte " + std::to_string(pos_));
  }
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> checkpoint_save(const Model& model) {
  Writer w;
  for (char c : kMagic) w.put<std::uint8_t>(static_cast<std::uint8_t>(c));
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put_string(format_model_config(model.config()));
  const auto& entries = model.parameters().entries();
  w.put<std::uint64_t>(entries.size());
  for (const auto& e : entries) {
    w.put_string(e.name);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(e.tensor.rank()));
    for (auto d : e.tensor.shape()) w.put<std::int64_t>(d);
    for (double v : e.tensor.data()) w.put<double>(v);
  }
  w.put<std::uint64_t>(fnv1a(w.out));
  return std::move(w.out);
}

Model checkpoint_load(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 + 4 + 8 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw LoadError("not a checkpoint (bad magic)");
  }
  const auto body = bytes.first(bytes.size() - 8);
  Reader tail(bytes.last(8));
  if (tail.get<std::uint64_t>() != fnv1a(body)) throw LoadError("checkpoint checksum mismatch");
  Reader r(body);
  r.get<std::uint32_t>();
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw LoadError("checkpoint version " + std::to_string(version) + ", expected " +
                    std::to_string(kCheckpointVersion));
  }
  ModelConfig cfg;
  try {
    cfg = parse_model_config(r.get_string());
  } catch (const ConfigError& e) {
    throw LoadError(std::string("checkpoint config invalid: ") + e.what());
  }
  Model model = Model::create(cfg);
  const auto& entries = model.parameters().entries();
  const auto count = r.get<std::uint64_t>();
  if (count != entries.size()) {
    throw LoadError("checkpoint has " + std::to_string(count) + " parameters, model has " +
                    std::to_string(entries.size()));
  }
  for (const auto& e : entries) {
    const std::string name = r.get_string();
    if (name != e.name) throw LoadError("checkpoint parameter '" + name + "' where '" + e.name + "' expected");
    const auto rank = r.get<std::uint32_t>();
    Shape shape(rank);
    for (auto& d : shape) d = r.get<std::int64_t>();
    if (shape != e.tensor.shape()) {
      throw LoadError("checkpoint parameter '" + name + "' has shape " + shape_str(shape) + ", expected " +
                      shape_str(e.tensor.shape()));
    }
    Tensor t = e.tensor;
    for (double& v : t.mutable_data()) v = r.get<double>();
  }
  if (r.pos() != body.size()) throw LoadError("checkpoint has trailing bytes");
  return model;
}

Model checkpoint_load(std::span<const std::uint8_t> bytes, const ModelConfig& expected) {
  Model m = checkpoint_load(bytes);
  if (!(m.config() == expected)) throw LoadError("checkpoint config differs from the requested config");
  return m;
}

void write_file_bytes(const std::string& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for '" + path + "'");
}

std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return bytes;
}

}  // namespace armformer
