#include "armformer/datapipe.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

#include "armformer/errors.hpp"
#include "armformer/ops.hpp"
#include "armformer/random.hpp"

namespace armformer {

SegmentationBatch make_batch(std::span<const Sample> samples, std::span<const std::size_t> indices) {
  if (indices.empty()) throw ContractError("make_batch: no samples selected");
  const Sample& first = samples[indices[0]];
  const std::int64_t c = first.image.dim(0), h = first.image.dim(1), w = first.image.dim(2);
  std::vector<double> pixels;
  SegmentationBatch batch;
  pixels.reserve(indices.size() * c * h * w);
  batch.labels.reserve(indices.size() * h * w);
  for (std::size_t i : indices) {
    const Sample& s = samples[i];
    if (s.image.shape() != first.image.shape() || static_cast<std::int64_t>(s.labels.size()) != h * w) {
      throw ShapeError("make_batch: sample " + std::to_string(i) + " differs in size from sample " +
                       std::to_string(indices[0]));
    }
    pixels.insert(pixels.end(), s.image.data().begin(), s.image.data().end());
    batch.labels.insert(batch.labels.end(), s.labels.begin(), s.labels.end());
  }
  batch.images = Tensor({static_cast<std::int64_t>(indices.size()), c, h, w}, std::move(pixels));
  return batch;
}

std::vector<int> decode_mask(std::span<const std::uint8_t> gray, DecodeStats* stats) {
  // Lookup table over all 256 byte values.
  std::array<int, 256> table{};
  std::array<bool, 256> exact{};
  for (int v = 0; v < 256; ++v) {
    int best = 0;
    for (const auto& e : kPalette) {
      const int d = std::abs(v - e.gray), bd = std::abs(v - kPalette[best].gray);
      if (d < bd) best = e.id;  // strict: equal distance keeps the smaller value
    }
    table[v] = best;
    exact[v] = kPalette[best].gray == v;
  }
  std::vector<int> out(gray.size());
  std::int64_t off = 0;
  for (std::size_t i = 0; i < gray.size(); ++i) {
    out[i] = table[gray[i]];
    off += exact[gray[i]] ? 0 : 1;
  }
  if (stats) stats->off_palette += off;
  return out;
}

std::vector<std::uint8_t> encode_mask(std::span<const int> labels) {
  std::vector<std::uint8_t> out(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= kNumClasses) {
      throw DataError("encode_mask: label " + std::to_string(labels[i]) + " at pixel " + std::to_string(i) +
                      " outside [0, " + std::to_string(kNumClasses) + ")");
    }
    out[i] = kPalette[labels[i]].gray;
  }
  return out;
}

namespace {

class HeaderReader {
 public:
  HeaderReader(std::span<const std::uint8_t> bytes, const std::string& source) : b_(bytes), source_(source) {}

  std::int64_t number(const char* what) {
    skip_space_and_comments();
    std::int64_t v = 0;
    std::size_t digits = 0;
    while (pos_ < b_.size() && std::isdigit(b_[pos_])) {
      v = v * 10 + (b_[pos_++] - '0');
      if (++digits > 9) fail(std::string("header ") + what + " too large");
    }
    if (digits == 0) fail(std::string("header missing ") + what);
    return v;
  }

  void magic(const char* m) {
    if (b_.size() < 2 || b_[0] != m[0] || b_[1] != m[1]) fail(std::string("expected magic ") + m);
    pos_ = 2;
  }

  // Exactly one whitespace byte separates maxval from the raster.
  std::size_t raster_start() {
    if (pos_ >= b_.size() || !std::isspace(b_[pos_])) fail("header not terminated by whitespace");
    return pos_ + 1;
  }

  [[noreturn]] void fail(const std::string& msg) const { throw IoError(source_ + ": " + msg); }

 private:
  void skip_space_and_comments() {
    while (pos_ < b_.size()) {
      if (std::isspace(b_[pos_])) {
        ++pos_;
      } else if (b_[pos_] == '#') {
        while (pos_ < b_.size() && b_[pos_] != '\n') ++pos_;
      } else {
        break;
      }
    }
  }

  std::span<const std::uint8_t> b_;
  const std::string& source_;
  std::size_t pos_ = 0;
};

std::vector<std::uint8_t> slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path + ": cannot open for reading");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError(path + ": read failed");
  return bytes;
}

void spit(const std::string& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(path + ": cannot open for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError(path + ": write failed");
}

}  // namespace

Raster parse_pnm(std::span<const std::uint8_t> bytes, int expected_channels, const std::string& source) {
  if (expected_channels != 1 && expected_channels != 3) throw ContractError("parse_pnm: channels must be 1 or 3");
  HeaderReader r(bytes, source);
  r.magic(expected_channels == 3 ? "P6" : "P5");
  Raster out;
  out.channels = expected_channels;
  out.width = r.number("width");
  out.height = r.number("height");
  const std::int64_t maxval = r.number("maxval");
  if (out.width <= 0 || out.height <= 0) r.fail("empty raster");
  if (maxval != 255) r.fail("unsupported maxval " + std::to_string(maxval) + " (only 8-bit 255)");
  const std::size_t start = r.raster_start();
  const std::size_t need = static_cast<std::size_t>(out.width * out.height * out.channels);
  if (bytes.size() - start < need) {
    r.fail("truncated raster: " + std::to_string(bytes.size() - start) + " of " + std::to_string(need) + " bytes");
  }
  out.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(start),
                    bytes.begin() + static_cast<std::ptrdiff_t>(start + need));
  return out;
}

std::vector<std::uint8_t> format_pnm(const Raster& r) {
  if (r.channels != 1 && r.channels != 3) throw ContractError("format_pnm: channels must be 1 or 3");
  if (static_cast<std::int64_t>(r.pixels.size()) != r.width * r.height * r.channels) {
    throw ContractError("format_pnm: pixel buffer does not match dimensions");
  }
  const std::string header = std::string(r.channels == 3 ? "P6" : "P5") + "\n" + std::to_string(r.width) + " " +
                             std::to_string(r.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), r.pixels.begin(), r.pixels.end());
  return out;
}

Raster read_ppm(const std::string& path) { return parse_pnm(slurp(path), 3, path); }
Raster read_pgm(const std::string& path) { return parse_pnm(slurp(path), 1, path); }

void write_ppm(const std::string& path, const Raster& r) {
  if (r.channels != 3) throw ContractError("write_ppm: raster must have 3 channels");
  spit(path, format_pnm(r));
}

void write_pgm(const std::string& path, const Raster& r) {
  if (r.channels != 1) throw ContractError("write_pgm: raster must have 1 channel");
  spit(path, format_pnm(r));
}

Tensor raster_to_tensor(const Raster& rgb) {
  if (rgb.channels != 3) throw ContractError("raster_to_tensor: expected an RGB raster");
  const std::int64_t hw = rgb.width * rgb.height;
  std::vector<double> v(3 * hw);
  for (std::int64_t p = 0; p < hw; ++p)
    for (int c = 0; c < 3; ++c) v[c * hw + p] = rgb.pixels[p * 3 + c] / 255.0;
  return Tensor({3, rgb.height, rgb.width}, std::move(v));
}

Raster tensor_to_raster(const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw ShapeError("tensor_to_raster: expected [3,H,W], got " + shape_str(image.shape()));
  }
  Raster r{image.dim(2), image.dim(1), 3, {}};
  const std::int64_t hw = r.width * r.height;
  r.pixels.resize(3 * hw);
  auto d = image.data();
  for (std::int64_t p = 0; p < hw; ++p)
    for (int c = 0; c < 3; ++c) {
      const double v = std::clamp(d[c * hw + p], 0.0, 1.0);
      r.pixels[p * 3 + c] = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
  return r;
}

std::vector<std::uint8_t> resize_nearest(std::span<const std::uint8_t> src, std::int64_t h, std::int64_t w,
                                         std::int64_t out_h, std::int64_t out_w) {
  std::vector<std::uint8_t> out(out_h * out_w);
  for (std::int64_t y = 0; y < out_h; ++y) {
    const std::int64_t sy = std::min(h - 1, (2 * y + 1) * h / (2 * out_h));
    for (std::int64_t x = 0; x < out_w; ++x) {
      const std::int64_t sx = std::min(w - 1, (2 * x + 1) * w / (2 * out_w));
      out[y * out_w + x] = src[sy * w + sx];
    }
  }
  return out;
}

Sample load_sample(const std::string& image_path, const std::string& mask_path, std::int64_t size,
                   DecodeStats* stats) {
  if (size <= 0) throw ConfigError("load_sample: target size must be positive");
  const Raster img = read_ppm(image_path);
  const Raster mask = read_pgm(mask_path);
  if (img.width != mask.width || img.height != mask.height) {
    throw IoError(mask_path + ": mask is " + std::to_string(mask.width) + "x" + std::to_string(mask.height) +
                  " but image " + image_path + " is " + std::to_string(img.width) + "x" +
                  std::to_string(img.height));
  }
  Sample s;
  s.image = raster_to_tensor(img);
  if (img.width != size || img.height != size) {
    NoGradGuard guard;
    s.image = reshape(bilinear_resize(reshape(s.image, {1, 3, img.height, img.width}), size, size), {3, size, size});
    s.labels = decode_mask(resize_nearest(mask.pixels, mask.height, mask.width, size, size), stats);
  } else {
    s.labels = decode_mask(mask.pixels, stats);
  }
  return s;
}

namespace {

struct Box {
  std::int64_t x0, y0, w, h;

  bool overlaps(const Box& o, std::int64_t margin) const {
    return x0 < o.x0 + o.w + margin && o.x0 < x0 + w + margin && y0 < o.y0 + o.h + margin &&
           o.y0 < y0 + h + margin;
  }
};

constexpr double kClassColour[kNumClasses][3] = {
    {0.0, 0.0, 0.0},     // background varies per image
    {0.85, 0.25, 0.20},  // handgun
    {0.25, 0.70, 0.30},  // human
    {0.25, 0.35, 0.85},  // knife
    {0.90, 0.80, 0.25},  // rifle
    {0.70, 0.30, 0.80},  // revolver
};

// Whether pixel centre (px, py) lies on the class primitive drawn in box b.
bool covers(int cls, const Box& b, double px, double py) {
  const double cx = b.x0 + b.w / 2.0, cy = b.y0 + b.h / 2.0;
  const double r = std::min(b.w, b.h) / 2.0;
  const double d = std::hypot(px - cx, py - cy);
  switch (cls) {
    case 1:  // rectangle
    case 3:  // bar (the box itself is elongated)
      return true;
    case 2:  // circle
      return d <= r;
    case 4: {  // L-shape: left column plus bottom row
      const double t = std::max(2.0, std::floor(std::min(b.w, b.h) / 3.0));
      return px < b.x0 + t || py >= b.y0 + b.h - t;
    }
    case 5:  // ring
      return d <= r && d >= 0.45 * r;
    default:
      return false;
  }
}

// Strokes stay at least ~1.5 decoder cells (stride 4) wide at size 64.
Box propose(Rng& rng, int cls, std::int64_t size) {
  std::int64_t w, h;
  if (cls == 3) {
    const std::int64_t len = size / 3 + static_cast<std::int64_t>(rng.below(size / 6 + 1));
    const std::int64_t thick = size / 8 + static_cast<std::int64_t>(rng.below(size / 16 + 1));
    const bool horizontal = rng.below(2) == 0;
    w = horizontal ? len : thick;
    h = horizontal ? thick : len;
  } else {
    const std::int64_t lo = size / 4, span = 3 * size / 8 - size / 4;
    w = lo + static_cast<std::int64_t>(rng.below(span + 1));
    h = cls == 1 ? lo + static_cast<std::int64_t>(rng.below(span + 1)) : w;
  }
  const std::int64_t x0 = static_cast<std::int64_t>(rng.below(size - w + 1));
  const std::int64_t y0 = static_cast<std::int64_t>(rng.below(size - h + 1));
  return {x0, y0, w, h};
}

}  // namespace

std::vector<Sample> synth_dataset(std::uint64_t seed, std::int64_t count, std::int64_t size) {
  if (count <= 0) throw ConfigError("synth_dataset: count must be positive, got " + std::to_string(count));
  if (size <= 0 || size % 32 != 0) {
    throw ConfigError("synth_dataset: size must be a positive multiple of 32, got " + std::to_string(size));
  }
  std::vector<Sample> out;
  out.reserve(count);
  int next_class = 1;
  for (std::int64_t i = 0; i < count; ++i) {
    Rng rng(derive_seed(seed, "synth." + std::to_string(i)));
    const std::int64_t hw = size * size;
    std::vector<int> labels(hw, 0);
    std::vector<double> colour(3 * hw);
    double bg[3];
    for (double& c : bg) c = rng.uniform(0.05, 0.35);
    for (std::int64_t p = 0; p < hw; ++p)
      for (int c = 0; c < 3; ++c) colour[c * hw + p] = bg[c];

    const int shapes = 1 + static_cast<int>(rng.below(3));
    std::vector<Box> placed;
    for (int s = 0; s < shapes; ++s) {
      const int cls = next_class;
      bool ok = false;
      Box box{};
      for (int attempt = 0; attempt < 50 && !ok; ++attempt) {
        box = propose(rng, cls, size);
        ok = std::none_of(placed.begin(), placed.end(), [&](const Box& o) { return box.overlaps(o, 1); });
      }
      if (!ok) continue;
      placed.push_back(box);
      next_class = next_class % 5 + 1;
      double fill[3];
      for (int c = 0; c < 3; ++c) fill[c] = std::clamp(kClassColour[cls][c] + rng.uniform(-0.06, 0.06), 0.0, 1.0);
      for (std::int64_t y = box.y0; y < box.y0 + box.h; ++y)
        for (std::int64_t x = box.x0; x < box.x0 + box.w; ++x) {
          if (!covers(cls, box, x + 0.5, y + 0.5)) continue;
          labels[y * size + x] = cls;
          for (int c = 0; c < 3; ++c) colour[c * hw + y * size + x] = fill[c];
        }
    }
    for (double& v : colour) {
      v = std::clamp(v + rng.uniform(-0.04, 0.04), 0.0, 1.0);
      v = std::round(v * 255.0) / 255.0;
    }
    out.push_back({Tensor({3, size, size}, std::move(colour)), std::move(labels)});
  }
  return out;
}

std::string DatasetLayout::image_path(const std::string& name) const { return root + "/images/" + name + ".ppm"; }
std::string DatasetLayout::mask_path(const std::string& name) const { return root + "/masks/" + name + ".pgm"; }
std::string DatasetLayout::split_path(const std::string& split) const { return root + "/splits/" + split + ".txt"; }

SplitCounts default_split(std::int64_t count) {
  SplitCounts s;
  s.val = count / 10;
  s.test = count / 10;
  s.train = count - s.val - s.test;
  return s;
}

void write_dataset(const DatasetLayout& layout, std::span<const Sample> samples, SplitCounts split) {
  if (split.train + split.val + split.test != static_cast<std::int64_t>(samples.size()) || split.train < 0 ||
      split.val < 0 || split.test < 0) {
    throw ConfigError("write_dataset: split counts do not add up to " + std::to_string(samples.size()));
  }
  namespace fs = std::filesystem;
  std::error_code ec;
  for (const char* dir : {"images", "masks", "splits"}) {
    fs::create_directories(fs::path(layout.root) / dir, ec);
    if (ec) throw IoError(layout.root + "/" + dir + ": " + ec.message());
  }
  std::vector<std::string> names;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    char buf[24];
    std::snprintf(buf, sizeof buf, "%04zu", i);
    names.emplace_back(buf);
    const Sample& s = samples[i];
    write_ppm(layout.image_path(buf), tensor_to_raster(s.image));
    Raster mask{s.image.dim(2), s.image.dim(1), 1, encode_mask(s.labels)};
    write_pgm(layout.mask_path(buf), mask);
  }
  std::size_t next = 0;
  for (auto [split_name, n] : {std::pair{"train", split.train}, std::pair{"val", split.val},
                               std::pair{"test", split.test}}) {
    std::string text;
    for (std::int64_t k = 0; k < n; ++k) text += names[next++] + "\n";
    spit(layout.split_path(split_name), std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  }
}

std::vector<std::string> read_split(const DatasetLayout& layout, const std::string& split) {
  const std::string path = layout.split_path(split);
  std::ifstream in(path);
  if (!in) throw IoError(path + ": cannot open split file");
  std::vector<std::string> names;
  std::string line;
  while (std::getline(in, line)) {
    while (!line.empty() && std::isspace(static_cast<unsigned char>(line.back()))) line.pop_back();
    std::size_t start = 0;
    while (start < line.size() && std::isspace(static_cast<unsigned char>(line[start]))) ++start;
    if (start < line.size()) names.push_back(line.substr(start));
  }
  return names;
}

std::vector<Sample> load_split(const DatasetLayout& layout, const std::string& split, std::int64_t size,
                               DecodeStats* stats) {
  const auto names = read_split(layout, split);
  if (names.empty()) throw DataError("split '" + split + "' in " + layout.root + " is empty");
  std::vector<Sample> out;
  out.reserve(names.size());
  for (const auto& n : names) out.push_back(load_sample(layout.image_path(n), layout.mask_path(n), size, stats));
  return out;
}

}  // namespace armformer
