#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "armformer/tensor.hpp"

namespace armformer {

struct PaletteEntry {
  int id;
  std::string_view name;
  std::uint8_t gray;
};

inline constexpr int kNumClasses = 6;

/// Class id -> mask grayscale value.
inline constexpr std::array<PaletteEntry, kNumClasses> kPalette{{
    {0, "background", 0},
    {1, "handgun", 51},
    {2, "human", 102},
    {3, "knife", 153},
    {4, "rifle", 204},
    {5, "revolver", 255},
}};

/// Images [B,3,H,W] in [0,1] with row-major class ids [B,H,W].
struct SegmentationBatch {
  Tensor images;
  std::vector<int> labels;

  std::int64_t batch() const { return images.dim(0); }
  std::int64_t height() const { return images.dim(2); }
  std::int64_t width() const { return images.dim(3); }
};

/// One training or evaluation example: image [3,H,W], labels [H,W].
struct Sample {
  Tensor image;
  std::vector<int> labels;
};

/// Stacks samples (all of equal size) into a batch.
SegmentationBatch make_batch(std::span<const Sample> samples, std::span<const std::size_t> indices);

// ---- mask codec -----------------------------------------------------------

struct DecodeStats {
  /// Pixels whose byte was not an exact palette value.
  std::int64_t off_palette = 0;
};

/// Exact palette bytes map to their class; any other byte maps to the nearest
/// palette value (ties toward the smaller value) and is counted in `stats`.
std::vector<int> decode_mask(std::span<const std::uint8_t> gray, DecodeStats* stats = nullptr);

/// Throws DataError for labels outside [0, 6).
std::vector<std::uint8_t> encode_mask(std::span<const int> labels);

// ---- PPM / PGM ------------------------------------------------------------

/// 8-bit raster; `channels` is 3 (RGB, interleaved) or 1 (gray).
struct Raster {
  std::int64_t width = 0;
  std::int64_t height = 0;
  int channels = 0;
  std::vector<std::uint8_t> pixels;
};

/// Binary P6 (channels 3) or P5 (channels 1), maxval 255. `source` names the
/// input in error messages. Throws IoError on malformed or truncated data.
Raster parse_pnm(std::span<const std::uint8_t> bytes, int expected_channels, const std::string& source);
std::vector<std::uint8_t> format_pnm(const Raster& r);

Raster read_ppm(const std::string& path);
Raster read_pgm(const std::string& path);
void write_ppm(const std::string& path, const Raster& r);
void write_pgm(const std::string& path, const Raster& r);

/// [3,H,W] tensor with values byte/255.
Tensor raster_to_tensor(const Raster& rgb);
/// Rounds [3,H,W] values (clamped to [0,1]) back to bytes.
Raster tensor_to_raster(const Tensor& image);

// ---- samples and datasets -------------------------------------------------

/// Image resized bilinearly to size x size, mask resized nearest-neighbour
/// and decoded. Throws IoError on parse failure or differing dimensions.
Sample load_sample(const std::string& image_path, const std::string& mask_path, std::int64_t size,
                   DecodeStats* stats = nullptr);

/// Nearest-neighbour resize of a byte plane (half-pixel centres).
std::vector<std::uint8_t> resize_nearest(std::span<const std::uint8_t> src, std::int64_t h, std::int64_t w,
                                         std::int64_t out_h, std::int64_t out_w);

/// `count` images of size x size, each with 1-3 non-overlapping shapes.
/// Shape classes cycle 1..5 over the whole set; each class has one primitive
/// (1 rectangle, 2 circle, 3 bar, 4 L-shape, 5 ring) and its own base colour.
/// Pixel values are multiples of 1/255 so files round-trip exactly.
std::vector<Sample> synth_dataset(std::uint64_t seed, std::int64_t count, std::int64_t size);

/// root/{images/<name>.ppm, masks/<name>.pgm, splits/{train,val,test}.txt}.
struct DatasetLayout {
  std::string root;

  std::string image_path(const std::string& name) const;
  std::string mask_path(const std::string& name) const;
  std::string split_path(const std::string& split) const;
};

struct SplitCounts {
  std::int64_t train = 0, val = 0, test = 0;
};

/// Default three-way split: val and test get count/10 each, train the rest.
SplitCounts default_split(std::int64_t count);

/// Writes samples as 0000.ppm/0000.pgm, ... and the three split files in order.
void write_dataset(const DatasetLayout& layout, std::span<const Sample> samples, SplitCounts split);

/// Basenames listed in a split file (blank lines skipped).
std::vector<std::string> read_split(const DatasetLayout& layout, const std::string& split);

/// Throws DataError when the split is empty.
std::vector<Sample> load_split(const DatasetLayout& layout, const std::string& split, std::int64_t size,
                               DecodeStats* stats = nullptr);

}  // namespace armformer
