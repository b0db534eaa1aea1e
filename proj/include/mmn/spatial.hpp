#pragma once

#include <cstdint>
#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

#include "mmn/tensor.hpp"
#include "mmn/transformer.hpp"
#include "mmn/vision.hpp"

namespace mmn {

// g x g grid of a unit's post-GELU activation over the image patches,
// row-major in patch order.
struct Heatmap {
  std::uint32_t layer = 0;
  std::uint32_t unit = 0;
  Matrix values;
};

// rows x cols booleans (S x S for image masks).
struct BinaryMask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> bits;
  std::string source;  // e.g. "q=0.95 L1/U17" or "annotation"

  BinaryMask() = default;
  BinaryMask(std::size_t r, std::size_t c) : rows(r), cols(c), bits(r * c, 0) {}

  bool at(std::size_t r, std::size_t c) const { return bits[r * cols + c] != 0; }
  void set(std::size_t r, std::size_t c, bool v = true) { bits[r * cols + c] = v ? 1 : 0; }
  std::size_t count() const;
};

Heatmap activation_heatmap(const ForwardTrace& trace, const ModelConfig& config, std::uint32_t layer,
                           std::uint32_t unit, std::size_t first_patch_position = 0);

// Corner-aligned: output (r, c) samples the grid at (r(g-1)/(S-1), c(g-1)/(S-1)).
Matrix bilinear_upsample(const Matrix& grid, std::size_t size);

// Linear interpolation between order statistics at rank q(N-1), 0-indexed.
double percentile(std::vector<double> values, double q);

// True where the value is strictly above the q-percentile of the map.
BinaryMask threshold_mask(const Matrix& map, double q = 0.95);

// Each grid cell becomes a cell_size x cell_size block of pixels.
BinaryMask expand_grid_mask(const BinaryMask& grid_mask, std::size_t cell_size);

enum class ThresholdLevel { pixel, grid };

// Heatmap -> S x S mask. Pixel level thresholds the upsampled map; grid level
// thresholds the g x g grid and expands cells to patch blocks.
BinaryMask receptive_field_mask(const Heatmap& heatmap, const ModelConfig& config, double q,
                                ThresholdLevel level);

// |a & b| / |a | b|, 0 when the union is empty.
double iou(const BinaryMask& a, const BinaryMask& b);

// Entry (i, j): mean activation of class i's units over all patches of class j
// images, each row divided by its maximum and clamped to [0, 1].
Matrix class_selectivity(const Pipeline& pipeline, const std::vector<std::vector<Image>>& images_by_class,
                         const std::vector<std::vector<UnitRef>>& units_by_class);

void write_heatmap_csv(std::ostream& out, const Heatmap& heatmap);
void save_mask(const std::filesystem::path& path, const BinaryMask& mask);
BinaryMask load_mask(const std::filesystem::path& path);

struct IouRecord {
  std::string image;
  std::uint32_t layer = 0;
  std::uint32_t unit = 0;
  double iou = 0.0;
};
void write_iou_jsonl(std::ostream& out, const std::vector<IouRecord>& records);

}  // namespace mmn
