#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mmn/model.hpp"
#include "mmn/vision.hpp"

namespace mmn {

enum class StorageType : std::uint8_t { f32 = 1, f64 = 2 };

// Contents of a model container file.
//
// Layout (all integers little-endian):
//   "MMN1"  u16 version
//   config: n_layers d_model d_mlp n_heads vocab_size max_seq patch_grid
//           image_size channels (u32 each), seed (u64)
//   u32 tensor count, then per tensor:
//     u32 name length, UTF-8 name, u8 dtype (1 = f32, 2 = f64),
//     u8 rank, rank x u32 dims, row-major values
struct ModelFile {
  ModelWeights weights;
  std::optional<EncoderWeights> encoder;
  std::optional<ProjectionLayer> projection;
  StorageType storage = StorageType::f64;
};

inline constexpr std::uint16_t kModelFileVersion = 1;

void save_model(const std::filesystem::path& path, const ModelFile& file);
ModelFile load_model(const std::filesystem::path& path);

std::vector<std::uint8_t> serialize_model(const ModelFile& file);
ModelFile deserialize_model(const std::vector<std::uint8_t>& bytes);

}  // namespace mmn
