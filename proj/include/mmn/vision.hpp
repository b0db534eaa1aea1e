#pragma once

#include <cstdint>
#include <filesystem>
#include <string_view>
#include <vector>

#include "mmn/model.hpp"
#include "mmn/tensor.hpp"
#include "mmn/transformer.hpp"
#include "mmn/vocabulary.hpp"

namespace mmn {

// Square image, pixels in [0,1], row-major with interleaved channels.
struct Image {
  std::uint32_t size = 0;
  std::uint32_t channels = 0;
  std::vector<double> pixels;

  Image() = default;
  Image(std::uint32_t s, std::uint32_t ch, double fill = 0.0)
      : size(s), channels(ch), pixels(static_cast<std::size_t>(s) * s * ch, fill) {}

  double& at(std::uint32_t r, std::uint32_t c, std::uint32_t ch) {
    return pixels[(static_cast<std::size_t>(r) * size + c) * channels + ch];
  }
  double at(std::uint32_t r, std::uint32_t c, std::uint32_t ch) const {
    return pixels[(static_cast<std::size_t>(r) * size + c) * channels + ch];
  }

  void validate(const ModelConfig& config) const;
  bool operator==(const Image&) const = default;
};

// Binary PGM (P5, one channel) or PPM (P6, three channels), maxval 255.
Image load_image(const std::filesystem::path& path);
void save_image(const std::filesystem::path& path, const Image& image);

// Frozen linear patch embedder: one d_enc x patch_dim matrix shared by all patches.
struct EncoderWeights {
  Matrix weight;
  bool frozen = true;

  std::size_t d_enc() const { return weight.rows(); }
  // Seeded random encoder with orthonormal rows that are blind to the constant
  // (all-ones) patch.
  static EncoderWeights random(const ModelConfig& config, std::size_t d_enc, std::uint64_t seed);
  bool operator==(const EncoderWeights&) const = default;
};

// Linear map from encoder space into the transformer embedding space. No bias.
struct ProjectionLayer {
  Matrix weight;  // d_model x d_enc
  // Untrained starting point: i.i.d. Gaussian entries with the given std.
  static ProjectionLayer random(std::size_t d_model, std::size_t d_enc, double stddev, std::uint64_t seed);
  bool operator==(const ProjectionLayer&) const = default;
};

// Flattened patch p (row-major over the grid) in (row, col, channel) order.
Vector patch_pixels(const Image& image, const ModelConfig& config, std::size_t patch);

// P x d_enc, one row per patch.
Matrix encode_patches(const Image& image, const EncoderWeights& encoder, const ModelConfig& config);

// P x d_model soft prompt.
Matrix project(const Matrix& patch_embeddings, const ProjectionLayer& projection);

// Patches in row-major order followed by the tokenized prefix.
PromptInput assemble_prompt(const Matrix& soft_prompts, const Vocabulary& vocab,
                            std::string_view prefix = kCaptionPrefix);

// Encoder, projection, model and vocabulary used together for captioning.
struct Pipeline {
  ModelWeights model;
  EncoderWeights encoder;
  ProjectionLayer projection;
  Vocabulary vocab;
  TokenId stop_token = 0;
  std::string prefix = std::string(kCaptionPrefix);

  Matrix soft_prompts(const Image& image) const;
  PromptInput prompt(const Image& image) const;
};

}  // namespace mmn
