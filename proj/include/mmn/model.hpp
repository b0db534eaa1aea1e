#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "mmn/tensor.hpp"

namespace mmn {

using TokenId = std::int32_t;

struct ModelConfig {
  std::uint32_t n_layers = 4;
  std::uint32_t d_model = 64;
  std::uint32_t d_mlp = 256;
  std::uint32_t n_heads = 4;
  std::uint32_t vocab_size = 64;
  std::uint32_t max_seq = 32;
  std::uint32_t patch_grid = 4;
  std::uint32_t image_size = 64;
  std::uint32_t channels = 3;
  std::uint64_t seed = 0;

  std::uint32_t n_patches() const { return patch_grid * patch_grid; }
  std::uint32_t patch_size() const { return patch_grid ? image_size / patch_grid : 0; }
  std::uint32_t patch_dim() const { return patch_size() * patch_size() * channels; }
  std::uint32_t head_dim() const { return n_heads ? d_model / n_heads : 0; }

  // Throws ValidationError. `prefix_len` is checked against max_seq together
  // with the patch count.
  void validate(std::size_t prefix_len = 0) const;

  bool operator==(const ModelConfig&) const = default;
};

// Desk-scale configuration used by the bench and the acceptance suite.
ModelConfig reference_config();
// GPT-J-sized shape (never allocated, only validated).
ModelConfig full_scale_config();

struct LayerNormWeights {
  Vector gain;
  Vector bias;
  bool operator==(const LayerNormWeights&) const = default;
};

struct LayerWeights {
  LayerNormWeights ln;
  Matrix wq, wk, wv, wo;  // d_model x d_model
  Matrix w_in;            // d_mlp x d_model
  Vector b_in;            // d_mlp
  Matrix w_out;           // d_model x d_mlp; column k is unit k's value vector
  Vector b_out;           // d_model
  bool operator==(const LayerWeights&) const = default;
};

struct ModelWeights {
  ModelConfig config;
  Matrix token_embedding;     // vocab x d_model
  Matrix position_embedding;  // max_seq x d_model
  std::vector<LayerWeights> layers;
  LayerNormWeights final_ln;
  Matrix unembedding;  // vocab x d_model

  // Allocates zero weights with unit layernorm gains.
  static ModelWeights zeros(const ModelConfig& config);
  // Gaussian init with the given standard deviation; layernorm gains are
  // 1 + noise so that the layernorm path is exercised.
  static ModelWeights random(const ModelConfig& config, double scale, std::uint64_t seed);

  void validate() const;
  bool operator==(const ModelWeights&) const = default;
};

double gelu(double x);
double gelu_grad(double x);

}  // namespace mmn
