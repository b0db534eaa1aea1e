#include "mmn/model.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "mmn/error.hpp"

namespace mmn {

void ModelConfig::validate(std::size_t prefix_len) const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ValidationError("invalid model config: " + what);
  };
  require(n_layers >= 1, "n_layers must be >= 1");
  require(d_model >= 1, "d_model must be >= 1");
  require(d_mlp >= 1, "d_mlp must be >= 1");
  require(n_heads >= 1, "n_heads must be >= 1");
  require(vocab_size >= 1, "vocab_size must be >= 1");
  require(max_seq >= 1, "max_seq must be >= 1");
  require(patch_grid >= 1, "patch_grid must be >= 1");
  require(image_size >= 1, "image_size must be >= 1");
  require(channels >= 1, "channels must be >= 1");
  require(d_model % n_heads == 0, "d_model must be divisible by n_heads");
  require(image_size % patch_grid == 0, "image_size must be divisible by patch_grid");
  require(static_cast<std::size_t>(n_patches()) + prefix_len <= max_seq,
          "patches + prefix exceed max_seq");
}

ModelConfig reference_config() {
  ModelConfig c;
  c.n_layers = 4;
  c.d_model = 64;
  c.d_mlp = 256;
  c.n_heads = 4;
  c.vocab_size = 64;
  c.max_seq = 32;
  c.patch_grid = 4;
  c.image_size = 64;
  c.channels = 3;
  c.seed = 0;
  return c;
}

ModelConfig full_scale_config() {
  ModelConfig c;
  c.n_layers = 28;
  c.d_model = 4096;
  c.d_mlp = 16384;
  c.n_heads = 16;
  c.vocab_size = 50400;
  c.max_seq = 2048;
  c.patch_grid = 14;
  c.image_size = 224;
  c.channels = 3;
  return c;
}

ModelWeights ModelWeights::zeros(const ModelConfig& config) {
  config.validate();
  const std::size_t d = config.d_model;
  ModelWeights w;
  w.config = config;
  w.token_embedding = Matrix(config.vocab_size, d);
  w.position_embedding = Matrix(config.max_seq, d);
  w.layers.resize(config.n_layers);
  for (auto& layer : w.layers) {
    layer.ln = {Vector(d, 1.0), Vector(d, 0.0)};
    layer.wq = Matrix(d, d);
    layer.wk = Matrix(d, d);
    layer.wv = Matrix(d, d);
    layer.wo = Matrix(d, d);
    layer.w_in = Matrix(config.d_mlp, d);
    layer.b_in = Vector(config.d_mlp, 0.0);
    layer.w_out = Matrix(d, config.d_mlp);
    layer.b_out = Vector(d, 0.0);
  }
  w.final_ln = {Vector(d, 1.0), Vector(d, 0.0)};
  w.unembedding = Matrix(config.vocab_size, d);
  return w;
}

ModelWeights ModelWeights::random(const ModelConfig& config, double scale, std::uint64_t seed) {
  ModelWeights w = zeros(config);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto fill = [&](std::vector<double>& v, double s) {
    for (double& x : v) x = s * normal(rng);
  };
  fill(w.token_embedding.data(), 1.0);
  fill(w.position_embedding.data(), 0.5);
  const double attn_scale = scale / std::sqrt(static_cast<double>(config.d_model));
  for (auto& layer : w.layers) {
    for (double& g : layer.ln.gain) g = 1.0 + 0.1 * normal(rng);
    fill(layer.ln.bias, 0.1);
    fill(layer.wq.data(), attn_scale);
    fill(layer.wk.data(), attn_scale);
    fill(layer.wv.data(), attn_scale);
    fill(layer.wo.data(), attn_scale);
    fill(layer.w_in.data(), scale / std::sqrt(static_cast<double>(config.d_model)));
    fill(layer.b_in, 0.1);
    fill(layer.w_out.data(), scale / std::sqrt(static_cast<double>(config.d_mlp)));
    fill(layer.b_out, 0.1);
  }
  for (double& g : w.final_ln.gain) g = 1.0 + 0.1 * normal(rng);
  fill(w.final_ln.bias, 0.1);
  fill(w.unembedding.data(), 1.0 / std::sqrt(static_cast<double>(config.d_model)));
  return w;
}

void ModelWeights::validate() const {
  config.validate();
  const std::size_t d = config.d_model;
  const std::size_t h = config.d_mlp;
  const std::size_t vocab = config.vocab_size;
  auto shape = [](const Matrix& m, std::size_t r, std::size_t c, const char* name) {
    if (m.rows() != r || m.cols() != c)
      throw ShapeError(std::string(name) + ": expected " + std::to_string(r) + "x" +
                       std::to_string(c) + ", got " + std::to_string(m.rows()) + "x" +
                       std::to_string(m.cols()));
    if (!all_finite(m.data())) throw NumericError(std::string(name) + ": non-finite value");
  };
  auto vec = [](const Vector& v, std::size_t n, const char* name) {
    if (v.size() != n)
      throw ShapeError(std::string(name) + ": expected length " + std::to_string(n));
    if (!all_finite(v)) throw NumericError(std::string(name) + ": non-finite value");
  };
  shape(token_embedding, vocab, d, "token_embedding");
  shape(position_embedding, config.max_seq, d, "position_embedding");
  if (layers.size() != config.n_layers) throw ShapeError("layer count does not match config");
  for (const auto& layer : layers) {
    vec(layer.ln.gain, d, "ln.gain");
    vec(layer.ln.bias, d, "ln.bias");
    shape(layer.wq, d, d, "wq");
    shape(layer.wk, d, d, "wk");
    shape(layer.wv, d, d, "wv");
    shape(layer.wo, d, d, "wo");
    shape(layer.w_in, h, d, "w_in");
    vec(layer.b_in, h, "b_in");
    shape(layer.w_out, d, h, "w_out");
    vec(layer.b_out, d, "b_out");
  }
  vec(final_ln.gain, d, "final_ln.gain");
  vec(final_ln.bias, d, "final_ln.bias");
  shape(unembedding, vocab, d, "unembedding");
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

}  // namespace mmn
