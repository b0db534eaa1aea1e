#include "mmn/vision.hpp"

#include <cmath>
#include <fstream>
#include <random>
#include <sstream>
#include <string>

#include "mmn/error.hpp"

namespace mmn {

void Image::validate(const ModelConfig& config) const {
  if (size != config.image_size || channels != config.channels)
    throw ShapeError("image is " + std::to_string(size) + "x" + std::to_string(size) + "x" +
                     std::to_string(channels) + ", model expects " +
                     std::to_string(config.image_size) + "x" + std::to_string(config.image_size) +
                     "x" + std::to_string(config.channels));
  if (pixels.size() != static_cast<std::size_t>(size) * size * channels)
    throw ShapeError("image pixel buffer has wrong length");
  for (double v : pixels)
    if (!(v >= 0.0 && v <= 1.0)) throw ValidationError("pixel value outside [0,1]");
}

namespace {

std::string next_header_token(std::istream& in) {
  std::string tok;
  char c;
  while (in.get(c)) {
    if (c == '#') {
      std::string skip;
      std::getline(in, skip);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(c);
  }
  return tok;
}

}  // namespace

Image load_image(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open image " + path.string());
  const std::string magic = next_header_token(in);
  std::uint32_t channels = 0;
  if (magic == "P5") {
    channels = 1;
  } else if (magic == "P6") {
    channels = 3;
  } else {
    throw IoError(path.string() + ": not a binary PGM/PPM file");
  }
  std::uint32_t w = 0, h = 0, maxval = 0;
  try {
    w = static_cast<std::uint32_t>(std::stoul(next_header_token(in)));
    h = static_cast<std::uint32_t>(std::stoul(next_header_token(in)));
    maxval = static_cast<std::uint32_t>(std::stoul(next_header_token(in)));
  } catch (const std::exception&) {
    throw IoError(path.string() + ": malformed header");
  }
  if (maxval != 255) throw IoError(path.string() + ": only maxval 255 is supported");
  if (w != h || w == 0) throw IoError(path.string() + ": image must be square");
  Image img(w, channels);
  std::vector<unsigned char> buf(img.pixels.size());
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (in.gcount() != static_cast<std::streamsize>(buf.size()))
    throw IoError(path.string() + ": truncated pixel data");
  for (std::size_t i = 0; i < buf.size(); ++i) img.pixels[i] = buf[i] / 255.0;
  return img;
}

void save_image(const std::filesystem::path& path, const Image& image) {
  if (image.channels != 1 && image.channels != 3)
    throw ValidationError("only 1- or 3-channel images can be saved");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write image " + path.string());
  out << (image.channels == 1 ? "P5" : "P6") << '\n'
      << image.size << ' ' << image.size << '\n'
      << "255\n";
  std::vector<unsigned char> buf(image.pixels.size());
  for (std::size_t i = 0; i < buf.size(); ++i) {
    const double v = std::clamp(image.pixels[i], 0.0, 1.0);
    buf[i] = static_cast<unsigned char>(std::lround(v * 255.0));
  }
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

EncoderWeights EncoderWeights::random(const ModelConfig& config, std::size_t d_enc,
                                      std::uint64_t seed) {
  const std::size_t dim = config.patch_dim();
  if (d_enc == 0 || d_enc + 1 > dim)
    throw ValidationError("d_enc must be in [1, patch_dim - 1]");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  EncoderWeights enc;
  enc.weight = Matrix(d_enc, dim);
  // Gram-Schmidt against the constant vector and earlier rows.
  const double inv = 1.0 / std::sqrt(static_cast<double>(dim));
  for (std::size_t r = 0; r < d_enc; ++r) {
    auto row = enc.weight.row(r);
    for (double& x : row) x = normal(rng);
    for (int pass = 0; pass < 2; ++pass) {
      double s = 0.0;
      for (double x : row) s += x * inv;
      for (double& x : row) x -= s * inv;
      for (std::size_t q = 0; q < r; ++q) {
        const double c = dot(row, enc.weight.row(q));
        axpy(-c, enc.weight.row(q), row);
      }
    }
    const double n = norm(row);
    for (double& x : row) x /= n;
  }
  enc.frozen = true;
  return enc;
}

ProjectionLayer ProjectionLayer::random(std::size_t d_model, std::size_t d_enc, double stddev,
                                        std::uint64_t seed) {
  if (d_model == 0 || d_enc == 0) throw ValidationError("projection dimensions must be positive");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, stddev);
  ProjectionLayer p;
  p.weight = Matrix(d_model, d_enc);
  for (double& v : p.weight.data()) v = nd(rng);
  return p;
}

Vector patch_pixels(const Image& image, const ModelConfig& config, std::size_t patch) {
  const std::uint32_t g = config.patch_grid;
  const std::uint32_t ps = config.patch_size();
  if (patch >= static_cast<std::size_t>(g) * g) throw ValidationError("patch index out of range");
  const auto pr = static_cast<std::uint32_t>(patch / g);
  const auto pc = static_cast<std::uint32_t>(patch % g);
  Vector out;
  out.reserve(config.patch_dim());
  for (std::uint32_t r = 0; r < ps; ++r)
    for (std::uint32_t c = 0; c < ps; ++c)
      for (std::uint32_t ch = 0; ch < image.channels; ++ch)
        out.push_back(image.at(pr * ps + r, pc * ps + c, ch));
  return out;
}

Matrix encode_patches(const Image& image, const EncoderWeights& encoder,
                      const ModelConfig& config) {
  image.validate(config);
  if (!encoder.frozen) throw ValidationError("encoder must be frozen");
  if (encoder.weight.cols() != config.patch_dim())
    throw ShapeError("encoder input width " + std::to_string(encoder.weight.cols()) +
                     " != patch dim " + std::to_string(config.patch_dim()));
  const std::size_t n = config.n_patches();
  Matrix out(n, encoder.d_enc());
  for (std::size_t p = 0; p < n; ++p) matvec(encoder.weight, patch_pixels(image, config, p), out.row(p));
  return out;
}

Matrix project(const Matrix& patch_embeddings, const ProjectionLayer& projection) {
  if (patch_embeddings.cols() != projection.weight.cols())
    throw ShapeError("projection expects width " + std::to_string(projection.weight.cols()) +
                     ", got " + std::to_string(patch_embeddings.cols()));
  Matrix out(patch_embeddings.rows(), projection.weight.rows());
  for (std::size_t p = 0; p < patch_embeddings.rows(); ++p)
    matvec(projection.weight, patch_embeddings.row(p), out.row(p));
  return out;
}

PromptInput assemble_prompt(const Matrix& soft_prompts, const Vocabulary& vocab,
                            std::string_view prefix) {
  PromptInput p;
  p.soft = soft_prompts;
  p.tokens = vocab.tokenize(prefix);
  return p;
}

Matrix Pipeline::soft_prompts(const Image& image) const {
  return project(encode_patches(image, encoder, model.config), projection);
}

PromptInput Pipeline::prompt(const Image& image) const {
  PromptInput p = assemble_prompt(soft_prompts(image), vocab, prefix);
  model.config.validate(p.tokens.size());
  return p;
}

}  // namespace mmn
