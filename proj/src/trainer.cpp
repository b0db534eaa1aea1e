#include "mmn/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "json.hpp"
#include "mmn/error.hpp"

namespace mmn {
namespace {

void check_pair(const TrainingPair& pair, const ModelConfig& cfg) {
  pair.image.validate(cfg);
  if (pair.caption.empty()) throw ValidationError("training caption is empty");
  for (TokenId t : pair.caption)
    if (t < 0 || static_cast<std::size_t>(t) >= cfg.vocab_size)
      throw ValidationError("caption token out of range: " + std::to_string(t));
}

}  // namespace

LossAndGradient caption_loss(const Pipeline& pipeline, const ProjectionLayer& projection,
                             const std::vector<TrainingPair>& data, std::span<const std::size_t> indices) {
  const auto& w = pipeline.model;
  const auto& cfg = w.config;
  const auto prefix = pipeline.vocab.tokenize(pipeline.prefix);
  LossAndGradient out;
  out.gradient = Matrix(projection.weight.rows(), projection.weight.cols());
  std::size_t n_tokens = 0;
  for (std::size_t i : indices) n_tokens += data.at(i).caption.size();
  if (n_tokens == 0) throw ValidationError("no caption tokens in batch");
  const double scale = 1.0 / static_cast<double>(n_tokens);

  for (std::size_t i : indices) {
    const TrainingPair& pair = data[i];
    check_pair(pair, cfg);
    const Matrix enc = encode_patches(pair.image, pipeline.encoder, cfg);
    PromptInput prompt;
    prompt.soft = project(enc, projection);
    prompt.tokens = prefix;
    prompt.tokens.insert(prompt.tokens.end(), pair.caption.begin(), pair.caption.end() - 1);
    cfg.validate(prompt.tokens.size());
    const auto tr = *forward(w, prompt, true).trace;

    std::vector<LogitSeed> seeds;
    const std::size_t first = prompt.n_soft() + prefix.size() - 1;
    for (std::size_t t = 0; t < pair.caption.size(); ++t) {
      const std::size_t pos = first + t;
      const Vector logits = logits_at(w, tr, pos);
      Vector p = softmax(logits);
      const auto c = static_cast<std::size_t>(pair.caption[t]);
      out.loss -= std::log(std::max(p[c], 1e-300)) * scale;
      for (double& x : p) x *= scale;
      p[c] -= scale;
      seeds.push_back({pos, std::move(p)});
    }
    const Gradients g = backward(w, tr, seeds);
    // soft row p = M enc_p, so dM += d_soft_p enc_p^T.
    for (std::size_t p = 0; p < enc.rows(); ++p) {
      const auto ds = g.d_input.row(p);
      const auto e = enc.row(p);
      for (std::size_t r = 0; r < ds.size(); ++r) {
        if (ds[r] == 0.0) continue;
        auto gr = out.gradient.row(r);
        for (std::size_t c = 0; c < e.size(); ++c) gr[c] += ds[r] * e[c];
      }
    }
  }
  return out;
}

double caption_loss(const Pipeline& pipeline, const ProjectionLayer& projection,
                    const std::vector<TrainingPair>& data) {
  std::vector<std::size_t> all(data.size());
  std::iota(all.begin(), all.end(), 0);
  return caption_loss(pipeline, projection, data, all).loss;
}

TrainResult train_projection(const Pipeline& pipeline, const std::vector<TrainingPair>& data,
                             const TrainOptions& options) {
  if (data.empty()) throw ValidationError("training set is empty");
  if (options.batch_size == 0) throw ValidationError("batch size must be >= 1");
  if (!(options.learning_rate > 0.0)) throw ValidationError("learning rate must be positive");
  const auto& cfg = pipeline.model.config;
  if (pipeline.projection.weight.rows() != cfg.d_model ||
      pipeline.projection.weight.cols() != pipeline.encoder.d_enc())
    throw ShapeError("projection must be d_model x d_enc");

  TrainResult result;
  result.projection = pipeline.projection;
  double lr = options.learning_rate;
  double current = caption_loss(pipeline, result.projection, data);
  if (!std::isfinite(current)) throw NumericError("initial training loss is not finite");
  result.loss_log.push_back(current);

  std::mt19937_64 rng(options.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t epoch = 1; epoch <= options.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    ProjectionLayer candidate = result.projection;
    double max_update = 0.0;
    for (std::size_t b = 0; b < order.size(); b += options.batch_size) {
      const std::size_t end = std::min(order.size(), b + options.batch_size);
      const auto lg = caption_loss(pipeline, candidate, data, std::span(order).subspan(b, end - b));
      if (!std::isfinite(lg.loss))
        throw NumericError("training loss became non-finite at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(b / options.batch_size) + " (learning rate " + std::to_string(lr) + ")");
      for (std::size_t i = 0; i < candidate.weight.size(); ++i) {
        const double step = lr * lg.gradient.data()[i];
        candidate.weight.data()[i] -= step;
        max_update = std::max(max_update, std::abs(step));
      }
      ++result.steps;
    }
    const double loss = caption_loss(pipeline, candidate, data);
    if (!std::isfinite(loss))
      throw NumericError("training loss became non-finite after epoch " + std::to_string(epoch));
    result.learning_rates.push_back(lr);
    if (loss <= current) {
      result.projection = std::move(candidate);
      result.max_update = std::max(result.max_update, max_update);
      current = loss;
    } else {
      lr *= 0.5;
    }
    result.loss_log.push_back(current);
  }
  return result;
}

std::vector<TrainingPair> load_dataset(const std::filesystem::path& manifest) {
  std::ifstream in(manifest);
  if (!in) throw IoError("cannot open dataset manifest " + manifest.string());
  std::vector<TrainingPair> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      TrainingPair p;
      p.image = load_image(manifest.parent_path() / j.at("image").get<std::string>());
      p.caption = j.at("caption").get<std::vector<TokenId>>();
      out.push_back(std::move(p));
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError("bad dataset record at line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace mmn
