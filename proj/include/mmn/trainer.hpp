#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "mmn/vision.hpp"

namespace mmn {

struct TrainingPair {
  Image image;
  std::vector<TokenId> caption;
};

struct TrainOptions {
  std::size_t epochs = 10;
  double learning_rate = 0.5;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;  // batch order
};

struct TrainResult {
  ProjectionLayer projection;
  // Entry 0 is the loss before training, entry e the loss after epoch e.
  std::vector<double> loss_log;
  std::vector<double> learning_rates;  // rate used in each epoch
  std::size_t steps = 0;
  double max_update = 0.0;  // largest absolute change of any entry in one step
};

struct LossAndGradient {
  double loss = 0.0;
  Matrix gradient;  // same shape as the projection
};

// Mean cross-entropy over all caption tokens (teacher forced after the
// assembled prompt), and its gradient with respect to the projection.
LossAndGradient caption_loss(const Pipeline& pipeline, const ProjectionLayer& projection,
                             const std::vector<TrainingPair>& data, std::span<const std::size_t> indices);
double caption_loss(const Pipeline& pipeline, const ProjectionLayer& projection,
                    const std::vector<TrainingPair>& data);

// Mini-batch gradient descent on the projection only. After every epoch the
// full-data loss is compared with the previous one; on an increase the epoch is
// undone and the learning rate halved, so the loss log never increases.
TrainResult train_projection(const Pipeline& pipeline, const std::vector<TrainingPair>& data,
                             const TrainOptions& options);

// JSON-lines manifest: {"image": path, "caption": [ids]}, paths relative to
// the manifest directory.
std::vector<TrainingPair> load_dataset(const std::filesystem::path& manifest);

}  // namespace mmn
