#pragma once

#include <cstdint>
#include <filesystem>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "mmn/decoder.hpp"
#include "mmn/model.hpp"
#include "mmn/spatial.hpp"
#include "mmn/vision.hpp"

namespace mmn {

// Synthetic concept: the caption noun and a handful of related words that the
// planted units co-promote.
struct Concept {
  std::string name;
  TokenId token = 0;
  std::vector<TokenId> related;
};

struct PlantSpec {
  std::size_t concept_id = 0;
  Vector trigger;  // encoder space
  std::uint32_t layer = 0;
  std::uint32_t unit = 0;
  TokenId target = 0;
  double alpha = 4.0;
  double beta = 0.0;  // output gain, chosen by plant_model

  UnitRef unit_ref() const { return {layer, unit}; }
};

struct BenchOptions {
  std::size_t d_enc = 48;
  std::size_t plants_per_concept = 4;
  double alpha = 4.0;
  double trigger_amplitude = 2.0;
  double noise_scale = 0.02;
  double target_margin = 2.0;
};

// Independent stream `stream` derived from a root seed (splitmix64 mix).
std::uint64_t sub_seed(std::uint64_t seed, std::uint64_t stream);

Vocabulary bench_vocabulary(std::uint32_t vocab_size = 64);
std::vector<Concept> bench_concepts(const Vocabulary& vocab);
Wordlist bench_dictionary();
Wordlist bench_nouns();

// amplitude * e_{concept_id} in encoder space.
Vector default_trigger(std::size_t concept_id, const BenchOptions& options);

std::vector<PlantSpec> default_plants(const ModelConfig& config, const BenchOptions& options, std::uint64_t seed);

struct PlantedModel {
  ModelWeights model;
  EncoderWeights encoder;
  ProjectionLayer projection;
  Vocabulary vocab;
  std::vector<Concept> concepts;
  std::vector<Vector> triggers;  // per concept
  std::vector<PlantSpec> plants;
  std::vector<double> margins;  // per planted concept, on its calibration scene
  BenchOptions options;
  std::uint64_t seed = 0;

  Pipeline pipeline() const;
  std::vector<UnitRef> plant_units() const;
  std::vector<UnitRef> plant_units(std::size_t concept_id) const;
};

// Builds weights in which every plant reads its trigger direction at the
// image positions and writes its concept's unembedding direction; a head in
// the last layer carries that direction to the caption position. Everything
// else is small noise confined to a subspace the plants never touch.
// Throws ValidationError for plants that do not fit or whose triggers collide.
PlantedModel plant_model(const ModelConfig& config, std::vector<PlantSpec> plants, const BenchOptions& options,
                         std::uint64_t seed);

// plant_model with default_plants.
PlantedModel build_bench(const ModelConfig& config, const BenchOptions& options, std::uint64_t seed);

struct Placement {
  std::size_t concept_id = 0;
  std::vector<std::pair<std::uint32_t, std::uint32_t>> cells;  // (row, col) on the patch grid
};

struct SyntheticScene {
  std::string id;
  Image image;
  std::vector<Placement> placements;
  std::vector<BinaryMask> masks;  // S x S, one per placement
  std::vector<TokenId> caption;
};

// Each concept fills an extent x extent block of patch cells at a random free
// location. Caption is [noun of the first concept, eos], or [" a", eos].
SyntheticScene gen_scene(const PlantedModel& bench, const std::vector<std::size_t>& concepts, std::uint64_t seed,
                         std::uint32_t extent = 1);

struct RecoveryReport {
  double precision = 0.0;
  double recall = 0.0;
  std::size_t true_positives = 0;
  std::size_t detected = 0;
  std::size_t planted = 0;
};

RecoveryReport evaluate_recovery(const std::vector<UnitRef>& detected, const std::vector<UnitRef>& planted);

// IoU between a unit's thresholded heatmap and one placement's mask.
double localization_iou(const Pipeline& pipeline, const SyntheticScene& scene, std::size_t placement, UnitRef unit,
                        double q = 0.95, ThresholdLevel level = ThresholdLevel::grid);

// Scene files: <id>.ppm (or .pgm), <id>_mask<i>.pgm, plus one manifest line
// {"id", "image", "caption", "placements": [{"concept", "cells", "mask"}]}.
void save_scene(const std::filesystem::path& dir, const SyntheticScene& scene, std::ostream& manifest);
std::vector<SyntheticScene> load_scenes(const std::filesystem::path& manifest);

// {"seed", "options": {...}, "concepts": [...], "plants": [{"concept", "layer",
// "unit", "target", "alpha", "beta", "trigger"}]}
struct PlantsFile {
  std::uint64_t seed = 0;
  BenchOptions options;
  std::vector<PlantSpec> plants;
};
void write_plants_json(const std::filesystem::path& path, const PlantedModel& bench);
PlantsFile read_plants_json(const std::filesystem::path& path);

}  // namespace mmn
