#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mmn/bench.hpp"
#include "mmn/causal.hpp"
#include "mmn/spatial.hpp"
#include "mmn/trainer.hpp"

namespace mmn::cli {

// Everything a subcommand may read. Built from defaults, then the config file,
// then command-line flags.
struct Settings {
  std::uint64_t seed = 42;
  ModelConfig model = reference_config();
  BenchOptions bench;

  std::size_t scenes = 20;
  std::size_t train_scenes = 200;
  std::size_t test_scenes = 200;
  std::uint32_t extent = 1;

  TrainOptions train{8, 0.5, 8, 0};
  double init_std = 0.25;

  std::size_t top_n = 100;
  bool interpretable_only = false;
  std::size_t max_new_tokens = 8;

  bool layernorm_decode = false;
  std::size_t top_m = 10;

  double percentile = 0.95;
  ThresholdLevel threshold = ThresholdLevel::pixel;

  std::vector<std::size_t> schedule;  // empty: scaled default
  AblationMode mode = AblationMode::all_positions;

  std::size_t k_nearest = 5;
  std::size_t units_per_image = 4;

  std::vector<std::size_t> curve_schedule() const;
};

// Applies a JSON config on top of `s`. Unknown keys are rejected.
void apply_config(Settings& s, const nlohmann::json& config);
nlohmann::json settings_json(const Settings& s);

const char* to_string(ThresholdLevel level);
ThresholdLevel parse_threshold(const std::string& s);

// Records inputs and outputs of one run; manifest.json is written last via a
// rename so a partial run never leaves a complete-looking manifest.
class RunManifest {
 public:
  RunManifest(std::string command, std::filesystem::path out_dir);

  void set_config(const std::optional<std::filesystem::path>& path) { config_ = path; }
  void set_seed(std::uint64_t seed) { seed_ = seed; }
  void add_input(const std::filesystem::path& p);
  // Path relative to the output directory.
  std::filesystem::path output(const std::filesystem::path& relative);
  const std::filesystem::path& out_dir() const { return out_dir_; }
  void write();

 private:
  std::string command_;
  std::filesystem::path out_dir_;
  std::optional<std::filesystem::path> config_;
  std::uint64_t seed_ = 0;
  std::vector<std::string> inputs_;
  std::vector<std::string> outputs_;
  std::chrono::steady_clock::time_point start_;
};

inline constexpr const char* kArtifactVersion = "mmneuron 1.0 (MMN1 v1)";

}  // namespace mmn::cli
