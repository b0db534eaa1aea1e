#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "mmn/attribution.hpp"
#include "mmn/transformer.hpp"

namespace mmn {

// all_positions: every prompt position and every generation step.
// patch_only: image-patch positions only.
enum class AblationMode { all_positions, patch_only };

const char* to_string(AblationMode m);
AblationMode parse_ablation_mode(std::string_view s);

struct AblationSpec {
  std::vector<UnitRef> units;  // sorted, unique after normalize()
  AblationMode mode = AblationMode::all_positions;

  void normalize();
  void validate(const ModelConfig& config) const;
  ActivationEdit edit(std::size_t n_soft) const;
};

struct AblationRun {
  GenerationResult generation;
  Vector target_logits;  // logits at the target step of this (ablated) run, empty if not reached
};

AblationRun ablate_forward(const ModelWeights& weights, const PromptInput& prompt, const AblationSpec& spec,
                           std::size_t max_new_tokens, std::optional<TokenId> stop_token,
                           std::size_t target_step = 0);

// Agreement between captions uses the embedding-cosine score in place of
// external neural caption scorers.
inline constexpr const char* kAgreementMetric = "embedding-cosine";

struct AblationOutcome {
  double p_original = 0.0;
  double p_ablated = 0.0;
  double relative_drop = 0.0;  // 1 - p_ablated / p_original
  double logit_original = 0.0;
  double logit_ablated = 0.0;
  std::vector<TokenId> original_caption;
  std::vector<TokenId> ablated_caption;
  double agreement = 1.0;
};

// The target probability under ablation is read at the target's step with the
// original caption tokens before it kept fixed.
AblationOutcome ablate(const ModelWeights& weights, const PromptInput& prompt, const GenerationResult& original,
                       const TargetToken& target, const AblationSpec& spec, std::size_t max_new_tokens,
                       std::optional<TokenId> stop_token);

// Ordered unit lists; the cohort of size k is the first k entries of each.
struct Cohorts {
  std::vector<UnitRef> top;
  std::vector<UnitRef> top_interpretable;  // empty when no filter is given
  std::vector<UnitRef> random;             // random[i] lies in the layer of top[i]
};

// Random units are drawn from outside the top k_max units, layer by layer, so
// every prefix has the same layer histogram as the top cohort's prefix.
Cohorts build_cohorts(const AttributionTable& table, std::size_t k_max, std::uint64_t seed,
                      const ModelConfig& config, const std::function<bool(UnitRef)>& interpretable = {});

// Largest k for which build_cohorts can draw a layer-matched random cohort:
// every layer must keep as many units outside the top k as it has inside.
std::size_t max_cohort_size(const AttributionTable& table, const ModelConfig& config);

// 0,50,100,...,6400 scaled by d_mlp / 16384, forced strictly increasing.
std::vector<std::size_t> default_schedule(std::uint32_t d_mlp);
void validate_schedule(const std::vector<std::size_t>& schedule);
std::vector<std::size_t> parse_schedule(std::string_view text);

struct CurveImage {
  std::string id;
  PromptInput prompt;
  GenerationResult original;
  AttributionTable table;  // carries the target token
};

struct CurvePoint {
  std::size_t k = 0;
  double mean_drop = 0.0;
  double mean_agreement = 1.0;
  std::size_t n = 0;
};

struct AblationCurve {
  std::string cohort;  // top-g | top-g-interpretable | random
  std::vector<CurvePoint> points;
};

struct CurveDetail {
  std::string image;
  std::string cohort;
  std::size_t k = 0;
  AblationOutcome outcome;
};

struct CurveOptions {
  std::uint64_t seed = 0;
  AblationMode mode = AblationMode::all_positions;
  std::size_t max_new_tokens = 8;
  std::optional<TokenId> stop_token;
  std::function<bool(UnitRef)> interpretable;
};

struct CurveResult {
  std::vector<AblationCurve> curves;
  std::vector<CurveDetail> details;
};

CurveResult ablation_curve(const ModelWeights& weights, const std::vector<CurveImage>& images,
                           const std::vector<std::size_t>& schedule, const CurveOptions& options);

void write_curve_csv(std::ostream& out, const std::vector<AblationCurve>& curves);
void write_curve_details_jsonl(std::ostream& out, const std::vector<CurveDetail>& details);

}  // namespace mmn
