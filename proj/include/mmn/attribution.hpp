#pragma once

#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "mmn/decoder.hpp"
#include "mmn/transformer.hpp"
#include "mmn/vocabulary.hpp"

namespace mmn {

enum class TargetMethod { wordlist_noun, first_token, explicit_token };

const char* to_string(TargetMethod m);

struct TargetToken {
  TokenId token = 0;
  std::size_t step = 0;  // 0 = first generated token
  TargetMethod method = TargetMethod::explicit_token;
};

// First generated token that starts a noun from `nouns` (possibly spanning up
// to four tokens); falls back to the first generated token.
TargetToken select_target_token(const GenerationResult& generation, const Vocabulary& vocab,
                                const Wordlist& nouns);

// d y^c / d Z for every layer, position and unit: one backward pass from the
// raw target logit at the last traced position. The trace must be recorded on
// the prompt extended by the first `target.step` generated tokens.
std::vector<Matrix> backward_to_preactivations(const ModelWeights& weights, const ForwardTrace& trace,
                                               const TargetToken& target);

struct AttributionRecord {
  std::uint32_t layer = 0;
  std::uint32_t unit = 0;
  std::uint32_t patch = 0;
  double z = 0.0;
  double grad = 0.0;
  double score = 0.0;  // z * grad

  UnitRef unit_ref() const { return {layer, unit}; }
};

struct AttributionTable {
  std::vector<AttributionRecord> records;  // descending score
  std::string image_id;
  std::vector<TokenId> caption;
  TargetToken target;
};

struct PatchRange {
  std::size_t begin = 0;
  std::size_t end = 0;
};

// One record per (layer, unit, patch) over the image patch positions, sorted by
// descending score with ties in ascending (layer, unit, patch) order.
AttributionTable attribution_scores(const ForwardTrace& trace, const std::vector<Matrix>& gradients,
                                    PatchRange patches);

struct ImageAttribution {
  PromptInput prompt;
  GenerationResult generation;
  AttributionTable table;
};

// Caption greedily, pick the target token, and score every (layer, unit,
// patch) against it. Soft prompt positions are the patches.
ImageAttribution attribute_prompt(const ModelWeights& weights, const PromptInput& prompt, const Vocabulary& vocab,
                                  const Wordlist& nouns, std::size_t max_new_tokens,
                                  std::optional<TokenId> stop_token, std::string image_id = {});

// Top `n` records; units may repeat across patches. When `keep` is set,
// records whose unit fails it are skipped.
std::vector<AttributionRecord> top_neurons(const AttributionTable& table, std::size_t n,
                                           const std::function<bool(UnitRef)>& keep = {});

// Distinct units in first-appearance order.
std::vector<UnitRef> distinct_units(const std::vector<AttributionRecord>& records, std::size_t limit = SIZE_MAX);

// Sum of scores per unit over all patches.
std::vector<std::pair<UnitRef, double>> unit_scores(const AttributionTable& table);

void write_attribution_jsonl(std::ostream& out, const AttributionTable& table,
                             const std::vector<AttributionRecord>& records);

}  // namespace mmn
