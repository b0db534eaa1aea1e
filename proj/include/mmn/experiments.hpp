#pragma once

#include <cstdint>
#include <vector>

#include "mmn/bench.hpp"
#include "mmn/stats.hpp"
#include "mmn/trainer.hpp"

namespace mmn {

// Caption without trailing stop tokens.
std::vector<TokenId> reference_tokens(const std::vector<TokenId>& caption, TokenId stop);

struct AgreementComparison {
  std::vector<double> real;    // one score per image
  std::vector<double> random;  // one score per image
  KsResult ks;
};

// Per image: mean over patches of the agreement between the k tokens nearest
// to each soft prompt and the caption. The random side replaces each soft
// prompt by an isotropic Gaussian vector.
AgreementComparison soft_prompt_agreement(const Pipeline& pipeline, const std::vector<SyntheticScene>& scenes,
                                          std::size_t k_nearest, std::uint64_t seed);

// Per image: mean agreement between the caption and the top-10 decodings of
// the `units` highest-scoring distinct units. The random side decodes
// layer-matched random units instead.
AgreementComparison decoding_agreement(const Pipeline& pipeline, const std::vector<SyntheticScene>& scenes,
                                       const Wordlist& nouns, std::size_t units, std::uint64_t seed);

// Fraction of scenes whose first generated token is the first caption token.
double first_token_accuracy(const Pipeline& pipeline, const std::vector<SyntheticScene>& scenes);

std::vector<TrainingPair> training_pairs(const std::vector<SyntheticScene>& scenes);

// Single-concept scenes cycling through the concepts, seeds first_seed, first_seed + 1, ...
std::vector<SyntheticScene> concept_scenes(const PlantedModel& bench, std::size_t n, std::uint64_t first_seed);

}  // namespace mmn
