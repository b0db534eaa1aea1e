#pragma once

#include <filesystem>
#include <functional>
#include <ostream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "mmn/model.hpp"
#include "mmn/transformer.hpp"
#include "mmn/vocabulary.hpp"

namespace mmn {

// Set of lowercase words. Token strings are normalized before lookup by
// stripping exactly one leading space and lowercasing.
class Wordlist {
 public:
  Wordlist() = default;
  explicit Wordlist(const std::vector<std::string>& words);

  static Wordlist load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  bool contains_word(std::string_view word) const;  // exact, already normalized
  bool contains_token(std::string_view token) const;
  std::size_t size() const { return words_.size(); }
  std::vector<std::string> sorted() const;

 private:
  std::unordered_set<std::string> words_;
};

// Strips one leading space and lowercases (ASCII and Latin-1 letters).
std::string normalize_token(std::string_view token);
// Number of Unicode alphabetic code points, or -1 if any code point is not a
// letter (digits, hyphens, punctuation, invalid UTF-8).
int letter_count(std::string_view word);

struct DecodedToken {
  TokenId id;
  std::string text;
  double prob;
};

struct NeuronDecoding {
  std::uint32_t layer = 0;
  std::uint32_t unit = 0;
  std::vector<DecodedToken> top;
  bool layernorm_applied = false;
};

// Vocabulary distribution of a unit's value vector (column `unit` of W_out).
NeuronDecoding decode_neuron(const ModelWeights& weights, const Vocabulary& vocab, std::uint32_t layer,
                             std::uint32_t unit, std::size_t m = 10, bool apply_final_layernorm = false);

struct InterpretabilityVerdict {
  bool passes = false;
  std::size_t dictionary_word_count = 0;
  std::vector<std::string> inspected;
};

inline constexpr std::size_t kInspectedTokens = 10;
inline constexpr std::size_t kRequiredWords = 7;
inline constexpr int kMinWordLetters = 3;

// At least 7 of the top 10 tokens must be dictionary words of >= 3 letters.
InterpretabilityVerdict is_interpretable(const NeuronDecoding& decoding, const Wordlist& dictionary);
InterpretabilityVerdict is_interpretable(const std::vector<std::string>& top_tokens,
                                         const Wordlist& dictionary);

// Predicate over units, precomputed for every unit of the model.
std::function<bool(UnitRef)> interpretable_filter(const ModelWeights& weights, const Vocabulary& vocab,
                                                  const Wordlist& dictionary,
                                                  bool apply_final_layernorm = false);

struct NearToken {
  TokenId id;
  double similarity;
};

// Tokens whose input embeddings have the highest cosine similarity with `v`.
std::vector<NearToken> nearest_tokens(const ModelWeights& weights, std::span<const double> v,
                                      std::size_t n = 5);

// Mean over references of the best cosine similarity to any candidate, using
// token input embeddings. Stand-in for neural caption scorers.
double agreement_score(std::span<const TokenId> candidates, std::span<const TokenId> references,
                       const ModelWeights& weights);

void write_decoding_jsonl(std::ostream& out, const NeuronDecoding& decoding,
                          const InterpretabilityVerdict& verdict);

}  // namespace mmn
