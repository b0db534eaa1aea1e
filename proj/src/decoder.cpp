#include "mmn/decoder.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <memory>
#include <numeric>

#include "json.hpp"
#include "mmn/error.hpp"

namespace mmn {
namespace {

// Decodes one UTF-8 code point; returns false on malformed input.
bool next_code_point(std::string_view s, std::size_t& i, char32_t& cp) {
  const auto b0 = static_cast<unsigned char>(s[i]);
  std::size_t len = 0;
  if (b0 < 0x80) {
    cp = b0;
    len = 1;
  } else if ((b0 & 0xE0) == 0xC0) {
    cp = b0 & 0x1F;
    len = 2;
  } else if ((b0 & 0xF0) == 0xE0) {
    cp = b0 & 0x0F;
    len = 3;
  } else if ((b0 & 0xF8) == 0xF0) {
    cp = b0 & 0x07;
    len = 4;
  } else {
    return false;
  }
  if (i + len > s.size()) return false;
  for (std::size_t k = 1; k < len; ++k) {
    const auto b = static_cast<unsigned char>(s[i + k]);
    if ((b & 0xC0) != 0x80) return false;
    cp = (cp << 6) | (b & 0x3F);
  }
  i += len;
  return true;
}

bool is_letter(char32_t cp) {
  if ((cp >= 'a' && cp <= 'z') || (cp >= 'A' && cp <= 'Z')) return true;
  if (cp >= 0xC0 && cp <= 0x24F) return cp != 0xD7 && cp != 0xF7;  // Latin-1 + Extended
  if (cp >= 0x370 && cp <= 0x3FF) return cp >= 0x386;               // Greek
  if (cp >= 0x400 && cp <= 0x4FF) return true;                      // Cyrillic
  return false;
}

}  // namespace

std::string normalize_token(std::string_view token) {
  if (!token.empty() && token.front() == ' ') token.remove_prefix(1);
  std::string out(token);
  for (std::size_t i = 0; i < out.size(); ++i) {
    auto c = static_cast<unsigned char>(out[i]);
    if (c >= 'A' && c <= 'Z') {
      out[i] = static_cast<char>(c + ('a' - 'A'));
    } else if (c == 0xC3 && i + 1 < out.size()) {
      // Latin-1 capitals U+00C0..U+00DE (except U+00D7) are encoded C3 80..C3 9E.
      auto n = static_cast<unsigned char>(out[i + 1]);
      if (n >= 0x80 && n <= 0x9E && n != 0x97) out[i + 1] = static_cast<char>(n + 0x20);
      ++i;
    }
  }
  return out;
}

int letter_count(std::string_view word) {
  int count = 0;
  std::size_t i = 0;
  while (i < word.size()) {
    char32_t cp = 0;
    if (!next_code_point(word, i, cp) || !is_letter(cp)) return -1;
    ++count;
  }
  return count;
}

Wordlist::Wordlist(const std::vector<std::string>& words) {
  for (const auto& w : words)
    if (!w.empty()) words_.insert(normalize_token(w));
}

Wordlist Wordlist::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open wordlist " + path.string());
  std::vector<std::string> words;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    words.push_back(line);
  }
  return Wordlist(words);
}

void Wordlist::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write wordlist " + path.string());
  for (const auto& w : sorted()) out << w << '\n';
}

std::vector<std::string> Wordlist::sorted() const {
  std::vector<std::string> v(words_.begin(), words_.end());
  std::sort(v.begin(), v.end());
  return v;
}

bool Wordlist::contains_word(std::string_view word) const { return words_.contains(std::string(word)); }

bool Wordlist::contains_token(std::string_view token) const {
  return words_.contains(normalize_token(token));
}

NeuronDecoding decode_neuron(const ModelWeights& weights, const Vocabulary& vocab, std::uint32_t layer,
                             std::uint32_t unit, std::size_t m, bool apply_final_layernorm) {
  const auto& cfg = weights.config;
  if (layer >= cfg.n_layers || unit >= cfg.d_mlp)
    throw ValidationError("unit out of range: layer " + std::to_string(layer) + " unit " +
                          std::to_string(unit));
  if (vocab.size() != cfg.vocab_size) throw ValidationError("vocabulary size does not match model");
  const Matrix& w_out = weights.layers[layer].w_out;
  Vector value(cfg.d_model);
  for (std::size_t r = 0; r < cfg.d_model; ++r) value[r] = w_out(r, unit);
  const Vector probs = decode_hidden(weights, value, apply_final_layernorm);

  std::vector<std::size_t> order(probs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });
  NeuronDecoding d;
  d.layer = layer;
  d.unit = unit;
  d.layernorm_applied = apply_final_layernorm;
  for (std::size_t i = 0; i < std::min(m, order.size()); ++i) {
    const auto id = static_cast<TokenId>(order[i]);
    d.top.push_back({id, vocab.token(id), probs[order[i]]});
  }
  return d;
}

InterpretabilityVerdict is_interpretable(const std::vector<std::string>& top_tokens,
                                         const Wordlist& dictionary) {
  if (top_tokens.size() < kInspectedTokens)
    throw ValidationError("interpretability filter needs at least 10 decoded tokens");
  InterpretabilityVerdict v;
  for (std::size_t i = 0; i < kInspectedTokens; ++i) {
    const std::string word = normalize_token(top_tokens[i]);
    v.inspected.push_back(top_tokens[i]);
    if (letter_count(word) >= kMinWordLetters && dictionary.contains_word(word)) ++v.dictionary_word_count;
  }
  v.passes = v.dictionary_word_count >= kRequiredWords;
  return v;
}

InterpretabilityVerdict is_interpretable(const NeuronDecoding& decoding, const Wordlist& dictionary) {
  std::vector<std::string> tokens;
  for (const auto& t : decoding.top) tokens.push_back(t.text);
  return is_interpretable(tokens, dictionary);
}

std::function<bool(UnitRef)> interpretable_filter(const ModelWeights& weights, const Vocabulary& vocab,
                                                  const Wordlist& dictionary, bool apply_final_layernorm) {
  const auto& cfg = weights.config;
  auto verdict = std::make_shared<std::vector<bool>>(static_cast<std::size_t>(cfg.n_layers) * cfg.d_mlp);
  for (std::uint32_t l = 0; l < cfg.n_layers; ++l)
    for (std::uint32_t u = 0; u < cfg.d_mlp; ++u) {
      const auto d = decode_neuron(weights, vocab, l, u, kInspectedTokens, apply_final_layernorm);
      (*verdict)[static_cast<std::size_t>(l) * cfg.d_mlp + u] = is_interpretable(d, dictionary).passes;
    }
  const std::uint32_t d_mlp = cfg.d_mlp;
  return [verdict, d_mlp](UnitRef u) {
    const std::size_t i = static_cast<std::size_t>(u.layer) * d_mlp + u.unit;
    if (u.unit >= d_mlp || i >= verdict->size()) throw ValidationError("unit out of range");
    return static_cast<bool>((*verdict)[i]);
  };
}

std::vector<NearToken> nearest_tokens(const ModelWeights& weights, std::span<const double> v, std::size_t n) {
  if (v.size() != weights.config.d_model) throw ShapeError("query width != d_model");
  if (!all_finite(v)) throw NumericError("non-finite query vector");
  const double vn = norm(v);
  if (vn == 0.0) throw ValidationError("nearest_tokens: zero query vector");
  const Matrix& emb = weights.token_embedding;
  std::vector<NearToken> all;
  all.reserve(emb.rows());
  for (std::size_t t = 0; t < emb.rows(); ++t) {
    const double en = norm(emb.row(t));
    const double sim = en == 0.0 ? 0.0 : dot(emb.row(t), v) / (en * vn);
    all.push_back({static_cast<TokenId>(t), sim});
  }
  std::stable_sort(all.begin(), all.end(),
                   [](const NearToken& a, const NearToken& b) { return a.similarity > b.similarity; });
  all.resize(std::min(n, all.size()));
  return all;
}

double agreement_score(std::span<const TokenId> candidates, std::span<const TokenId> references,
                       const ModelWeights& weights) {
  if (candidates.empty() || references.empty()) throw ValidationError("agreement_score: empty token list");
  const Matrix& emb = weights.token_embedding;
  auto row = [&](TokenId id) {
    if (id < 0 || static_cast<std::size_t>(id) >= emb.rows())
      throw ValidationError("token id out of range: " + std::to_string(id));
    return emb.row(static_cast<std::size_t>(id));
  };
  auto cosine = [&](TokenId a, TokenId b) {
    if (a == b) return 1.0;
    const double na = norm(row(a)), nb = norm(row(b));
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot(row(a), row(b)) / (na * nb);
  };
  double total = 0.0;
  for (TokenId r : references) {
    double best = -1.0;
    for (TokenId c : candidates) best = std::max(best, cosine(r, c));
    total += best;
  }
  return total / static_cast<double>(references.size());
}

void write_decoding_jsonl(std::ostream& out, const NeuronDecoding& decoding,
                          const InterpretabilityVerdict& verdict) {
  nlohmann::json j;
  j["layer"] = decoding.layer;
  j["unit"] = decoding.unit;
  std::vector<std::string> tokens;
  std::vector<double> probs;
  for (const auto& t : decoding.top) {
    tokens.push_back(t.text);
    probs.push_back(t.prob);
  }
  j["tokens"] = tokens;
  j["probs"] = probs;
  j["interpretable"] = verdict.passes;
  j["layernorm"] = decoding.layernorm_applied;
  out << j.dump() << '\n';
}

}  // namespace mmn
