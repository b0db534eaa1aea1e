#include "mmn/attribution.hpp"

#include <algorithm>
#include <map>
#include <set>

#include "json.hpp"
#include "mmn/error.hpp"

namespace mmn {

const char* to_string(TargetMethod m) {
  switch (m) {
    case TargetMethod::wordlist_noun:
      return "wordlist-noun";
    case TargetMethod::first_token:
      return "first-token";
    case TargetMethod::explicit_token:
      return "explicit";
  }
  return "unknown";
}

TargetToken select_target_token(const GenerationResult& generation, const Vocabulary& vocab,
                                const Wordlist& nouns) {
  const auto& toks = generation.tokens;
  if (toks.empty()) throw ValidationError("cannot select a target from an empty generation");
  constexpr std::size_t kMaxSubTokens = 4;
  for (std::size_t i = 0; i < toks.size(); ++i) {
    std::string joined;
    for (std::size_t j = i; j < std::min(toks.size(), i + kMaxSubTokens); ++j) {
      joined += vocab.token(toks[j]);
      if (nouns.contains_token(joined)) return {toks[i], i, TargetMethod::wordlist_noun};
    }
  }
  return {toks.front(), 0, TargetMethod::first_token};
}

std::vector<Matrix> backward_to_preactivations(const ModelWeights& weights, const ForwardTrace& trace,
                                               const TargetToken& target) {
  if (trace.length() == 0 || trace.layers.empty()) throw ValidationError("missing forward trace");
  if (target.token < 0 || static_cast<std::size_t>(target.token) >= weights.config.vocab_size)
    throw ValidationError("target token out of range");
  LogitSeed seed{trace.length() - 1, Vector(weights.config.vocab_size, 0.0)};
  seed.dlogits[static_cast<std::size_t>(target.token)] = 1.0;
  auto dz = backward(weights, trace, {seed}).dz;
  for (std::size_t l = 0; l < dz.size(); ++l)
    for (std::size_t p = 0; p < dz[l].rows(); ++p)
      if (!all_finite(dz[l].row(p)))
        throw NumericError("non-finite gradient at layer " + std::to_string(l) + " position " + std::to_string(p));
  return dz;
}

namespace {

bool record_before(const AttributionRecord& a, const AttributionRecord& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.layer != b.layer) return a.layer < b.layer;
  if (a.unit != b.unit) return a.unit < b.unit;
  return a.patch < b.patch;
}

}  // namespace

AttributionTable attribution_scores(const ForwardTrace& trace, const std::vector<Matrix>& gradients,
                                    PatchRange patches) {
  if (gradients.size() != trace.layers.size()) throw ValidationError("gradients do not match trace");
  if (patches.begin > patches.end || patches.end > trace.length())
    throw ValidationError("patch range outside the prompt");
  AttributionTable table;
  for (std::size_t l = 0; l < trace.layers.size(); ++l) {
    const Matrix& z = trace.layers[l].z;
    const Matrix& g = gradients[l];
    if (g.rows() != z.rows() || g.cols() != z.cols()) throw ShapeError("gradient shape mismatch");
    for (std::size_t u = 0; u < z.cols(); ++u)
      for (std::size_t p = patches.begin; p < patches.end; ++p) {
        AttributionRecord r;
        r.layer = static_cast<std::uint32_t>(l);
        r.unit = static_cast<std::uint32_t>(u);
        r.patch = static_cast<std::uint32_t>(p - patches.begin);
        r.z = z(p, u);
        r.grad = g(p, u);
        r.score = r.z * r.grad;
        table.records.push_back(r);
      }
  }
  std::sort(table.records.begin(), table.records.end(), record_before);
  return table;
}

ImageAttribution attribute_prompt(const ModelWeights& weights, const PromptInput& prompt, const Vocabulary& vocab,
                                  const Wordlist& nouns, std::size_t max_new_tokens,
                                  std::optional<TokenId> stop_token, std::string image_id) {
  ImageAttribution out;
  out.prompt = prompt;
  out.generation = generate_greedy(weights, prompt, max_new_tokens, stop_token);
  if (out.generation.tokens.empty()) throw ValidationError("caption is empty; nothing to attribute");
  const TargetToken target = select_target_token(out.generation, vocab, nouns);
  const auto context = extend_prompt(prompt, std::span(out.generation.tokens).first(target.step));
  const auto trace = *forward(weights, context, true).trace;
  out.table = attribution_scores(trace, backward_to_preactivations(weights, trace, target), {0, prompt.n_soft()});
  out.table.image_id = std::move(image_id);
  out.table.caption = out.generation.tokens;
  out.table.target = target;
  return out;
}

std::vector<AttributionRecord> top_neurons(const AttributionTable& table, std::size_t n,
                                           const std::function<bool(UnitRef)>& keep) {
  if (n < 1) throw ValidationError("top_neurons: n must be >= 1");
  std::vector<AttributionRecord> out;
  for (const auto& r : table.records) {
    if (out.size() >= n) break;
    if (keep && !keep(r.unit_ref())) continue;
    out.push_back(r);
  }
  return out;
}

std::vector<UnitRef> distinct_units(const std::vector<AttributionRecord>& records, std::size_t limit) {
  std::vector<UnitRef> out;
  std::set<UnitRef> seen;
  for (const auto& r : records) {
    if (out.size() >= limit) break;
    if (seen.insert(r.unit_ref()).second) out.push_back(r.unit_ref());
  }
  return out;
}

std::vector<std::pair<UnitRef, double>> unit_scores(const AttributionTable& table) {
  std::map<UnitRef, double> sums;
  for (const auto& r : table.records) sums[r.unit_ref()] += r.score;
  std::vector<std::pair<UnitRef, double>> out(sums.begin(), sums.end());
  std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  return out;
}

void write_attribution_jsonl(std::ostream& out, const AttributionTable& table,
                             const std::vector<AttributionRecord>& records) {
  for (const auto& r : records) {
    nlohmann::json j;
    j["image"] = table.image_id;
    j["layer"] = r.layer;
    j["unit"] = r.unit;
    j["patch"] = r.patch;
    j["z"] = r.z;
    j["grad"] = r.grad;
    j["score"] = r.score;
    out << j.dump() << '\n';
  }
}

}  // namespace mmn
