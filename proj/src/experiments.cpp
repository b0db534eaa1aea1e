#include "mmn/experiments.hpp"

#include <random>

#include "mmn/attribution.hpp"
#include "mmn/causal.hpp"
#include "mmn/decoder.hpp"
#include "mmn/error.hpp"
#include "mmn/parallel.hpp"

namespace mmn {

std::vector<TokenId> reference_tokens(const std::vector<TokenId>& caption, TokenId stop) {
  std::vector<TokenId> out(caption);
  while (!out.empty() && out.back() == stop) out.pop_back();
  if (out.empty()) throw ValidationError("caption has no tokens besides the stop token");
  return out;
}

AgreementComparison soft_prompt_agreement(const Pipeline& pipeline, const std::vector<SyntheticScene>& scenes,
                                          std::size_t k_nearest, std::uint64_t seed) {
  if (scenes.empty()) throw ValidationError("no scenes");
  AgreementComparison out;
  out.real.resize(scenes.size());
  out.random.resize(scenes.size());
  const auto& w = pipeline.model;
  parallel_for(scenes.size(), [&](std::size_t i) {
    const auto refs = reference_tokens(scenes[i].caption, pipeline.stop_token);
    const Matrix soft = pipeline.soft_prompts(scenes[i].image);
    std::mt19937_64 rng(seed + i);
    std::normal_distribution<double> nd;
    auto score = [&](std::span<const double> v) {
      std::vector<TokenId> c;
      for (const auto& t : nearest_tokens(w, v, k_nearest)) c.push_back(t.id);
      return agreement_score(c, refs, w);
    };
    double real = 0.0, random = 0.0;
    Vector v(w.config.d_model);
    for (std::size_t p = 0; p < soft.rows(); ++p) {
      real += score(soft.row(p));
      for (double& x : v) x = nd(rng);
      random += score(v);
    }
    out.real[i] = real / static_cast<double>(soft.rows());
    out.random[i] = random / static_cast<double>(soft.rows());
  });
  out.ks = ks_two_sample(out.real, out.random);
  return out;
}

AgreementComparison decoding_agreement(const Pipeline& pipeline, const std::vector<SyntheticScene>& scenes,
                                       const Wordlist& nouns, std::size_t units, std::uint64_t seed) {
  if (scenes.empty()) throw ValidationError("no scenes");
  if (units == 0) throw ValidationError("units per image must be >= 1");
  AgreementComparison out;
  out.real.resize(scenes.size());
  out.random.resize(scenes.size());
  const auto& w = pipeline.model;
  parallel_for(scenes.size(), [&](std::size_t i) {
    const auto refs = reference_tokens(scenes[i].caption, pipeline.stop_token);
    const auto a = attribute_prompt(w, pipeline.prompt(scenes[i].image), pipeline.vocab, nouns, 8,
                                    pipeline.stop_token, scenes[i].id);
    const auto cohorts = build_cohorts(a.table, units, seed + i, w.config);
    auto mean_score = [&](const std::vector<UnitRef>& us) {
      double s = 0.0;
      for (const auto& u : us) {
        std::vector<TokenId> c;
        for (const auto& t : decode_neuron(w, pipeline.vocab, u.layer, u.unit).top) c.push_back(t.id);
        s += agreement_score(c, refs, w);
      }
      return s / static_cast<double>(us.size());
    };
    out.real[i] = mean_score(cohorts.top);
    out.random[i] = mean_score(cohorts.random);
  });
  out.ks = ks_two_sample(out.real, out.random);
  return out;
}

double first_token_accuracy(const Pipeline& pipeline, const std::vector<SyntheticScene>& scenes) {
  if (scenes.empty()) throw ValidationError("no scenes");
  std::vector<int> hit(scenes.size(), 0);
  parallel_for(scenes.size(), [&](std::size_t i) {
    const auto gen = generate_greedy(pipeline.model, pipeline.prompt(scenes[i].image), 1, pipeline.stop_token);
    hit[i] = !gen.tokens.empty() && !scenes[i].caption.empty() && gen.tokens[0] == scenes[i].caption[0];
  });
  double n = 0;
  for (int h : hit) n += h;
  return n / static_cast<double>(scenes.size());
}

std::vector<TrainingPair> training_pairs(const std::vector<SyntheticScene>& scenes) {
  std::vector<TrainingPair> out;
  for (const auto& s : scenes) out.push_back({s.image, s.caption});
  return out;
}

std::vector<SyntheticScene> concept_scenes(const PlantedModel& bench, std::size_t n, std::uint64_t first_seed) {
  std::vector<SyntheticScene> out(n);
  parallel_for(n, [&](std::size_t i) { out[i] = gen_scene(bench, {i % bench.concepts.size()}, first_seed + i); });
  return out;
}

}  // namespace mmn
