#include "mmn/causal.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include "json.hpp"
#include "mmn/decoder.hpp"
#include "mmn/error.hpp"
#include "mmn/parallel.hpp"

namespace mmn {

const char* to_string(AblationMode m) { return m == AblationMode::patch_only ? "patch-only" : "all-positions"; }

AblationMode parse_ablation_mode(std::string_view s) {
  if (s == "all-positions") return AblationMode::all_positions;
  if (s == "patch-only") return AblationMode::patch_only;
  throw ValidationError("unknown ablation mode: " + std::string(s));
}

void AblationSpec::normalize() {
  std::sort(units.begin(), units.end());
  units.erase(std::unique(units.begin(), units.end()), units.end());
}

void AblationSpec::validate(const ModelConfig& config) const {
  std::set<UnitRef> seen;
  for (const auto& u : units) {
    if (u.layer >= config.n_layers || u.unit >= config.d_mlp)
      throw ValidationError("ablated unit out of range: layer " + std::to_string(u.layer) + " unit " +
                            std::to_string(u.unit));
    if (!seen.insert(u).second)
      throw ValidationError("duplicate ablated unit: layer " + std::to_string(u.layer) + " unit " +
                            std::to_string(u.unit));
  }
}

ActivationEdit AblationSpec::edit(std::size_t n_soft) const {
  ActivationEdit e;
  e.zeroed = units;
  if (mode == AblationMode::patch_only) {
    e.zero_begin = 0;
    e.zero_end = n_soft;
  }
  return e;
}

AblationRun ablate_forward(const ModelWeights& weights, const PromptInput& prompt, const AblationSpec& spec,
                           std::size_t max_new_tokens, std::optional<TokenId> stop_token,
                           std::size_t target_step) {
  spec.validate(weights.config);
  AblationRun run;
  run.generation = generate_greedy(weights, prompt, max_new_tokens, stop_token, spec.edit(prompt.n_soft()));
  if (target_step < run.generation.step_logits.size()) run.target_logits = run.generation.step_logits[target_step];
  return run;
}

AblationOutcome ablate(const ModelWeights& weights, const PromptInput& prompt, const GenerationResult& original,
                       const TargetToken& target, const AblationSpec& spec, std::size_t max_new_tokens,
                       std::optional<TokenId> stop_token) {
  if (target.step >= original.tokens.size() || target.step >= original.step_logits.size())
    throw ValidationError("target step outside the original generation");
  spec.validate(weights.config);
  const auto c = static_cast<std::size_t>(target.token);
  AblationOutcome out;
  const Vector& orig_logits = original.step_logits[target.step];
  out.logit_original = orig_logits[c];
  out.p_original = softmax(orig_logits)[c];

  const auto forced = extend_prompt(prompt, std::span(original.tokens).first(target.step));
  const Vector abl_logits = forward(weights, forced, false, spec.edit(prompt.n_soft())).logits;
  out.logit_ablated = abl_logits[c];
  out.p_ablated = softmax(abl_logits)[c];
  out.relative_drop = out.p_original > 0.0 ? 1.0 - out.p_ablated / out.p_original : 0.0;

  out.original_caption = original.tokens;
  if (spec.units.empty()) {
    out.ablated_caption = original.tokens;
  } else {
    out.ablated_caption = ablate_forward(weights, prompt, spec, max_new_tokens, stop_token).generation.tokens;
  }
  out.agreement = agreement_score(out.ablated_caption, out.original_caption, weights);
  return out;
}

Cohorts build_cohorts(const AttributionTable& table, std::size_t k_max, std::uint64_t seed,
                      const ModelConfig& config, const std::function<bool(UnitRef)>& interpretable) {
  if (table.records.empty()) throw ValidationError("build_cohorts: empty attribution table");
  Cohorts c;
  c.top = distinct_units(table.records, k_max);
  if (c.top.size() < k_max)
    throw ValidationError("attribution table has only " + std::to_string(c.top.size()) + " distinct units, need " +
                          std::to_string(k_max));
  if (interpretable) {
    std::set<UnitRef> seen;
    for (const auto& r : table.records) {
      if (c.top_interpretable.size() >= k_max) break;
      const UnitRef u = r.unit_ref();
      if (seen.insert(u).second && interpretable(u)) c.top_interpretable.push_back(u);
    }
  }

  std::set<UnitRef> excluded(c.top.begin(), c.top.end());
  std::map<std::uint32_t, std::vector<std::uint32_t>> pool;
  for (const auto& u : c.top) {
    auto& p = pool[u.layer];
    if (p.empty())
      for (std::uint32_t k = 0; k < config.d_mlp; ++k)
        if (!excluded.contains({u.layer, k})) p.push_back(k);
  }
  std::mt19937_64 rng(seed);
  for (const auto& u : c.top) {
    auto& p = pool[u.layer];
    if (p.empty())
      throw ValidationError("not enough units in layer " + std::to_string(u.layer) + " for a matched random cohort");
    std::uniform_int_distribution<std::size_t> pick(0, p.size() - 1);
    const std::size_t i = pick(rng);
    c.random.push_back({u.layer, p[i]});
    p.erase(p.begin() + static_cast<std::ptrdiff_t>(i));
  }
  return c;
}

std::size_t max_cohort_size(const AttributionTable& table, const ModelConfig& config) {
  std::map<std::uint32_t, std::size_t> per_layer;
  std::size_t k = 0;
  for (const auto& u : distinct_units(table.records)) {
    if (2 * (per_layer[u.layer] + 1) > config.d_mlp) break;
    ++per_layer[u.layer];
    ++k;
  }
  return k;
}

std::vector<std::size_t> default_schedule(std::uint32_t d_mlp) {
  static constexpr std::size_t kBase[] = {0, 50, 100, 200, 400, 800, 1600, 3200, 6400};
  std::vector<std::size_t> out;
  for (std::size_t k : kBase) {
    auto v = static_cast<std::size_t>(std::llround(static_cast<double>(k) * d_mlp / 16384.0));
    if (!out.empty() && v <= out.back()) v = out.back() + 1;
    out.push_back(v);
  }
  return out;
}

void validate_schedule(const std::vector<std::size_t>& schedule) {
  if (schedule.empty() || schedule.front() != 0) throw ValidationError("schedule must start at 0");
  for (std::size_t i = 1; i < schedule.size(); ++i)
    if (schedule[i] <= schedule[i - 1]) throw ValidationError("schedule must be strictly increasing");
}

std::vector<std::size_t> parse_schedule(std::string_view text) {
  std::vector<std::size_t> out;
  std::stringstream ss{std::string(text)};
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      const long long v = std::stoll(item, &used);
      if (used != item.size() || v < 0) throw std::invalid_argument(item);
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw ValidationError("bad schedule entry: '" + item + "'");
    }
  }
  validate_schedule(out);
  return out;
}

CurveResult ablation_curve(const ModelWeights& weights, const std::vector<CurveImage>& images,
                           const std::vector<std::size_t>& schedule, const CurveOptions& options) {
  validate_schedule(schedule);
  if (images.empty()) throw ValidationError("ablation_curve: no images");
  const std::size_t k_max = schedule.back();

  std::vector<Cohorts> cohorts;
  for (std::size_t i = 0; i < images.size(); ++i)
    cohorts.push_back(build_cohorts(images[i].table, k_max, options.seed + i, weights.config, options.interpretable));

  std::vector<std::string> names{"top-g"};
  if (options.interpretable) names.push_back("top-g-interpretable");
  names.push_back("random");
  auto members = [&](const Cohorts& c, const std::string& name) -> const std::vector<UnitRef>& {
    if (name == "top-g") return c.top;
    if (name == "random") return c.random;
    return c.top_interpretable;
  };

  struct Job {
    std::size_t image, cohort, k;
  };
  std::vector<Job> jobs;
  for (std::size_t ci = 0; ci < names.size(); ++ci)
    for (std::size_t k : schedule)
      for (std::size_t i = 0; i < images.size(); ++i) jobs.push_back({i, ci, k});

  std::vector<std::optional<AblationOutcome>> results(jobs.size());
  parallel_for(jobs.size(), [&](std::size_t j) {
    const Job& job = jobs[j];
    const auto& list = members(cohorts[job.image], names[job.cohort]);
    if (job.k > list.size()) return;  // interpretable cohort can run short
    AblationSpec spec;
    spec.units.assign(list.begin(), list.begin() + static_cast<std::ptrdiff_t>(job.k));
    spec.mode = options.mode;
    spec.normalize();
    const auto& img = images[job.image];
    results[j] = ablate(weights, img.prompt, img.original, img.table.target, spec, options.max_new_tokens,
                        options.stop_token);
  });

  CurveResult out;
  std::size_t j = 0;
  for (std::size_t ci = 0; ci < names.size(); ++ci) {
    AblationCurve curve{names[ci], {}};
    for (std::size_t k : schedule) {
      CurvePoint pt{k, 0.0, 0.0, 0};
      for (std::size_t i = 0; i < images.size(); ++i, ++j) {
        if (!results[j]) continue;
        pt.mean_drop += results[j]->relative_drop;
        pt.mean_agreement += results[j]->agreement;
        ++pt.n;
        out.details.push_back({images[i].id, names[ci], k, *results[j]});
      }
      if (pt.n == 0) continue;
      pt.mean_drop /= static_cast<double>(pt.n);
      pt.mean_agreement /= static_cast<double>(pt.n);
      curve.points.push_back(pt);
    }
    out.curves.push_back(std::move(curve));
  }
  return out;
}

void write_curve_csv(std::ostream& out, const std::vector<AblationCurve>& curves) {
  out.precision(17);
  out << "k,cohort,mean_drop,mean_agreement\n";
  for (const auto& c : curves)
    for (const auto& p : c.points) out << p.k << ',' << c.cohort << ',' << p.mean_drop << ',' << p.mean_agreement << '\n';
}

void write_curve_details_jsonl(std::ostream& out, const std::vector<CurveDetail>& details) {
  for (const auto& d : details) {
    nlohmann::json j;
    j["image"] = d.image;
    j["cohort"] = d.cohort;
    j["k"] = d.k;
    j["p_original"] = d.outcome.p_original;
    j["p_ablated"] = d.outcome.p_ablated;
    j["relative_drop"] = d.outcome.relative_drop;
    j["original_caption"] = d.outcome.original_caption;
    j["ablated_caption"] = d.outcome.ablated_caption;
    j["agreement"] = d.outcome.agreement;
    j["agreement_metric"] = kAgreementMetric;
    out << j.dump() << '\n';
  }
}

}  // namespace mmn
