#include "mmn/bench.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <set>

#include "json.hpp"
#include "mmn/error.hpp"
#include "mmn/transformer.hpp"

namespace mmn {

std::uint64_t sub_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

namespace {

// Residual-stream layout of the planted model (norms of fixed components).
constexpr double kBallast = 4.0;       // position embeddings, keeps layernorm near-linear
constexpr double kStopNorm = 3.0;      // in noun embeddings, read by the eos logit
constexpr double kDefaultNorm = 2.0;   // in " of", read by the " a" logit
constexpr double kTriggerNorm = 2.0;   // projected trigger patch along its read direction
constexpr double kMoverGain = 20.0;
constexpr double kNounLogit = 3.0;
constexpr double kStopLogit = 12.0;
constexpr double kDefaultLogit = 3.0;
constexpr double kGenericLogit = 0.3;
constexpr double kInitialBeta = 0.25;
constexpr double kBackgroundSpread = 0.15;

const char* const kSpecials[] = {"<eos>", "A", " picture", " of", " a"};

struct ConceptWords {
  const char* noun;
  const char* related[6];
};

const ConceptWords kConceptWords[] = {
    {" horse", {" saddle", " pony", " stable", " rider", " mane", " hoof"}},
    {" dog", {" puppy", " leash", " bark", " collar", " paw", " tail"}},
    {" boat", {" sail", " harbor", " ship", " dock", " oar", " lake"}},
    {" tree", {" forest", " leaf", " branch", " trunk", " wood", " oak"}},
};

const char* const kFillers[] = {" the",  " in",    " on",    " with", " field", " water", " grass", " sky",
                                " road", " house", " small", " large", " red",  " blue",  " green", " white"};
const char* const kFragments[] = {"ing", "ed", "ly", "s", ".", ",", "!", "?", "-", "'", "1", "2", "3", "4", "x"};
const char* const kNouns[] = {"horse", "dog", "boat", "tree", "field", "water", "grass", "sky", "road", "house"};

// Orthonormal basis of the complement of the all-ones vector, split into roles.
struct Basis {
  Vector ballast, stop, fallback;
  std::vector<Vector> read, write;  // per concept
  std::vector<Vector> rest;
};

Basis make_basis(std::size_t dim, std::size_t n_concepts, std::mt19937_64& rng) {
  std::normal_distribution<double> nd;
  std::vector<Vector> q{Vector(dim, 1.0 / std::sqrt(static_cast<double>(dim)))};
  while (q.size() < dim) {
    Vector v(dim);
    for (double& x : v) x = nd(rng);
    for (int pass = 0; pass < 2; ++pass)
      for (const auto& b : q) axpy(-dot(v, b), b, v);
    const double n = norm(v);
    for (double& x : v) x /= n;
    q.push_back(std::move(v));
  }
  Basis b;
  std::size_t i = 1;
  b.ballast = q[i++];
  b.stop = q[i++];
  b.fallback = q[i++];
  for (std::size_t c = 0; c < n_concepts; ++c) b.read.push_back(q[i++]);
  for (std::size_t c = 0; c < n_concepts; ++c) b.write.push_back(q[i++]);
  b.rest.assign(q.begin() + static_cast<std::ptrdiff_t>(i), q.end());
  return b;
}

// Gaussian combination of the `rest` directions, coefficient std `sigma`.
Vector in_rest(const Basis& b, double sigma, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, sigma);
  Vector v(b.ballast.size(), 0.0);
  for (const auto& r : b.rest) axpy(nd(rng), r, v);
  return v;
}

Vector unit_in_rest(const Basis& b, std::mt19937_64& rng) {
  Vector v = in_rest(b, 1.0, rng);
  const double n = norm(v);
  for (double& x : v) x /= n;
  return v;
}

Vector scaled(const Vector& v, double s) {
  Vector out(v);
  for (double& x : out) x *= s;
  return out;
}

void set_row(Matrix& m, std::size_t r, const Vector& v) { std::copy(v.begin(), v.end(), m.row(r).begin()); }

void set_col(Matrix& m, std::size_t c, const Vector& v) {
  for (std::size_t r = 0; r < m.rows(); ++r) m(r, c) = v[r];
}

Vector add(Vector a, const Vector& b, double s = 1.0) {
  axpy(s, b, a);
  return a;
}

// Trigger texture in pixel space. Encoder rows are orthonormal, so the patch
// E^T t encodes exactly to t.
Vector trigger_pixels(const EncoderWeights& enc, const Vector& trigger) {
  Vector px(enc.weight.cols(), 0.0);
  matvec_t_acc(enc.weight, trigger, px);
  return px;
}

SyntheticScene render_scene(const ModelConfig& cfg, const EncoderWeights& enc, const std::vector<Vector>& triggers,
                            const std::vector<Concept>& concepts, const Vocabulary& vocab,
                            const std::vector<std::size_t>& present, std::uint64_t seed, std::uint32_t extent) {
  const std::uint32_t g = cfg.patch_grid;
  const std::uint32_t ps = cfg.patch_size();
  if (extent == 0 || extent > g) throw ValidationError("concept extent must be in [1, patch_grid]");
  {
    std::set<std::size_t> seen;
    for (std::size_t c : present) {
      if (c >= triggers.size() || triggers[c].empty()) throw ValidationError("unknown concept " + std::to_string(c));
      if (!seen.insert(c).second) throw ValidationError("concepts in a scene must be distinct");
    }
  }
  std::mt19937_64 rng(seed);
  SyntheticScene scene;
  scene.id = "scene_" + std::to_string(seed);

  std::vector<int> owner(static_cast<std::size_t>(g) * g, -1);
  for (std::size_t k = 0; k < present.size(); ++k) {
    std::vector<std::pair<std::uint32_t, std::uint32_t>> free;
    for (std::uint32_t r = 0; r + extent <= g; ++r)
      for (std::uint32_t c = 0; c + extent <= g; ++c) {
        bool ok = true;
        for (std::uint32_t dr = 0; dr < extent && ok; ++dr)
          for (std::uint32_t dc = 0; dc < extent && ok; ++dc) ok = owner[(r + dr) * g + c + dc] < 0;
        if (ok) free.emplace_back(r, c);
      }
    if (free.empty()) throw ValidationError("no room to place concept " + std::to_string(present[k]));
    const auto [r0, c0] = free[std::uniform_int_distribution<std::size_t>(0, free.size() - 1)(rng)];
    Placement pl{present[k], {}};
    BinaryMask mask(cfg.image_size, cfg.image_size);
    mask.source = "annotation";
    for (std::uint32_t dr = 0; dr < extent; ++dr)
      for (std::uint32_t dc = 0; dc < extent; ++dc) {
        const std::uint32_t r = r0 + dr, c = c0 + dc;
        owner[r * g + c] = static_cast<int>(k);
        pl.cells.emplace_back(r, c);
        for (std::uint32_t y = 0; y < ps; ++y)
          for (std::uint32_t x = 0; x < ps; ++x) mask.set(r * ps + y, c * ps + x);
      }
    scene.placements.push_back(std::move(pl));
    scene.masks.push_back(std::move(mask));
  }

  // Unit directions of every trigger texture; background noise is kept
  // orthogonal to all of them so that no trigger fires by accident.
  std::vector<Vector> dirs;
  for (const auto& t : triggers) {
    if (t.empty()) continue;
    Vector px = trigger_pixels(enc, t);
    for (const auto& d : dirs) axpy(-dot(px, d), d, px);
    const double n = norm(px);
    if (n > 0) dirs.push_back(scaled(px, 1.0 / n));
  }

  std::uniform_real_distribution<double> spread(-kBackgroundSpread, kBackgroundSpread);
  scene.image = Image(cfg.image_size, cfg.channels);
  const std::size_t dim = cfg.patch_dim();
  for (std::uint32_t cell = 0; cell < g * g; ++cell) {
    Vector noise(dim);
    for (double& x : noise) x = spread(rng);
    for (const auto& d : dirs) axpy(-dot(noise, d), d, noise);
    Vector base(dim, 0.5);
    if (owner[cell] >= 0) axpy(1.0, trigger_pixels(enc, triggers[present[owner[cell]]]), base);
    // Shrink the noise if needed so that no pixel leaves [0, 1].
    double f = 1.0;
    for (std::size_t i = 0; i < dim; ++i) {
      if (base[i] < 0.0 || base[i] > 1.0) throw ValidationError("trigger texture exceeds the pixel range");
      if (noise[i] > 0) f = std::min(f, (1.0 - base[i]) / noise[i]);
      if (noise[i] < 0) f = std::min(f, -base[i] / noise[i]);
    }
    const std::uint32_t pr = cell / g, pc = cell % g;
    std::size_t i = 0;
    for (std::uint32_t y = 0; y < ps; ++y)
      for (std::uint32_t x = 0; x < ps; ++x)
        for (std::uint32_t ch = 0; ch < cfg.channels; ++ch, ++i)
          scene.image.at(pr * ps + y, pc * ps + x, ch) = std::clamp(base[i] + f * noise[i], 0.0, 1.0);
  }

  const TokenId eos = 0;
  scene.caption = {present.empty() ? vocab.id(" a") : concepts.at(present.front()).token, eos};
  return scene;
}

}  // namespace

Vocabulary bench_vocabulary(std::uint32_t vocab_size) {
  std::vector<std::string> t(std::begin(kSpecials), std::end(kSpecials));
  for (const auto& c : kConceptWords) t.emplace_back(c.noun);
  for (const auto& c : kConceptWords)
    for (const char* r : c.related) t.emplace_back(r);
  t.insert(t.end(), std::begin(kFillers), std::end(kFillers));
  t.insert(t.end(), std::begin(kFragments), std::end(kFragments));
  if (vocab_size < t.size())
    throw ValidationError("bench vocabulary needs at least " + std::to_string(t.size()) + " tokens");
  for (std::size_t k = 0; t.size() < vocab_size; ++k) t.push_back("<unused" + std::to_string(k) + ">");
  return Vocabulary(std::move(t));
}

std::vector<Concept> bench_concepts(const Vocabulary& vocab) {
  std::vector<Concept> out;
  for (const auto& c : kConceptWords) {
    Concept k{normalize_token(c.noun), vocab.id(c.noun), {}};
    for (const char* r : c.related) k.related.push_back(vocab.id(r));
    out.push_back(std::move(k));
  }
  return out;
}

Wordlist bench_dictionary() {
  std::vector<std::string> words{"a", "picture", "of"};
  for (const auto& c : kConceptWords) {
    words.push_back(normalize_token(c.noun));
    for (const char* r : c.related) words.push_back(normalize_token(r));
  }
  for (const char* f : kFillers) words.push_back(normalize_token(f));
  return Wordlist(words);
}

Wordlist bench_nouns() { return Wordlist(std::vector<std::string>(std::begin(kNouns), std::end(kNouns))); }

Vector default_trigger(std::size_t concept_id, const BenchOptions& options) {
  if (concept_id >= options.d_enc) throw ValidationError("d_enc too small for the number of concepts");
  Vector t(options.d_enc, 0.0);
  t[concept_id] = options.trigger_amplitude;
  return t;
}

std::vector<PlantSpec> default_plants(const ModelConfig& config, const BenchOptions& options, std::uint64_t seed) {
  const auto vocab = bench_vocabulary(config.vocab_size);
  const auto concepts = bench_concepts(vocab);
  std::vector<std::uint32_t> layers;
  if (config.n_layers >= 3)
    for (std::uint32_t l = 1; l + 1 < config.n_layers; ++l) layers.push_back(l);
  else
    layers.push_back(0);
  std::mt19937_64 rng(sub_seed(seed, 7));
  std::vector<std::vector<std::uint32_t>> pool(layers.size());
  for (auto& p : pool) {
    p.resize(config.d_mlp);
    for (std::uint32_t u = 0; u < config.d_mlp; ++u) p[u] = u;
    std::shuffle(p.begin(), p.end(), rng);
  }
  std::vector<PlantSpec> plants;
  std::size_t n = 0;
  for (std::size_t c = 0; c < concepts.size(); ++c)
    for (std::size_t k = 0; k < options.plants_per_concept; ++k, ++n) {
      const std::size_t li = n % layers.size();
      if (pool[li].empty()) throw ValidationError("not enough units for the requested plants");
      PlantSpec p;
      p.concept_id = c;
      p.trigger = default_trigger(c, options);
      p.layer = layers[li];
      p.unit = pool[li].back();
      pool[li].pop_back();
      p.target = concepts[c].token;
      p.alpha = options.alpha;
      plants.push_back(std::move(p));
    }
  return plants;
}

Pipeline PlantedModel::pipeline() const {
  return Pipeline{model, encoder, projection, vocab, 0, std::string(kCaptionPrefix)};
}

std::vector<UnitRef> PlantedModel::plant_units() const {
  std::vector<UnitRef> out;
  for (const auto& p : plants) out.push_back(p.unit_ref());
  return out;
}

std::vector<UnitRef> PlantedModel::plant_units(std::size_t concept_id) const {
  std::vector<UnitRef> out;
  for (const auto& p : plants)
    if (p.concept_id == concept_id) out.push_back(p.unit_ref());
  return out;
}

PlantedModel plant_model(const ModelConfig& config, std::vector<PlantSpec> plants, const BenchOptions& options,
                         std::uint64_t seed) {
  config.validate(kCaptionPrefix.size() > 0 ? 3 : 0);
  PlantedModel bench;
  bench.options = options;
  bench.seed = seed;
  bench.vocab = bench_vocabulary(config.vocab_size);
  bench.concepts = bench_concepts(bench.vocab);
  const std::size_t n_concepts = bench.concepts.size();
  const std::size_t e = config.d_model;
  if (config.n_layers < 2) throw ValidationError("the bench needs at least two layers");
  if (e < 3 + 2 * n_concepts + 9) throw ValidationError("d_model too small for the bench layout");
  if (config.head_dim() < n_concepts) throw ValidationError("head dimension too small for the readout head");
  if (options.d_enc < n_concepts + 1 || options.d_enc + 1 > config.patch_dim())
    throw ValidationError("d_enc out of range for the bench");
  if (!(options.noise_scale >= 0.0)) throw ValidationError("noise scale must be >= 0");

  // Plant validation.
  bench.triggers.assign(n_concepts, {});
  std::set<UnitRef> used;
  for (const auto& p : plants) {
    if (p.concept_id >= n_concepts) throw ValidationError("plant concept out of range");
    if (!(p.alpha > 0.0)) throw ValidationError("plant gain alpha must be positive");
    if (p.layer + 1 >= config.n_layers)
      throw ValidationError("infeasible plant: layer " + std::to_string(p.layer) +
                            " leaves no later layer for the readout head");
    if (p.unit >= config.d_mlp) throw ValidationError("plant unit out of range");
    if (!used.insert(p.unit_ref()).second)
      throw ValidationError("duplicate plant at layer " + std::to_string(p.layer) + " unit " +
                            std::to_string(p.unit));
    if (p.trigger.size() != options.d_enc) throw ValidationError("trigger must have d_enc entries");
    if (!(norm(p.trigger) > 0.0) || !all_finite(p.trigger)) throw ValidationError("trigger must be non-zero");
    if (p.target != bench.concepts[p.concept_id].token)
      throw ValidationError("plant target must be its concept's noun token");
    auto& t = bench.triggers[p.concept_id];
    if (t.empty()) {
      t = p.trigger;
    } else if (std::abs(dot(t, p.trigger) / (norm(t) * norm(p.trigger)) - 1.0) > 1e-9 ||
               std::abs(norm(t) - norm(p.trigger)) > 1e-9 * norm(t)) {
      throw ValidationError("trigger collision: plants of concept " + std::to_string(p.concept_id) +
                            " disagree on the trigger");
    }
  }
  for (std::size_t a = 0; a < n_concepts; ++a)
    for (std::size_t b = a + 1; b < n_concepts; ++b) {
      const auto &ta = bench.triggers[a], &tb = bench.triggers[b];
      if (ta.empty() || tb.empty()) continue;
      if (std::abs(dot(ta, tb)) > 1e-9 * norm(ta) * norm(tb))
        throw ValidationError("trigger collision: concepts " + std::to_string(a) + " and " + std::to_string(b) +
                              " have non-orthogonal triggers");
    }
  for (std::size_t c = 0; c < n_concepts; ++c) {
    if (!bench.triggers[c].empty()) continue;
    // Unplanted concepts still get a texture, orthogonal to the planted ones.
    Vector t = default_trigger(c, options);
    for (std::size_t k = 0; k < n_concepts; ++k) {
      const auto& o = bench.triggers[k];
      if (k == c || o.empty()) continue;
      if (std::abs(dot(t, o)) > 1e-9 * norm(t) * norm(o))
        throw ValidationError("trigger collision with the default texture of concept " + std::to_string(c));
    }
    bench.triggers[c] = t;
  }

  std::mt19937_64 basis_rng(sub_seed(seed, 1));
  const Basis B = make_basis(e, n_concepts, basis_rng);
  bench.encoder = EncoderWeights::random(config, options.d_enc, sub_seed(seed, 2));
  std::mt19937_64 rng(sub_seed(seed, 3));
  const double sigma = options.noise_scale;

  ModelWeights& w = bench.model;
  w = ModelWeights::zeros(config);
  const auto& vocab = bench.vocab;
  const TokenId eos = vocab.id("<eos>"), fallback = vocab.id(" a"), of = vocab.id(" of");

  // Token and position embeddings.
  for (std::size_t t = 0; t < config.vocab_size; ++t) set_row(w.token_embedding, t, unit_in_rest(B, rng));
  for (std::size_t c = 0; c < n_concepts; ++c) {
    const Vector shared = unit_in_rest(B, rng);
    const auto& k = bench.concepts[c];
    set_row(w.token_embedding, k.token,
            add(add(scaled(B.stop, kStopNorm), shared, 0.8), unit_in_rest(B, rng), 0.6));
    for (TokenId r : k.related) set_row(w.token_embedding, r, add(scaled(shared, 0.8), unit_in_rest(B, rng), 0.6));
  }
  set_row(w.token_embedding, fallback, add(scaled(B.stop, kStopNorm), unit_in_rest(B, rng)));
  set_row(w.token_embedding, of, add(scaled(B.fallback, kDefaultNorm), unit_in_rest(B, rng), 0.5));
  for (std::size_t p = 0; p < config.max_seq; ++p)
    set_row(w.position_embedding, p, add(scaled(B.ballast, kBallast), in_rest(B, sigma, rng)));

  // Noise weights: reads and writes confined to the rest subspace.
  std::normal_distribution<double> nd(0.0, sigma);
  for (auto& L : w.layers) {
    for (Matrix* m : {&L.wq, &L.wk, &L.wv})
      for (std::size_t r = 0; r < e; ++r) set_row(*m, r, in_rest(B, sigma, rng));
    for (std::size_t c = 0; c < e; ++c) set_col(L.wo, c, in_rest(B, sigma, rng));
    for (std::size_t u = 0; u < config.d_mlp; ++u) {
      set_row(L.w_in, u, in_rest(B, sigma, rng));
      L.b_in[u] = nd(rng);
      set_col(L.w_out, u, in_rest(B, sigma, rng));
    }
    L.b_out = in_rest(B, sigma, rng);
  }

  // Readout head: head 0 of the last layer attends uniformly and copies every
  // concept's write direction forward.
  auto& last = w.layers.back();
  for (std::size_t r = 0; r < config.head_dim(); ++r) {
    std::fill(last.wq.row(r).begin(), last.wq.row(r).end(), 0.0);
    std::fill(last.wk.row(r).begin(), last.wk.row(r).end(), 0.0);
    std::fill(last.wv.row(r).begin(), last.wv.row(r).end(), 0.0);
    set_col(last.wo, r, Vector(e, 0.0));
  }
  for (std::size_t c = 0; c < n_concepts; ++c) {
    set_row(last.wv, c, B.write[c]);
    set_col(last.wo, c, scaled(B.write[c], kMoverGain));
  }

  // Unembedding.
  for (std::size_t t = 0; t < config.vocab_size; ++t)
    set_row(w.unembedding, t, scaled(unit_in_rest(B, rng), kGenericLogit));
  for (std::size_t c = 0; c < n_concepts; ++c) {
    const auto& k = bench.concepts[c];
    set_row(w.unembedding, k.token, scaled(B.write[c], kNounLogit));
    for (TokenId r : k.related)
      set_row(w.unembedding, r, add(scaled(B.write[c], 0.5 * kNounLogit), unit_in_rest(B, rng), kGenericLogit));
  }
  set_row(w.unembedding, eos, scaled(B.stop, kStopLogit));
  set_row(w.unembedding, fallback, scaled(B.fallback, kDefaultLogit));

  // Projection: trigger codes onto the read directions, everything orthogonal
  // to the triggers into the rest subspace.
  Matrix& M = bench.projection.weight;
  M = Matrix(e, options.d_enc);
  {
    std::vector<Vector> tdirs;
    for (std::size_t c = 0; c < n_concepts; ++c) {
      const auto& t = bench.triggers[c];
      const double n2 = dot(t, t);
      for (std::size_t r = 0; r < e; ++r)
        for (std::size_t j = 0; j < options.d_enc; ++j) M(r, j) += kTriggerNorm * B.read[c][r] * t[j] / n2;
      tdirs.push_back(scaled(t, 1.0 / std::sqrt(n2)));
    }
    std::normal_distribution<double> gd(0.0, 1.5 / std::sqrt(static_cast<double>(options.d_enc)));
    Matrix G(e, options.d_enc);
    for (const auto& r : B.rest) {
      Vector coef(options.d_enc);
      for (double& x : coef) x = gd(rng);
      for (const auto& d : tdirs) axpy(-dot(coef, d), d, coef);
      for (std::size_t i = 0; i < e; ++i)
        for (std::size_t j = 0; j < options.d_enc; ++j) G(i, j) += r[i] * coef[j];
    }
    for (std::size_t i = 0; i < M.size(); ++i) M.data()[i] += G.data()[i];
  }

  bench.plants = std::move(plants);
  if (bench.plants.empty()) return bench;

  // Calibration scenes, one per planted concept.
  std::vector<std::size_t> planted;
  for (const auto& p : bench.plants)
    if (std::find(planted.begin(), planted.end(), p.concept_id) == planted.end()) planted.push_back(p.concept_id);
  std::sort(planted.begin(), planted.end());
  std::vector<SyntheticScene> calib;
  for (std::size_t c : planted)
    calib.push_back(render_scene(config, bench.encoder, bench.triggers, bench.concepts, vocab, {c},
                                 sub_seed(seed, 100 + c), 1));
  std::vector<std::uint32_t> layers;
  for (const auto& p : bench.plants) layers.push_back(p.layer);
  std::sort(layers.begin(), layers.end());
  layers.erase(std::unique(layers.begin(), layers.end()), layers.end());

  std::vector<double> beta(n_concepts, kInitialBeta);
  const Pipeline probe{w, bench.encoder, bench.projection, vocab, eos, std::string(kCaptionPrefix)};
  std::vector<PromptInput> prompts;
  for (const auto& s : calib) prompts.push_back(probe.prompt(s.image));
  auto scene_of = [&](std::size_t c) {
    return static_cast<std::size_t>(std::find(planted.begin(), planted.end(), c) - planted.begin());
  };

  for (int iter = 0; iter < 40; ++iter) {
    for (auto& p : bench.plants) {
      auto& L = w.layers[p.layer];
      set_row(L.w_in, p.unit, scaled(B.read[p.concept_id], p.alpha / kTriggerNorm));
      L.b_in[p.unit] = 0.0;
      set_col(L.w_out, p.unit, scaled(B.write[p.concept_id], beta[p.concept_id]));
      p.beta = beta[p.concept_id];
    }
    // Z in layer l depends only on earlier layers, so one ascending pass
    // calibrates every plant exactly on its scene.
    for (std::uint32_t l : layers) {
      std::vector<ForwardTrace> traces;
      for (const auto& pr : prompts) traces.push_back(*forward(w, pr, true).trace);
      for (auto& p : bench.plants) {
        if (p.layer != l) continue;
        const auto& s = calib[scene_of(p.concept_id)];
        const auto [r, c] = s.placements[0].cells[0];
        const double z = traces[scene_of(p.concept_id)].layers[l].z(r * config.patch_grid + c, p.unit);
        if (!(z > 0.0)) throw NumericError("plant calibration failed: trigger does not reach its unit");
        auto row = w.layers[l].w_in.row(p.unit);
        for (double& x : row) x *= p.alpha / z;
      }
    }
    bench.margins.clear();
    bool ok = true;
    for (std::size_t i = 0; i < planted.size(); ++i) {
      const std::size_t c = planted[i];
      const TokenId target = bench.concepts[c].token;
      const auto gen = generate_greedy(w, prompts[i], 4, eos);
      const auto& lg = gen.step_logits.at(0);
      double runner = -INFINITY;
      for (std::size_t t = 0; t < lg.size(); ++t)
        if (static_cast<TokenId>(t) != target) runner = std::max(runner, lg[t]);
      const double margin = lg[target] - runner;
      bench.margins.push_back(margin);
      if (margin < options.target_margin || gen.tokens != std::vector<TokenId>{target, eos}) {
        beta[c] *= 1.25;
        ok = false;
      }
    }
    if (ok) return bench;
  }
  throw ValidationError("infeasible plant: target margin " + std::to_string(options.target_margin) +
                        " not reached by tuning the output gain");
}

PlantedModel build_bench(const ModelConfig& config, const BenchOptions& options, std::uint64_t seed) {
  return plant_model(config, default_plants(config, options, seed), options, seed);
}

SyntheticScene gen_scene(const PlantedModel& bench, const std::vector<std::size_t>& concepts, std::uint64_t seed,
                         std::uint32_t extent) {
  return render_scene(bench.model.config, bench.encoder, bench.triggers, bench.concepts, bench.vocab, concepts, seed,
                      extent);
}

RecoveryReport evaluate_recovery(const std::vector<UnitRef>& detected, const std::vector<UnitRef>& planted) {
  const std::set<UnitRef> d(detected.begin(), detected.end()), p(planted.begin(), planted.end());
  RecoveryReport r;
  r.detected = d.size();
  r.planted = p.size();
  for (const auto& u : d) r.true_positives += p.count(u);
  r.precision = d.empty() ? 0.0 : static_cast<double>(r.true_positives) / d.size();
  r.recall = p.empty() ? 1.0 : static_cast<double>(r.true_positives) / p.size();
  return r;
}

double localization_iou(const Pipeline& pipeline, const SyntheticScene& scene, std::size_t placement, UnitRef unit,
                        double q, ThresholdLevel level) {
  if (placement >= scene.masks.size()) throw ValidationError("placement index out of range");
  const auto& cfg = pipeline.model.config;
  const auto tr = *forward(pipeline.model, pipeline.prompt(scene.image), true).trace;
  const auto h = activation_heatmap(tr, cfg, unit.layer, unit.unit);
  return iou(receptive_field_mask(h, cfg, q, level), scene.masks[placement]);
}

void save_scene(const std::filesystem::path& dir, const SyntheticScene& scene, std::ostream& manifest) {
  std::filesystem::create_directories(dir);
  const std::string image = scene.id + (scene.image.channels == 1 ? ".pgm" : ".ppm");
  save_image(dir / image, scene.image);
  nlohmann::json j;
  j["id"] = scene.id;
  j["image"] = image;
  j["caption"] = scene.caption;
  j["placements"] = nlohmann::json::array();
  for (std::size_t i = 0; i < scene.placements.size(); ++i) {
    const std::string mask = scene.id + "_mask" + std::to_string(i) + ".pgm";
    save_mask(dir / mask, scene.masks[i]);
    nlohmann::json cells = nlohmann::json::array();
    for (const auto& [r, c] : scene.placements[i].cells) cells.push_back({r, c});
    j["placements"].push_back({{"concept", scene.placements[i].concept_id}, {"cells", cells}, {"mask", mask}});
  }
  manifest << j.dump() << '\n';
}

std::vector<SyntheticScene> load_scenes(const std::filesystem::path& manifest) {
  std::ifstream in(manifest);
  if (!in) throw IoError("cannot open scene manifest " + manifest.string());
  const auto dir = manifest.parent_path();
  std::vector<SyntheticScene> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      SyntheticScene s;
      s.id = j.at("id").get<std::string>();
      s.image = load_image(dir / j.at("image").get<std::string>());
      s.caption = j.at("caption").get<std::vector<TokenId>>();
      for (const auto& p : j.at("placements")) {
        Placement pl;
        pl.concept_id = p.at("concept").get<std::size_t>();
        for (const auto& c : p.at("cells")) pl.cells.emplace_back(c.at(0).get<std::uint32_t>(), c.at(1).get<std::uint32_t>());
        s.placements.push_back(std::move(pl));
        s.masks.push_back(load_mask(dir / p.at("mask").get<std::string>()));
      }
      out.push_back(std::move(s));
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError("bad scene record at line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

void write_plants_json(const std::filesystem::path& path, const PlantedModel& bench) {
  nlohmann::json j;
  j["seed"] = bench.seed;
  const auto& o = bench.options;
  j["options"] = {{"d_enc", o.d_enc},
                  {"plants_per_concept", o.plants_per_concept},
                  {"alpha", o.alpha},
                  {"trigger_amplitude", o.trigger_amplitude},
                  {"noise_scale", o.noise_scale},
                  {"target_margin", o.target_margin}};
  j["concepts"] = nlohmann::json::array();
  for (const auto& c : bench.concepts) j["concepts"].push_back({{"name", c.name}, {"token", c.token}, {"related", c.related}});
  j["plants"] = nlohmann::json::array();
  for (const auto& p : bench.plants)
    j["plants"].push_back({{"concept", p.concept_id},
                           {"layer", p.layer},
                           {"unit", p.unit},
                           {"target", p.target},
                           {"alpha", p.alpha},
                           {"beta", p.beta},
                           {"trigger", p.trigger}});
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

PlantsFile read_plants_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    const auto j = nlohmann::json::parse(in);
    PlantsFile f;
    f.seed = j.value("seed", std::uint64_t{0});
    if (j.contains("options")) {
      const auto& o = j["options"];
      f.options.d_enc = o.value("d_enc", f.options.d_enc);
      f.options.plants_per_concept = o.value("plants_per_concept", f.options.plants_per_concept);
      f.options.alpha = o.value("alpha", f.options.alpha);
      f.options.trigger_amplitude = o.value("trigger_amplitude", f.options.trigger_amplitude);
      f.options.noise_scale = o.value("noise_scale", f.options.noise_scale);
      f.options.target_margin = o.value("target_margin", f.options.target_margin);
    }
    for (const auto& p : j.at("plants")) {
      PlantSpec s;
      s.concept_id = p.at("concept").get<std::size_t>();
      s.layer = p.at("layer").get<std::uint32_t>();
      s.unit = p.at("unit").get<std::uint32_t>();
      s.target = p.at("target").get<TokenId>();
      s.alpha = p.at("alpha").get<double>();
      s.beta = p.value("beta", 0.0);
      s.trigger = p.at("trigger").get<Vector>();
      f.plants.push_back(std::move(s));
    }
    return f;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("bad plant file " + path.string() + ": " + e.what());
  }
}

}  // namespace mmn
