#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "doctest.h"
#include "mmn/attribution.hpp"
#include "mmn/bench.hpp"
#include "mmn/causal.hpp"
#include "mmn/error.hpp"
#include "mmn/experiments.hpp"
#include "mmn/spatial.hpp"
#include "mmn/stats.hpp"

using namespace mmn;

namespace {

const PlantedModel& reference_bench() {
  static const PlantedModel b = build_bench(reference_config(), BenchOptions{}, 42);
  return b;
}

ImageAttribution attribute_scene(const PlantedModel& b, const SyntheticScene& s) {
  return attribute_prompt(b.model, b.pipeline().prompt(s.image), b.vocab, bench_nouns(), 4, 0, s.id);
}

bool contains(const std::vector<UnitRef>& v, UnitRef u) { return std::find(v.begin(), v.end(), u) != v.end(); }

}  // namespace

TEST_CASE("bench vocabulary") {
  const auto v = bench_vocabulary();
  CHECK(v.size() == 64);
  CHECK(v.tokenize(kCaptionPrefix) == std::vector<TokenId>{1, 2, 3});
  const auto concepts = bench_concepts(v);
  REQUIRE(concepts.size() == 4);
  CHECK(concepts[0].name == "horse");
  CHECK(v.token(concepts[3].token) == " tree");
  const auto dict = bench_dictionary();
  for (const auto& c : concepts) {
    CHECK(bench_nouns().contains_token(v.token(c.token)));
    for (TokenId r : c.related) CHECK(dict.contains_token(v.token(r)));
  }
  CHECK_FALSE(dict.contains_token("ing"));
  CHECK(bench_vocabulary(70).size() == 70);
  CHECK_THROWS_AS(bench_vocabulary(40), ValidationError);
}

TEST_CASE("default plants fit the reference config") {
  const auto cfg = reference_config();
  const auto plants = default_plants(cfg, BenchOptions{}, 42);
  CHECK(plants.size() == 16);
  std::set<UnitRef> units;
  for (const auto& p : plants) {
    CHECK((p.layer == 1 || p.layer == 2));
    units.insert(p.unit_ref());
  }
  CHECK(units.size() == 16);
}

TEST_CASE("planted model captions and margins") {
  const auto& b = reference_bench();
  REQUIRE(b.margins.size() == 4);
  for (double m : b.margins) CHECK(m >= 2.0);
  const auto pl = b.pipeline();
  for (std::size_t c = 0; c < 4; ++c) {
    const auto s = gen_scene(b, {c}, 300 + c);
    const auto gen = generate_greedy(pl.model, pl.prompt(s.image), 4, 0);
    CHECK(gen.tokens == s.caption);
  }
  const auto blank = gen_scene(b, {}, 310);
  CHECK(generate_greedy(pl.model, pl.prompt(blank.image), 4, 0).tokens == blank.caption);
}

TEST_CASE("single plant is the top attributed unit") {
  const auto cfg = reference_config();
  BenchOptions opt;
  PlantSpec p;
  p.concept_id = 2;
  p.trigger = default_trigger(2, opt);
  p.layer = 1;
  p.unit = 77;
  p.target = bench_concepts(bench_vocabulary())[2].token;
  const auto b = plant_model(cfg, {p}, opt, 5);
  REQUIRE(b.plants.size() == 1);
  CHECK(b.plants[0].beta > 0.0);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto s = gen_scene(b, {2}, seed);
    const auto a = attribute_scene(b, s);
    CHECK(a.generation.tokens.front() == p.target);
    CHECK(a.table.records.front().unit_ref() == p.unit_ref());
  }
}

TEST_CASE("zero plants stay inside the noise band") {
  const auto cfg = reference_config();
  // Band: largest |g| of any non-planted unit on planted-model trigger scenes.
  double band = 0.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto& b = reference_bench();
    const std::size_t c = seed % 4;
    const auto a = attribute_scene(b, gen_scene(b, {c}, 400 + seed));
    const auto planted = b.plant_units(c);
    for (const auto& r : a.table.records)
      if (!contains(planted, r.unit_ref())) band = std::max(band, std::abs(r.score));
  }
  MESSAGE("noise band " << band);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto z = plant_model(cfg, {}, BenchOptions{}, 500 + seed);
    CHECK(z.plants.empty());
    const auto a = attribute_scene(z, gen_scene(z, {seed % 4}, 600 + seed));
    double top = 0.0;
    for (const auto& r : a.table.records) top = std::max(top, std::abs(r.score));
    CHECK(top <= band);
  }
}

TEST_CASE("planted units are silent without their trigger") {
  const auto& b = reference_bench();
  const auto pl = b.pipeline();
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto s = gen_scene(b, {}, 700 + seed);
    const auto tr = *forward(pl.model, pl.prompt(s.image), true).trace;
    for (const auto& p : b.plants)
      for (std::size_t q = 0; q < b.model.config.n_patches(); ++q)
        CHECK(std::abs(tr.layers[p.layer].z(q, p.unit)) < 0.05 * p.alpha);
  }
  // Other concepts' triggers do not wake them either.
  const auto s = gen_scene(b, {1}, 710);
  const auto tr = *forward(pl.model, pl.prompt(s.image), true).trace;
  for (const auto& p : b.plants) {
    if (p.concept_id == 1) continue;
    for (std::size_t q = 0; q < 16; ++q) CHECK(std::abs(tr.layers[p.layer].z(q, p.unit)) < 0.05 * p.alpha);
  }
}

TEST_CASE("planted g exceeds the 99th percentile of the rest") {
  const auto& b = reference_bench();
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const std::size_t c = seed % 4;
    const auto s = gen_scene(b, {c}, 800 + seed);
    const auto a = attribute_scene(b, s);
    const auto planted = b.plant_units(c);
    const auto [r, col] = s.placements[0].cells[0];
    const std::uint32_t hot = r * 4 + col;
    std::vector<double> rest;
    std::vector<double> plant_g;
    for (const auto& rec : a.table.records) {
      if (!contains(planted, rec.unit_ref()))
        rest.push_back(rec.score);
      else if (rec.patch == hot)
        plant_g.push_back(rec.score);
    }
    REQUIRE(plant_g.size() == planted.size());
    const double p99 = percentile(rest, 0.99);
    for (double g : plant_g) CHECK(g > p99);
  }
}

TEST_CASE("ablating plants versus random units") {
  const auto& b = reference_bench();
  const auto& cfg = b.model.config;
  double planted_drop = 0.0, random_drop = 0.0;
  const int n = 20;
  for (int seed = 0; seed < n; ++seed) {
    const std::size_t c = seed % 4;
    const auto a = attribute_scene(b, gen_scene(b, {c}, 900 + seed));
    AblationSpec spec{b.plant_units(c)};
    spec.normalize();
    planted_drop += ablate(b.model, a.prompt, a.generation, a.table.target, spec, 4, 0).relative_drop;
    AblationSpec rnd{build_cohorts(a.table, spec.units.size(), 50 + seed, cfg).random};
    rnd.normalize();
    random_drop += ablate(b.model, a.prompt, a.generation, a.table.target, rnd, 4, 0).relative_drop;
  }
  CHECK(planted_drop / n >= 0.8);
  CHECK(random_drop / n <= 0.1);
}

TEST_CASE("plant_model errors") {
  const auto cfg = reference_config();
  BenchOptions opt;
  auto plants = default_plants(cfg, opt, 1);
  SUBCASE("duplicate unit") {
    plants[1].layer = plants[0].layer;
    plants[1].unit = plants[0].unit;
    CHECK_THROWS_AS(plant_model(cfg, plants, opt, 1), ValidationError);
  }
  SUBCASE("plant in the readout layer") {
    plants[0].layer = cfg.n_layers - 1;
    CHECK_THROWS_AS(plant_model(cfg, plants, opt, 1), ValidationError);
  }
  SUBCASE("non-orthogonal triggers collide") {
    for (auto& p : plants)
      if (p.concept_id == 1) p.trigger[0] = 0.5;
    try {
      plant_model(cfg, plants, opt, 1);
      FAIL("expected a collision");
    } catch (const ValidationError& e) {
      CHECK(std::string(e.what()).find("trigger collision") != std::string::npos);
    }
  }
  SUBCASE("plants of one concept disagree") {
    plants[0].trigger[5] = 1.0;
    CHECK_THROWS_AS(plant_model(cfg, plants, opt, 1), ValidationError);
  }
  SUBCASE("alpha must be positive") {
    plants[0].alpha = 0.0;
    CHECK_THROWS_AS(plant_model(cfg, plants, opt, 1), ValidationError);
  }
  SUBCASE("wrong target") {
    plants[0].target = 40;
    CHECK_THROWS_AS(plant_model(cfg, plants, opt, 1), ValidationError);
  }
}

TEST_CASE("planted model is deterministic") {
  const auto a = build_bench(reference_config(), BenchOptions{}, 42);
  CHECK(a.model == reference_bench().model);
  CHECK(a.projection == reference_bench().projection);
  CHECK(a.margins == reference_bench().margins);
  const auto other = build_bench(reference_config(), BenchOptions{}, 43);
  CHECK_FALSE(other.model == a.model);
}

TEST_CASE("gen_scene placement and masks") {
  const auto& b = reference_bench();
  const auto s = gen_scene(b, {0, 3}, 11);
  REQUIRE(s.masks.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    // The mask is exactly the union of its cells.
    BinaryMask expect(64, 64);
    for (const auto& [r, c] : s.placements[i].cells)
      for (std::uint32_t y = 0; y < 16; ++y)
        for (std::uint32_t x = 0; x < 16; ++x) expect.set(r * 16 + y, c * 16 + x);
    CHECK(s.masks[i].bits == expect.bits);
    CHECK(s.masks[i].count() == 256);
  }
  for (std::size_t i = 0; i < s.masks[0].bits.size(); ++i) CHECK_FALSE((s.masks[0].bits[i] && s.masks[1].bits[i]));
  CHECK(s.caption == std::vector<TokenId>{b.concepts[0].token, 0});
  for (double v : s.image.pixels) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }

  // A scene whose concept landed on cell (0,0) covers exactly that patch.
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const auto t = gen_scene(b, {2}, seed);
    if (t.placements[0].cells[0] != std::pair<std::uint32_t, std::uint32_t>{0, 0}) continue;
    for (std::uint32_t y = 0; y < 64; ++y)
      for (std::uint32_t x = 0; x < 64; ++x) CHECK(t.masks[0].at(y, x) == (y < 16 && x < 16));
    break;
  }

  const auto again = gen_scene(b, {0, 3}, 11);
  CHECK(again.image == s.image);
  CHECK(again.masks[0].bits == s.masks[0].bits);

  const auto big = gen_scene(b, {1}, 12, 2);
  CHECK(big.placements[0].cells.size() == 4);
  CHECK(big.masks[0].count() == 4 * 256);

  CHECK_THROWS_AS(gen_scene(b, {1, 1}, 13), ValidationError);
  CHECK_THROWS_AS(gen_scene(b, {0, 1}, 13, 3), ValidationError);
  CHECK_THROWS_AS(gen_scene(b, {9}, 13), ValidationError);
}

TEST_CASE("evaluate_recovery") {
  const std::vector<UnitRef> planted{{1, 2}, {1, 5}, {2, 7}, {2, 9}};
  auto r = evaluate_recovery(planted, planted);
  CHECK(r.precision == 1.0);
  CHECK(r.recall == 1.0);
  r = evaluate_recovery({{1, 2}, {1, 5}, {2, 7}}, planted);
  CHECK(r.recall == 0.75);
  CHECK(r.precision == 1.0);
  r = evaluate_recovery({{1, 2}, {0, 0}}, planted);
  CHECK(r.precision == 0.5);
  CHECK(r.recall == 0.25);
  CHECK(evaluate_recovery({}, planted).precision == 0.0);
}

TEST_CASE("planted units localize their concept") {
  const auto& b = reference_bench();
  const auto pl = b.pipeline();
  double total = 0.0;
  int n = 0;
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    const std::size_t c = seed % 4;
    const auto s = gen_scene(b, {c}, 1000 + seed);
    for (const auto& u : b.plant_units(c)) {
      total += localization_iou(pl, s, 0, u);
      ++n;
    }
  }
  CHECK(total / n >= 0.9);
  CHECK_THROWS_AS(localization_iou(pl, gen_scene(b, {0}, 1), 1, {1, 0}), ValidationError);
}

TEST_CASE("scene and plant files round trip") {
  const auto& b = reference_bench();
  const auto dir = std::filesystem::temp_directory_path() / "mmn_bench_test";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  const auto s = gen_scene(b, {1, 2}, 21);
  {
    std::ofstream m(dir / "scenes.jsonl");
    save_scene(dir, s, m);
  }
  const auto back = load_scenes(dir / "scenes.jsonl");
  REQUIRE(back.size() == 1);
  CHECK(back[0].id == s.id);
  CHECK(back[0].caption == s.caption);
  REQUIRE(back[0].placements.size() == 2);
  CHECK(back[0].placements[1].cells == s.placements[1].cells);
  CHECK(back[0].masks[0].bits == s.masks[0].bits);
  for (std::size_t i = 0; i < s.image.pixels.size(); ++i)
    CHECK(std::abs(back[0].image.pixels[i] - s.image.pixels[i]) <= 0.5 / 255 + 1e-12);

  write_plants_json(dir / "plants.json", b);
  const auto f = read_plants_json(dir / "plants.json");
  CHECK(f.seed == 42);
  REQUIRE(f.plants.size() == b.plants.size());
  for (std::size_t i = 0; i < f.plants.size(); ++i) {
    CHECK(f.plants[i].unit_ref() == b.plants[i].unit_ref());
    CHECK(f.plants[i].trigger == b.plants[i].trigger);
    CHECK(f.plants[i].beta == b.plants[i].beta);
  }
  const auto rebuilt = plant_model(b.model.config, f.plants, f.options, f.seed);
  CHECK(rebuilt.model == b.model);
  std::filesystem::remove_all(dir);
}

TEST_CASE("projection training on bench scenes reaches held-out caption accuracy") {
  const auto& b = reference_bench();
  auto pl = b.pipeline();
  pl.projection = ProjectionLayer::random(pl.model.config.d_model, b.encoder.d_enc(), 0.25, 5);
  const auto train = training_pairs(concept_scenes(b, 200, 5000));
  const auto held_out = concept_scenes(b, 200, 8000);
  TrainOptions opt;
  opt.epochs = 8;
  opt.batch_size = 8;
  opt.learning_rate = 0.5;
  opt.seed = 3;
  const auto r = train_projection(pl, train, opt);
  CHECK(r.steps == 200);
  const double before = first_token_accuracy(pl, held_out);
  pl.projection = r.projection;
  const double after = first_token_accuracy(pl, held_out);
  MESSAGE("accuracy " << before << " -> " << after);
  CHECK(after >= 0.95);
}

TEST_CASE("layer histogram peaks at the planted layers") {
  const auto& b = reference_bench();
  std::vector<std::vector<AttributionRecord>> records;
  for (const auto& s : concept_scenes(b, 12, 1100)) records.push_back(attribute_scene(b, s).table.records);
  const auto h = layer_histogram(records, b.options.plants_per_concept, b.model.config.n_layers);
  std::size_t planted_layers = 0, other = 0;
  for (const auto& c : h) (c.layer == 1 || c.layer == 2 ? planted_layers : other) += c.unique_units;
  CHECK(planted_layers == 12 * 4);
  CHECK(other == 0);
}

TEST_CASE("selectivity of planted units is diagonal") {
  const auto& b = reference_bench();
  std::vector<std::vector<Image>> images(4);
  std::vector<std::vector<UnitRef>> units(4);
  for (std::size_t c = 0; c < 4; ++c) {
    units[c] = b.plant_units(c);
    for (std::uint64_t s = 0; s < 3; ++s) images[c].push_back(gen_scene(b, {c}, 1200 + 10 * c + s).image);
  }
  const auto m = class_selectivity(b.pipeline(), images, units);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(m(i, i) == 1.0);
    for (std::size_t j = 0; j < 4; ++j)
      if (j != i) CHECK(m(i, j) < 0.1);
  }
}
