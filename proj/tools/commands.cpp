#include "commands.hpp"

#include <algorithm>
#include <fstream>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "mmn/attribution.hpp"
#include "mmn/bench.hpp"
#include "mmn/causal.hpp"
#include "mmn/decoder.hpp"
#include "mmn/error.hpp"
#include "mmn/experiments.hpp"
#include "mmn/model_io.hpp"
#include "mmn/parallel.hpp"
#include "mmn/spatial.hpp"
#include "mmn/stats.hpp"
#include "mmn/trainer.hpp"
#include "settings.hpp"

namespace mmn::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct Flags {
  std::optional<std::string> config, model, image, data, units, schedule, mode, plants, which;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> top_n, count, epochs, extent;
  std::optional<double> percentile, lr;
  std::string out_dir = ".";
  bool interpretable_only = false;
  bool layernorm_decode = false;
  bool grid_threshold = false;
  bool warm_start = false;
  bool untrained = false;
};

Settings resolve(const Flags& f) {
  Settings s;
  if (f.config) {
    std::ifstream in(*f.config);
    if (!in) throw IoError("cannot open config " + *f.config);
    json j;
    try {
      j = json::parse(in);
    } catch (const json::parse_error& e) {
      throw ValidationError("config " + *f.config + " is not valid JSON: " + e.what());
    }
    apply_config(s, j);
  }
  if (f.seed) s.seed = *f.seed;
  if (f.top_n) s.top_n = *f.top_n;
  if (f.interpretable_only) s.interpretable_only = true;
  if (f.percentile) s.percentile = *f.percentile;
  if (f.schedule) s.schedule = parse_schedule(*f.schedule);
  if (f.layernorm_decode) s.layernorm_decode = true;
  if (f.mode) s.mode = parse_ablation_mode(*f.mode);
  if (f.grid_threshold) s.threshold = ThresholdLevel::grid;
  if (f.count) s.scenes = *f.count;
  if (f.extent) s.extent = static_cast<std::uint32_t>(*f.extent);
  if (f.epochs) s.train.epochs = *f.epochs;
  if (f.lr) s.train.learning_rate = *f.lr;

  if (s.top_n == 0) throw ValidationError("top-n must be >= 1");
  if (!(s.percentile >= 0.0 && s.percentile <= 1.0)) throw ValidationError("percentile must lie in [0, 1]");
  if (!s.schedule.empty()) validate_schedule(s.schedule);
  if (s.scenes == 0) throw ValidationError("scene count must be >= 1");
  if (s.extent == 0) throw ValidationError("extent must be >= 1");
  return s;
}

std::ofstream open_out(const fs::path& p) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw IoError("cannot write " + p.string());
  return out;
}

// Output file usable where an std::ostream& is expected.
struct OutFile {
  std::ofstream stream;
  operator std::ostream&() { return stream; }
};
OutFile out_file(const fs::path& p) { return {open_out(p)}; }

void write_json(const fs::path& p, const json& j) { open_out(p) << j.dump(2) << '\n'; }

// Seeds of generated scenes: disjoint ranges per stream under one root seed.
std::uint64_t scene_seed_base(std::uint64_t seed, std::uint64_t stream) {
  return (sub_seed(seed, 0) >> 24) + stream * 1000000;
}

struct Bench {
  PlantedModel bench;
  bool has_plants = false;
  Wordlist dictionary;
  Wordlist nouns;

  Pipeline pipeline() const { return bench.pipeline(); }
  void require_plants() const {
    if (!has_plants) throw ValidationError("this command needs the plants.json sidecar next to the model");
  }
};

Wordlist wordlist_or(const fs::path& p, Wordlist fallback) { return fs::exists(p) ? Wordlist::load(p) : fallback; }

// Model file plus sidecars in the same directory: vocab.txt (required),
// plants.json, dictionary.txt and nouns.txt (optional).
Bench load_bench(const fs::path& path, RunManifest& m) {
  ModelFile f = load_model(path);
  m.add_input(path);
  if (!f.encoder || !f.projection) throw ValidationError(path.string() + " has no encoder or projection");
  const fs::path dir = path.parent_path();
  Vocabulary vocab = Vocabulary::load(dir / "vocab.txt");
  m.add_input(dir / "vocab.txt");
  if (vocab.size() != f.weights.config.vocab_size)
    throw ValidationError("vocab.txt has " + std::to_string(vocab.size()) + " tokens, the model expects " +
                          std::to_string(f.weights.config.vocab_size));
  Bench b;
  if (fs::exists(dir / "plants.json")) {
    const auto pf = read_plants_json(dir / "plants.json");
    m.add_input(dir / "plants.json");
    b.bench = plant_model(f.weights.config, pf.plants, pf.options, pf.seed);
    b.has_plants = true;
  } else {
    b.bench.concepts = bench_concepts(vocab);
  }
  b.bench.model = std::move(f.weights);
  b.bench.encoder = std::move(*f.encoder);
  b.bench.projection = std::move(*f.projection);
  b.bench.vocab = std::move(vocab);
  b.dictionary = wordlist_or(dir / "dictionary.txt", bench_dictionary());
  b.nouns = wordlist_or(dir / "nouns.txt", bench_nouns());
  return b;
}

void write_model_dir(RunManifest& m, const fs::path& sub, const PlantedModel& b, const ProjectionLayer& projection,
                     bool with_plants, const Wordlist& dictionary, const Wordlist& nouns) {
  save_model(m.output(sub / "model.mmn1"), ModelFile{b.model, b.encoder, projection, StorageType::f64});
  b.vocab.save(m.output(sub / "vocab.txt"));
  if (with_plants) write_plants_json(m.output(sub / "plants.json"), b);
  dictionary.save(m.output(sub / "dictionary.txt"));
  nouns.save(m.output(sub / "nouns.txt"));
}

std::vector<UnitRef> parse_units(const std::string& text, const ModelConfig& cfg) {
  std::vector<UnitRef> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto colon = item.find(':');
    if (colon == std::string::npos) throw ValidationError("unit '" + item + "' is not of the form L:U");
    UnitRef u;
    try {
      std::size_t used = 0;
      u.layer = static_cast<std::uint32_t>(std::stoul(item.substr(0, colon), &used));
      if (used != colon) throw std::invalid_argument(item);
      const std::string rest = item.substr(colon + 1);
      u.unit = static_cast<std::uint32_t>(std::stoul(rest, &used));
      if (used != rest.size()) throw std::invalid_argument(item);
    } catch (const std::logic_error&) {
      throw ValidationError("unit '" + item + "' is not of the form L:U");
    }
    if (u.layer >= cfg.n_layers || u.unit >= cfg.d_mlp) throw ValidationError("unit '" + item + "' out of range");
    out.push_back(u);
  }
  if (out.empty()) throw ValidationError("empty unit list");
  return out;
}

// --units, else every planted unit.
std::vector<UnitRef> units_or_plants(const Flags& f, const Bench& b) {
  if (f.units) return parse_units(*f.units, b.bench.model.config);
  if (!b.has_plants || b.bench.plants.empty()) throw ValidationError("--units is required for a model without plants");
  auto u = b.bench.plant_units();
  std::sort(u.begin(), u.end());
  return u;
}

std::vector<SyntheticScene> load_inputs(const Flags& f, RunManifest& m) {
  if (f.image && f.data) throw ValidationError("give either --image or --data, not both");
  if (f.image) {
    SyntheticScene s;
    s.id = fs::path(*f.image).stem().string();
    s.image = load_image(*f.image);
    m.add_input(*f.image);
    return {s};
  }
  if (f.data) {
    auto scenes = load_scenes(*f.data);
    m.add_input(*f.data);
    if (scenes.empty()) throw ValidationError(*f.data + " lists no scenes");
    return scenes;
  }
  throw ValidationError("--image or --data is required");
}

std::string caption_text(const Vocabulary& vocab, const std::vector<TokenId>& tokens) {
  std::string s;
  for (TokenId t : tokens) s += vocab.token(t);
  return s;
}

std::vector<ImageAttribution> attribute_all(const Bench& b, const std::vector<SyntheticScene>& scenes,
                                            const Settings& s) {
  const auto pl = b.pipeline();
  std::vector<ImageAttribution> out(scenes.size());
  parallel_for(scenes.size(), [&](std::size_t i) {
    out[i] = attribute_prompt(pl.model, pl.prompt(scenes[i].image), pl.vocab, b.nouns, s.max_new_tokens,
                              pl.stop_token, scenes[i].id);
  });
  return out;
}

std::function<bool(UnitRef)> maybe_filter(const Bench& b, const Settings& s, bool wanted) {
  if (!wanted) return {};
  return interpretable_filter(b.bench.model, b.bench.vocab, b.dictionary, s.layernorm_decode);
}

json outcome_json(const AblationOutcome& o) {
  return {{"p_original", o.p_original},         {"p_ablated", o.p_ablated},
          {"relative_drop", o.relative_drop},   {"logit_original", o.logit_original},
          {"logit_ablated", o.logit_ablated},   {"original_caption", o.original_caption},
          {"ablated_caption", o.ablated_caption}, {"agreement", o.agreement}};
}

json units_json(const std::vector<UnitRef>& units) {
  json j = json::array();
  for (const auto& u : units) j.push_back({u.layer, u.unit});
  return j;
}

// One random unit per input unit, in the same layer, avoiding `exclude`.
std::vector<UnitRef> same_layer_random(const std::vector<UnitRef>& units, const std::vector<UnitRef>& exclude,
                                       std::uint32_t d_mlp, std::uint64_t seed) {
  std::set<UnitRef> taken(exclude.begin(), exclude.end());
  taken.insert(units.begin(), units.end());
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::uint32_t> pick(0, d_mlp - 1);
  std::vector<UnitRef> out;
  for (const auto& u : units) {
    UnitRef r{u.layer, pick(rng)};
    for (std::size_t tries = 0; taken.count(r); ++tries) {
      if (tries > 100 * d_mlp) throw ValidationError("no free unit in layer " + std::to_string(u.layer));
      r.unit = pick(rng);
    }
    taken.insert(r);
    out.push_back(r);
  }
  return out;
}

struct IouRow {
  std::string image;
  std::size_t placement = 0;
  std::string cohort;
  UnitRef unit;
  double iou = 0.0;
};

// Planted units of each placement's concept against its mask, plus as many
// same-layer random units. With explicit units, only those.
std::vector<IouRow> iou_rows(const Bench& b, const std::vector<SyntheticScene>& scenes,
                             const std::optional<std::vector<UnitRef>>& units, const Settings& s,
                             ThresholdLevel level) {
  const auto pl = b.pipeline();
  const auto& cfg = pl.model.config;
  std::vector<std::vector<IouRow>> per(scenes.size());
  parallel_for(scenes.size(), [&](std::size_t i) {
    const auto& sc = scenes[i];
    if (sc.masks.empty()) throw ValidationError("scene " + sc.id + " has no masks");
    const auto tr = *forward(pl.model, pl.prompt(sc.image), true).trace;
    auto add = [&](std::size_t p, const std::string& cohort, const std::vector<UnitRef>& us) {
      for (const auto& u : us) {
        const auto h = activation_heatmap(tr, cfg, u.layer, u.unit);
        per[i].push_back({sc.id, p, cohort, u, iou(receptive_field_mask(h, cfg, s.percentile, level), sc.masks[p])});
      }
    };
    for (std::size_t p = 0; p < sc.placements.size(); ++p) {
      if (units) {
        add(p, "given", *units);
        continue;
      }
      const auto planted = b.bench.plant_units(sc.placements[p].concept_id);
      add(p, "planted", planted);
      add(p, "random",
          same_layer_random(planted, b.bench.plant_units(), cfg.d_mlp, sub_seed(s.seed, 300 + i * 16 + p)));
    }
  });
  std::vector<IouRow> out;
  for (auto& v : per) out.insert(out.end(), v.begin(), v.end());
  return out;
}

void write_iou_rows(std::ostream& out, const std::vector<IouRow>& rows) {
  for (const auto& r : rows)
    out << json{{"image", r.image},   {"placement", r.placement}, {"cohort", r.cohort},
                {"layer", r.unit.layer}, {"unit", r.unit.unit},   {"iou", r.iou}}
               .dump()
        << '\n';
}

std::map<std::string, double> mean_iou(const std::vector<IouRow>& rows) {
  std::map<std::string, std::pair<double, std::size_t>> acc;
  for (const auto& r : rows) {
    acc[r.cohort].first += r.iou;
    ++acc[r.cohort].second;
  }
  std::map<std::string, double> out;
  for (const auto& [k, v] : acc) out[k] = v.first / static_cast<double>(v.second);
  return out;
}

Matrix selectivity(const Bench& b, const std::vector<SyntheticScene>& scenes, std::vector<std::size_t>& classes) {
  std::map<std::size_t, std::vector<Image>> by_class;
  for (const auto& sc : scenes)
    if (!sc.placements.empty()) by_class[sc.placements[0].concept_id].push_back(sc.image);
  std::vector<std::vector<Image>> images;
  std::vector<std::vector<UnitRef>> units;
  classes.clear();
  for (auto& [c, imgs] : by_class) {
    auto us = b.bench.plant_units(c);
    if (us.empty()) continue;
    classes.push_back(c);
    images.push_back(std::move(imgs));
    units.push_back(std::move(us));
  }
  if (classes.empty()) throw ValidationError("no scenes of a planted concept");
  return class_selectivity(b.pipeline(), images, units);
}

void write_selectivity_csv(std::ostream& out, const Bench& b, const Matrix& m, const std::vector<std::size_t>& cls) {
  out << "units";
  for (auto c : cls) out << ',' << b.bench.concepts[c].name;
  out << '\n';
  for (std::size_t i = 0; i < cls.size(); ++i) {
    out << b.bench.concepts[cls[i]].name;
    for (std::size_t j = 0; j < cls.size(); ++j) out << ',' << m(i, j);
    out << '\n';
  }
}

json ks_json(const AgreementComparison& a) {
  return {{"d", a.ks.d}, {"p", a.ks.p}, {"n_real", a.ks.n_a}, {"n_random", a.ks.n_b},
          {"real", a.real}, {"random", a.random}};
}

void write_train_log(std::ostream& out, const TrainResult& r) {
  out << "epoch,loss,learning_rate\n";
  for (std::size_t e = 0; e < r.loss_log.size(); ++e) {
    out << e << ',' << r.loss_log[e] << ',';
    if (e > 0) out << r.learning_rates[e - 1];
    out << '\n';
  }
}

std::vector<CurveImage> curve_images(const std::vector<SyntheticScene>& scenes,
                                     const std::vector<ImageAttribution>& attributions) {
  std::vector<CurveImage> out;
  for (std::size_t i = 0; i < scenes.size(); ++i)
    out.push_back({scenes[i].id, attributions[i].prompt, attributions[i].generation, attributions[i].table});
  return out;
}

// Schedule points beyond what every image's matched random cohort allows are
// dropped; the rest run unchanged.
std::vector<std::size_t> feasible_schedule(const std::vector<std::size_t>& schedule,
                                           const std::vector<ImageAttribution>& all, const ModelConfig& cfg,
                                           RunManifest& m) {
  std::size_t limit = SIZE_MAX;
  for (const auto& a : all) limit = std::min(limit, max_cohort_size(a.table, cfg));
  std::vector<std::size_t> used, dropped;
  for (std::size_t k : schedule) (k <= limit ? used : dropped).push_back(k);
  if (!dropped.empty()) {
    std::cerr << "note: dropped schedule points above " << limit << ":";
    for (std::size_t k : dropped) std::cerr << ' ' << k;
    std::cerr << '\n';
  }
  write_json(m.output("curve_schedule.json"), {{"requested", schedule}, {"used", used}, {"max_cohort_size", limit}});
  return used;
}

// ---- subcommands ----

void gen_model(const Flags& f, const Settings& s, RunManifest& m) {
  PlantedModel b;
  if (f.plants) {
    const auto pf = read_plants_json(*f.plants);
    m.add_input(*f.plants);
    b = plant_model(s.model, pf.plants, pf.options, pf.seed);
  } else {
    b = build_bench(s.model, s.bench, s.seed);
  }
  write_model_dir(m, "", b, b.projection, true, bench_dictionary(), bench_nouns());
  json margins = json::array();
  for (double x : b.margins) margins.push_back(x);
  std::cout << "planted " << b.plants.size() << " units; margins";
  for (double x : b.margins) std::cout << ' ' << x;
  std::cout << '\n';
  write_json(m.output("bench.json"), {{"plants", b.plants.size()}, {"margins", margins}});
}

void gen_data(const Flags& f, const Settings& s, RunManifest& m) {
  const auto b = load_bench(*f.model, m);
  b.require_plants();
  const std::uint64_t base = scene_seed_base(s.seed, 1);
  std::vector<SyntheticScene> scenes(s.scenes);
  parallel_for(s.scenes, [&](std::size_t i) {
    scenes[i] = gen_scene(b.bench, {i % b.bench.concepts.size()}, base + i, s.extent);
  });
  auto manifest = open_out(m.output("scenes.jsonl"));
  for (const auto& sc : scenes) {
    save_scene(m.out_dir(), sc, manifest);
    m.output(sc.id + (sc.image.channels == 1 ? ".pgm" : ".ppm"));
    for (std::size_t i = 0; i < sc.masks.size(); ++i) m.output(sc.id + "_mask" + std::to_string(i) + ".pgm");
  }
  std::cout << "wrote " << scenes.size() << " scenes\n";
}

void train_proj(const Flags& f, const Settings& s, RunManifest& m) {
  auto b = load_bench(*f.model, m);
  if (!f.data) throw ValidationError("--data is required");
  const auto data = load_dataset(*f.data);
  m.add_input(*f.data);
  auto pl = b.pipeline();
  if (!f.warm_start)
    pl.projection = ProjectionLayer::random(pl.model.config.d_model, pl.encoder.d_enc(), s.init_std, sub_seed(s.seed, 21));
  TrainOptions opt = s.train;
  opt.seed = sub_seed(s.seed, 22);
  const auto r = train_projection(pl, data, opt);
  write_model_dir(m, "", b.bench, r.projection, b.has_plants, b.dictionary, b.nouns);
  write_train_log(out_file(m.output("train_log.csv")), r);
  std::cout << "loss " << r.loss_log.front() << " -> " << r.loss_log.back() << " in " << r.steps << " steps\n";
}

void caption(const Flags& f, const Settings& s, RunManifest& m) {
  const auto b = load_bench(*f.model, m);
  const auto scenes = load_inputs(f, m);
  const auto pl = b.pipeline();
  auto caps = open_out(m.output("captions.jsonl"));
  auto summary = open_out(m.output("trace_summary.jsonl"));
  for (const auto& sc : scenes) {
    const auto prompt = pl.prompt(sc.image);
    const auto gen = generate_greedy(pl.model, prompt, s.max_new_tokens, pl.stop_token);
    const std::string text = caption_text(pl.vocab, gen.tokens);
    std::cout << sc.id << ':';
    for (TokenId t : gen.tokens) std::cout << ' ' << t;
    std::cout << "  \"" << text << "\"\n";
    caps << json{{"image", sc.id}, {"tokens", gen.tokens}, {"text", text}, {"step_prob", gen.step_prob}}.dump()
         << '\n';

    const auto tr = *forward(pl.model, prompt, true).trace;
    json layers = json::array();
    for (std::size_t l = 0; l < tr.layers.size(); ++l) {
      const auto& lt = tr.layers[l];
      double max_z = 0.0, best = -1.0;
      std::uint32_t top = 0;
      for (std::size_t p = 0; p < prompt.n_soft(); ++p)
        for (std::uint32_t k = 0; k < lt.z.cols(); ++k) {
          max_z = std::max(max_z, std::abs(lt.z(p, k)));
          if (lt.act(p, k) > best) best = lt.act(p, k), top = k;
        }
      layers.push_back({{"layer", l}, {"max_abs_z", max_z}, {"top_unit", top}, {"top_activation", best}});
    }
    summary << json{{"image", sc.id}, {"positions", tr.length()}, {"layers", layers}}.dump() << '\n';
  }
}

void attribute(const Flags& f, const Settings& s, RunManifest& m) {
  const auto b = load_bench(*f.model, m);
  const auto scenes = load_inputs(f, m);
  const auto keep = maybe_filter(b, s, s.interpretable_only);
  const auto all = attribute_all(b, scenes, s);
  auto out = open_out(m.output("attribution.jsonl"));
  auto caps = open_out(m.output("captions.jsonl"));
  for (const auto& a : all) {
    write_attribution_jsonl(out, a.table, top_neurons(a.table, s.top_n, keep));
    caps << json{{"image", a.table.image_id},
                 {"caption", a.table.caption},
                 {"text", caption_text(b.bench.vocab, a.table.caption)},
                 {"target", a.table.target.token},
                 {"target_step", a.table.target.step},
                 {"target_method", to_string(a.table.target.method)}}
                .dump()
         << '\n';
  }
  std::cout << "attributed " << all.size() << " image(s), top " << s.top_n << " records each\n";
}

void decode_neurons(const Flags& f, const Settings& s, RunManifest& m) {
  const auto b = load_bench(*f.model, m);
  const auto units = units_or_plants(f, b);
  auto out = open_out(m.output("decodings.jsonl"));
  std::size_t passing = 0;
  for (const auto& u : units) {
    const auto d = decode_neuron(b.bench.model, b.bench.vocab, u.layer, u.unit, s.top_m, s.layernorm_decode);
    const auto v = is_interpretable(d, b.dictionary);
    passing += v.passes;
    write_decoding_jsonl(out, d, v);
    std::cout << 'L' << u.layer << "/U" << u.unit << (v.passes ? " [interpretable]" : "") << ':';
    for (std::size_t i = 0; i < std::min<std::size_t>(5, d.top.size()); ++i) std::cout << " '" << d.top[i].text << "'";
    std::cout << '\n';
  }
  std::cout << passing << " of " << units.size() << " units pass the interpretability filter\n";
}

void heatmap(const Flags& f, const Settings& s, RunManifest& m) {
  const auto b = load_bench(*f.model, m);
  if (!f.image) throw ValidationError("--image is required");
  const auto scenes = load_inputs(f, m);
  const auto units = units_or_plants(f, b);
  const auto pl = b.pipeline();
  const auto& cfg = pl.model.config;
  const auto tr = *forward(pl.model, pl.prompt(scenes[0].image), true).trace;
  for (const auto& u : units) {
    const std::string tag = "L" + std::to_string(u.layer) + "_U" + std::to_string(u.unit);
    const auto h = activation_heatmap(tr, cfg, u.layer, u.unit);
    write_heatmap_csv(out_file(m.output("heatmap_" + tag + ".csv")), h);
    save_mask(m.output("mask_" + tag + ".pgm"), receptive_field_mask(h, cfg, s.percentile, s.threshold));
  }
  std::cout << "wrote " << units.size() << " heatmap(s) at " << to_string(s.threshold) << " level\n";
}

void iou_report(const Flags& f, const Settings& s, RunManifest& m) {
  const auto b = load_bench(*f.model, m);
  if (!f.data) throw ValidationError("--data is required");
  const auto scenes = load_inputs(f, m);
  std::optional<std::vector<UnitRef>> units;
  if (f.units) units = parse_units(*f.units, b.bench.model.config);
  else b.require_plants();
  const auto rows = iou_rows(b, scenes, units, s, s.threshold);
  write_iou_rows(out_file(m.output("iou.jsonl")), rows);
  const auto means = mean_iou(rows);
  for (const auto& [k, v] : means) std::cout << k << " mean IoU " << v << '\n';
  write_json(m.output("iou_summary.json"), {{"threshold", to_string(s.threshold)}, {"mean_iou", means}});
}

void ablate_cmd(const Flags& f, const Settings& s, RunManifest& m) {
  const auto b = load_bench(*f.model, m);
  const auto scenes = load_inputs(f, m);
  const auto all = attribute_all(b, scenes, s);
  auto out = open_out(m.output("ablation.jsonl"));
  for (const auto& a : all) {
    AblationSpec spec;
    spec.mode = s.mode;
    spec.units = f.units ? parse_units(*f.units, b.bench.model.config)
                         : distinct_units(a.table.records, b.bench.options.plants_per_concept);
    spec.normalize();
    spec.validate(b.bench.model.config);
    const auto o = ablate(b.bench.model, a.prompt, a.generation, a.table.target, spec, s.max_new_tokens,
                          b.bench.pipeline().stop_token);
    std::cout << a.table.image_id << ": p " << o.p_original << " -> " << o.p_ablated << " (drop " << o.relative_drop
              << ")\n";
    json j = outcome_json(o);
    j["image"] = a.table.image_id;
    j["mode"] = to_string(s.mode);
    j["units"] = units_json(spec.units);
    out << j.dump() << '\n';
  }
}

void curve(const Flags& f, const Settings& s, RunManifest& m) {
  const auto b = load_bench(*f.model, m);
  const auto scenes = load_inputs(f, m);
  const auto all = attribute_all(b, scenes, s);
  CurveOptions opt;
  opt.seed = sub_seed(s.seed, 41);
  opt.mode = s.mode;
  opt.max_new_tokens = s.max_new_tokens;
  opt.stop_token = b.pipeline().stop_token;
  opt.interpretable = maybe_filter(b, s, s.interpretable_only);
  const auto schedule = feasible_schedule(s.curve_schedule(), all, b.bench.model.config, m);
  const auto r = ablation_curve(b.bench.model, curve_images(scenes, all), schedule, opt);
  write_curve_csv(out_file(m.output("curve.csv")), r.curves);
  write_curve_details_jsonl(out_file(m.output("curve_details.jsonl")), r.details);
  write_curve_csv(std::cout, r.curves);
}

void selectivity_cmd(const Flags& f, const Settings&, RunManifest& m) {
  const auto b = load_bench(*f.model, m);
  b.require_plants();
  if (!f.data) throw ValidationError("--data is required");
  const auto scenes = load_inputs(f, m);
  std::vector<std::size_t> cls;
  const auto mat = selectivity(b, scenes, cls);
  write_selectivity_csv(out_file(m.output("selectivity.csv")), b, mat, cls);
  write_selectivity_csv(std::cout, b, mat, cls);
}

void ks_compare(const Flags& f, const Settings& s, RunManifest& m) {
  auto b = load_bench(*f.model, m);
  const std::string which = f.which.value_or("both");
  if (which != "prompts" && which != "decodings" && which != "both")
    throw ValidationError("--which must be prompts, decodings or both");
  if (!f.data) throw ValidationError("--data is required");
  const auto scenes = load_inputs(f, m);
  auto pl = b.pipeline();
  json j;
  if (which != "decodings") {
    auto untrained = pl;
    if (f.untrained)
      untrained.projection =
          ProjectionLayer::random(pl.model.config.d_model, pl.encoder.d_enc(), s.init_std, sub_seed(s.seed, 21));
    const auto a = soft_prompt_agreement(untrained, scenes, s.k_nearest, sub_seed(s.seed, 51));
    j["soft_prompts"] = ks_json(a);
    j["soft_prompts"]["projection"] = f.untrained ? "untrained" : "model";
    std::cout << "soft prompts vs random: D " << a.ks.d << " p " << a.ks.p << '\n';
  }
  if (which != "prompts") {
    const auto a = decoding_agreement(pl, scenes, b.nouns, s.units_per_image, sub_seed(s.seed, 52));
    j["decodings"] = ks_json(a);
    std::cout << "decodings vs random: D " << a.ks.d << " p " << a.ks.p << '\n';
  }
  j["k_nearest"] = s.k_nearest;
  j["units_per_image"] = s.units_per_image;
  j["agreement_metric"] = kAgreementMetric;
  write_json(m.output("ks.json"), j);
}

void layer_hist(const Flags& f, const Settings& s, RunManifest& m) {
  const auto b = load_bench(*f.model, m);
  const auto scenes = load_inputs(f, m);
  const auto all = attribute_all(b, scenes, s);
  std::vector<std::vector<AttributionRecord>> records;
  for (const auto& a : all) records.push_back(a.table.records);
  const auto filter = interpretable_filter(b.bench.model, b.bench.vocab, b.dictionary, s.layernorm_decode);
  const auto h = layer_histogram(records, s.top_n, b.bench.model.config.n_layers, filter);
  write_layer_histogram_csv(out_file(m.output("layer_hist.csv")), h);
  write_layer_histogram_csv(std::cout, h);
}

struct Check {
  std::string name;
  double value;
  std::string op;
  double threshold;
  bool pass() const { return op == ">=" ? value >= threshold : op == "<=" ? value <= threshold : op == ">" ? value > threshold : value < threshold; }
};

// Runs the whole bench under one seed. Returns false when an embedded check fails.
bool full_report(const Settings& s, RunManifest& m) {
  Bench b;
  b.bench = build_bench(s.model, s.bench, s.seed);
  b.has_plants = true;
  b.dictionary = bench_dictionary();
  b.nouns = bench_nouns();
  const auto& cfg = b.bench.model.config;
  write_model_dir(m, "model", b.bench, b.bench.projection, true, b.dictionary, b.nouns);
  std::cerr << "bench built\n";

  const auto scenes = concept_scenes(b.bench, s.scenes, scene_seed_base(s.seed, 1));
  {
    auto man = open_out(m.output("scenes/scenes.jsonl"));
    for (const auto& sc : scenes) {
      save_scene(m.out_dir() / "scenes", sc, man);
      m.output("scenes/" + sc.id + ".ppm");
      for (std::size_t i = 0; i < sc.masks.size(); ++i) m.output("scenes/" + sc.id + "_mask" + std::to_string(i) + ".pgm");
    }
  }

  const auto all = attribute_all(b, scenes, s);
  {
    auto out = open_out(m.output("attribution.jsonl"));
    for (const auto& a : all) write_attribution_jsonl(out, a.table, top_neurons(a.table, s.top_n));
  }
  std::cerr << "attribution done\n";

  // Recovery: top-(#plants) distinct units per scene.
  std::size_t tp = 0, detected = 0, planted = 0;
  json per_scene = json::array();
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const auto truth = b.bench.plant_units(scenes[i].placements[0].concept_id);
    const auto found = distinct_units(all[i].table.records, truth.size());
    const auto r = evaluate_recovery(found, truth);
    tp += r.true_positives;
    detected += r.detected;
    planted += r.planted;
    per_scene.push_back({{"image", scenes[i].id}, {"precision", r.precision}, {"recall", r.recall},
                         {"detected", units_json(found)}, {"planted", units_json(truth)}});
  }
  const double precision = detected ? static_cast<double>(tp) / detected : 0.0;
  const double recall = planted ? static_cast<double>(tp) / planted : 1.0;
  write_json(m.output("recovery.json"), {{"precision", precision}, {"recall", recall}, {"scenes", per_scene}});

  // Planted versus layer-matched random ablation.
  std::vector<json> abl(scenes.size());
  std::vector<double> drop_planted(scenes.size()), drop_random(scenes.size());
  const TokenId stop = b.pipeline().stop_token;
  parallel_for(scenes.size(), [&](std::size_t i) {
    const auto& a = all[i];
    AblationSpec spec{b.bench.plant_units(scenes[i].placements[0].concept_id), s.mode};
    spec.normalize();
    AblationSpec rnd{build_cohorts(a.table, spec.units.size(), sub_seed(s.seed, 200 + i), cfg).random, s.mode};
    rnd.normalize();
    const auto op = ablate(b.bench.model, a.prompt, a.generation, a.table.target, spec, s.max_new_tokens, stop);
    const auto orr = ablate(b.bench.model, a.prompt, a.generation, a.table.target, rnd, s.max_new_tokens, stop);
    drop_planted[i] = op.relative_drop;
    drop_random[i] = orr.relative_drop;
    abl[i] = {{"image", scenes[i].id},
              {"planted", outcome_json(op)},
              {"planted_units", units_json(spec.units)},
              {"random", outcome_json(orr)},
              {"random_units", units_json(rnd.units)}};
  });
  {
    auto out = open_out(m.output("ablation.jsonl"));
    for (const auto& j : abl) out << j.dump() << '\n';
  }
  auto mean = [](const std::vector<double>& v) {
    double t = 0.0;
    for (double x : v) t += x;
    return v.empty() ? 0.0 : t / static_cast<double>(v.size());
  };
  std::cerr << "ablation done\n";

  CurveOptions copt;
  copt.seed = sub_seed(s.seed, 41);
  copt.mode = s.mode;
  copt.max_new_tokens = s.max_new_tokens;
  copt.stop_token = stop;
  copt.interpretable = interpretable_filter(b.bench.model, b.bench.vocab, b.dictionary, s.layernorm_decode);
  const auto cr =
      ablation_curve(b.bench.model, curve_images(scenes, all), feasible_schedule(s.curve_schedule(), all, cfg, m), copt);
  write_curve_csv(out_file(m.output("curve.csv")), cr.curves);
  write_curve_details_jsonl(out_file(m.output("curve_details.jsonl")), cr.details);
  std::cerr << "curve done\n";

  const auto grid_rows = iou_rows(b, scenes, std::nullopt, s, ThresholdLevel::grid);
  const auto pixel_rows = iou_rows(b, scenes, std::nullopt, s, ThresholdLevel::pixel);
  {
    auto out = open_out(m.output("iou.jsonl"));
    for (std::size_t i = 0; i < grid_rows.size(); ++i) {
      const auto& r = grid_rows[i];
      out << json{{"image", r.image},          {"placement", r.placement}, {"cohort", r.cohort},
                  {"layer", r.unit.layer},     {"unit", r.unit.unit},      {"iou_grid", r.iou},
                  {"iou_pixel", pixel_rows[i].iou}}
                 .dump()
          << '\n';
    }
  }
  const auto grid_mean = mean_iou(grid_rows);
  const auto pixel_mean = mean_iou(pixel_rows);

  std::vector<std::size_t> cls;
  const auto sel = selectivity(b, scenes, cls);
  write_selectivity_csv(out_file(m.output("selectivity.csv")), b, sel, cls);
  double off_diag = 0.0;
  for (std::size_t i = 0; i < cls.size(); ++i)
    for (std::size_t j = 0; j < cls.size(); ++j)
      if (i != j) off_diag = std::max(off_diag, sel(i, j));

  std::size_t interpretable_plants = 0;
  {
    auto plants = b.bench.plant_units();
    std::sort(plants.begin(), plants.end());
    auto out = open_out(m.output("decodings.jsonl"));
    for (const auto& u : plants) {
      const auto d = decode_neuron(b.bench.model, b.bench.vocab, u.layer, u.unit, s.top_m, s.layernorm_decode);
      const auto v = is_interpretable(d, b.dictionary);
      interpretable_plants += v.passes;
      write_decoding_jsonl(out, d, v);
    }
  }

  std::vector<std::vector<AttributionRecord>> records;
  for (const auto& a : all) records.push_back(a.table.records);
  write_layer_histogram_csv(out_file(m.output("layer_hist.csv")),
                            layer_histogram(records, s.top_n, cfg.n_layers, copt.interpretable));
  std::set<std::uint32_t> plant_layers;
  for (const auto& p : b.bench.plants) plant_layers.insert(p.layer);
  double in_plant_layers = 0.0, total_units = 0.0;
  for (const auto& c : layer_histogram(records, s.bench.plants_per_concept, cfg.n_layers)) {
    total_units += c.unique_units;
    if (plant_layers.count(c.layer)) in_plant_layers += c.unique_units;
  }
  std::cerr << "spatial, decoding and histogram done\n";

  // Projection training from a random start, then the two agreement tests.
  auto untrained = b.pipeline();
  untrained.projection = ProjectionLayer::random(cfg.d_model, b.bench.encoder.d_enc(), s.init_std, sub_seed(s.seed, 21));
  const auto train = concept_scenes(b.bench, s.train_scenes, scene_seed_base(s.seed, 2));
  const auto test = concept_scenes(b.bench, s.test_scenes, scene_seed_base(s.seed, 3));
  TrainOptions topt = s.train;
  topt.seed = sub_seed(s.seed, 22);
  const auto tr = train_projection(untrained, training_pairs(train), topt);
  write_train_log(out_file(m.output("train_log.csv")), tr);
  auto trained = untrained;
  trained.projection = tr.projection;
  const double acc_before = first_token_accuracy(untrained, test);
  const double acc_after = first_token_accuracy(trained, test);
  std::cerr << "training done\n";

  const auto ks_prompts = soft_prompt_agreement(untrained, scenes, s.k_nearest, sub_seed(s.seed, 51));
  const auto ks_decodings = decoding_agreement(trained, scenes, b.nouns, s.units_per_image, sub_seed(s.seed, 52));
  write_json(m.output("ks.json"), {{"soft_prompts_untrained", ks_json(ks_prompts)},
                                   {"decodings_trained", ks_json(ks_decodings)},
                                   {"k_nearest", s.k_nearest},
                                   {"units_per_image", s.units_per_image},
                                   {"agreement_metric", kAgreementMetric}});

  const std::vector<Check> checks = {
      {"recovery_recall", recall, ">=", 0.95},
      {"recovery_precision", precision, ">=", 0.90},
      {"ablation_planted_drop", mean(drop_planted), ">=", 0.80},
      {"ablation_random_drop", mean(drop_random), "<=", 0.10},
      {"iou_planted_grid", grid_mean.at("planted"), ">=", 0.9},
      {"iou_random_grid", grid_mean.at("random"), "<=", 0.2},
      {"selectivity_max_off_diagonal", off_diag, "<", 0.1},
      {"planted_layer_fraction", total_units ? in_plant_layers / total_units : 0.0, ">=", 1.0},
      {"trained_first_token_accuracy", acc_after, ">=", 0.95},
      {"ks_soft_prompts_untrained_p", ks_prompts.ks.p, ">", 0.05},
      {"ks_decodings_trained_p", ks_decodings.ks.p, "<", 0.01},
  };
  bool ok = true;
  json jc = json::array();
  for (const auto& c : checks) {
    ok = ok && c.pass();
    jc.push_back({{"name", c.name}, {"value", c.value}, {"op", c.op}, {"threshold", c.threshold}, {"pass", c.pass()}});
    std::cout << (c.pass() ? "[PASS] " : "[FAIL] ") << c.name << ' ' << c.value << ' ' << c.op << ' ' << c.threshold
              << '\n';
  }
  write_json(m.output("report.json"),
             {{"seed", s.seed},
              {"settings", settings_json(s)},
              {"margins", b.bench.margins},
              {"mean_iou_grid", grid_mean},
              {"mean_iou_pixel", pixel_mean},
              {"interpretable_planted_units", interpretable_plants},
              {"first_token_accuracy", {{"untrained", acc_before}, {"trained", acc_after}}},
              {"train_steps", tr.steps},
              {"checks", jc},
              {"all_pass", ok}});
  return ok;
}

void add_common(CLI::App* sub, Flags& f) {
  sub->add_option("--config", f.config, "JSON config file")->check(CLI::ExistingFile);
  sub->add_option("--seed", f.seed, "root seed");
  sub->add_option("--out-dir", f.out_dir, "output directory");
  sub->add_option("--top-n", f.top_n, "attribution records kept per image");
  sub->add_flag("--interpretable-only", f.interpretable_only, "keep units passing the interpretability filter");
  sub->add_option("--percentile", f.percentile, "heatmap threshold quantile");
  sub->add_option("--schedule", f.schedule, "ablation sizes, e.g. 0,2,4,8");
  sub->add_flag("--layernorm-decode", f.layernorm_decode, "apply the final layernorm before decoding");
}

}  // namespace

int run(int argc, char** argv) {
  CLI::App app{"mmneuron: find, decode, localize and ablate multimodal neurons on a planted bench"};
  app.require_subcommand(1);
  Flags f;

  using Fn = std::function<void(const Flags&, const Settings&, RunManifest&)>;
  std::vector<std::pair<CLI::App*, Fn>> commands;
  auto add = [&](const char* name, const char* help, bool needs_model, Fn fn) {
    auto* sub = app.add_subcommand(name, help);
    add_common(sub, f);
    auto* model = sub->add_option("--model", f.model, "model container (.mmn1) with sidecars")->check(CLI::ExistingFile);
    if (needs_model) model->required();
    commands.emplace_back(sub, std::move(fn));
    return sub;
  };

  auto* gm = add("gen-model", "build the planted bench model", false, gen_model);
  gm->add_option("--plants", f.plants, "plants.json to plant instead of the defaults")->check(CLI::ExistingFile);
  auto* gd = add("gen-data", "render synthetic scenes with masks", true, gen_data);
  gd->add_option("--count", f.count, "number of scenes");
  gd->add_option("--extent", f.extent, "concept block size in patch cells");
  auto* tp = add("train-proj", "train the image projection on a dataset", true, train_proj);
  tp->add_option("--data", f.data, "dataset or scene manifest (JSON lines)")->check(CLI::ExistingFile);
  tp->add_option("--epochs", f.epochs, "training epochs");
  tp->add_option("--lr", f.lr, "learning rate");
  tp->add_flag("--warm-start", f.warm_start, "start from the model's projection instead of a random one");

  auto inputs = [&](CLI::App* sub) {
    sub->add_option("--image", f.image, "PGM/PPM image")->check(CLI::ExistingFile);
    sub->add_option("--data", f.data, "scene manifest (JSON lines)")->check(CLI::ExistingFile);
  };
  inputs(add("caption", "caption images greedily", true, caption));
  inputs(add("attribute", "score units by attribution", true, attribute));
  add("decode-neurons", "decode unit value vectors through the unembedding", true, decode_neurons)
      ->add_option("--units", f.units, "units as L:U,L:U");
  auto* hm = add("heatmap", "unit activation heatmaps and masks", true, heatmap);
  inputs(hm);
  hm->add_option("--units", f.units, "units as L:U,L:U");
  hm->add_flag("--grid-threshold", f.grid_threshold, "threshold the patch grid instead of upsampled pixels");
  auto* io = add("iou-report", "IoU of unit masks against scene masks", true, iou_report);
  inputs(io);
  io->add_option("--units", f.units, "units as L:U,L:U");
  io->add_flag("--grid-threshold", f.grid_threshold, "threshold the patch grid instead of upsampled pixels");
  auto* ab = add("ablate", "zero units and measure the target probability", true, ablate_cmd);
  inputs(ab);
  ab->add_option("--units", f.units, "units as L:U,L:U");
  ab->add_option("--mode", f.mode, "all-positions or patch-only");
  auto* cu = add("curve", "ablation curves over a schedule", true, curve);
  inputs(cu);
  cu->add_option("--mode", f.mode, "all-positions or patch-only");
  inputs(add("selectivity", "class selectivity of planted units", true, selectivity_cmd));
  auto* ks = add("ks-compare", "KS tests of caption agreement against random", true, ks_compare);
  inputs(ks);
  ks->add_option("--which", f.which, "prompts, decodings or both");
  ks->add_flag("--untrained", f.untrained, "score soft prompts from a random projection");
  inputs(add("layer-hist", "per-layer counts of top attributed units", true, layer_hist));

  bool report_ok = true;
  auto* fr = add("full-report", "run the whole bench and check it", false,
                 [&](const Flags&, const Settings& s, RunManifest& m) { report_ok = full_report(s, m); });
  fr->add_option("--count", f.count, "number of evaluation scenes");
  fr->add_option("--mode", f.mode, "all-positions or patch-only");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  for (auto& [sub, fn] : commands) {
    if (!sub->parsed()) continue;
    try {
      const Settings s = resolve(f);
      RunManifest m(sub->get_name(), f.out_dir);
      m.set_seed(s.seed);
      if (f.config) m.set_config(fs::path(*f.config));
      fn(f, s, m);
      m.write();
      return report_ok ? 0 : 1;
    } catch (const ValidationError& e) {
      std::cerr << "error: " << e.what() << '\n';
      return 2;
    } catch (const std::exception& e) {
      std::cerr << "error: " << e.what() << '\n';
      return 1;
    }
  }
  return 2;
}

}  // namespace mmn::cli
