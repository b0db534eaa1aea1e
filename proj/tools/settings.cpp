#include "settings.hpp"

#include <fstream>
#include <set>

#include "mmn/error.hpp"

namespace mmn::cli {
namespace {

using nlohmann::json;

// Reads known keys from one object and rejects the rest.
class Section {
 public:
  Section(const json& j, std::string name) : j_(j), name_(std::move(name)) {
    if (!j_.is_object()) throw ValidationError("config section '" + name_ + "' must be an object");
  }
  ~Section() noexcept(false) {
    if (std::uncaught_exceptions()) return;
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ValidationError("unknown config key '" + name_ + "." + k + "'");
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ValidationError("config key '" + name_ + "." + key + "' has the wrong type");
    }
  }
  const json* sub(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

 private:
  const json& j_;
  std::string name_;
  std::set<std::string> seen_;
};

}  // namespace

std::vector<std::size_t> Settings::curve_schedule() const {
  return schedule.empty() ? default_schedule(model.d_mlp) : schedule;
}

const char* to_string(ThresholdLevel level) { return level == ThresholdLevel::grid ? "grid" : "pixel"; }

ThresholdLevel parse_threshold(const std::string& s) {
  if (s == "grid") return ThresholdLevel::grid;
  if (s == "pixel") return ThresholdLevel::pixel;
  throw ValidationError("threshold level must be 'pixel' or 'grid', got '" + s + "'");
}

void apply_config(Settings& s, const json& config) {
  Section root(config, "config");
  root.get("seed", s.seed);
  if (const json* m = root.sub("model")) {
    Section sec(*m, "model");
    auto& c = s.model;
    sec.get("n_layers", c.n_layers);
    sec.get("d_model", c.d_model);
    sec.get("d_mlp", c.d_mlp);
    sec.get("n_heads", c.n_heads);
    sec.get("vocab_size", c.vocab_size);
    sec.get("max_seq", c.max_seq);
    sec.get("patch_grid", c.patch_grid);
    sec.get("image_size", c.image_size);
    sec.get("channels", c.channels);
  }
  if (const json* b = root.sub("bench")) {
    Section sec(*b, "bench");
    sec.get("d_enc", s.bench.d_enc);
    sec.get("plants_per_concept", s.bench.plants_per_concept);
    sec.get("alpha", s.bench.alpha);
    sec.get("trigger_amplitude", s.bench.trigger_amplitude);
    sec.get("noise_scale", s.bench.noise_scale);
    sec.get("target_margin", s.bench.target_margin);
  }
  if (const json* d = root.sub("data")) {
    Section sec(*d, "data");
    sec.get("scenes", s.scenes);
    sec.get("train_scenes", s.train_scenes);
    sec.get("test_scenes", s.test_scenes);
    sec.get("extent", s.extent);
  }
  if (const json* t = root.sub("train")) {
    Section sec(*t, "train");
    sec.get("epochs", s.train.epochs);
    sec.get("learning_rate", s.train.learning_rate);
    sec.get("batch_size", s.train.batch_size);
    sec.get("init_std", s.init_std);
  }
  if (const json* a = root.sub("attribution")) {
    Section sec(*a, "attribution");
    sec.get("top_n", s.top_n);
    sec.get("interpretable_only", s.interpretable_only);
    sec.get("max_new_tokens", s.max_new_tokens);
  }
  if (const json* d = root.sub("decoder")) {
    Section sec(*d, "decoder");
    sec.get("layernorm_decode", s.layernorm_decode);
    sec.get("top_m", s.top_m);
  }
  if (const json* sp = root.sub("spatial")) {
    Section sec(*sp, "spatial");
    sec.get("percentile", s.percentile);
    std::string level = to_string(s.threshold);
    sec.get("threshold", level);
    s.threshold = parse_threshold(level);
  }
  if (const json* c = root.sub("causal")) {
    Section sec(*c, "causal");
    sec.get("schedule", s.schedule);
    std::string mode = to_string(s.mode);
    sec.get("mode", mode);
    s.mode = parse_ablation_mode(mode);
  }
  if (const json* st = root.sub("stats")) {
    Section sec(*st, "stats");
    sec.get("k_nearest", s.k_nearest);
    sec.get("units_per_image", s.units_per_image);
  }
}

json settings_json(const Settings& s) {
  const auto& c = s.model;
  const auto& b = s.bench;
  return {
      {"seed", s.seed},
      {"model",
       {{"n_layers", c.n_layers},
        {"d_model", c.d_model},
        {"d_mlp", c.d_mlp},
        {"n_heads", c.n_heads},
        {"vocab_size", c.vocab_size},
        {"max_seq", c.max_seq},
        {"patch_grid", c.patch_grid},
        {"image_size", c.image_size},
        {"channels", c.channels}}},
      {"bench",
       {{"d_enc", b.d_enc},
        {"plants_per_concept", b.plants_per_concept},
        {"alpha", b.alpha},
        {"trigger_amplitude", b.trigger_amplitude},
        {"noise_scale", b.noise_scale},
        {"target_margin", b.target_margin}}},
      {"data",
       {{"scenes", s.scenes}, {"train_scenes", s.train_scenes}, {"test_scenes", s.test_scenes}, {"extent", s.extent}}},
      {"train",
       {{"epochs", s.train.epochs},
        {"learning_rate", s.train.learning_rate},
        {"batch_size", s.train.batch_size},
        {"init_std", s.init_std}}},
      {"attribution",
       {{"top_n", s.top_n}, {"interpretable_only", s.interpretable_only}, {"max_new_tokens", s.max_new_tokens}}},
      {"decoder", {{"layernorm_decode", s.layernorm_decode}, {"top_m", s.top_m}}},
      {"spatial", {{"percentile", s.percentile}, {"threshold", to_string(s.threshold)}}},
      {"causal", {{"schedule", s.curve_schedule()}, {"mode", to_string(s.mode)}}},
      {"stats", {{"k_nearest", s.k_nearest}, {"units_per_image", s.units_per_image}}},
  };
}

RunManifest::RunManifest(std::string command, std::filesystem::path out_dir)
    : command_(std::move(command)), out_dir_(std::move(out_dir)), start_(std::chrono::steady_clock::now()) {
  std::filesystem::create_directories(out_dir_);
}

void RunManifest::add_input(const std::filesystem::path& p) { inputs_.push_back(p.string()); }

std::filesystem::path RunManifest::output(const std::filesystem::path& relative) {
  const auto full = out_dir_ / relative;
  if (full.has_parent_path()) std::filesystem::create_directories(full.parent_path());
  const std::string r = relative.generic_string();
  if (std::find(outputs_.begin(), outputs_.end(), r) == outputs_.end()) outputs_.push_back(r);
  return full;
}

void RunManifest::write() {
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  json j;
  j["command"] = command_;
  j["config"] = config_ ? json(config_->string()) : json(nullptr);
  j["seeds"] = {{"root", seed_}};
  j["inputs"] = inputs_;
  j["outputs"] = outputs_;
  j["artifact_version"] = kArtifactVersion;
  j["wall_clock_seconds"] = secs;
  const auto tmp = out_dir_ / "manifest.json.tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw IoError("cannot write " + tmp.string());
    out << j.dump(2) << '\n';
  }
  std::filesystem::rename(tmp, out_dir_ / "manifest.json");
}

}  // namespace mmn::cli
