#include <algorithm>
#include <cmath>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "mmn/attribution.hpp"
#include "mmn/error.hpp"
#include "test_support.hpp"

using namespace mmn;
using mmn::testing::random_prompt;
using mmn::testing::tiny_config;

namespace {

double relative_error(double a, double b) {
  const double denom = std::max({std::abs(a), std::abs(b), 1e-8});
  return std::abs(a - b) / denom;
}

}  // namespace

TEST_CASE("gradient matches central finite differences on every entry") {
  const auto cfg = tiny_config();
  const auto w = ModelWeights::random(cfg, 1.0, 101);
  const auto p = random_prompt(cfg, 4, {1, 2, 3}, 102);
  const auto tr = *forward(w, p, true).trace;
  const TargetToken target{5, 0, TargetMethod::explicit_token};
  const auto grads = backward_to_preactivations(w, tr, target);
  OverrideRerunner runner(w, tr);
  const double eps = 1e-5;
  double worst = 0.0;
  for (std::uint32_t l = 0; l < cfg.n_layers; ++l)
    for (std::size_t pos = 0; pos < tr.length(); ++pos)
      for (std::uint32_t u = 0; u < cfg.d_mlp; ++u) {
        const double z = tr.layers[l].z(pos, u);
        const double up = runner.logit({l, pos, u, z + eps}, target.token);
        const double dn = runner.logit({l, pos, u, z - eps}, target.token);
        worst = std::max(worst, relative_error(grads[l](pos, u), (up - dn) / (2 * eps)));
      }
  MESSAGE("max relative error " << worst);
  CHECK(worst < 1e-4);
}

TEST_CASE("final-layer unit with a value vector orthogonal to the readout has zero gradient") {
  const auto cfg = tiny_config();
  auto w = ModelWeights::random(cfg, 1.0, 111);
  // Final layernorm off (identity) so the readout direction is W_d row c itself.
  w.final_ln.gain.assign(cfg.d_model, 1.0);
  w.final_ln.bias.assign(cfg.d_model, 0.0);
  const TokenId c = 4;
  for (std::size_t j = 0; j < cfg.d_model; ++j) w.unembedding(c, j) = j == 0 ? 1.0 : 0.0;
  // Unit 7 of the last layer writes only into coordinates 1 and 2, with the
  // two entries opposite so its output has zero mean (no layernorm leak).
  auto& wout = w.layers.back().w_out;
  for (std::size_t r = 0; r < cfg.d_model; ++r) wout(r, 7) = 0.0;
  wout(1, 7) = 0.5;
  wout(2, 7) = -0.5;
  const auto p = random_prompt(cfg, 4, {1, 2}, 112);
  const auto tr = *forward(w, p, true).trace;
  const auto g = backward_to_preactivations(w, tr, {c, 0, TargetMethod::explicit_token});
  // Earlier positions never reach the last position through the last MLP.
  for (std::size_t pos = 0; pos + 1 < tr.length(); ++pos) CHECK(g.back()(pos, 7) == 0.0);
}

TEST_CASE("gradient is linear in the target unembedding row") {
  const auto cfg = tiny_config();
  auto w = ModelWeights::random(cfg, 1.0, 121);
  const auto p = random_prompt(cfg, 4, {1}, 122);
  const TargetToken t{3, 0, TargetMethod::explicit_token};
  const auto tr = *forward(w, p, true).trace;
  const auto g1 = backward_to_preactivations(w, tr, t);
  for (std::size_t j = 0; j < cfg.d_model; ++j) w.unembedding(3, j) *= 2.0;
  const auto tr2 = *forward(w, p, true).trace;
  const auto g2 = backward_to_preactivations(w, tr2, t);
  for (std::size_t l = 0; l < g1.size(); ++l)
    for (std::size_t i = 0; i < g1[l].size(); ++i)
      CHECK(std::abs(g2[l].data()[i] - 2.0 * g1[l].data()[i]) <= 1e-9);
}

TEST_CASE("scores are invariant to permuting non-target unembedding rows") {
  const auto cfg = tiny_config();
  auto w = ModelWeights::random(cfg, 1.0, 131);
  const auto p = random_prompt(cfg, 4, {1}, 132);
  const TargetToken t{2, 0, TargetMethod::explicit_token};
  const PatchRange patches{0, 4};
  const auto tr = *forward(w, p, true).trace;
  const auto a = attribution_scores(tr, backward_to_preactivations(w, tr, t), patches);
  std::vector<std::size_t> others;
  for (std::size_t r = 0; r < cfg.vocab_size; ++r)
    if (r != 2) others.push_back(r);
  Matrix permuted = w.unembedding;
  for (std::size_t i = 0; i < others.size(); ++i) {
    const auto src = others[(i + 3) % others.size()];
    for (std::size_t j = 0; j < cfg.d_model; ++j) permuted(others[i], j) = w.unembedding(src, j);
  }
  w.unembedding = permuted;
  const auto tr2 = *forward(w, p, true).trace;
  const auto b = attribution_scores(tr2, backward_to_preactivations(w, tr2, t), patches);
  REQUIRE(a.records.size() == b.records.size());
  for (std::size_t i = 0; i < a.records.size(); ++i) CHECK(std::abs(a.records[i].score - b.records[i].score) <= 1e-12);
}

TEST_CASE("zero image with zero biases attributes nothing") {
  const auto cfg = tiny_config();
  auto w = ModelWeights::random(cfg, 1.0, 141);
  for (auto& l : w.layers) {
    l.ln.bias.assign(cfg.d_model, 0.0);
    l.b_in.assign(cfg.d_mlp, 0.0);
    l.b_out.assign(cfg.d_model, 0.0);
  }
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < cfg.d_model; ++j) w.position_embedding(i, j) = 0.0;
  PromptInput p = random_prompt(cfg, 4, {1, 2}, 142);
  p.soft = Matrix(4, cfg.d_model, 0.0);
  const auto tr = *forward(w, p, true).trace;
  const auto table = attribution_scores(tr, backward_to_preactivations(w, tr, {1, 0, TargetMethod::explicit_token}),
                                        {0, 4});
  for (const auto& r : table.records) {
    CHECK(r.z == 0.0);
    CHECK(r.score == 0.0);
  }
}

TEST_CASE("table ordering, records and top_neurons") {
  const auto cfg = tiny_config();
  const auto w = ModelWeights::random(cfg, 1.0, 151);
  const auto p = random_prompt(cfg, 4, {1, 2}, 152);
  const auto tr = *forward(w, p, true).trace;
  const auto grads = backward_to_preactivations(w, tr, {6, 0, TargetMethod::explicit_token});
  const auto table = attribution_scores(tr, grads, {0, 4});
  CHECK(table.records.size() == cfg.n_layers * cfg.d_mlp * 4);
  for (std::size_t i = 1; i < table.records.size(); ++i) {
    const auto& a = table.records[i - 1];
    const auto& b = table.records[i];
    CHECK(a.score >= b.score);
    if (a.score == b.score)
      CHECK(std::tie(a.layer, a.unit, a.patch) < std::tie(b.layer, b.unit, b.patch));
  }
  for (const auto& r : table.records) {
    CHECK(r.patch < 4);
    CHECK(r.score == r.z * r.grad);
  }
  CHECK(top_neurons(table, 100).size() == 100);
  CHECK_THROWS_AS(attribution_scores(tr, grads, {0, 99}), ValidationError);

  AttributionTable small;
  small.records = {{0, 1, 0, 1, 1, 1}, {0, 2, 0, 1, 0.5, 0.5}, {1, 1, 0, 1, 0.1, 0.1}};
  CHECK(top_neurons(small, 5).size() == 3);
  CHECK_THROWS_AS(top_neurons(small, 0), ValidationError);

  // Filtered output is an order-preserving subset of the unfiltered list.
  auto keep = [](UnitRef u) { return u.unit % 3 != 0; };
  const auto all = top_neurons(table, table.records.size());
  const auto kept = top_neurons(table, 50, keep);
  std::size_t cursor = 0;
  for (const auto& r : kept) {
    CHECK(keep(r.unit_ref()));
    while (cursor < all.size() &&
           !(all[cursor].layer == r.layer && all[cursor].unit == r.unit && all[cursor].patch == r.patch))
      ++cursor;
    CHECK(cursor < all.size());
  }

  // Identical recomputation keeps identical order.
  const auto again = attribution_scores(tr, grads, {0, 4});
  for (std::size_t i = 0; i < table.records.size(); ++i) {
    CHECK(table.records[i].layer == again.records[i].layer);
    CHECK(table.records[i].unit == again.records[i].unit);
    CHECK(table.records[i].patch == again.records[i].patch);
  }
}

TEST_CASE("zero pre-activation gives zero score regardless of gradient") {
  ForwardTrace tr;
  tr.input = Matrix(2, 1);
  tr.layers.resize(1);
  tr.layers[0].z = Matrix(2, 2);
  tr.layers[0].z(0, 1) = 0.7;
  std::vector<Matrix> g{Matrix(2, 2, 5.0)};
  const auto table = attribution_scores(tr, g, {0, 2});
  for (const auto& r : table.records)
    if (r.z == 0.0) CHECK(r.score == 0.0);
  CHECK(table.records.front().unit == 1);
  CHECK(table.records.front().score == doctest::Approx(3.5));
}

TEST_CASE("select_target_token") {
  Vocabulary v({"<eos>", " a", " horse", " in", " fire", "truck", ","});
  Wordlist nouns({"horse", "firetruck"});
  GenerationResult g;
  g.tokens = {1, 2, 3};
  auto t = select_target_token(g, v, nouns);
  CHECK(t.token == 2);
  CHECK(t.step == 1);
  CHECK(t.method == TargetMethod::wordlist_noun);

  g.tokens = {1, 3, 6};
  t = select_target_token(g, v, nouns);
  CHECK(t.token == 1);
  CHECK(t.step == 0);
  CHECK(t.method == TargetMethod::first_token);

  g.tokens = {3, 4, 5, 0};  // " fire" + "truck" -> first sub-token
  t = select_target_token(g, v, nouns);
  CHECK(t.token == 4);
  CHECK(t.step == 1);

  g.tokens.clear();
  CHECK_THROWS_AS(select_target_token(g, v, nouns), ValidationError);
}

TEST_CASE("attribution JSON-lines") {
  AttributionTable t;
  t.image_id = "scene_0001";
  t.records = {{2, 17, 3, 1.5, 2.0, 3.0}};
  std::ostringstream os;
  write_attribution_jsonl(os, t, t.records);
  const auto j = nlohmann::json::parse(os.str());
  CHECK(j["image"] == "scene_0001");
  CHECK(j["layer"] == 2);
  CHECK(j["unit"] == 17);
  CHECK(j["patch"] == 3);
  CHECK(j["z"] == 1.5);
  CHECK(j["grad"] == 2.0);
  CHECK(j["score"] == 3.0);
}
