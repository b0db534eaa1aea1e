#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "mmn/decoder.hpp"
#include "mmn/error.hpp"
#include "test_support.hpp"

using namespace mmn;
using mmn::testing::tiny_config;

namespace {

Vocabulary numbered_vocab(std::size_t n) {
  std::vector<std::string> v;
  for (std::size_t i = 0; i < n; ++i) v.push_back("t" + std::to_string(i));
  return Vocabulary(v);
}

Vector value_vector(const ModelWeights& w, std::uint32_t layer, std::uint32_t unit) {
  Vector v(w.config.d_model);
  for (std::size_t r = 0; r < v.size(); ++r) v[r] = w.layers[layer].w_out(r, unit);
  return v;
}

// Straight softmax over W_d v followed by a full sort.
std::vector<std::pair<double, TokenId>> brute_force_decode(const ModelWeights& w, const Vector& v) {
  const std::size_t V = w.config.vocab_size;
  std::vector<double> logits(V);
  double mx = -1e300;
  for (std::size_t t = 0; t < V; ++t) {
    double s = 0.0;
    for (std::size_t j = 0; j < v.size(); ++j) s += w.unembedding(t, j) * v[j];
    logits[t] = s;
    mx = std::max(mx, s);
  }
  double z = 0.0;
  for (double& l : logits) z += std::exp(l - mx);
  std::vector<std::pair<double, TokenId>> out;
  for (std::size_t t = 0; t < V; ++t) out.push_back({std::exp(logits[t] - mx) / z, static_cast<TokenId>(t)});
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
    return a.first != b.first ? a.first > b.first : a.second < b.second;
  });
  return out;
}

std::vector<std::string> repeat(const std::string& s, std::size_t n) { return std::vector<std::string>(n, s); }

}  // namespace

TEST_CASE("decode_neuron matches a brute-force softmax") {
  auto cfg = tiny_config();
  cfg.vocab_size = 40;
  const auto w = ModelWeights::random(cfg, 1.0, 201);
  const auto vocab = numbered_vocab(cfg.vocab_size);
  for (std::uint32_t l = 0; l < cfg.n_layers; ++l)
    for (std::uint32_t u = 0; u < cfg.d_mlp; ++u) {
      const auto d = decode_neuron(w, vocab, l, u);
      const auto oracle = brute_force_decode(w, value_vector(w, l, u));
      REQUIRE(d.top.size() == 10);
      for (std::size_t i = 0; i < 10; ++i) {
        CHECK(d.top[i].id == oracle[i].second);
        CHECK(d.top[i].text == vocab.token(oracle[i].second));
        CHECK(std::abs(d.top[i].prob - oracle[i].first) <= 1e-12);
      }
    }
}

TEST_CASE("decode_neuron basics") {
  auto cfg = tiny_config();
  auto w = ModelWeights::random(cfg, 1.0, 211);
  const auto vocab = numbered_vocab(cfg.vocab_size);
  // Orthonormal readout rows for the first d_model tokens, zero elsewhere.
  w.unembedding = Matrix(cfg.vocab_size, cfg.d_model);
  for (std::size_t t = 0; t < cfg.d_model; ++t) w.unembedding(t, t) = 1.0;
  auto& wout = w.layers[1].w_out;
  for (std::size_t r = 0; r < cfg.d_model; ++r) wout(r, 3) = r == 5 ? 3.0 : 0.0;
  const auto d = decode_neuron(w, vocab, 1, 3);
  CHECK(d.top.front().id == 5);
  CHECK_FALSE(d.layernorm_applied);

  const auto full = decode_neuron(w, vocab, 0, 0, cfg.vocab_size);
  double sum = 0.0;
  for (std::size_t i = 0; i < full.top.size(); ++i) {
    sum += full.top[i].prob;
    CHECK(full.top[i].prob > 0.0);
    CHECK(full.top[i].prob <= 1.0);
    if (i > 0) CHECK(full.top[i - 1].prob >= full.top[i].prob);
  }
  CHECK(std::abs(sum - 1.0) <= 1e-9);

  CHECK(decode_neuron(w, vocab, 0, 0, 5, true).layernorm_applied);
  CHECK_THROWS_AS(decode_neuron(w, vocab, 2, 0), ValidationError);
  CHECK_THROWS_AS(decode_neuron(w, vocab, 0, cfg.d_mlp), ValidationError);
}

TEST_CASE("decode ordering is invariant to positive scaling of the value vector") {
  auto cfg = tiny_config();
  cfg.vocab_size = 30;
  auto w = ModelWeights::random(cfg, 1.0, 221);
  const auto vocab = numbered_vocab(cfg.vocab_size);
  const auto base = decode_neuron(w, vocab, 0, 4, cfg.vocab_size);
  for (double alpha : {0.25, 2.0, 8.0}) {
    auto scaled = w;
    for (std::size_t r = 0; r < cfg.d_model; ++r) scaled.layers[0].w_out(r, 4) *= alpha;
    const auto d = decode_neuron(scaled, vocab, 0, 4, cfg.vocab_size);
    for (std::size_t i = 0; i < d.top.size(); ++i) CHECK(d.top[i].id == base.top[i].id);
  }
}

TEST_CASE("interpretability filter rule") {
  const Wordlist dict({"cat", "ab", "horse", "saddle", "river", "field", "stone", "pony", "stable", "rider",
                       "café", "naïve", "x-ray", "mp3"});

  SUBCASE("seven words and three fragments pass") {
    auto v = is_interpretable({" horse", " saddle", " river", " field", " stone", " pony", " stable", "ing", "ed",
                               "ly"},
                              dict);
    CHECK(v.passes);
    CHECK(v.dictionary_word_count == 7);
    CHECK(v.inspected.size() == 10);
  }
  SUBCASE("ten punctuation tokens fail") {
    auto v = is_interpretable({".", ",", "!", "?", ";", ":", "-", "(", ")", "\""}, dict);
    CHECK_FALSE(v.passes);
    CHECK(v.dictionary_word_count == 0);
  }
  SUBCASE("three letters count, two do not") {
    auto v = is_interpretable({" cat", " ab", " horse", " saddle", " river", " field", " stone", "ing", "ed", "ly"},
                              dict);
    CHECK_FALSE(v.passes);
    CHECK(v.dictionary_word_count == 6);
  }
  SUBCASE("only one leading space is stripped") {
    auto v = is_interpretable({"  horse", " saddle", " river", " field", " stone", " pony", " stable", "ing", "ed",
                               "ly"},
                              dict);
    CHECK(v.dictionary_word_count == 6);
    CHECK_FALSE(v.passes);
  }
  SUBCASE("tokens without a leading space and with capitals still count") {
    auto v = is_interpretable({"Horse", "SADDLE", " River", "field", " stone", "pony", " Stable", "ing", "ed", "ly"},
                              dict);
    CHECK(v.dictionary_word_count == 7);
    CHECK(v.passes);
  }
  SUBCASE("hyphens and digits disqualify, accented letters count") {
    auto v = is_interpretable({" x-ray", " mp3", " café", " naïve", " CAFÉ", ".", ".", ".", ".", "."}, dict);
    CHECK(v.dictionary_word_count == 3);
  }
  SUBCASE("only the first ten tokens are inspected") {
    auto toks = repeat("ing", 10);
    for (const char* w : {" horse", " saddle", " river", " field", " stone", " pony", " stable"}) toks.push_back(w);
    auto v = is_interpretable(toks, dict);
    CHECK(v.dictionary_word_count == 0);
  }
  SUBCASE("exactly seven passes, six fails") {
    for (std::size_t words = 0; words <= 10; ++words) {
      auto toks = repeat(" horse", words);
      while (toks.size() < 10) toks.push_back("##");
      const auto v = is_interpretable(toks, dict);
      CHECK(v.dictionary_word_count == words);
      CHECK(v.passes == (words >= 7));
    }
  }
  SUBCASE("fewer than ten tokens is an error") {
    CHECK_THROWS_AS(is_interpretable(repeat(" horse", 9), dict), ValidationError);
  }
  SUBCASE("pure function of its inputs") {
    const std::vector<std::string> toks{" horse", " saddle", " river", " field", " stone", " pony", " stable",
                                        "ing", "ed", "ly"};
    CHECK(is_interpretable(toks, dict).passes == is_interpretable(toks, dict).passes);
  }
}

TEST_CASE("letter counting and normalization") {
  CHECK(letter_count("cat") == 3);
  CHECK(letter_count("café") == 4);
  CHECK(letter_count("x-ray") == -1);
  CHECK(letter_count("mp3") == -1);
  CHECK(letter_count("") == 0);
  CHECK(letter_count("\xff") == -1);
  CHECK(normalize_token(" Horse") == "horse");
  CHECK(normalize_token("  horse") == " horse");
  CHECK(normalize_token("ÉCOLE") == "école");
}

TEST_CASE("nearest_tokens") {
  auto cfg = tiny_config();
  cfg.vocab_size = 25;
  const auto w = ModelWeights::random(cfg, 1.0, 231);
  for (std::size_t t = 0; t < cfg.vocab_size; ++t) {
    const auto row = w.token_embedding.row(t);
    const auto near = nearest_tokens(w, row);
    REQUIRE(near.size() == 5);
    CHECK(near.front().id == static_cast<TokenId>(t));
    CHECK(std::abs(near.front().similarity - 1.0) <= 1e-9);
    for (std::size_t i = 1; i < near.size(); ++i) CHECK(near[i - 1].similarity >= near[i].similarity);

    Vector neg(row.begin(), row.end());
    for (double& x : neg) x = -x;
    TokenId best = 0;
    double best_sim = -2.0;
    for (std::size_t s = 0; s < cfg.vocab_size; ++s) {
      const auto r = w.token_embedding.row(s);
      const double sim = dot(r, neg) / (norm(r) * norm(neg));
      if (sim > best_sim) {
        best_sim = sim;
        best = static_cast<TokenId>(s);
      }
    }
    CHECK(nearest_tokens(w, neg, 1).front().id == best);

    Vector big(row.begin(), row.end());
    for (double& x : big) x *= 10.0;
    const auto scaled = nearest_tokens(w, big);
    for (std::size_t i = 0; i < near.size(); ++i) CHECK(scaled[i].id == near[i].id);
  }
  CHECK_THROWS_AS(nearest_tokens(w, Vector(cfg.d_model, 0.0)), ValidationError);
  CHECK_THROWS_AS(nearest_tokens(w, Vector(3, 1.0)), ShapeError);
}

TEST_CASE("nearest_tokens breaks ties by token id") {
  auto cfg = tiny_config();
  auto w = ModelWeights::random(cfg, 1.0, 241);
  for (std::size_t t = 0; t < cfg.vocab_size; ++t)
    for (std::size_t j = 0; j < cfg.d_model; ++j) w.token_embedding(t, j) = j == 0 ? 1.0 : 0.0;
  Vector q(cfg.d_model, 0.0);
  q[0] = 1.0;
  const auto near = nearest_tokens(w, q, 4);
  for (std::size_t i = 0; i < near.size(); ++i) CHECK(near[i].id == static_cast<TokenId>(i));
}

TEST_CASE("agreement_score") {
  auto cfg = tiny_config();
  auto w = ModelWeights::random(cfg, 1.0, 251);
  const std::vector<TokenId> same{1, 4, 6};
  CHECK(std::abs(agreement_score(same, same, w) - 1.0) <= 1e-9);

  auto ortho = w;
  ortho.token_embedding = Matrix(cfg.vocab_size, cfg.d_model);
  for (std::size_t t = 0; t < cfg.d_model; ++t) ortho.token_embedding(t, t) = 1.0;
  const std::vector<TokenId> a{0, 1, 2}, b{3, 4, 5};
  CHECK(std::abs(agreement_score(a, b, ortho)) <= 1e-9);

  std::mt19937_64 rng(252);
  std::uniform_int_distribution<int> pick(0, static_cast<int>(cfg.vocab_size) - 1);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<TokenId> cand(1 + trial % 5), ref(1 + trial % 3);
    for (auto& t : cand) t = pick(rng);
    for (auto& t : ref) t = pick(rng);
    double total = 0.0;
    for (TokenId r : ref) {
      double best = -1.0;
      for (TokenId c : cand) {
        const auto x = w.token_embedding.row(r), y = w.token_embedding.row(c);
        double xy = 0, xx = 0, yy = 0;
        for (std::size_t j = 0; j < x.size(); ++j) {
          xy += x[j] * y[j];
          xx += x[j] * x[j];
          yy += y[j] * y[j];
        }
        best = std::max(best, r == c ? 1.0 : xy / std::sqrt(xx * yy));
      }
      total += best;
    }
    const double s = agreement_score(cand, ref, w);
    CHECK(std::abs(s - total / static_cast<double>(ref.size())) <= 1e-12);
    CHECK(s >= -1.0);
    CHECK(s <= 1.0);
  }
  CHECK_THROWS_AS(agreement_score(std::vector<TokenId>{}, same, w), ValidationError);
  CHECK_THROWS_AS(agreement_score(same, std::vector<TokenId>{}, w), ValidationError);
}

TEST_CASE("interpretable_filter and decoding JSON-lines") {
  auto cfg = tiny_config();
  cfg.vocab_size = 20;
  auto w = ModelWeights::random(cfg, 1.0, 261);
  std::vector<std::string> toks{"<eos>", " horse", " saddle", " river", " field", " stone", " pony", " stable",
                                " rider"};
  for (int i = 0; toks.size() < cfg.vocab_size; ++i) toks.push_back("#" + std::to_string(i));
  Vocabulary vocab(toks);
  const Wordlist dict({"horse", "saddle", "river", "field", "stone", "pony", "stable", "rider"});
  // Words get large logits for unit 0 of layer 0 via an aligned readout.
  w.unembedding = Matrix(cfg.vocab_size, cfg.d_model);
  for (std::size_t t = 1; t <= 8; ++t) w.unembedding(t, 0) = 1.0;
  for (std::size_t t = 9; t < cfg.vocab_size; ++t) w.unembedding(t, 1) = 1.0;
  auto& wout = w.layers[0].w_out;
  for (std::size_t r = 0; r < cfg.d_model; ++r) {
    wout(r, 0) = r == 0 ? 5.0 : 0.0;
    wout(r, 1) = r == 1 ? 5.0 : 0.0;
  }
  const auto keep = interpretable_filter(w, vocab, dict);
  CHECK(keep({0, 0}));
  CHECK_FALSE(keep({0, 1}));
  CHECK(keep({0, 0}));

  const auto d = decode_neuron(w, vocab, 0, 0);
  std::ostringstream os;
  write_decoding_jsonl(os, d, is_interpretable(d, dict));
  const auto j = nlohmann::json::parse(os.str());
  CHECK(j["layer"] == 0);
  CHECK(j["unit"] == 0);
  CHECK(j["tokens"].size() == 10);
  CHECK(j["probs"].size() == 10);
  CHECK(j["interpretable"] == true);
}

TEST_CASE("wordlist round trip") {
  const Wordlist w({"Horse", "cat", "", "tree"});
  CHECK(w.size() == 3);
  CHECK(w.contains_token(" HORSE"));
  const auto path = std::filesystem::temp_directory_path() / "mmn_wordlist_test.txt";
  w.save(path);
  const auto back = Wordlist::load(path);
  CHECK(back.sorted() == w.sorted());
  std::filesystem::remove(path);
  CHECK_THROWS_AS(Wordlist::load("/nonexistent/words.txt"), IoError);
}
