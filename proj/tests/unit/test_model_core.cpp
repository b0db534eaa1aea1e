#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "doctest.h"
#include "mmn/error.hpp"
#include "mmn/model_io.hpp"
#include "mmn/transformer.hpp"
#include "mmn/vocabulary.hpp"
#include "test_support.hpp"

using namespace mmn;
using mmn::testing::random_prompt;
using mmn::testing::tiny_config;

namespace {

using Rows = std::vector<std::vector<double>>;

// Straight-line reimplementation of the forward pass on nested vectors.
std::vector<double> oracle_logits(const ModelWeights& w, const PromptInput& p) {
  const auto& c = w.config;
  const std::size_t d = c.d_model, t = p.length(), hd = d / c.n_heads;
  Rows h(t, std::vector<double>(d));
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      double e = i < p.n_soft() ? p.soft(i, j) : w.token_embedding(p.tokens[i - p.n_soft()], j);
      h[i][j] = e + w.position_embedding(i, j);
    }
  auto ln = [&](const std::vector<double>& x, const Vector& g, const Vector& b) {
    double mu = 0, var = 0;
    for (double v : x) mu += v;
    mu /= d;
    for (double v : x) var += (v - mu) * (v - mu);
    var /= d;
    std::vector<double> y(d);
    for (std::size_t j = 0; j < d; ++j) y[j] = (x[j] - mu) / std::sqrt(var + 1e-5) * g[j] + b[j];
    return y;
  };
  auto mul = [](const Matrix& m, const std::vector<double>& x) {
    std::vector<double> y(m.rows(), 0.0);
    for (std::size_t r = 0; r < m.rows(); ++r)
      for (std::size_t k = 0; k < m.cols(); ++k) y[r] += m(r, k) * x[k];
    return y;
  };
  for (const auto& L : w.layers) {
    Rows x(t), q(t), k(t), v(t);
    for (std::size_t i = 0; i < t; ++i) {
      x[i] = ln(h[i], L.ln.gain, L.ln.bias);
      q[i] = mul(L.wq, x[i]);
      k[i] = mul(L.wk, x[i]);
      v[i] = mul(L.wv, x[i]);
    }
    Rows next = h;
    for (std::size_t i = 0; i < t; ++i) {
      std::vector<double> ctx(d, 0.0);
      for (std::size_t head = 0; head < c.n_heads; ++head) {
        std::vector<double> s(t, -INFINITY);
        for (std::size_t j = 0; j <= i; ++j) {
          double acc = 0;
          for (std::size_t e = head * hd; e < (head + 1) * hd; ++e) acc += q[i][e] * k[j][e];
          s[j] = acc / std::sqrt(double(hd));
        }
        double mx = -INFINITY, z = 0;
        for (double sv : s) mx = std::max(mx, sv);
        for (double& sv : s) z += (sv = std::exp(sv - mx));
        for (std::size_t j = 0; j < t; ++j)
          for (std::size_t e = head * hd; e < (head + 1) * hd; ++e) ctx[e] += s[j] / z * v[j][e];
      }
      auto a = mul(L.wo, ctx);
      auto zpre = mul(L.w_in, x[i]);
      std::vector<double> act(zpre.size());
      for (std::size_t u = 0; u < act.size(); ++u) {
        double zz = zpre[u] + L.b_in[u];
        act[u] = 0.5 * zz * std::erfc(-zz / std::numbers::sqrt2);
      }
      auto m = mul(L.w_out, act);
      for (std::size_t j = 0; j < d; ++j) next[i][j] = h[i][j] + a[j] + m[j] + L.b_out[j];
    }
    h = next;
  }
  return mul(w.unembedding, ln(h[t - 1], w.final_ln.gain, w.final_ln.bias));
}

}  // namespace

TEST_CASE("forward matches an independent straight-line oracle") {
  const auto cfg = tiny_config();
  const auto w = ModelWeights::random(cfg, 0.8, 7);
  const auto p = random_prompt(cfg, 4, {1, 5, 3}, 11);
  const auto got = forward(w, p, false).logits;
  const auto want = oracle_logits(w, p);
  REQUIRE(got.size() == want.size());
  for (std::size_t i = 0; i < got.size(); ++i) CHECK(std::abs(got[i] - want[i]) < 1e-9);
}

TEST_CASE("single-token vocabulary gives probability one") {
  auto cfg = tiny_config();
  cfg.vocab_size = 1;
  const auto w = ModelWeights::random(cfg, 0.5, 3);
  const auto p = random_prompt(cfg, 3, {0}, 5);
  const auto probs = softmax(forward(w, p, false).logits);
  REQUIRE(probs.size() == 1);
  CHECK(probs[0] == 1.0);
}

TEST_CASE("config validation") {
  CHECK_NOTHROW(full_scale_config().validate(3));
  CHECK(full_scale_config().n_patches() == 196);
  CHECK_NOTHROW(reference_config().validate(3));
  auto bad = reference_config();
  bad.n_heads = 5;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  auto zero = reference_config();
  zero.d_mlp = 0;
  CHECK_THROWS_AS(zero.validate(), ValidationError);
  auto shortseq = reference_config();
  shortseq.max_seq = 18;
  CHECK_THROWS_AS(shortseq.validate(3), ValidationError);
}

TEST_CASE("trace invariants") {
  const auto cfg = tiny_config();
  const auto w = ModelWeights::random(cfg, 0.8, 21);
  const auto p = random_prompt(cfg, 4, {2, 7}, 22);
  const auto res = forward(w, p, true);
  const auto& tr = *res.trace;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const auto& lt = tr.layers[l];
    const Matrix& prev = l == 0 ? tr.input : tr.layers[l - 1].resid;
    for (std::size_t i = 0; i < tr.length(); ++i) {
      for (std::size_t u = 0; u < cfg.d_mlp; ++u) CHECK(std::abs(lt.act(i, u) - gelu(lt.z(i, u))) <= 1e-12);
      for (std::size_t j = 0; j < cfg.d_model; ++j)
        CHECK(std::abs(lt.resid(i, j) - (prev(i, j) + lt.attn_out(i, j) + lt.mlp_out(i, j))) <= 1e-9);
    }
  }
  // Decoding the final residual reproduces the forward distribution.
  const auto probs = decode_hidden(w, tr.layers.back().resid.row(tr.length() - 1), true);
  const auto want = softmax(res.logits);
  for (std::size_t i = 0; i < probs.size(); ++i) CHECK(std::abs(probs[i] - want[i]) <= 1e-9);
}

TEST_CASE("causality: later soft vectors do not affect earlier positions") {
  const auto cfg = tiny_config();
  const auto w = ModelWeights::random(cfg, 0.8, 31);
  auto p = random_prompt(cfg, 4, {1}, 32);
  const auto a = *forward(w, p, true).trace;
  p.soft(2, 3) += 0.7;
  const auto b = *forward(w, p, true).trace;
  for (std::size_t l = 0; l < cfg.n_layers; ++l)
    for (std::size_t i = 0; i < 2; ++i) {
      for (std::size_t u = 0; u < cfg.d_mlp; ++u) CHECK(a.layers[l].z(i, u) == b.layers[l].z(i, u));
      for (std::size_t j = 0; j < cfg.d_model; ++j) CHECK(a.layers[l].resid(i, j) == b.layers[l].resid(i, j));
    }
  CHECK(a.layers[0].z(2, 0) != b.layers[0].z(2, 0));
}

TEST_CASE("forward is bit-deterministic") {
  const auto cfg = tiny_config();
  const auto w = ModelWeights::random(cfg, 0.8, 41);
  const auto p = random_prompt(cfg, 4, {1, 2}, 42);
  CHECK(forward(w, p, false).logits == forward(w, p, false).logits);
}

TEST_CASE("forward errors") {
  const auto cfg = tiny_config();
  const auto w = ModelWeights::random(cfg, 0.8, 1);
  auto p = random_prompt(cfg, 4, {1}, 2);
  p.soft = Matrix(4, cfg.d_model + 1);
  CHECK_THROWS_AS(forward(w, p, false), ShapeError);
  auto long_prompt = random_prompt(cfg, 10, {1, 2, 3}, 2);
  CHECK_THROWS_AS(forward(w, long_prompt, false), ValidationError);
  auto bad_tok = random_prompt(cfg, 2, {99}, 2);
  CHECK_THROWS_AS(forward(w, bad_tok, false), ValidationError);
  auto nan_prompt = random_prompt(cfg, 2, {1}, 2);
  nan_prompt.soft(0, 0) = NAN;
  CHECK_THROWS_AS(forward(w, nan_prompt, false), NumericError);
  auto huge = ModelWeights::random(cfg, 0.8, 1);
  huge.layers[0].w_out(0, 0) = 1e308;
  huge.layers[0].b_in.assign(cfg.d_mlp, 1e3);
  try {
    forward(huge, random_prompt(cfg, 2, {1}, 2), false);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("layer 0") != std::string::npos);
  }
}

TEST_CASE("gelu matches the erf definition") {
  for (int i = -10000; i <= 10000; ++i) {
    const double x = i * 1e-3;
    const double want = x * 0.5 * std::erfc(-x / std::numbers::sqrt2);
    CHECK(std::abs(gelu(x) - want) <= 1e-10);
  }
  for (double x : {-3.0, -0.75, 0.0, 0.4, 2.5}) {
    const double h = 1e-6;
    CHECK(std::abs(gelu_grad(x) - (gelu(x + h) - gelu(x - h)) / (2 * h)) < 1e-8);
  }
}

TEST_CASE("greedy generation") {
  auto cfg = tiny_config();
  SUBCASE("forced token repeats") {
    auto w = ModelWeights::random(cfg, 0.5, 5);
    w.final_ln.gain.assign(cfg.d_model, 0.0);
    w.final_ln.bias.assign(cfg.d_model, 1.0);
    for (std::size_t t = 0; t < cfg.vocab_size; ++t)
      for (std::size_t j = 0; j < cfg.d_model; ++j) w.unembedding(t, j) = t == 6 ? 1.0 : 0.0;
    const auto g = generate_greedy(w, random_prompt(cfg, 3, {1}, 6), 4, std::nullopt);
    CHECK(g.tokens == std::vector<TokenId>{6, 6, 6, 6});
    for (std::size_t s = 0; s < g.tokens.size(); ++s) CHECK(argmax(g.step_logits[s]) == 6);
  }
  SUBCASE("ties go to the lowest id") {
    auto w = ModelWeights::random(cfg, 0.5, 5);
    w.final_ln.gain.assign(cfg.d_model, 0.0);
    w.final_ln.bias.assign(cfg.d_model, 1.0);
    for (std::size_t t = 0; t < cfg.vocab_size; ++t)
      for (std::size_t j = 0; j < cfg.d_model; ++j) w.unembedding(t, j) = (t == 3 || t == 8) ? 1.0 : 0.0;
    const auto g = generate_greedy(w, random_prompt(cfg, 3, {1}, 6), 2, std::nullopt);
    CHECK(g.tokens.front() == 3);
  }
  SUBCASE("stop token ends generation") {
    auto w = ModelWeights::random(cfg, 0.5, 5);
    w.final_ln.gain.assign(cfg.d_model, 0.0);
    w.final_ln.bias.assign(cfg.d_model, 1.0);
    for (std::size_t t = 0; t < cfg.vocab_size; ++t)
      for (std::size_t j = 0; j < cfg.d_model; ++j) w.unembedding(t, j) = t == 0 ? 1.0 : 0.0;
    const auto g = generate_greedy(w, random_prompt(cfg, 3, {1}, 6), 5, TokenId{0});
    CHECK(g.tokens == std::vector<TokenId>{0});
  }
  CHECK_THROWS_AS(generate_greedy(ModelWeights::random(cfg, 0.5, 1), random_prompt(cfg, 2, {1}, 1), 0,
                                  std::nullopt),
                  ValidationError);
}

TEST_CASE("decode_hidden") {
  const auto cfg = tiny_config();
  const auto w = ModelWeights::random(cfg, 0.8, 51);
  const auto uniform = decode_hidden(w, Vector(cfg.d_model, 0.0), false);
  for (double p : uniform) CHECK(std::abs(p - 1.0 / cfg.vocab_size) < 1e-15);

  std::mt19937_64 rng(52);
  std::normal_distribution<double> normal;
  Vector v(cfg.d_model);
  for (double& x : v) x = normal(rng);
  const auto got = decode_hidden(w, v, false);
  std::vector<double> raw(cfg.vocab_size);
  double z = 0;
  for (std::size_t t = 0; t < cfg.vocab_size; ++t) {
    double s = 0;
    for (std::size_t j = 0; j < cfg.d_model; ++j) s += w.unembedding(t, j) * v[j];
    raw[t] = std::exp(s);
    z += raw[t];
  }
  double total = 0;
  for (std::size_t t = 0; t < cfg.vocab_size; ++t) {
    CHECK(std::abs(got[t] - raw[t] / z) < 1e-12);
    CHECK(got[t] >= 0.0);
    CHECK(got[t] <= 1.0);
    total += got[t];
  }
  CHECK(std::abs(total - 1.0) < 1e-9);
  v[0] = INFINITY;
  CHECK_THROWS_AS(decode_hidden(w, v, false), NumericError);
}

TEST_CASE("rerun with override equals a full forward with the same override") {
  const auto cfg = tiny_config();
  const auto w = ModelWeights::random(cfg, 0.8, 61);
  const auto p = random_prompt(cfg, 4, {1, 2}, 62);
  const auto tr = *forward(w, p, true).trace;
  OverrideRerunner runner(w, tr);
  for (std::uint32_t l = 0; l < cfg.n_layers; ++l)
    for (std::size_t pos : {0u, 2u, 5u}) {
      ActivationEdit::Override o{l, pos, 3, tr.layers[l].z(pos, 3) + 0.3};
      ActivationEdit e;
      e.z_override = o;
      const auto full = forward(w, p, false, e).logits;
      CHECK(std::abs(runner.logit(o, 4) - full[4]) < 1e-12);
    }
  // The scratch copy is restored after every call.
  ActivationEdit::Override same{0, 0, 0, tr.layers[0].z(0, 0)};
  CHECK(std::abs(runner.logit(same, 4) - forward(w, p, false).logits[4]) < 1e-12);
}

TEST_CASE("vocabulary tokenization") {
  Vocabulary v({"<eos>", "A", " picture", " of", " pic", " a"});
  CHECK(v.tokenize("A picture of") == std::vector<TokenId>{1, 2, 3});
  CHECK(v.tokenize("").empty());
  CHECK_THROWS_AS(v.tokenize("A dog"), ValidationError);
  CHECK_THROWS_AS(Vocabulary({"x", "x"}), ValidationError);
}

TEST_CASE("model container round trip is byte-identical") {
  auto cfg = tiny_config();
  cfg.seed = 99;
  for (auto st : {StorageType::f64, StorageType::f32}) {
    ModelFile f;
    f.weights = ModelWeights::random(cfg, 0.7, 71);
    f.storage = st;
    EncoderWeights enc;
    enc.weight = Matrix(3, cfg.patch_dim(), 0.25);
    f.encoder = enc;
    f.projection = ProjectionLayer{Matrix(cfg.d_model, 3, -0.5)};
    const auto a = serialize_model(f);
    CHECK(std::string(a.begin(), a.begin() + 4) == "MMN1");
    CHECK(a[4] == 1);
    CHECK(a[5] == 0);
    const auto loaded = deserialize_model(a);
    CHECK(loaded.weights.config == cfg);
    const auto b = serialize_model(loaded);
    CHECK(a == b);
    if (st == StorageType::f64) CHECK(loaded.weights == f.weights);
  }
  std::vector<std::uint8_t> junk = {'N', 'O', 'P', 'E', 1, 0};
  CHECK_THROWS_AS(deserialize_model(junk), IoError);
  ModelFile f;
  f.weights = ModelWeights::random(cfg, 0.7, 71);
  auto bytes = serialize_model(f);
  bytes.resize(bytes.size() - 3);
  CHECK_THROWS_AS(deserialize_model(bytes), IoError);
}
