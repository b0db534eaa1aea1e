#include "mmn/transformer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "mmn/error.hpp"

namespace mmn {
namespace {

constexpr double kLayerNormEps = 1e-5;

void layer_norm_row(std::span<const double> x, const LayerNormWeights& ln, std::span<double> out,
                    double& rstd) {
  const std::size_t n = x.size();
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= static_cast<double>(n);
  if (!std::isfinite(var)) throw NumericError("layernorm variance overflow");
  rstd = 1.0 / std::sqrt(var + kLayerNormEps);
  for (std::size_t i = 0; i < n; ++i) out[i] = (x[i] - mean) * rstd * ln.gain[i] + ln.bias[i];
}

// dx for y = LN(x), given dy (w.r.t. the layernorm output).
void layer_norm_backward_row(std::span<const double> x, double rstd, const LayerNormWeights& ln,
                             std::span<const double> dout, std::span<double> dx_acc) {
  const std::size_t n = x.size();
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(n);
  double mean_dy = 0.0, mean_dy_y = 0.0;
  Vector y(n), dy(n);
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = (x[i] - mean) * rstd;
    dy[i] = dout[i] * ln.gain[i];
    mean_dy += dy[i];
    mean_dy_y += dy[i] * y[i];
  }
  mean_dy /= static_cast<double>(n);
  mean_dy_y /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) dx_acc[i] += rstd * (dy[i] - mean_dy - y[i] * mean_dy_y);
}

// Per-layer lookup of zeroed units.
std::vector<std::vector<char>> zero_masks(const ModelConfig& config, const ActivationEdit& edit) {
  std::vector<std::vector<char>> masks(config.n_layers);
  for (const auto& u : edit.zeroed) {
    if (u.layer >= config.n_layers || u.unit >= config.d_mlp)
      throw ValidationError("ablated unit out of range: layer " + std::to_string(u.layer) +
                            " unit " + std::to_string(u.unit));
    auto& m = masks[u.layer];
    if (m.empty()) m.assign(config.d_mlp, 0);
    m[u.unit] = 1;
  }
  return masks;
}

void check_row(std::span<const double> row, const char* what, std::size_t layer, std::size_t pos) {
  if (!all_finite(row))
    throw NumericError(std::string("non-finite ") + what + " at layer " + std::to_string(layer) +
                       ", position " + std::to_string(pos));
}

class Evaluator {
 public:
  Evaluator(const ModelWeights& w, const ActivationEdit& edit)
      : w_(w), cfg_(w.config), edit_(edit), masks_(zero_masks(w.config, edit)) {}

  static void allocate(LayerTrace& lt, const ModelConfig& cfg, std::size_t t) {
    const std::size_t d = cfg.d_model;
    lt.ln_out = Matrix(t, d);
    lt.ln_rstd = Vector(t);
    lt.q = Matrix(t, d);
    lt.k = Matrix(t, d);
    lt.v = Matrix(t, d);
    lt.attn_probs.assign(cfg.n_heads, Matrix(t, t));
    lt.context = Matrix(t, d);
    lt.attn_out = Matrix(t, d);
    lt.z = Matrix(t, cfg.d_mlp);
    lt.act = Matrix(t, cfg.d_mlp);
    lt.mlp_out = Matrix(t, d);
    lt.resid = Matrix(t, d);
  }

  // MLP and residual update for one position; attention output must be set.
  void mlp_position(std::size_t l, const Matrix& h_in, LayerTrace& lt, std::size_t i) const {
    const LayerWeights& lw = w_.layers[l];
    auto z = lt.z.row(i);
    auto act = lt.act.row(i);
    matvec(lw.w_in, lt.ln_out.row(i), z);
    for (std::size_t u = 0; u < z.size(); ++u) z[u] += lw.b_in[u];
    if (edit_.z_override && edit_.z_override->layer == l && edit_.z_override->position == i)
      z[edit_.z_override->unit] = edit_.z_override->value;
    const bool zero_here = !masks_[l].empty() && i >= edit_.zero_begin && i < edit_.zero_end;
    for (std::size_t u = 0; u < z.size(); ++u)
      act[u] = (zero_here && masks_[l][u]) ? 0.0 : gelu(z[u]);
    auto m = lt.mlp_out.row(i);
    matvec(lw.w_out, act, m);
    auto h = lt.resid.row(i);
    auto hin = h_in.row(i);
    auto a = lt.attn_out.row(i);
    for (std::size_t c = 0; c < h.size(); ++c) {
      m[c] += lw.b_out[c];
      h[c] = hin[c] + a[c] + m[c];
    }
    check_row(h, "residual", l, i);
  }

  // Recomputes positions >= from of layer l; rows < from are reused.
  void run_layer(std::size_t l, const Matrix& h_in, LayerTrace& lt, std::size_t from) const {
    const LayerWeights& lw = w_.layers[l];
    const std::size_t t = h_in.rows();
    for (std::size_t i = from; i < t; ++i) {
      layer_norm_row(h_in.row(i), lw.ln, lt.ln_out.row(i), lt.ln_rstd[i]);
      matvec(lw.wq, lt.ln_out.row(i), lt.q.row(i));
      matvec(lw.wk, lt.ln_out.row(i), lt.k.row(i));
      matvec(lw.wv, lt.ln_out.row(i), lt.v.row(i));
    }
    const std::size_t hd = cfg_.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    Vector scores(t);
    for (std::size_t i = from; i < t; ++i) {
      auto ctx = lt.context.row(i);
      std::fill(ctx.begin(), ctx.end(), 0.0);
      for (std::size_t head = 0; head < cfg_.n_heads; ++head) {
        const std::size_t off = head * hd;
        auto qi = lt.q.row(i).subspan(off, hd);
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j <= i; ++j) {
          scores[j] = dot(qi, lt.k.row(j).subspan(off, hd)) * scale;
          mx = std::max(mx, scores[j]);
        }
        double sum = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
          scores[j] = std::exp(scores[j] - mx);
          sum += scores[j];
        }
        auto probs = lt.attn_probs[head].row(i);
        std::fill(probs.begin(), probs.end(), 0.0);
        auto ch = ctx.subspan(off, hd);
        for (std::size_t j = 0; j <= i; ++j) {
          probs[j] = scores[j] / sum;
          axpy(probs[j], lt.v.row(j).subspan(off, hd), ch);
        }
      }
      matvec(lw.wo, ctx, lt.attn_out.row(i));
      mlp_position(l, h_in, lt, i);
    }
  }

  void final_norm(ForwardTrace& tr, std::size_t from) const {
    for (std::size_t i = from; i < tr.length(); ++i)
      layer_norm_row(tr.layers.back().resid.row(i), w_.final_ln, tr.final_ln_out.row(i),
                     tr.final_ln_rstd[i]);
  }

 private:
  const ModelWeights& w_;
  const ModelConfig& cfg_;
  const ActivationEdit& edit_;
  std::vector<std::vector<char>> masks_;
};

void copy_rows(Matrix& dst, const Matrix& src, std::size_t from) {
  std::copy(src.data().begin() + static_cast<std::ptrdiff_t>(from * src.cols()), src.data().end(),
            dst.data().begin() + static_cast<std::ptrdiff_t>(from * dst.cols()));
}

void restore_layer(LayerTrace& dst, const LayerTrace& src, std::size_t from) {
  copy_rows(dst.ln_out, src.ln_out, from);
  std::copy(src.ln_rstd.begin() + static_cast<std::ptrdiff_t>(from), src.ln_rstd.end(),
            dst.ln_rstd.begin() + static_cast<std::ptrdiff_t>(from));
  copy_rows(dst.q, src.q, from);
  copy_rows(dst.k, src.k, from);
  copy_rows(dst.v, src.v, from);
  for (std::size_t h = 0; h < src.attn_probs.size(); ++h)
    copy_rows(dst.attn_probs[h], src.attn_probs[h], from);
  copy_rows(dst.context, src.context, from);
  copy_rows(dst.attn_out, src.attn_out, from);
  copy_rows(dst.z, src.z, from);
  copy_rows(dst.act, src.act, from);
  copy_rows(dst.mlp_out, src.mlp_out, from);
  copy_rows(dst.resid, src.resid, from);
}

}  // namespace

PromptInput extend_prompt(const PromptInput& prompt, std::span<const TokenId> generated) {
  PromptInput p = prompt;
  p.tokens.insert(p.tokens.end(), generated.begin(), generated.end());
  return p;
}

ForwardResult forward(const ModelWeights& weights, const PromptInput& prompt, bool record_trace,
                      const ActivationEdit& edit) {
  const ModelConfig& cfg = weights.config;
  const std::size_t d = cfg.d_model;
  const std::size_t t = prompt.length();
  if (t == 0) throw ValidationError("empty prompt");
  if (t > cfg.max_seq)
    throw ValidationError("prompt length " + std::to_string(t) + " exceeds max_seq " +
                          std::to_string(cfg.max_seq));
  if (prompt.soft.rows() > 0 && prompt.soft.cols() != d)
    throw ShapeError("soft prompt width " + std::to_string(prompt.soft.cols()) +
                     " != d_model " + std::to_string(d));
  if (!all_finite(prompt.soft.data())) throw NumericError("non-finite soft prompt value");

  ForwardTrace tr;
  tr.edit = edit;
  tr.input = Matrix(t, d);
  const std::size_t ns = prompt.n_soft();
  for (std::size_t i = 0; i < t; ++i) {
    auto row = tr.input.row(i);
    std::span<const double> src;
    if (i < ns) {
      src = prompt.soft.row(i);
    } else {
      const TokenId id = prompt.tokens[i - ns];
      if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size)
        throw ValidationError("token id out of range: " + std::to_string(id));
      src = weights.token_embedding.row(static_cast<std::size_t>(id));
    }
    auto pos = weights.position_embedding.row(i);
    for (std::size_t c = 0; c < d; ++c) row[c] = src[c] + pos[c];
  }

  Evaluator ev(weights, edit);
  tr.layers.resize(cfg.n_layers);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    Evaluator::allocate(tr.layers[l], cfg, t);
    const Matrix& h_in = l == 0 ? tr.input : tr.layers[l - 1].resid;
    ev.run_layer(l, h_in, tr.layers[l], 0);
  }
  tr.final_ln_out = Matrix(t, d);
  tr.final_ln_rstd = Vector(t);
  ev.final_norm(tr, 0);

  ForwardResult res;
  res.logits = matvec(weights.unembedding, tr.final_ln_out.row(t - 1));
  if (!all_finite(res.logits)) throw NumericError("non-finite logits");
  if (record_trace) res.trace = std::move(tr);
  return res;
}

Vector logits_at(const ModelWeights& weights, const ForwardTrace& trace, std::size_t position) {
  if (position >= trace.length()) throw ValidationError("position outside traced sequence");
  return matvec(weights.unembedding, trace.final_ln_out.row(position));
}

double rerun_logit_with_override(const ModelWeights& weights, const ForwardTrace& trace,
                                 const ActivationEdit::Override& patch, TokenId target) {
  OverrideRerunner runner(weights, trace);
  return runner.logit(patch, target);
}

OverrideRerunner::OverrideRerunner(const ModelWeights& weights, const ForwardTrace& trace)
    : weights_(weights), original_(trace), scratch_(trace) {}

double OverrideRerunner::logit(const ActivationEdit::Override& patch, TokenId target) {
  const ModelConfig& cfg = weights_.config;
  if (patch.layer >= cfg.n_layers || patch.unit >= cfg.d_mlp ||
      patch.position >= original_.length())
    throw ValidationError("override outside traced model");
  if (target < 0 || static_cast<std::size_t>(target) >= cfg.vocab_size)
    throw ValidationError("target token out of range");
  ActivationEdit edit = original_.edit;
  edit.z_override = patch;
  Evaluator ev(weights_, edit);

  const std::size_t l0 = patch.layer;
  const std::size_t p = patch.position;
  const Matrix& h_in0 = l0 == 0 ? scratch_.input : scratch_.layers[l0 - 1].resid;
  ev.mlp_position(l0, h_in0, scratch_.layers[l0], p);
  for (std::size_t l = l0 + 1; l < cfg.n_layers; ++l)
    ev.run_layer(l, scratch_.layers[l - 1].resid, scratch_.layers[l], p);
  const std::size_t last = scratch_.length() - 1;
  ev.final_norm(scratch_, last);
  const double y =
      dot(weights_.unembedding.row(static_cast<std::size_t>(target)), scratch_.final_ln_out.row(last));

  restore_layer(scratch_.layers[l0], original_.layers[l0], p);
  for (std::size_t l = l0 + 1; l < cfg.n_layers; ++l)
    restore_layer(scratch_.layers[l], original_.layers[l], p);
  copy_rows(scratch_.final_ln_out, original_.final_ln_out, last);
  scratch_.final_ln_rstd[last] = original_.final_ln_rstd[last];
  return y;
}

Vector softmax(std::span<const double> logits) {
  Vector p(logits.size());
  if (logits.empty()) return p;
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - mx);
    sum += p[i];
  }
  for (double& x : p) x /= sum;
  return p;
}

std::size_t argmax(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

GenerationResult generate_greedy(const ModelWeights& weights, const PromptInput& prompt,
                                 std::size_t max_new_tokens, std::optional<TokenId> stop_token,
                                 const ActivationEdit& edit) {
  if (max_new_tokens < 1) throw ValidationError("max_new_tokens must be >= 1");
  GenerationResult out;
  PromptInput cur = prompt;
  for (std::size_t step = 0; step < max_new_tokens; ++step) {
    if (cur.length() > weights.config.max_seq) break;
    ForwardResult fr = forward(weights, cur, false, edit);
    const auto tok = static_cast<TokenId>(argmax(fr.logits));
    const Vector probs = softmax(fr.logits);
    out.tokens.push_back(tok);
    out.step_prob.push_back(probs[static_cast<std::size_t>(tok)]);
    out.step_logits.push_back(std::move(fr.logits));
    if (stop_token && tok == *stop_token) break;
    cur.tokens.push_back(tok);
  }
  return out;
}

Vector decode_hidden(const ModelWeights& weights, std::span<const double> v,
                     bool apply_final_layernorm) {
  if (v.size() != weights.config.d_model) throw ShapeError("hidden vector width != d_model");
  if (!all_finite(v)) throw NumericError("non-finite hidden vector");
  Vector h(v.begin(), v.end());
  if (apply_final_layernorm) {
    double rstd = 0.0;
    Vector out(h.size());
    layer_norm_row(h, weights.final_ln, out, rstd);
    h = std::move(out);
  }
  return softmax(matvec(weights.unembedding, h));
}

Gradients backward(const ModelWeights& weights, const ForwardTrace& trace,
                   const std::vector<LogitSeed>& seeds) {
  const ModelConfig& cfg = weights.config;
  const std::size_t t = trace.length();
  const std::size_t d = cfg.d_model;
  if (trace.layers.size() != cfg.n_layers) throw ValidationError("trace does not match model");

  Matrix dh(t, d);
  {
    Vector dfinal(d);
    for (const auto& s : seeds) {
      if (s.position >= t) throw ValidationError("seed position outside trace");
      if (s.dlogits.size() != cfg.vocab_size) throw ShapeError("seed width != vocab_size");
      std::fill(dfinal.begin(), dfinal.end(), 0.0);
      matvec_t_acc(weights.unembedding, s.dlogits, dfinal);
      layer_norm_backward_row(trace.layers.back().resid.row(s.position),
                              trace.final_ln_rstd[s.position], weights.final_ln, dfinal,
                              dh.row(s.position));
    }
  }

  const auto masks = zero_masks(cfg, trace.edit);
  Gradients g;
  g.dz.assign(cfg.n_layers, Matrix());
  const std::size_t hd = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  for (std::size_t li = cfg.n_layers; li-- > 0;) {
    const LayerWeights& lw = weights.layers[li];
    const LayerTrace& lt = trace.layers[li];
    const Matrix& h_in = li == 0 ? trace.input : trace.layers[li - 1].resid;
    Matrix dln(t, d);
    Matrix& dz = g.dz[li];
    dz = Matrix(t, cfg.d_mlp);
    Vector dact(cfg.d_mlp);

    // MLP branch.
    for (std::size_t i = 0; i < t; ++i) {
      auto dm = dh.row(i);
      std::fill(dact.begin(), dact.end(), 0.0);
      matvec_t_acc(lw.w_out, dm, dact);
      const bool zero_here =
          !masks[li].empty() && i >= trace.edit.zero_begin && i < trace.edit.zero_end;
      auto z = lt.z.row(i);
      auto dzi = dz.row(i);
      for (std::size_t u = 0; u < cfg.d_mlp; ++u)
        dzi[u] = (zero_here && masks[li][u]) ? 0.0 : dact[u] * gelu_grad(z[u]);
      check_row(dzi, "gradient", li, i);
      matvec_t_acc(lw.w_in, dzi, dln.row(i));
    }

    // Attention branch.
    Matrix dctx(t, d), dq(t, d), dk(t, d), dv(t, d);
    for (std::size_t i = 0; i < t; ++i) matvec_t_acc(lw.wo, dh.row(i), dctx.row(i));
    Vector dp(t);
    for (std::size_t head = 0; head < cfg.n_heads; ++head) {
      const std::size_t off = head * hd;
      const Matrix& probs = lt.attn_probs[head];
      for (std::size_t i = 0; i < t; ++i) {
        auto dci = dctx.row(i).subspan(off, hd);
        double weighted = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
          dp[j] = dot(dci, lt.v.row(j).subspan(off, hd));
          weighted += probs(i, j) * dp[j];
          axpy(probs(i, j), dci, dv.row(j).subspan(off, hd));
        }
        auto qi = lt.q.row(i).subspan(off, hd);
        auto dqi = dq.row(i).subspan(off, hd);
        for (std::size_t j = 0; j <= i; ++j) {
          const double ds = probs(i, j) * (dp[j] - weighted) * scale;
          if (ds == 0.0) continue;
          axpy(ds, lt.k.row(j).subspan(off, hd), dqi);
          axpy(ds, qi, dk.row(j).subspan(off, hd));
        }
      }
    }
    for (std::size_t i = 0; i < t; ++i) {
      auto dl = dln.row(i);
      matvec_t_acc(lw.wq, dq.row(i), dl);
      matvec_t_acc(lw.wk, dk.row(i), dl);
      matvec_t_acc(lw.wv, dv.row(i), dl);
    }

    // Residual plus layernorm path into the block input.
    for (std::size_t i = 0; i < t; ++i)
      layer_norm_backward_row(h_in.row(i), lt.ln_rstd[i], lw.ln, dln.row(i), dh.row(i));
  }
  g.d_input = std::move(dh);
  return g;
}

}  // namespace mmn
