#pragma once

#include <optional>
#include <vector>

#include "mmn/model.hpp"
#include "mmn/tensor.hpp"

namespace mmn {

// Soft image vectors followed by literal tokens. Generated tokens are appended
// to `tokens` during greedy decoding.
struct PromptInput {
  Matrix soft;  // n_soft x d_model
  std::vector<TokenId> tokens;

  std::size_t n_soft() const { return soft.rows(); }
  std::size_t length() const { return soft.rows() + tokens.size(); }
};

struct UnitRef {
  std::uint32_t layer = 0;
  std::uint32_t unit = 0;
  auto operator<=>(const UnitRef&) const = default;
};

// Interventions applied inside the MLP blocks during a forward pass.
struct ActivationEdit {
  // Units whose post-GELU activation is forced to zero.
  std::vector<UnitRef> zeroed;
  // Zeroing applies to positions in [zero_begin, zero_end).
  std::size_t zero_begin = 0;
  std::size_t zero_end = static_cast<std::size_t>(-1);

  // Replaces one pre-activation value before the nonlinearity.
  struct Override {
    std::uint32_t layer;
    std::size_t position;
    std::uint32_t unit;
    double value;
  };
  std::optional<Override> z_override;

  bool empty() const { return zeroed.empty() && !z_override; }
};

struct LayerTrace {
  Matrix ln_out;    // T x d_model, layernormed block input
  Vector ln_rstd;   // T, 1/sqrt(var + eps)
  Matrix q, k, v;   // T x d_model
  std::vector<Matrix> attn_probs;  // per head, T x T (lower triangular)
  Matrix context;   // T x d_model, concatenated head outputs before W_o
  Matrix attn_out;  // a_i
  Matrix z;         // T x d_mlp
  Matrix act;       // T x d_mlp, GELU(z) after edits
  Matrix mlp_out;   // m_i
  Matrix resid;     // h_i after the block
};

struct ForwardTrace {
  Matrix input;  // T x d_model, embeddings (soft or token) plus positions
  std::vector<LayerTrace> layers;
  Matrix final_ln_out;  // T x d_model
  Vector final_ln_rstd;
  ActivationEdit edit;  // the edit the trace was produced under

  std::size_t length() const { return input.rows(); }
};

struct ForwardResult {
  Vector logits;  // next-token scores after the final position
  std::optional<ForwardTrace> trace;
};

ForwardResult forward(const ModelWeights& weights, const PromptInput& prompt, bool record_trace,
                      const ActivationEdit& edit = {});

// Re-evaluates the target logit after replacing Z^{layer}_{position,unit} by
// `value`, recomputing only the downstream part of `trace`. Equivalent to a
// full forward with the same override; used for finite-difference checks.
double rerun_logit_with_override(const ModelWeights& weights, const ForwardTrace& trace,
                                 const ActivationEdit::Override& patch, TokenId target);

// Reusable form of the above: keeps one scratch copy of the trace and restores
// the touched rows after every call. Not thread-safe; use one per thread.
class OverrideRerunner {
 public:
  OverrideRerunner(const ModelWeights& weights, const ForwardTrace& trace);
  double logit(const ActivationEdit::Override& patch, TokenId target);

 private:
  const ModelWeights& weights_;
  const ForwardTrace& original_;
  ForwardTrace scratch_;
};

// Logits at an arbitrary traced position.
Vector logits_at(const ModelWeights& weights, const ForwardTrace& trace, std::size_t position);

struct GenerationResult {
  std::vector<TokenId> tokens;
  std::vector<Vector> step_logits;
  std::vector<double> step_prob;  // probability of the chosen token
};

GenerationResult generate_greedy(const ModelWeights& weights, const PromptInput& prompt,
                                 std::size_t max_new_tokens, std::optional<TokenId> stop_token,
                                 const ActivationEdit& edit = {});

// Softmax over the unembedding of a hidden vector, optionally after the final
// layernorm.
Vector decode_hidden(const ModelWeights& weights, std::span<const double> v,
                     bool apply_final_layernorm);

Vector softmax(std::span<const double> logits);
// Lowest index wins ties.
std::size_t argmax(std::span<const double> v);

// Reverse-mode gradients of a scalar built from output logits.
struct Gradients {
  std::vector<Matrix> dz;  // per layer, T x d_mlp
  Matrix d_input;          // T x d_model
};

struct LogitSeed {
  std::size_t position;
  Vector dlogits;  // vocab
};

Gradients backward(const ModelWeights& weights, const ForwardTrace& trace,
                   const std::vector<LogitSeed>& seeds);

// Prompt with the given generated tokens appended.
PromptInput extend_prompt(const PromptInput& prompt, std::span<const TokenId> generated);

}  // namespace mmn
