#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "refgeo/tensor.hpp"

namespace refgeo {

// Token 0 is reserved as the end-of-sequence token in every vocabulary.
constexpr int kEndToken = 0;

struct ModelConfig {
  int vocab_size = 64;
  int d_model = 32;
  int n_layers = 4;
  int n_heads = 4;
  int d_ff = 64;
  int max_seq_len = 32;
  uint64_t rng_seed = 0;

  int head_dim() const { return d_model / n_heads; }
  void validate() const;
  bool operator==(const ModelConfig&) const = default;

  // architectural compatibility; rng_seed is provenance, not shape
  bool same_shape(const ModelConfig& o) const {
    return vocab_size == o.vocab_size && d_model == o.d_model && n_layers == o.n_layers &&
           n_heads == o.n_heads && d_ff == o.d_ff && max_seq_len == o.max_seq_len;
  }
};

struct LayerParams {
  Tensor attn_wq;    // [d_model, d_model]
  Tensor attn_wk;    // [d_model, d_model]
  Tensor attn_wv;    // [d_model, d_model]
  Tensor attn_wo;    // [d_model, d_model], writes into the residual stream
  Tensor mlp_up;     // [d_ff, d_model]
  Tensor mlp_down;   // [d_model, d_ff], writes into the residual stream
};

// All learnable tensors of the decoder. Pre-layer-norm blocks, learned
// absolute position embeddings, no biases; in-block norms carry no gain,
// only the final norm does. Immutable during any forward that reads it.
struct ModelParams {
  ModelConfig config;
  Tensor token_embedding;     // [vocab_size, d_model]
  Tensor position_embedding;  // [max_seq_len, d_model]
  std::vector<LayerParams> layers;
  Tensor final_ln_gain;       // [d_model]
  Tensor unembedding;         // [d_model, vocab_size]
};

// One tensor per ModelParams tensor, same shapes, holding d(loss)/d(theta).
struct GradientSet {
  Tensor token_embedding;
  Tensor position_embedding;
  std::vector<LayerParams> layers;
  Tensor final_ln_gain;
  Tensor unembedding;
};

// Visits every tensor of a ModelParams/GradientSet in checkpoint order.
template <typename P, typename F>
void visit_tensors(P& p, F&& f) {
  f("token_embedding", p.token_embedding);
  f("position_embedding", p.position_embedding);
  for (size_t l = 0; l < p.layers.size(); ++l) {
    const std::string k = "layers." + std::to_string(l) + ".";
    f(k + "attn_wq", p.layers[l].attn_wq);
    f(k + "attn_wk", p.layers[l].attn_wk);
    f(k + "attn_wv", p.layers[l].attn_wv);
    f(k + "attn_wo", p.layers[l].attn_wo);
    f(k + "mlp_up", p.layers[l].mlp_up);
    f(k + "mlp_down", p.layers[l].mlp_down);
  }
  f("final_ln_gain", p.final_ln_gain);
  f("unembedding", p.unembedding);
}

// Fresh randomly initialized parameters. Every initial value is exactly
// float32-representable so a save/load round trip is bitwise.
ModelParams init_params(const ModelConfig& config);

GradientSet zero_gradients(const ModelConfig& config);

// params += scale * grads, tensor by tensor.
void axpy_params(ModelParams& params, const GradientSet& grads, double scale);

// accum += grads, tensor by tensor.
void axpy_params_into(GradientSet& accum, const GradientSet& grads);

struct TokenSequence {
  std::vector<int> tokens;
  int role_boundary = 0;  // tokens[0..role_boundary) are the prompt

  int length() const { return static_cast<int>(tokens.size()); }
};

void validate_sequence(const ModelConfig& config, const TokenSequence& seq);

enum class PoolingRule { last_prompt_token, mean_prompt };
std::string pooling_rule_name(PoolingRule rule);
PoolingRule pooling_rule_from_name(const std::string& name);

// Residual-stream inputs of every block plus the final stream
// (n_layers + 1 entries), for every position.
struct ActivationTrace {
  int n_layers = 0;
  int d_model = 0;
  int seq_len = 0;
  int role_boundary = 0;
  std::vector<std::vector<double>> layers;  // [n_layers+1][seq_len * d_model]

  std::span<const double> at(int layer, int pos) const {
    return {layers[static_cast<size_t>(layer)].data() + static_cast<size_t>(pos) * d_model,
            static_cast<size_t>(d_model)};
  }
  // Per-prompt summary vector at one layer under the given rule.
  std::vector<double> pooled(int layer, PoolingRule rule) const;
};

// Inference-time intervention on the residual stream: fn is applied to the
// stream vector entering block `layer` (or to the final stream when
// layer == n_layers) at every position for which `positions(pos)` is true.
struct ResidualHook {
  int layer = 0;
  std::function<bool(int pos)> positions;
  std::function<void(int pos, std::span<double> h)> fn;
};

struct ForwardResult {
  int seq_len = 0;
  int vocab_size = 0;
  std::vector<double> logits;  // [seq_len * vocab_size], row-major
  std::optional<ActivationTrace> trace;

  std::span<const double> row(int t) const {
    return {logits.data() + static_cast<size_t>(t) * vocab_size,
            static_cast<size_t>(vocab_size)};
  }
};

ForwardResult forward(const ModelParams& params, const TokenSequence& seq, bool capture,
                      const ResidualHook* hook = nullptr);

ActivationTrace capture_trace(const ModelParams& params, const TokenSequence& seq);

// log softmax(logits)[token] for one row.
double log_prob_of(std::span<const double> logits_row, int token);

// -sum_t log pi(tokens[t] | tokens[<t]) over loss_positions (target indices).
double nll(const ModelParams& params, const TokenSequence& seq,
           std::span<const int> loss_positions);

// Analytic gradient of nll.
GradientSet backward(const ModelParams& params, const TokenSequence& seq,
                     std::span<const int> loss_positions);

// Backprop of an arbitrary upstream gradient on the logits.
GradientSet backward_logits(const ModelParams& params, const TokenSequence& seq,
                            const std::vector<double>& dlogits);

struct SampleResult {
  TokenSequence seq;               // prompt + generated tokens
  std::vector<double> logprobs;    // temperature-1 log prob of each generated token
};

class CounterRng;

// Draws one token from a logits row; greedy argmax when temperature < 1e-6
// (ties to the lowest id), otherwise one uniform draw from rng.
int sample_from_logits(std::span<const double> logits_row, double temperature,
                       CounterRng& rng);

// Ancestral sampling at the given temperature; greedy when temperature < 1e-6.
// Stops after kEndToken or max_new tokens. Identical seed, identical output.
SampleResult sample(const ModelParams& params, const TokenSequence& prompt, int max_new,
                    double temperature, uint64_t seed, const ResidualHook* hook = nullptr);

}  // namespace refgeo
