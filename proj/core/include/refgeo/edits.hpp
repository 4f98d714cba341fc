#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "refgeo/directions.hpp"
#include "refgeo/model.hpp"

namespace refgeo {

// Which residual-stream writer tensors an abliteration edit touches.
struct WriterSelection {
  bool include_token_embedding = true;
  bool include_attention_output = true;
  bool include_mlp_down = true;
  bool include_position_embedding = false;
  int layer_lo = 0;
  int layer_hi = -1;  // -1 means n_layers - 1
};

// W' = (I - r r^T) W for every selected writer, with the residual dimension
// on the writing side. Re-orthogonalizes until the result is a bitwise fixed
// point, so the edit is exactly idempotent. Unselected tensors are untouched.
ModelParams abliterate(const ModelParams& params, const RefusalDirection& dir,
                       const WriterSelection& sel);

enum class PatchPositions { last_prompt_token, all_prompt_tokens, all_tokens };
std::string patch_positions_name(PatchPositions p);

struct PatchConfig {
  int layer = 0;
  double lambda = 1.0;
  PatchPositions positions = PatchPositions::last_prompt_token;
  RefusalDirection direction;
  std::string base_model_id;
};

// h + lambda * (alpha_base - h.v) v. Returns h bitwise when the shift is zero.
std::vector<double> patch_hidden(std::span<const double> h, double alpha_base,
                                 const RefusalDirection& dir, double lambda);

struct GenerationConfig {
  int max_new = 8;
  double temperature = 1e-7;  // greedy by default
  uint64_t seed = 0;
};

struct PatchedRun {
  std::string prompt_id;
  TokenSequence output;
  ActivationTrace trace;  // trace of the final patched pass
};

// Generates from `target` with the directional hook installed; alpha_base
// comes from a fresh `base` forward at matched positions for every prompt.
std::vector<PatchedRun> run_with_patch(const ModelParams& target, const ModelParams& base,
                                       const PatchConfig& cfg,
                                       std::span<const PromptRecord> prompts,
                                       const GenerationConfig& gen);

// Behavioral score of one generated response, higher = more of the behavior
// the sweep tries to recover.
using Scorer = std::function<double(const PromptRecord&, const TokenSequence&)>;

struct SweepCell {
  int layer = 0;
  double lambda = 0.0;
  double score = 0.0;
  double delta_vs_unpatched = 0.0;
};

struct SweepResult {
  double unpatched_score = 0.0;
  std::vector<SweepCell> cells;
  SweepCell best;  // argmax score, ties to smaller |lambda| then lower layer
};

SweepResult sweep_patch(const ModelParams& target, const ModelParams& base,
                        const RefusalDirection& dir, std::span<const int> layers,
                        std::span<const double> lambdas,
                        std::span<const PromptRecord> eval_prompts, const Scorer& scorer,
                        const GenerationConfig& gen,
                        PatchPositions positions = PatchPositions::last_prompt_token);

struct ControlResult {
  std::vector<SweepResult> sweeps;      // one per control direction
  std::vector<double> best_scores;      // per-control best
};

// Unit directions drawn uniformly on the sphere (stream "controls").
ControlResult random_direction_control(const ModelParams& target, const ModelParams& base,
                                       std::span<const int> layers,
                                       std::span<const double> lambdas,
                                       std::span<const PromptRecord> eval_prompts,
                                       const Scorer& scorer, const GenerationConfig& gen,
                                       int n_controls, uint64_t seed,
                                       int direction_layer,
                                       PatchPositions positions = PatchPositions::last_prompt_token);

}  // namespace refgeo
