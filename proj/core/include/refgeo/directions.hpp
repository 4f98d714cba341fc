#pragma once

#include <span>
#include <string>
#include <vector>

#include "refgeo/model.hpp"

namespace refgeo {

enum class PromptLabel { harmful, benign };

struct PromptRecord {
  std::string id;
  TokenSequence tokens;
  std::string text;  // optional, real-text mode
  PromptLabel label = PromptLabel::harmful;
  std::string category;
};

// Unit vector in residual space separating harmful from benign activations
// at one layer, with provenance.
struct RefusalDirection {
  int layer = 0;
  std::vector<double> vector;
  std::string source_model_id;
  std::string pooling_rule;
  int n_harmful = 0;
  int n_benign = 0;
};

// Normalized difference of per-set pooled means at the given layer.
// Summation is order-insensitive (addends sorted per dimension), so the
// result is invariant to permutations of either set.
RefusalDirection contrast_direction(std::span<const ActivationTrace> harmful,
                                    std::span<const ActivationTrace> benign, int layer,
                                    PoolingRule rule, const std::string& source_model_id);

// h . v
double projection_coefficient(std::span<const double> h, const RefusalDirection& dir);

// ||mean_harmful - mean_benign|| per trace layer; the sweep behind layer choice.
std::vector<double> contrast_norms_by_layer(std::span<const ActivationTrace> harmful,
                                            std::span<const ActivationTrace> benign,
                                            PoolingRule rule);

// Paper-default layer for a model: round(0.65 * n_layers).
int default_direction_layer(int n_layers);

// Captures pooled activations of `model` on both prompt sets and returns
// [(mean_h - mean_b) . v] normalized by the same quantity for `base`.
// The base model scores exactly 1.
double retained_projection(const ModelParams& model, const ModelParams& base,
                           const RefusalDirection& base_dir,
                           std::span<const PromptRecord> harmful,
                           std::span<const PromptRecord> benign, PoolingRule rule);

std::vector<ActivationTrace> capture_traces(const ModelParams& params,
                                            std::span<const PromptRecord> prompts);

std::string direction_to_json(const RefusalDirection& dir);
RefusalDirection direction_from_json(const std::string& text);
void save_direction(const RefusalDirection& dir, const std::string& path);
RefusalDirection load_direction(const std::string& path);

}  // namespace refgeo
