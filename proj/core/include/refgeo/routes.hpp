#pragma once

#include <span>
#include <string>
#include <vector>

#include "refgeo/corpus.hpp"
#include "refgeo/directions.hpp"
#include "refgeo/model.hpp"

namespace refgeo {

// Deterministic stand-in for a judge model: counts compliance and refusal
// markers in the response and maps them to the 1-5 compliance scale.
struct RewardOracle {
  double comply_weight = 1.0;
  double refuse_weight = 2.0;
  double floor = 1.0;
  double ceiling = 5.0;
  std::string version = "toy-rubric-v1";

  double score(std::span<const int> response_tokens) const;
};

double oracle_reward(const RewardOracle& oracle, const TokenSequence& completed);

// (r - mean) / popstd per group member; all exactly zero when popstd < 1e-8.
std::vector<double> group_advantages(std::span<const double> rewards);

struct Rollout {
  TokenSequence seq;                  // prompt + response
  std::vector<double> old_logprobs;   // per response token, from the old policy
  double reward = 0.0;
  double advantage = 0.0;
};

struct RolloutGroup {
  PromptRecord prompt;
  std::vector<Rollout> rollouts;
  bool degenerate = false;  // popstd guard fired, advantages all zero
};

struct GrpoLossResult {
  double loss = 0.0;
  GradientSet grads;
  double frac_clipped = 0.0;
  int n_tokens = 0;
};

// Clipped-surrogate loss of one group under the current policy; gradients
// flow only through current-policy log probs.
GrpoLossResult grpo_loss(const ModelParams& policy, const RolloutGroup& group,
                         double clip_eps);

struct RlvrStepConfig {
  int group_size = 8;
  double clip_eps = 0.2;
  double learning_rate = 0.3;
  int max_new = 8;
  double temperature = 1.0;
  int inner_epochs = 1;
  uint64_t seed = 0;
};

struct StepReport {
  double mean_reward = 0.0;
  double mean_abs_advantage = 0.0;
  double frac_clipped = 0.0;
  double loss = 0.0;
  int n_groups = 0;
  int n_degenerate = 0;
  bool noop = false;
};

// One GRPO update: sample G responses per prompt from the policy snapshot,
// score with the oracle, standardize within groups, descend the clipped
// surrogate. A step in which every group is degenerate leaves the
// parameters bitwise unchanged.
StepReport rlvr_step(ModelParams& policy, std::span<const PromptRecord> prompts,
                     const RewardOracle& oracle, const RlvrStepConfig& cfg);

// One gradient-descent step on the mean per-pair nll over target tokens.
// Returns the pre-update loss.
double sft_step(ModelParams& policy, std::span<const SFTPair> batch, double learning_rate);

}  // namespace refgeo
