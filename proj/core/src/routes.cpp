#include "refgeo/routes.hpp"

#include <algorithm>
#include <cmath>

#include "refgeo/errors.hpp"
#include "refgeo/rng.hpp"
#include "refgeo/threading.hpp"

namespace refgeo {

double RewardOracle::score(std::span<const int> response_tokens) const {
  int n_comply = 0, n_refuse = 0;
  for (int t : response_tokens) {
    if (t == tok::COMPLY) ++n_comply;
    if (t == tok::REFUSE) ++n_refuse;
  }
  double raw = floor + comply_weight * n_comply - refuse_weight * n_refuse;
  return std::clamp(raw, floor, ceiling);
}

double oracle_reward(const RewardOracle& oracle, const TokenSequence& completed) {
  std::span<const int> resp(completed.tokens.data() + completed.role_boundary,
                            static_cast<size_t>(completed.length() - completed.role_boundary));
  return oracle.score(resp);
}

std::vector<double> group_advantages(std::span<const double> rewards) {
  const size_t g = rewards.size();
  if (g < 2) fail(ErrorKind::domain, "advantage groups need at least 2 rewards");
  double mean = 0.0;
  for (double r : rewards) mean += r;
  mean /= static_cast<double>(g);
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  var /= static_cast<double>(g);
  double sd = std::sqrt(var);
  std::vector<double> adv(g, 0.0);
  if (sd < 1e-8) return adv;  // degenerate guard: exactly zero
  for (size_t i = 0; i < g; ++i) adv[i] = (rewards[i] - mean) / sd;
  return adv;
}

GrpoLossResult grpo_loss(const ModelParams& policy, const RolloutGroup& group,
                         double clip_eps) {
  if (clip_eps <= 0.0 || clip_eps >= 1.0)
    fail(ErrorKind::domain, "clip_eps must lie in (0, 1)");
  const size_t G = group.rollouts.size();
  if (G < 2) fail(ErrorKind::domain, "rollout group needs G >= 2");
  const int V = policy.config.vocab_size;

  GrpoLossResult out;
  out.grads = zero_gradients(policy.config);
  int clipped = 0;

  for (const Rollout& ro : group.rollouts) {
    const TokenSequence& seq = ro.seq;
    const int rb = seq.role_boundary;
    const int y_len = seq.length() - rb;
    if (y_len < 1) fail(ErrorKind::consistency, "rollout has an empty response");
    if (static_cast<int>(ro.old_logprobs.size()) != y_len)
      fail(ErrorKind::consistency,
           "stored old log-probs do not match response length for a rollout");

    ForwardResult fr = forward(policy, seq, false);
    std::vector<double> dlogits(static_cast<size_t>(seq.length()) * V, 0.0);
    const double adv = ro.advantage;
    const double inv_len = 1.0 / static_cast<double>(y_len);

    for (int t = rb; t < seq.length(); ++t) {
      std::span<const double> row = fr.row(t - 1);
      const int target = seq.tokens[static_cast<size_t>(t)];
      const double lp_new = log_prob_of(row, target);
      const double lp_old = ro.old_logprobs[static_cast<size_t>(t - rb)];
      const double ratio = std::exp(lp_new - lp_old);
      const double clipped_ratio = std::clamp(ratio, 1.0 - clip_eps, 1.0 + clip_eps);
      const double term_plain = ratio * adv;
      const double term_clip = clipped_ratio * adv;
      const double term = std::min(term_plain, term_clip);
      out.loss -= inv_len * term / static_cast<double>(G);
      out.n_tokens += 1;
      if (term_clip < term_plain) ++clipped;

      // d term / d lp_new is ratio*adv on the plain branch, 0 when the
      // clipped branch is strictly selected
      double coeff = term_plain <= term_clip ? term_plain : 0.0;
      double dlp = -inv_len * coeff / static_cast<double>(G);
      if (dlp != 0.0) {
        double* drow = dlogits.data() + static_cast<size_t>(t - 1) * V;
        double max_l = -std::numeric_limits<double>::infinity();
        for (double v : row) max_l = std::max(max_l, v);
        double denom = 0.0;
        for (double v : row) denom += std::exp(v - max_l);
        for (int vtok = 0; vtok < V; ++vtok) {
          double p = std::exp(row[static_cast<size_t>(vtok)] - max_l) / denom;
          drow[vtok] += dlp * (-p);
        }
        drow[target] += dlp;
      }
    }
    bool any = false;
    for (double v : dlogits)
      if (v != 0.0) {
        any = true;
        break;
      }
    if (any) {
      GradientSet g = backward_logits(policy, seq, dlogits);
      axpy_params_into(out.grads, g);
    }
  }
  out.frac_clipped = out.n_tokens > 0 ? static_cast<double>(clipped) / out.n_tokens : 0.0;
  return out;
}

StepReport rlvr_step(ModelParams& policy, std::span<const PromptRecord> prompts,
                     const RewardOracle& oracle, const RlvrStepConfig& cfg) {
  if (prompts.empty()) fail(ErrorKind::domain, "rlvr_step needs a non-empty prompt batch");
  if (cfg.group_size < 2) fail(ErrorKind::domain, "group size must be >= 2");
  if (cfg.inner_epochs < 1) fail(ErrorKind::domain, "inner_epochs must be >= 1");

  // Old-policy snapshot; rollouts are sampled from it once per step.
  const ModelParams old_policy = policy;

  std::vector<RolloutGroup> groups(prompts.size());
  parallel_for(prompts.size(), [&](size_t pi) {
    RolloutGroup& grp = groups[pi];
    grp.prompt = prompts[pi];
    grp.rollouts.resize(static_cast<size_t>(cfg.group_size));
    for (int g = 0; g < cfg.group_size; ++g) {
      uint64_t s = derive_seed(cfg.seed, CounterRng::stream_id(prompts[pi].id),
                               static_cast<uint64_t>(g));
      SampleResult sr =
          sample(old_policy, prompts[pi].tokens, cfg.max_new, cfg.temperature, s);
      Rollout& ro = grp.rollouts[static_cast<size_t>(g)];
      ro.seq = sr.seq;
      ro.old_logprobs = sr.logprobs;
      ro.reward = oracle_reward(oracle, sr.seq);
    }
    std::vector<double> rewards;
    for (const Rollout& ro : grp.rollouts) rewards.push_back(ro.reward);
    std::vector<double> adv = group_advantages(rewards);
    grp.degenerate = true;
    for (size_t g = 0; g < adv.size(); ++g) {
      grp.rollouts[g].advantage = adv[g];
      if (adv[g] != 0.0) grp.degenerate = false;
    }
  });

  StepReport report;
  report.n_groups = static_cast<int>(groups.size());
  double reward_sum = 0.0, abs_adv_sum = 0.0;
  int n_rollouts = 0;
  for (const auto& grp : groups) {
    if (grp.degenerate) ++report.n_degenerate;
    for (const auto& ro : grp.rollouts) {
      reward_sum += ro.reward;
      abs_adv_sum += std::abs(ro.advantage);
      ++n_rollouts;
    }
  }
  report.mean_reward = reward_sum / n_rollouts;
  report.mean_abs_advantage = abs_adv_sum / n_rollouts;

  if (report.n_degenerate == report.n_groups) {
    report.noop = true;  // all-constant rewards: parameters untouched
    return report;
  }

  for (int epoch = 0; epoch < cfg.inner_epochs; ++epoch) {
    std::vector<GrpoLossResult> parts(groups.size());
    parallel_for(groups.size(), [&](size_t gi) {
      if (groups[gi].degenerate) {
        parts[gi].grads = zero_gradients(policy.config);
        return;
      }
      parts[gi] = grpo_loss(policy, groups[gi], cfg.clip_eps);
    });
    GradientSet total = zero_gradients(policy.config);
    double loss = 0.0, clipped_tokens = 0.0;
    int n_tokens = 0;
    for (const auto& part : parts) {
      axpy_params_into(total, part.grads);
      loss += part.loss;
      clipped_tokens += part.frac_clipped * part.n_tokens;
      n_tokens += part.n_tokens;
    }
    const double scale = 1.0 / static_cast<double>(groups.size());
    report.loss = loss * scale;
    report.frac_clipped = n_tokens > 0 ? clipped_tokens / n_tokens : 0.0;
    axpy_params(policy, total, -cfg.learning_rate * scale);
  }
  return report;
}

double sft_step(ModelParams& policy, std::span<const SFTPair> batch, double learning_rate) {
  if (batch.empty()) fail(ErrorKind::domain, "sft_step needs a non-empty batch");
  for (const SFTPair& pair : batch) {
    if (pair.target.empty())
      fail(ErrorKind::validation, "sft pair " + pair.id + " has an empty target");
    if (pair.prompt.length() + static_cast<int>(pair.target.size()) >
        policy.config.max_seq_len)
      fail(ErrorKind::length, "sft pair " + pair.id + " exceeds max_seq_len");
  }

  std::vector<double> losses(batch.size());
  std::vector<GradientSet> grads(batch.size());
  parallel_for(batch.size(), [&](size_t i) {
    TokenSequence seq = batch[i].full_sequence();
    std::vector<int> positions = batch[i].target_positions();
    losses[i] = nll(policy, seq, positions);
    grads[i] = backward(policy, seq, positions);
  });

  GradientSet total = zero_gradients(policy.config);
  double loss = 0.0;
  for (size_t i = 0; i < batch.size(); ++i) {
    axpy_params_into(total, grads[i]);
    loss += losses[i];
  }
  const double scale = 1.0 / static_cast<double>(batch.size());
  axpy_params(policy, total, -learning_rate * scale);
  return loss * scale;
}

}  // namespace refgeo
