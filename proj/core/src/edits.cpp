#include "refgeo/edits.hpp"

#include <cmath>

#include "refgeo/errors.hpp"
#include "refgeo/rng.hpp"
#include "refgeo/threading.hpp"

namespace refgeo {

namespace {

// Removes the r-component from a strided vector. Stops, without touching the
// data, once |dot| <= 1e-13 * ||vec||: the rule depends only on the current
// values, so re-applying the edit is a bitwise no-op, and the residual dot
// stays orders of magnitude under the 1e-10 contract.
void project_out(double* vec, size_t n, size_t stride, std::span<const double> r) {
  for (int pass = 0; pass < 64; ++pass) {
    double a = 0.0;
    double norm_sq = 0.0;
    for (size_t i = 0; i < n; ++i) {
      a += vec[i * stride] * r[i];
      norm_sq += vec[i * stride] * vec[i * stride];
    }
    if (std::abs(a) <= 1e-13 * std::sqrt(norm_sq)) return;
    for (size_t i = 0; i < n; ++i) vec[i * stride] -= a * r[i];
  }
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

ModelParams abliterate(const ModelParams& params, const RefusalDirection& dir,
                       const WriterSelection& sel) {
  const int d = params.config.d_model;
  if (static_cast<int>(dir.vector.size()) != d)
    fail(ErrorKind::shape, "direction dimension does not match d_model");
  if (!sel.include_token_embedding && !sel.include_attention_output &&
      !sel.include_mlp_down && !sel.include_position_embedding)
    fail(ErrorKind::domain, "writer selection is empty");
  int lo = sel.layer_lo;
  int hi = sel.layer_hi < 0 ? params.config.n_layers - 1 : sel.layer_hi;
  if (lo < 0 || hi >= params.config.n_layers || lo > hi)
    fail(ErrorKind::domain, "writer layer range out of bounds");

  std::span<const double> r(dir.vector);
  ModelParams out = params;

  if (sel.include_token_embedding) {
    // rows of [vocab, d] are residual vectors
    Tensor& t = out.token_embedding;
    for (size_t row = 0; row < t.dims[0]; ++row)
      project_out(t.row(row), static_cast<size_t>(d), 1, r);
  }
  if (sel.include_position_embedding) {
    Tensor& t = out.position_embedding;
    for (size_t row = 0; row < t.dims[0]; ++row)
      project_out(t.row(row), static_cast<size_t>(d), 1, r);
  }
  for (int l = lo; l <= hi; ++l) {
    LayerParams& lp = out.layers[static_cast<size_t>(l)];
    if (sel.include_attention_output) {
      // columns of [d, d] write into the residual stream
      Tensor& t = lp.attn_wo;
      for (size_t col = 0; col < t.dims[1]; ++col)
        project_out(t.data.data() + col, static_cast<size_t>(d), t.dims[1], r);
    }
    if (sel.include_mlp_down) {
      Tensor& t = lp.mlp_down;
      for (size_t col = 0; col < t.dims[1]; ++col)
        project_out(t.data.data() + col, static_cast<size_t>(d), t.dims[1], r);
    }
  }
  return out;
}

std::string patch_positions_name(PatchPositions p) {
  switch (p) {
    case PatchPositions::last_prompt_token: return "last_prompt_token";
    case PatchPositions::all_prompt_tokens: return "all_prompt_tokens";
    default: return "all_tokens";
  }
}

std::vector<double> patch_hidden(std::span<const double> h, double alpha_base,
                                 const RefusalDirection& dir, double lambda) {
  if (h.size() != dir.vector.size())
    fail(ErrorKind::shape, "hidden state dimension does not match direction");
  if (!std::isfinite(alpha_base) || !std::isfinite(lambda))
    fail(ErrorKind::numeric, "non-finite patch inputs");
  for (double v : h)
    if (!std::isfinite(v)) fail(ErrorKind::numeric, "non-finite hidden state");

  std::vector<double> out(h.begin(), h.end());
  double alpha_target = dot(h, dir.vector);
  double shift = lambda * (alpha_base - alpha_target);
  if (shift == 0.0) return out;
  for (size_t i = 0; i < out.size(); ++i) out[i] += shift * dir.vector[i];
  return out;
}

std::vector<PatchedRun> run_with_patch(const ModelParams& target, const ModelParams& base,
                                       const PatchConfig& cfg,
                                       std::span<const PromptRecord> prompts,
                                       const GenerationConfig& gen) {
  if (!target.config.same_shape(base.config))
    fail(ErrorKind::compatibility, "target and base models have different configurations");
  if (cfg.layer < 0 || cfg.layer > target.config.n_layers)
    fail(ErrorKind::domain, "patch layer out of range");
  if (!std::isfinite(cfg.lambda)) fail(ErrorKind::numeric, "non-finite lambda");
  if (static_cast<int>(cfg.direction.vector.size()) != target.config.d_model)
    fail(ErrorKind::shape, "patch direction dimension does not match d_model");

  std::vector<PatchedRun> runs(prompts.size());
  parallel_for(prompts.size(), [&](size_t pi) {
    const PromptRecord& prompt = prompts[pi];
    const int rb = prompt.tokens.role_boundary;
    const std::vector<double>& v = cfg.direction.vector;

    // alpha_base at prompt positions is fixed by causality; generated
    // positions (all_tokens mode) are refreshed from the base each step.
    std::vector<double> alpha_base;
    {
      ActivationTrace btr = capture_trace(base, prompt.tokens);
      for (int t = 0; t < prompt.tokens.length(); ++t)
        alpha_base.push_back(dot(btr.at(cfg.layer, t), v));
    }

    auto positions_pred = [&](int pos) {
      switch (cfg.positions) {
        case PatchPositions::last_prompt_token: return pos == rb - 1;
        case PatchPositions::all_prompt_tokens: return pos < rb;
        default: return true;
      }
    };
    ResidualHook hook;
    hook.layer = cfg.layer;
    hook.positions = positions_pred;
    hook.fn = [&](int pos, std::span<double> h) {
      double ab = alpha_base[static_cast<size_t>(pos)];
      double at = dot(h, v);
      double shift = cfg.lambda * (ab - at);
      if (shift == 0.0) return;
      for (size_t i = 0; i < h.size(); ++i) h[i] += shift * v[i];
    };

    TokenSequence seq = prompt.tokens;
    seq.role_boundary = prompt.tokens.length();
    CounterRng rng(prompt_seed(gen.seed, prompt.id), "sample");
    for (int step = 0; step < gen.max_new; ++step) {
      if (cfg.positions == PatchPositions::all_tokens) {
        ActivationTrace btr = capture_trace(base, seq);
        alpha_base.resize(static_cast<size_t>(seq.length()));
        for (int t = 0; t < seq.length(); ++t)
          alpha_base[static_cast<size_t>(t)] = dot(btr.at(cfg.layer, t), v);
      }
      ForwardResult fr = forward(target, seq, false, &hook);
      int tok = sample_from_logits(fr.row(seq.length() - 1), gen.temperature, rng);
      seq.tokens.push_back(tok);
      if (tok == kEndToken) break;
    }

    if (cfg.positions == PatchPositions::all_tokens) {
      ActivationTrace btr = capture_trace(base, seq);
      alpha_base.resize(static_cast<size_t>(seq.length()));
      for (int t = 0; t < seq.length(); ++t)
        alpha_base[static_cast<size_t>(t)] = dot(btr.at(cfg.layer, t), v);
    }
    ForwardResult final_pass = forward(target, seq, true, &hook);
    runs[pi] = PatchedRun{prompt.id, seq, std::move(*final_pass.trace)};
  });
  return runs;
}

SweepResult sweep_patch(const ModelParams& target, const ModelParams& base,
                        const RefusalDirection& dir, std::span<const int> layers,
                        std::span<const double> lambdas,
                        std::span<const PromptRecord> eval_prompts, const Scorer& scorer,
                        const GenerationConfig& gen, PatchPositions positions) {
  if (layers.empty() || lambdas.empty()) fail(ErrorKind::domain, "empty sweep grid");
  if (eval_prompts.empty()) fail(ErrorKind::domain, "empty sweep prompt set");

  SweepResult result;
  {
    std::vector<double> scores(eval_prompts.size());
    parallel_for(eval_prompts.size(), [&](size_t i) {
      SampleResult sr = sample(target, eval_prompts[i].tokens, gen.max_new, gen.temperature,
                               prompt_seed(gen.seed, eval_prompts[i].id));
      scores[i] = scorer(eval_prompts[i], sr.seq);
    });
    double s = 0.0;
    for (double v : scores) s += v;
    result.unpatched_score = s / static_cast<double>(eval_prompts.size());
  }

  bool have_best = false;
  for (int layer : layers) {
    for (double lambda : lambdas) {
      PatchConfig cfg;
      cfg.layer = layer;
      cfg.lambda = lambda;
      cfg.positions = positions;
      cfg.direction = dir;
      std::vector<PatchedRun> runs = run_with_patch(target, base, cfg, eval_prompts, gen);
      double s = 0.0;
      for (size_t i = 0; i < runs.size(); ++i) s += scorer(eval_prompts[i], runs[i].output);
      SweepCell cell;
      cell.layer = layer;
      cell.lambda = lambda;
      cell.score = s / static_cast<double>(runs.size());
      cell.delta_vs_unpatched = cell.score - result.unpatched_score;
      result.cells.push_back(cell);
      bool better = !have_best || cell.score > result.best.score ||
                    (cell.score == result.best.score &&
                     (std::abs(cell.lambda) < std::abs(result.best.lambda) ||
                      (std::abs(cell.lambda) == std::abs(result.best.lambda) &&
                       cell.layer < result.best.layer)));
      if (better) {
        result.best = cell;
        have_best = true;
      }
    }
  }
  return result;
}

ControlResult random_direction_control(const ModelParams& target, const ModelParams& base,
                                       std::span<const int> layers,
                                       std::span<const double> lambdas,
                                       std::span<const PromptRecord> eval_prompts,
                                       const Scorer& scorer, const GenerationConfig& gen,
                                       int n_controls, uint64_t seed, int direction_layer,
                                       PatchPositions positions) {
  if (n_controls < 1) fail(ErrorKind::domain, "n_controls must be >= 1");
  const int d = target.config.d_model;
  CounterRng rng(seed, "controls");
  ControlResult out;
  for (int k = 0; k < n_controls; ++k) {
    RefusalDirection ctrl;
    ctrl.layer = direction_layer;
    ctrl.source_model_id = "random_control_" + std::to_string(k);
    ctrl.pooling_rule = "none";
    double norm = 0.0;
    while (norm < 1e-12) {
      ctrl.vector.assign(static_cast<size_t>(d), 0.0);
      double s = 0.0;
      for (double& x : ctrl.vector) {
        x = rng.gaussian();
        s += x * x;
      }
      norm = std::sqrt(s);
    }
    for (double& x : ctrl.vector) x /= norm;
    SweepResult sw =
        sweep_patch(target, base, ctrl, layers, lambdas, eval_prompts, scorer, gen, positions);
    out.best_scores.push_back(sw.best.score);
    out.sweeps.push_back(std::move(sw));
  }
  return out;
}

}  // namespace refgeo
