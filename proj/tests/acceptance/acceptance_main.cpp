// Acceptance suite: one line per criterion, nonzero exit if any fails.
// Criteria 1-5 and 10 are algebraic contracts; 6-9 run the full seeded toy
// study end to end and check its qualitative shape.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "refgeo/checkpoint.hpp"
#include "refgeo/corpus.hpp"
#include "refgeo/directions.hpp"
#include "refgeo/edits.hpp"
#include "refgeo/io_util.hpp"
#include "refgeo/model.hpp"
#include "refgeo/pipeline.hpp"
#include "refgeo/probes.hpp"
#include "refgeo/rng.hpp"
#include "refgeo/routes.hpp"
#include "refgeo/similarity.hpp"
#include "refgeo/threading.hpp"

using namespace refgeo;
using nlohmann::json;

namespace {

struct Criterion {
  std::string name;
  bool pass = false;
  std::string detail;
};

std::vector<Criterion> g_results;

void record(const std::string& name, bool pass, const std::string& detail) {
  g_results.push_back({name, pass, detail});
  std::fprintf(stderr, "  ... %s: %s (%s)\n", name.c_str(), pass ? "ok" : "FAILED",
               detail.c_str());
}

double now_s() {
  using clock = std::chrono::steady_clock;
  return std::chrono::duration<double>(clock::now().time_since_epoch()).count();
}

std::string fmt(double v) { return format_double(v); }

ModelConfig gradcheck_config() {
  ModelConfig c;
  c.vocab_size = 12;
  c.d_model = 8;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_ff = 16;
  c.max_seq_len = 12;
  c.rng_seed = 1301;
  return c;
}

double fd_max_rel_error(ModelParams& params, const GradientSet& analytic,
                        const std::function<double()>& loss_fn) {
  const double step = 1e-4;
  double worst = 0.0;
  auto one = [&](Tensor& p, const Tensor& g) {
    for (size_t i = 0; i < p.data.size(); ++i) {
      double saved = p.data[i];
      p.data[i] = saved + step;
      double up = loss_fn();
      p.data[i] = saved - step;
      double down = loss_fn();
      p.data[i] = saved;
      double fd = (up - down) / (2.0 * step);
      double denom = std::max({std::abs(fd), std::abs(g.data[i]), 1e-8});
      worst = std::max(worst, std::abs(fd - g.data[i]) / denom);
    }
  };
  one(params.token_embedding, analytic.token_embedding);
  one(params.position_embedding, analytic.position_embedding);
  for (size_t l = 0; l < params.layers.size(); ++l) {
    one(params.layers[l].attn_wq, analytic.layers[l].attn_wq);
    one(params.layers[l].attn_wk, analytic.layers[l].attn_wk);
    one(params.layers[l].attn_wv, analytic.layers[l].attn_wv);
    one(params.layers[l].attn_wo, analytic.layers[l].attn_wo);
    one(params.layers[l].mlp_up, analytic.layers[l].mlp_up);
    one(params.layers[l].mlp_down, analytic.layers[l].mlp_down);
  }
  one(params.final_ln_gain, analytic.final_ln_gain);
  one(params.unembedding, analytic.unembedding);
  return worst;
}

void criterion_1_gradients() {
  double t0 = now_s();
  ModelParams p = init_params(gradcheck_config());
  TokenSequence seq;
  seq.tokens = {3, 7, 1, 4, 9, 2};
  seq.role_boundary = 2;
  std::vector<int> pos = {2, 3, 4, 5};
  GradientSet g_nll = backward(p, seq, pos);
  double err_nll = fd_max_rel_error(p, g_nll, [&] { return nll(p, seq, pos); });

  RolloutGroup group;
  group.prompt.id = "fd";
  TokenSequence prompt;
  prompt.tokens = {3, 7, 1};
  prompt.role_boundary = 3;
  std::vector<double> rewards = {1.0, 2.0, 4.5};
  for (int g = 0; g < 3; ++g) {
    SampleResult sr = sample(p, prompt, 4, 1.0, static_cast<uint64_t>(g) + 11);
    Rollout ro;
    ro.seq = sr.seq;
    ro.old_logprobs = sr.logprobs;
    ro.reward = rewards[static_cast<size_t>(g)];
    group.rollouts.push_back(ro);
  }
  std::vector<double> adv = group_advantages(rewards);
  for (size_t g = 0; g < adv.size(); ++g) group.rollouts[g].advantage = adv[g];
  // move the policy slightly off the sampling snapshot so ratios leave 1
  visit_tensors(p, [](const std::string&, Tensor& t) {
    for (size_t i = 0; i < t.data.size(); ++i)
      t.data[i] += 1e-3 * std::sin(static_cast<double>(i + 1));
  });
  GrpoLossResult gl = grpo_loss(p, group, 0.2);
  double err_grpo =
      fd_max_rel_error(p, gl.grads, [&] { return grpo_loss(p, group, 0.2).loss; });

  double elapsed = now_s() - t0;
  bool pass = err_nll < 1e-3 && err_grpo < 1e-3 && elapsed < 60.0;
  record("1. gradient correctness", pass,
         "nll max rel err " + fmt(err_nll) + ", grpo max rel err " + fmt(err_grpo) +
             ", " + fmt(elapsed) + " s");
}

void criterion_2_abliteration() {
  ModelConfig c;
  c.vocab_size = 64;
  c.d_model = 24;
  c.n_layers = 3;
  c.n_heads = 4;
  c.d_ff = 32;
  c.max_seq_len = 16;
  c.rng_seed = 77;
  ModelParams p = init_params(c);
  CounterRng rng(5, "dir");
  RefusalDirection r;
  r.layer = 2;
  double norm = 0.0;
  r.vector.resize(static_cast<size_t>(c.d_model));
  for (double& v : r.vector) {
    v = rng.gaussian();
    norm += v * v;
  }
  for (double& v : r.vector) v /= std::sqrt(norm);

  ModelParams edited = abliterate(p, r, WriterSelection{});
  double worst_dot = 0.0;
  auto dot_rows = [&](const Tensor& t) {
    for (size_t row = 0; row < t.dims[0]; ++row) {
      double s = 0.0;
      for (size_t i = 0; i < t.dims[1]; ++i) s += t.at(row, i) * r.vector[i];
      worst_dot = std::max(worst_dot, std::abs(s));
    }
  };
  auto dot_cols = [&](const Tensor& t) {
    for (size_t col = 0; col < t.dims[1]; ++col) {
      double s = 0.0;
      for (size_t i = 0; i < t.dims[0]; ++i) s += t.data[i * t.dims[1] + col] * r.vector[i];
      worst_dot = std::max(worst_dot, std::abs(s));
    }
  };
  dot_rows(edited.token_embedding);
  for (const auto& l : edited.layers) {
    dot_cols(l.attn_wo);
    dot_cols(l.mlp_down);
  }

  ModelParams twice = abliterate(edited, r, WriterSelection{});
  bool idempotent = true;
  bool norms_ok = true;
  visit_tensors(edited, [&](const std::string& name, Tensor& te) {
    visit_tensors(twice, [&](const std::string& name2, Tensor& tt) {
      if (name == name2 && te.data != tt.data) idempotent = false;
    });
    visit_tensors(p, [&](const std::string& name2, Tensor& tp) {
      if (name == name2 && te.frobenius_norm() > tp.frobenius_norm()) norms_ok = false;
    });
  });
  bool pass = worst_dot < 1e-10 && idempotent && norms_ok;
  record("2. abliteration algebra", pass,
         "max |r^T W'| " + fmt(worst_dot) + ", idempotent " +
             (idempotent ? "yes" : "no") + ", norms non-increasing " +
             (norms_ok ? "yes" : "no"));
}

void criterion_3_patch_exactness() {
  ModelConfig c;
  c.vocab_size = 64;
  c.d_model = 16;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_ff = 24;
  c.max_seq_len = 16;
  c.rng_seed = 31;
  ModelParams base = init_params(c);
  ModelConfig c2 = c;
  c2.rng_seed = 32;
  ModelParams target = init_params(c2);

  std::vector<PromptRecord> prompts;
  for (int i = 0; i < 4; ++i) {
    PromptRecord pr;
    pr.id = "p" + std::to_string(i);
    pr.tokens.tokens = {4, 40 + i, 41, 42 + i};
    pr.tokens.role_boundary = 4;
    prompts.push_back(pr);
  }
  CounterRng rng(5, "dir");
  RefusalDirection dir;
  dir.layer = 1;
  double norm = 0.0;
  dir.vector.resize(static_cast<size_t>(c.d_model));
  for (double& v : dir.vector) {
    v = rng.gaussian();
    norm += v * v;
  }
  for (double& v : dir.vector) v /= std::sqrt(norm);

  GenerationConfig gen;
  gen.max_new = 4;
  gen.temperature = 1.0;
  gen.seed = 9;

  // lambda = 0: tokens and traces bitwise equal to the unpatched run
  PatchConfig pc0;
  pc0.layer = 1;
  pc0.lambda = 0.0;
  pc0.direction = dir;
  auto runs0 = run_with_patch(target, base, pc0, prompts, gen);
  bool zero_ok = true;
  for (size_t i = 0; i < prompts.size(); ++i) {
    SampleResult plain = sample(target, prompts[i].tokens, gen.max_new, gen.temperature,
                                prompt_seed(gen.seed, prompts[i].id));
    if (runs0[i].output.tokens != plain.seq.tokens) zero_ok = false;
    ActivationTrace tr = capture_trace(target, runs0[i].output);
    for (size_t l = 0; l < tr.layers.size(); ++l)
      if (tr.layers[l] != runs0[i].trace.layers[l]) zero_ok = false;
  }

  // lambda = 1: projection at the patched position equals the base alpha
  PatchConfig pc1 = pc0;
  pc1.lambda = 1.0;
  auto runs1 = run_with_patch(target, base, pc1, prompts, gen);
  double worst_alpha = 0.0;
  for (size_t i = 0; i < prompts.size(); ++i) {
    ActivationTrace bt = capture_trace(base, prompts[i].tokens);
    int pos = prompts[i].tokens.role_boundary - 1;
    double ab = projection_coefficient(bt.at(1, pos), dir);
    double ap = projection_coefficient(runs1[i].trace.at(1, pos), dir);
    worst_alpha = std::max(worst_alpha, std::abs(ap - ab));
  }

  // orthogonal component of patch_hidden unchanged to 1e-12
  CounterRng hr(3, "h");
  double worst_orth = 0.0;
  for (int rep = 0; rep < 20; ++rep) {
    std::vector<double> h(static_cast<size_t>(c.d_model));
    for (double& v : h) v = 2.0 * hr.gaussian();
    double ab = 3.0 * hr.gaussian();
    double lambda = 2.0 * hr.uniform();
    std::vector<double> out = patch_hidden(h, ab, dir, lambda);
    double a_in = projection_coefficient(h, dir);
    double a_out = projection_coefficient(out, dir);
    for (size_t i = 0; i < h.size(); ++i) {
      double before = h[i] - a_in * dir.vector[i];
      double after = out[i] - a_out * dir.vector[i];
      worst_orth = std::max(worst_orth, std::abs(after - before));
    }
  }
  bool pass = zero_ok && worst_alpha < 1e-9 && worst_orth < 1e-12;
  record("3. patch exactness", pass,
         std::string("lambda-0 bitwise ") + (zero_ok ? "yes" : "no") +
             ", |alpha - alpha_base| " + fmt(worst_alpha) + ", orthogonal drift " +
             fmt(worst_orth));
}

void criterion_4_similarity() {
  auto matrix_of = [](int n, int d, uint64_t seed) {
    ActivationMatrix m;
    m.n = n;
    m.d = d;
    m.model_id = "m";
    m.prompt_set_id = "t";
    m.data.resize(static_cast<size_t>(n) * d);
    CounterRng rng(seed, "mat");
    for (double& v : m.data) v = rng.gaussian();
    for (int i = 0; i < n; ++i) m.prompt_ids.push_back("p" + std::to_string(i));
    return m;
  };
  // Gram-form oracle with double-centered Gram matrices
  auto gram_cka = [](const ActivationMatrix& x, const ActivationMatrix& y) {
    const int n = x.n;
    auto gram = [n](const ActivationMatrix& m) {
      std::vector<double> k(static_cast<size_t>(n) * n, 0.0);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
          double s = 0.0;
          for (int c = 0; c < m.d; ++c) s += m.row(i)[c] * m.row(j)[c];
          k[static_cast<size_t>(i) * n + j] = s;
        }
      return k;
    };
    auto center = [n](std::vector<double> k) {
      std::vector<double> rm(static_cast<size_t>(n), 0.0);
      double total = 0.0;
      for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j)
          rm[static_cast<size_t>(i)] += k[static_cast<size_t>(i) * n + j];
        rm[static_cast<size_t>(i)] /= n;
        total += rm[static_cast<size_t>(i)];
      }
      total /= n;
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
          k[static_cast<size_t>(i) * n + j] +=
              total - rm[static_cast<size_t>(i)] - rm[static_cast<size_t>(j)];
      return k;
    };
    auto dot = [](const std::vector<double>& a, const std::vector<double>& b) {
      double s = 0.0;
      for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
      return s;
    };
    auto kc = center(gram(x)), lc = center(gram(y));
    return dot(kc, lc) / std::sqrt(dot(kc, kc) * dot(lc, lc));
  };

  ActivationMatrix x = matrix_of(8, 5, 1);
  double self_err = std::abs(linear_cka(x, x) - 1.0);

  // orthogonal right-transform (Gram-Schmidt) and isotropic scaling
  ActivationMatrix y = matrix_of(8, 5, 2);
  double ref = linear_cka(x, y);
  CounterRng rng(7, "q");
  const int d = 5;
  std::vector<std::vector<double>> q(d, std::vector<double>(d));
  for (int i = 0; i < d; ++i) {
    for (int j = 0; j < d; ++j)
      q[static_cast<size_t>(i)][static_cast<size_t>(j)] = rng.gaussian();
    for (int k = 0; k < i; ++k) {
      double proj = 0.0;
      for (int j = 0; j < d; ++j)
        proj += q[static_cast<size_t>(i)][static_cast<size_t>(j)] *
                q[static_cast<size_t>(k)][static_cast<size_t>(j)];
      for (int j = 0; j < d; ++j)
        q[static_cast<size_t>(i)][static_cast<size_t>(j)] -=
            proj * q[static_cast<size_t>(k)][static_cast<size_t>(j)];
    }
    double nn = 0.0;
    for (int j = 0; j < d; ++j)
      nn += q[static_cast<size_t>(i)][static_cast<size_t>(j)] *
            q[static_cast<size_t>(i)][static_cast<size_t>(j)];
    nn = std::sqrt(nn);
    for (int j = 0; j < d; ++j) q[static_cast<size_t>(i)][static_cast<size_t>(j)] /= nn;
  }
  ActivationMatrix yq = y;
  for (int i = 0; i < y.n; ++i)
    for (int j = 0; j < d; ++j) {
      double s = 0.0;
      for (int k = 0; k < d; ++k)
        s += y.row(i)[k] * q[static_cast<size_t>(k)][static_cast<size_t>(j)];
      yq.data[static_cast<size_t>(i) * d + j] = s;
    }
  ActivationMatrix ys = y;
  for (double& v : ys.data) v *= 3.0;
  double inv_err = std::max(std::abs(linear_cka(x, yq) - ref),
                            std::abs(linear_cka(x, ys) - ref));

  double gram_err = 0.0;
  for (uint64_t s = 0; s < 20; ++s) {
    ActivationMatrix a = matrix_of(6, 5, 100 + s);
    ActivationMatrix b = matrix_of(6, 4, 200 + s);
    gram_err = std::max(gram_err, std::abs(linear_cka(a, b) - gram_cka(a, b)));
  }

  double rsa_self = rsa(x, x);
  const int n4 = 4;
  std::vector<double> d1(n4 * n4, 0.0), d2(n4 * n4, 0.0);
  double vals[6] = {0.1, 0.2, 0.3, 0.4, 0.5, 0.6};
  int idx = 0;
  for (int i = 0; i < n4; ++i)
    for (int j = i + 1; j < n4; ++j) {
      d1[static_cast<size_t>(i) * n4 + j] = d1[static_cast<size_t>(j) * n4 + i] = vals[idx];
      d2[static_cast<size_t>(i) * n4 + j] = d2[static_cast<size_t>(j) * n4 + i] =
          vals[5 - idx];
      ++idx;
    }
  double rsa_rev = rsa_from_rdms(d1, d2, n4);

  bool pass = self_err < 1e-9 && inv_err < 1e-6 && gram_err < 1e-9 && rsa_self == 1.0 &&
              rsa_rev == -1.0;
  record("4. similarity suite", pass,
         "cka self err " + fmt(self_err) + ", invariance err " + fmt(inv_err) +
             ", gram-form err " + fmt(gram_err) + ", rsa self " + fmt(rsa_self) +
             ", reversed " + fmt(rsa_rev));
}

void criterion_5_advantages() {
  CounterRng rng(2024, "groups");
  double worst_mean = 0.0, worst_std = 0.0;
  int n_degenerate = 0;
  bool zeros_ok = true;
  for (int k = 0; k < 1000; ++k) {
    size_t g = 2 + rng.uniform_u64(7);
    std::vector<double> rewards(g);
    bool constant_group = rng.uniform() < 0.2;
    double c0 = 1.0 + 4.0 * rng.uniform();
    for (double& r : rewards) r = constant_group ? c0 : 1.0 + 4.0 * rng.uniform();
    std::vector<double> adv = group_advantages(rewards);
    bool degenerate = true;
    for (double a : adv)
      if (a != 0.0) degenerate = false;
    if (degenerate) {
      ++n_degenerate;
      if (constant_group) {
        for (double a : adv)
          if (a != 0.0) zeros_ok = false;
      }
      continue;
    }
    double mean = 0.0;
    for (double a : adv) mean += a;
    mean /= static_cast<double>(g);
    double var = 0.0;
    for (double a : adv) var += (a - mean) * (a - mean);
    var /= static_cast<double>(g);
    worst_mean = std::max(worst_mean, std::abs(mean));
    worst_std = std::max(worst_std, std::abs(std::sqrt(var) - 1.0));
  }

  // a step whose rewards are all constant leaves parameters bitwise intact
  ModelConfig c;
  c.vocab_size = 64;
  c.d_model = 16;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_ff = 24;
  c.max_seq_len = 20;
  c.rng_seed = 88;
  ModelParams p = init_params(c);
  ModelParams before = p;
  std::vector<PromptRecord> prompts(2);
  prompts[0].id = "a";
  prompts[0].tokens.tokens = {4, 40};
  prompts[0].tokens.role_boundary = 2;
  prompts[1].id = "b";
  prompts[1].tokens.tokens = {5, 41};
  prompts[1].tokens.role_boundary = 2;
  RewardOracle flat;
  flat.comply_weight = 0.0;
  flat.refuse_weight = 0.0;
  RlvrStepConfig rc;
  rc.group_size = 4;
  rc.learning_rate = 0.5;
  rc.max_new = 4;
  rc.seed = 3;
  StepReport rep = rlvr_step(p, prompts, flat, rc);
  bool noop_bitwise = rep.noop;
  visit_tensors(p, [&](const std::string& name, Tensor& ta) {
    visit_tensors(before, [&](const std::string& name2, Tensor& tb) {
      if (name == name2 && ta.data != tb.data) noop_bitwise = false;
    });
  });

  bool pass = worst_mean < 1e-9 && worst_std < 1e-9 && zeros_ok && noop_bitwise &&
              n_degenerate > 0;
  record("5. grpo advantage contract", pass,
         "1000 groups (" + std::to_string(n_degenerate) + " degenerate), worst |mean| " +
             fmt(worst_mean) + ", worst |popstd-1| " + fmt(worst_std) +
             ", constant-step bitwise no-op " + (noop_bitwise ? "yes" : "no"));
}

void criterion_10_probes(const std::string& template_dir) {
  PromptRecord pr;
  pr.id = "h0";
  pr.tokens.tokens = {4, 40, 41, 42};
  pr.tokens.role_boundary = 4;
  ProbeItem item = make_audit_item(AuditQuestion::refusal_strength, pr);
  const int V = 64;

  std::vector<double> row(V, -1000.0);
  row[static_cast<size_t>(tok::label_token(9))] = 0.0;
  double ceiling = score_mc_from_logits(row, item, "p").expected;

  std::vector<double> row_u(V, -1000.0);
  for (int i = 0; i < 10; ++i) row_u[static_cast<size_t>(tok::label_token(i))] = 2.0;
  double uniform = score_mc_from_logits(row_u, item, "p").expected;

  std::vector<double> row_m(V, -1000.0);
  row_m[static_cast<size_t>(tok::label_token(1))] = 1.0;
  row_m[static_cast<size_t>(tok::label_token(3))] = 1.0;
  double mixed = score_mc_from_logits(row_m, item, "p").expected;

  auto golden = [&](const std::string& name) {
    return read_text_file(template_dir + "/" + name);
  };
  bool templates_ok =
      std::string(policy_judgment_template()) == golden("policy_judgment.txt") &&
      std::string(global_self_description_template()) ==
          golden("global_self_description.txt") &&
      std::string(safety_reflection_template()) == golden("safety_reflection.txt");

  bool pass = std::abs(ceiling - 10.0) < 1e-12 && std::abs(uniform - 5.5) < 1e-12 &&
              std::abs(mixed - 3.0) < 1e-12 && templates_ok;
  record("10. probe contract", pass,
         "ceiling " + fmt(ceiling) + ", uniform " + fmt(uniform) + ", mixed " +
             fmt(mixed) + ", templates byte-match " + (templates_ok ? "yes" : "no"));
}

constexpr uint64_t kStudySeed = 3;

struct StudyArtifacts {
  std::string dir;
  std::string corpus_dir;
  json summaries;
};

json run_and_load(const ExperimentConfig& cfg) {
  PipelineResult res = run_pipeline(cfg);
  json j = json::parse(res.summary_json);
  if (j.at("status") != "ok")
    throw std::runtime_error("pipeline " + cfg.kind + " failed: " +
                             j.value("error", std::string("unknown")));
  return j;
}

ExperimentConfig study_config(const StudyArtifacts& a, const std::string& kind) {
  ExperimentConfig cfg;
  cfg.kind = kind;
  cfg.seed = kStudySeed;
  cfg.out_dir = a.dir;
  cfg.corpus_dir = a.corpus_dir;
  cfg.threads = 4;
  return cfg;
}

void criterion_6_routes(StudyArtifacts& a) {
  double t0 = now_s();
  ToyCorpus corpus = make_toy_corpus(kStudySeed, ToyCorpusSizes{});
  write_toy_corpus(corpus, a.corpus_dir);

  json base = run_and_load(study_config(a, "train_base"));
  a.summaries["train_base"] = base;

  ExperimentConfig sft = study_config(a, "jailbreak_sft");
  sft.models["base"] = a.dir + "/base.tlm";
  a.summaries["jailbreak_sft"] = run_and_load(sft);

  ExperimentConfig rlvr = study_config(a, "jailbreak_rlvr");
  rlvr.models["base"] = a.dir + "/base.tlm";
  a.summaries["jailbreak_rlvr"] = run_and_load(rlvr);

  ExperimentConfig abl = study_config(a, "abliterate");
  abl.models["base"] = a.dir + "/base.tlm";
  a.summaries["abliterate"] = run_and_load(abl);

  double elapsed = now_s() - t0;
  double base_h = a.summaries["train_base"]["result"]["eval"]["harmful_compliance"];
  double sft_h = a.summaries["jailbreak_sft"]["result"]["eval"]["harmful_compliance"];
  double rlvr_h = a.summaries["jailbreak_rlvr"]["result"]["eval"]["harmful_compliance"];
  double abl_h = a.summaries["abliterate"]["result"]["eval"]["harmful_compliance"];
  bool pass =
      base_h < 2.0 && sft_h > 4.0 && rlvr_h > 4.0 && abl_h > 4.0 && elapsed < 600.0;
  record("6. end-to-end route replication", pass,
         "held-out harmful compliance: base " + fmt(base_h) + ", sft " + fmt(sft_h) +
             ", rlvr " + fmt(rlvr_h) + ", abl " + fmt(abl_h) + ", " + fmt(elapsed) + " s");
}

void criterion_7_repair(StudyArtifacts& a) {
  ExperimentConfig cfg = study_config(a, "patch_repair");
  cfg.models["base"] = a.dir + "/base.tlm";
  cfg.models["abl"] = a.dir + "/abl.tlm";
  cfg.models["sft"] = a.dir + "/sft.tlm";
  cfg.models["rlvr"] = a.dir + "/rlvr.tlm";
  cfg.direction_path = a.dir + "/direction.json";
  json j = run_and_load(cfg);
  a.summaries["patch_repair"] = j;
  const json& r = j["result"];

  double abl_best = r["abl"]["best_score"];
  double abl_unpatched = r["abl"]["unpatched_score"];
  double abl_ctrl = r["abl"]["control_mean_best"];
  double abl_recovery = r["abl"]["best_delta"];
  double sft_recovery = r["sft"]["best_delta"];
  bool controls_reported = r["abl"].contains("control_mean_best") &&
                           r["sft"].contains("control_mean_best") &&
                           r["rlvr"].contains("control_mean_best") &&
                           r["abl"]["n_controls"].get<int>() >= 8;
  bool pass = abl_best > abl_unpatched && abl_best > abl_ctrl &&
              sft_recovery < abl_recovery && controls_reported;
  record("7. repair taxonomy", pass,
         "abl best " + fmt(abl_best) + " vs unpatched " + fmt(abl_unpatched) +
             " and control mean " + fmt(abl_ctrl) + "; recovery sft " +
             fmt(sft_recovery) + " < abl " + fmt(abl_recovery) +
             "; controls on all routes " + (controls_reported ? "yes" : "no"));
}

void criterion_8_reflection(StudyArtifacts& a) {
  ExperimentConfig cfg = study_config(a, "reflection");
  cfg.models["base"] = a.dir + "/base.tlm";
  cfg.models["sft"] = a.dir + "/sft.tlm";
  cfg.models["rlvr"] = a.dir + "/rlvr.tlm";
  cfg.models["abl"] = a.dir + "/abl.tlm";
  json j = run_and_load(cfg);
  a.summaries["reflection"] = j;
  double baseline = j["result"]["rlvr"]["baseline_score"];
  double reflection = j["result"]["rlvr"]["reflection_score"];
  bool pass = reflection < baseline;
  record("8. reflection direction", pass,
         "rlvr baseline " + fmt(baseline) + " -> reflection " + fmt(reflection));
}

void criterion_9_transfer(StudyArtifacts& a) {
  ExperimentConfig cfg = study_config(a, "category_transfer");
  cfg.models["base"] = a.dir + "/base.tlm";
  json j = run_and_load(cfg);
  a.summaries["category_transfer"] = j;
  int n_models = j["result"]["n_models"];
  int n_eval = j["result"]["n_eval_categories"];
  int majority = j["result"]["n_on_ge_off"];

  // remaining analysis pipelines so the report bundle has every table
  ExperimentConfig audit = study_config(a, "self_audit");
  audit.models["base"] = a.dir + "/base.tlm";
  audit.models["sft"] = a.dir + "/sft.tlm";
  audit.models["rlvr"] = a.dir + "/rlvr.tlm";
  audit.models["abl"] = a.dir + "/abl.tlm";
  a.summaries["self_audit"] = run_and_load(audit);

  ExperimentConfig sim = study_config(a, "similarity");
  sim.models = audit.models;
  a.summaries["similarity"] = run_and_load(sim);

  std::string bundle = a.dir + "/report";
  emit_report(a.dir, bundle);
  bool bundle_ok = file_exists(bundle + "/category_transfer.csv") &&
                   file_exists(bundle + "/harmfulness_bars.csv") &&
                   file_exists(bundle + "/patch_sweeps.csv");
  int grid_rows = 0;
  for (const auto& line : read_lines(bundle + "/category_transfer.csv")) {
    if (!line.empty() && line[0] != '#' &&
        line.find("model_category") == std::string::npos)
      ++grid_rows;
  }
  bool pass = n_models == 6 && n_eval == 16 && grid_rows == 96 &&
              majority * 2 > n_models && bundle_ok;
  record("9. category transfer structure", pass,
         std::to_string(n_models) + "x" + std::to_string(n_eval) + " grid (" +
             std::to_string(grid_rows) + " rows), on>=off for " +
             std::to_string(majority) + "/" + std::to_string(n_models) +
             ", report bundle " + (bundle_ok ? "complete" : "incomplete"));
}

// Per-operation derived examples that need the trained study; reported as
// extra lines after the ten criteria.
void toy_study_examples(StudyArtifacts& a) {
  // retained projection: the abliterated model keeps almost none of the
  // base refusal projection
  double abl_retained = a.summaries["patch_repair"]["result"]["abl"]["retained_projection"];
  record("example: abliterated retained projection", std::abs(abl_retained) < 0.1,
         "|" + fmt(abl_retained) + "| < 0.1");

  // rlvr training increases the mean oracle reward from the first step on
  std::vector<std::string> log_lines = read_lines(a.dir + "/rlvr_log.jsonl");
  double first_reward = json::parse(log_lines.front())["mean_reward"];
  double last_reward = json::parse(log_lines.back())["mean_reward"];
  record("example: rlvr reward increases", last_reward > first_reward,
         fmt(first_reward) + " -> " + fmt(last_reward) + " over " +
             std::to_string(log_lines.size()) + " steps");

  // self-audit collapses most for sft, and the rlvr model keeps judging its
  // own compliant behavior as policy-violating (the dissociation)
  const json& audit = a.summaries["self_audit"]["result"];
  bool audit_order = true;
  for (const char* q : {"policy_violation", "refusal_strength", "actionable_harm"}) {
    if (audit["base"][q].get<double>() < audit["sft"][q].get<double>()) audit_order = false;
  }
  double rlvr_policy = audit["rlvr"]["policy_violation"];
  double rlvr_compliance =
      a.summaries["jailbreak_rlvr"]["result"]["eval"]["harmful_compliance"];
  record("example: self-audit ordering and dissociation",
         audit_order && rlvr_policy > 7.0 && rlvr_compliance > 4.0,
         "base >= sft on all three dimensions " + std::string(audit_order ? "yes" : "no") +
             "; rlvr judges policy violation " + fmt(rlvr_policy) +
             " while complying at " + fmt(rlvr_compliance));

  // the aligned base stays near the refusal floor under both conditions
  const json& refl = a.summaries["reflection"]["result"]["base"];
  double b0 = refl["baseline_score"], b1 = refl["reflection_score"];
  record("example: base reflection stays at floor", b0 < 2.0 && b1 < 2.0,
         "baseline " + fmt(b0) + ", reflection " + fmt(b1));

  // category-specific rlvr models cluster more tightly with one another
  // than with the base model
  ModelParams base = load_checkpoint(a.dir + "/base.tlm");
  std::vector<ModelParams> cats;
  cats.reserve(6);
  std::vector<NamedModel> models;
  models.push_back({"base", &base});
  for (int c = 0; c < 6; ++c) {
    char name[16];
    std::snprintf(name, sizeof(name), "cat%02d", c);
    cats.push_back(load_checkpoint(a.dir + "/transfer/rlvr_" + name + ".tlm"));
    models.push_back({name, &cats.back()});
  }
  ToyCorpus corpus = load_toy_corpus(a.corpus_dir);
  std::map<std::string, std::vector<PromptRecord>> slices;
  slices["harmful_pooled"] = corpus.harmful_eval;
  auto mats = category_matrix(models, slices, LayerAgg::mean_over_layers, -1,
                              PoolingRule::last_prompt_token);
  const auto& pm = mats.at("harmful_pooled");
  const int m = static_cast<int>(models.size());
  double within = 0.0, to_base = 0.0;
  int nw = 0, nb = 0;
  for (int x = 1; x < m; ++x) {
    to_base += pm.cka[static_cast<size_t>(x) * m];
    ++nb;
    for (int y = x + 1; y < m; ++y) {
      within += pm.cka[static_cast<size_t>(x) * m + y];
      ++nw;
    }
  }
  within /= nw;
  to_base /= nb;
  record("example: category models form a cluster", within > to_base,
         "within-cluster cka " + fmt(within) + " > to-base " + fmt(to_base));
}

}  // namespace

int main() {
  set_threads(4);
  std::string work =
      (std::filesystem::temp_directory_path() / "refgeo_acceptance").string();
  std::filesystem::remove_all(work);
  std::filesystem::create_directories(work);

  StudyArtifacts study;
  study.dir = work;
  study.corpus_dir = work + "/corpus";

  criterion_1_gradients();
  criterion_2_abliteration();
  criterion_3_patch_exactness();
  criterion_4_similarity();
  criterion_5_advantages();
  bool study_ok = false;
  try {
    criterion_6_routes(study);
    criterion_7_repair(study);
    criterion_8_reflection(study);
    criterion_9_transfer(study);
    study_ok = true;
  } catch (const std::exception& e) {
    record("6-9. toy study", false, std::string("pipeline failure: ") + e.what());
  }
  criterion_10_probes(REFGEO_TEMPLATE_DIR);
  if (study_ok) {
    try {
      toy_study_examples(study);
    } catch (const std::exception& e) {
      record("examples", false, std::string("failure: ") + e.what());
    }
  }

  std::printf("\nacceptance criteria:\n");
  int failures = 0;
  for (const auto& c : g_results) {
    std::printf("[%s] %s - %s\n", c.pass ? "PASS" : "FAIL", c.name.c_str(),
                c.detail.c_str());
    if (!c.pass) ++failures;
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(g_results.size()) - failures,
              g_results.size());
  return failures == 0 ? 0 : 1;
}
